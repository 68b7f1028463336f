"""Per-value quantized simulation of TFHE with deferred, folded bootstraps.

Each cell holds an integer message ``q`` in ``[0, 2**msg_bits)`` encoding the
real value ``lo + q * (hi - lo) / (2**msg_bits - 1)`` of its own interval.
Univariate functions are pushed on a per-tensor stack by :meth:`lut` and only
evaluated by :meth:`flush`, which composes the whole stack into one sampled
table and quantizes once.  No cryptography is performed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import BackendError, ShapeError
from .base import Backend
from .functions import UnivariateFn


@dataclass(frozen=True, eq=False)
class CtTensorTfhe:
    q: np.ndarray  # int64 messages
    lo: np.ndarray  # per-cell interval bounds
    hi: np.ndarray
    msg_bits: int
    shape: tuple[int, ...]
    key_id: bytes
    pending: tuple[UnivariateFn, ...] = ()

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    @property
    def levels(self) -> int:
        return 2**self.msg_bits - 1

    def dequantized(self) -> np.ndarray:
        return dequantize(self.q, self.lo, self.hi, self.msg_bits)


def dequantize(q, lo, hi, msg_bits):
    return lo + q * ((hi - lo) / (2**msg_bits - 1))


def quantize(v, lo, hi, msg_bits):
    """Nearest message for ``v`` (clipped into ``[lo, hi]``); returns (q, n_clipped)."""
    top = 2**msg_bits - 1
    v = np.asarray(v, dtype=np.float64)
    clipped = int(np.count_nonzero((v < lo) | (v > hi)))
    width = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(width > 0, (np.clip(v, lo, hi) - lo) / np.where(width > 0, width, 1.0), 0.0)
    return np.clip(np.rint(t * top), 0, top).astype(np.int64), clipped


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


class TfheBackend(Backend):
    name = "tfhe"

    def __init__(self, key):
        super().__init__(key)
        p = self.params.tfhe
        if p is None:
            raise BackendError("key parameters are not TFHE parameters")
        self.msg_bits = p.msg_bits
        self.input_interval = p.input_interval

    def _make(self, values, lo, hi, shape) -> CtTensorTfhe:
        n = math.prod(shape)
        lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (n,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (n,)).copy()
        q, clipped = quantize(np.asarray(values).reshape(-1), lo, hi, self.msg_bits)
        self.counters.add(clamped=clipped)
        _freeze(q, lo, hi)
        return CtTensorTfhe(q, lo, hi, self.msg_bits, tuple(shape), self.key_id)

    def encrypt(self, x) -> CtTensorTfhe:
        """Quantize onto the calibrated input interval; outliers are clamped and counted."""
        self._secret()
        x = np.asarray(x, dtype=np.float64)
        iv = self.input_interval
        return self._make(x, iv.lo, iv.hi, x.shape)

    def decrypt(self, ct) -> np.ndarray:
        self._secret()
        self._check(ct)
        ct = self.flush(ct)
        return ct.dequantized().reshape(ct.shape)

    def lut(self, ct, f: UnivariateFn) -> CtTensorTfhe:
        self._check(ct)
        return CtTensorTfhe(ct.q, ct.lo, ct.hi, ct.msg_bits, ct.shape, ct.key_id, ct.pending + (f,))

    def flush(self, ct, interval=None) -> CtTensorTfhe:
        """Apply every pending function as one table lookup per cell.

        The table samples the composed function at all ``2**msg_bits`` messages
        of the cell interval; its range, intersected with ``interval`` when
        given, becomes the new cell interval.
        """
        self._check(ct)
        if not ct.pending:
            return ct
        top = ct.levels
        pairs = np.stack([ct.lo, ct.hi], axis=1)
        uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        grid = dequantize(np.arange(top + 1)[None, :], uniq[:, :1], uniq[:, 1:], ct.msg_bits)
        tab = grid
        for f in ct.pending:
            tab = f(tab)
        out_lo = tab.min(axis=1)
        out_hi = tab.max(axis=1)
        if interval is not None:
            ilo, ihi = float(interval.lo), float(interval.hi)
            new_lo = np.maximum(out_lo, ilo)
            new_hi = np.minimum(out_hi, ihi)
            disjoint = new_lo > new_hi
            new_lo[disjoint] = ilo
            new_hi[disjoint] = ihi
            out_lo, out_hi = new_lo, new_hi
        values = tab[inverse, ct.q]
        lo, hi = out_lo[inverse], out_hi[inverse]
        q, clipped = quantize(values, lo, hi, ct.msg_bits)
        self.counters.add(flushes=1, quantizations=1, clamped=clipped)
        _freeze(q, lo, hi)
        return CtTensorTfhe(q, lo, hi, ct.msg_bits, ct.shape, ct.key_id)

    def add_ct(self, a, b):
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"add of shapes {a.shape} and {b.shape}")
        a, b = self.flush(a), self.flush(b)
        return self._make(a.dequantized() + b.dequantized(), a.lo + b.lo, a.hi + b.hi, a.shape)

    def add_plain(self, ct, p):
        self._check(ct)
        ct = self.flush(ct)
        p = self._plain(p, ct.shape)
        return self._make(ct.dequantized() + p, ct.lo + p, ct.hi + p, ct.shape)

    def mul_plain(self, ct, p):
        self._check(ct)
        ct = self.flush(ct)
        p = self._plain(p, ct.shape)
        a, b = ct.lo * p, ct.hi * p
        return self._make(ct.dequantized() * p, np.minimum(a, b), np.maximum(a, b), ct.shape)

    def mul_ct(self, a, b):
        raise BackendError(
            "ciphertext-ciphertext multiplication is not available in the TFHE backend; "
            "only plaintext-weight products are supported"
        )

    def linear_map(self, ct, W, b=None, out_shape=None, out_interval=None):
        """Per-output dot products with plaintext weights.

        The result is quantized onto ``out_interval`` (normally the calibrated
        interval of the output edge); without it, worst-case interval arithmetic
        is used.
        """
        self._check(ct)
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] != ct.element_count:
            raise ShapeError(f"matrix {W.shape} does not apply to {ct.element_count} elements")
        ct = self.flush(ct)
        y = W @ ct.dequantized()
        bias = np.zeros(W.shape[0]) if b is None else np.broadcast_to(np.asarray(b, dtype=np.float64), y.shape)
        y = y + bias
        if out_interval is None:
            lo = np.minimum(W * ct.lo, W * ct.hi).sum(axis=1) + bias
            hi = np.maximum(W * ct.lo, W * ct.hi).sum(axis=1) + bias
        else:
            lo, hi = out_interval.lo, out_interval.hi
        shape = tuple(out_shape) if out_shape is not None else (W.shape[0],)
        if math.prod(shape) != W.shape[0]:
            raise ShapeError(f"output shape {shape} does not hold {W.shape[0]} rows")
        return self._make(y, lo, hi, shape)

    def reshape(self, ct, shape):
        self._check(ct)
        shape = tuple(int(d) for d in shape)
        if math.prod(shape) != ct.element_count:
            raise ShapeError(f"cannot reshape {ct.shape} to {shape}")
        return CtTensorTfhe(ct.q, ct.lo, ct.hi, ct.msg_bits, shape, ct.key_id, ct.pending)
