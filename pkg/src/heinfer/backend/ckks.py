"""Leveled, batched fixed-point simulation of CKKS.

Values live in a slot vector of N/2 entries stored as integers on the
``2**-scale_bits`` grid.  Every multiplication consumes one level and is
followed by rounding back onto the grid, which stands in for rescaling noise.
No cryptography is performed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import BackendError, CapacityError, DepthError, ShapeError
from .base import Backend

_MAX_ABS_FIXED = 2.0**62


@dataclass(frozen=True, eq=False)
class CtTensorCkks:
    slots: np.ndarray  # int64 fixed-point, length N/2
    scale_bits: int
    level: int
    shape: tuple[int, ...]
    key_id: bytes

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    def values(self) -> np.ndarray:
        return self.slots[: self.element_count].astype(np.float64) / 2.0**self.scale_bits


class CkksBackend(Backend):
    name = "ckks"

    def __init__(self, key):
        super().__init__(key)
        p = self.params.ckks
        if p is None:
            raise BackendError("key parameters are not CKKS parameters")
        self.scale_bits = p.scale_bits
        self.n_slots = p.slots
        self.max_level = p.levels

    def _to_fixed(self, v: np.ndarray) -> np.ndarray:
        m = np.rint(np.ldexp(v, self.scale_bits))
        if not np.all(np.isfinite(m)) or np.any(np.abs(m) >= _MAX_ABS_FIXED):
            raise CapacityError("value magnitude overflows the fixed-point encoding")
        return m.astype(np.int64)

    def encode(self, p) -> np.ndarray:
        """Plaintext as it would be encoded at the working scale."""
        return np.ldexp(self._to_fixed(np.asarray(p, dtype=np.float64)).astype(np.float64), -self.scale_bits)

    def _make(self, values: np.ndarray, level: int, shape) -> CtTensorCkks:
        shape = tuple(int(d) for d in shape)
        n = math.prod(shape)
        if n > self.n_slots:
            raise CapacityError(f"tensor of {n} elements exceeds {self.n_slots} slots")
        slots = np.zeros(self.n_slots, dtype=np.int64)
        slots[:n] = self._to_fixed(np.asarray(values, dtype=np.float64).reshape(-1))
        slots.setflags(write=False)
        return CtTensorCkks(slots, self.scale_bits, level, shape, self.key_id)

    def _need_level(self, *cts):
        for ct in cts:
            if ct.level < 1:
                raise DepthError("no multiplicative level left")

    def encrypt(self, x) -> CtTensorCkks:
        self._secret()
        x = np.asarray(x, dtype=np.float64)
        return self._make(x, self.max_level, x.shape)

    def decrypt(self, ct: CtTensorCkks) -> np.ndarray:
        self._secret()
        self._check(ct)
        return ct.values().reshape(ct.shape)

    def add_ct(self, a, b):
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"add of shapes {a.shape} and {b.shape}")
        slots = a.slots + b.slots
        slots.setflags(write=False)
        return CtTensorCkks(slots, self.scale_bits, min(a.level, b.level), a.shape, self.key_id)

    def add_plain(self, ct, p):
        self._check(ct)
        return self._make(ct.values() + self.encode(self._plain(p, ct.shape)), ct.level, ct.shape)

    def mul_plain(self, ct, p):
        self._check(ct)
        self._need_level(ct)
        self.counters.add(mults=1)
        return self._make(ct.values() * self.encode(self._plain(p, ct.shape)), ct.level - 1, ct.shape)

    def mul_ct(self, a, b):
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"mul of shapes {a.shape} and {b.shape}")
        self._need_level(a, b)
        self.counters.add(mults=1)
        return self._make(a.values() * b.values(), min(a.level, b.level) - 1, a.shape)

    def square(self, ct):
        return self.mul_ct(ct, ct)

    def linear_map(self, ct, W, b=None, out_shape=None, out_interval=None):
        """``W @ x + b`` with a plaintext matrix; one level.  ``out_interval`` is ignored."""
        self._check(ct)
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] != ct.element_count:
            raise ShapeError(f"matrix {W.shape} does not apply to {ct.element_count} elements")
        self._need_level(ct)
        self.counters.add(mults=1)
        y = self.encode(W) @ ct.values()
        if b is not None:
            y = y + self.encode(np.broadcast_to(np.asarray(b, dtype=np.float64), y.shape))
        shape = out_shape if out_shape is not None else (W.shape[0],)
        if math.prod(shape) != W.shape[0]:
            raise ShapeError(f"output shape {shape} does not hold {W.shape[0]} rows")
        return self._make(y, ct.level - 1, shape)

    def reshape(self, ct, shape):
        self._check(ct)
        shape = tuple(int(d) for d in shape)
        if math.prod(shape) != ct.element_count:
            raise ShapeError(f"cannot reshape {ct.shape} to {shape}")
        return CtTensorCkks(ct.slots, ct.scale_bits, ct.level, shape, ct.key_id)
