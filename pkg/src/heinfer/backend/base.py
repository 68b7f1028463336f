from __future__ import annotations

import abc
import hashlib
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from ..errors import KeyMismatchError, ShapeError
from ..params import KeyParams


@dataclass(frozen=True)
class SecretKey:
    params: KeyParams
    seed: bytes
    key_id: bytes


@dataclass(frozen=True)
class EvalKey:
    params: KeyParams
    key_id: bytes


def _seed_bytes(seed) -> bytes:
    if seed is None:
        return os.urandom(32)
    if isinstance(seed, (bytes, bytearray)):
        if len(seed) == 32:
            return bytes(seed)
        return hashlib.sha256(bytes(seed)).digest()
    if isinstance(seed, int):
        return hashlib.sha256(b"heinfer.seed" + str(seed).encode()).digest()
    raise TypeError(f"seed must be int, bytes or None, not {type(seed).__name__}")


def keygen(params: KeyParams, seed=None) -> tuple[SecretKey, EvalKey]:
    """Deterministic in ``seed``; OS entropy when it is None."""
    s = _seed_bytes(seed)
    key_id = hashlib.sha256(b"heinfer.key\0" + params.to_json().encode() + s).digest()[:16]
    return SecretKey(params, s, key_id), EvalKey(params, key_id)


@dataclass
class OpCounters:
    """Per-backend operation tally; safe to update from several threads."""

    flushes: int = 0
    quantizations: int = 0
    clamped: int = 0
    mults: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, **kw):
        with self._lock:
            for k, v in kw.items():
                setattr(self, k, getattr(self, k) + v)

    def snapshot(self) -> dict:
        with self._lock:
            return {"flushes": self.flushes, "quantizations": self.quantizations,
                    "clamped": self.clamped, "mults": self.mults}


class Backend(abc.ABC):
    """Scheme semantics bound to one key.

    Every operation returns a new ciphertext; ciphertexts carry the key id and
    are checked on each call.
    """

    name: str

    def __init__(self, key: SecretKey | EvalKey):
        self.key = key
        self.params = key.params
        self.key_id = key.key_id
        self.counters = OpCounters()

    def _check(self, *cts):
        for ct in cts:
            if ct.key_id != self.key_id:
                raise KeyMismatchError(
                    f"ciphertext key {ct.key_id.hex()} does not match key {self.key_id.hex()}"
                )

    def _secret(self) -> SecretKey:
        if not isinstance(self.key, SecretKey):
            raise KeyMismatchError("operation requires the secret key; got an evaluation key")
        return self.key

    @staticmethod
    def _plain(p, shape) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        try:
            return np.broadcast_to(p, shape).reshape(-1)
        except ValueError as exc:
            raise ShapeError(f"plaintext of shape {p.shape} does not broadcast to {shape}") from exc

    @abc.abstractmethod
    def encrypt(self, x): ...

    @abc.abstractmethod
    def decrypt(self, ct) -> np.ndarray: ...

    @abc.abstractmethod
    def add_ct(self, a, b): ...

    @abc.abstractmethod
    def add_plain(self, ct, p): ...

    @abc.abstractmethod
    def mul_plain(self, ct, p): ...

    @abc.abstractmethod
    def mul_ct(self, a, b): ...

    @abc.abstractmethod
    def linear_map(self, ct, W, b=None, out_shape=None, out_interval=None): ...

    @abc.abstractmethod
    def reshape(self, ct, shape): ...
