"""Simulated homomorphic backends.

Both backends reproduce scheme *semantics* (slot capacity, level budget,
fixed-point rounding, message quantization, bootstrap folding) and none of the
cryptography.  Ciphertext files contain the plaintext values in a binary layout.
"""

from .base import Backend, EvalKey, OpCounters, SecretKey, keygen
from .ckks import CkksBackend, CtTensorCkks
from .functions import UnivariateFn
from .tfhe import CtTensorTfhe, TfheBackend
from .wire import dump_ciphertext, dump_key, load_ciphertext, load_key


def backend_for(key) -> Backend:
    if key.params.backend == "ckks":
        return CkksBackend(key)
    return TfheBackend(key)


__all__ = [
    "Backend",
    "CkksBackend",
    "CtTensorCkks",
    "CtTensorTfhe",
    "EvalKey",
    "OpCounters",
    "SecretKey",
    "TfheBackend",
    "UnivariateFn",
    "backend_for",
    "dump_ciphertext",
    "dump_key",
    "keygen",
    "load_ciphertext",
    "load_key",
]
