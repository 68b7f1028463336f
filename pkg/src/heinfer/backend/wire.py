"""Binary file formats for ciphertexts and keys.

All integers are little-endian.  Ciphertext::

    b"HECT" | u16 version | u8 backend | 16-byte key id | u8 ndim | u32 dims[ndim] | payload

    CKKS payload: u16 scale_bits | u16 level | u32 n_slots | i64 slots[n_slots]
    TFHE payload: u8 msg_bits | u32 n_cells | u16 q[n] | f64 lo[n] | f64 hi[n]

Keys::

    b"HESK" or b"HEEK" | u16 version | 16-byte key id | u32 len | keyparams JSON | (secret only) 32-byte seed

The payloads are not encrypted: the backends only simulate scheme semantics.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError
from ..params import KeyParams
from .base import EvalKey, SecretKey
from .ckks import CtTensorCkks
from .tfhe import CtTensorTfhe

CT_MAGIC = b"HECT"
SECRET_MAGIC = b"HESK"
EVAL_MAGIC = b"HEEK"
VERSION = 1
_BACKEND_TAG = {"ckks": 1, "tfhe": 2}


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("file is truncated")
        out = self.data[self.pos : self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self, dtype: str, n: int) -> np.ndarray:
        a = np.frombuffer(self.take(np.dtype(dtype).itemsize * n), dtype=dtype)
        return a.astype(np.dtype(dtype).newbyteorder("="))

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")


def dump_ciphertext(ct) -> bytes:
    if isinstance(ct, CtTensorCkks):
        tag = _BACKEND_TAG["ckks"]
    elif isinstance(ct, CtTensorTfhe):
        if ct.pending:
            raise FormatError("ciphertext has pending lookup tables; flush before serializing")
        tag = _BACKEND_TAG["tfhe"]
    else:
        raise TypeError(f"not a ciphertext: {type(ct).__name__}")
    head = CT_MAGIC + struct.pack("<HB", VERSION, tag) + ct.key_id
    head += struct.pack("<B", len(ct.shape)) + struct.pack(f"<{len(ct.shape)}I", *ct.shape)
    if tag == 1:
        body = struct.pack("<HHI", ct.scale_bits, ct.level, len(ct.slots))
        body += ct.slots.astype("<i8").tobytes()
    else:
        n = len(ct.q)
        body = struct.pack("<BI", ct.msg_bits, n)
        body += ct.q.astype("<u2").tobytes() + ct.lo.astype("<f8").tobytes() + ct.hi.astype("<f8").tobytes()
    return head + body


def load_ciphertext(data: bytes):
    r = _Reader(data)
    if r.take(4) != CT_MAGIC:
        raise FormatError("not a ciphertext file (bad magic)")
    version, tag = r.unpack("<HB")
    if version != VERSION:
        raise FormatError(f"unsupported ciphertext version {version}")
    key_id = r.take(16)
    (ndim,) = r.unpack("<B")
    shape = tuple(r.unpack(f"<{ndim}I"))
    if tag == _BACKEND_TAG["ckks"]:
        scale_bits, level, n = r.unpack("<HHI")
        slots = r.array("<i8", n)
        r.done()
        if int(np.prod(shape)) > n:
            raise FormatError("logical shape larger than slot count")
        slots.setflags(write=False)
        return CtTensorCkks(slots, scale_bits, level, shape, key_id)
    if tag == _BACKEND_TAG["tfhe"]:
        msg_bits, n = r.unpack("<BI")
        q = r.array("<u2", n).astype(np.int64)
        lo = r.array("<f8", n)
        hi = r.array("<f8", n)
        r.done()
        if int(np.prod(shape)) != n:
            raise FormatError("logical shape does not match cell count")
        if np.any(q >= 2**msg_bits) or np.any(lo > hi):
            raise FormatError("corrupt TFHE cells")
        for a in (q, lo, hi):
            a.setflags(write=False)
        return CtTensorTfhe(q, lo, hi, msg_bits, shape, key_id)
    raise FormatError(f"unknown backend tag {tag}")


def dump_key(key) -> bytes:
    params = key.params.to_json().encode()
    magic = SECRET_MAGIC if isinstance(key, SecretKey) else EVAL_MAGIC
    out = magic + struct.pack("<H", VERSION) + key.key_id + struct.pack("<I", len(params)) + params
    if isinstance(key, SecretKey):
        out += key.seed
    return out


def load_key(data: bytes):
    """Parse either key kind; callers check which one they got."""
    r = _Reader(data)
    magic = r.take(4)
    if magic not in (SECRET_MAGIC, EVAL_MAGIC):
        raise FormatError("not a key file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported key file version {version}")
    key_id = r.take(16)
    (n,) = r.unpack("<I")
    params = KeyParams.from_json(r.take(n))
    if magic == SECRET_MAGIC:
        seed = r.take(32)
        r.done()
        return SecretKey(params, seed, key_id)
    r.done()
    return EvalKey(params, key_id)
