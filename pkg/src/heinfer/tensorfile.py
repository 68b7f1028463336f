"""Zip container for raw float32 tensors (calibration sets, plaintext inputs/outputs).

Layout::

    manifest.json          {"format": "heinfer.tensors", "version": 1,
                            "tensors": [{"name", "shape", "dtype": "f32"}, ...],
                            "samples": N}
    sample_000000.f32      every tensor of sample 0, little-endian f32, manifest order
    sample_000001.f32      ...
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .fileio import atomic_write

FORMAT = "heinfer.tensors"
VERSION = 1
_MANIFEST_KEYS = {"format", "version", "tensors", "samples"}


def _blob_name(i: int) -> str:
    return f"sample_{i:06d}.f32"


@dataclass
class TensorSet:
    """An ordered list of samples; each sample maps tensor name to an array."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    samples: list[dict[str, np.ndarray]] = field(default_factory=list)

    @classmethod
    def single(cls, name: str, arrays) -> "TensorSet":
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        if not arrays:
            return cls((name,), ((),), [])
        shape = arrays[0].shape
        for a in arrays:
            if a.shape != shape:
                raise FormatError(f"sample shape {a.shape} != {shape}")
        return cls((name,), (shape,), [{name: a} for a in arrays])

    def __len__(self):
        return len(self.samples)

    def manifest(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "tensors": [
                {"name": n, "shape": list(s), "dtype": "f32"} for n, s in zip(self.names, self.shapes)
            ],
            "samples": len(self.samples),
        }

    def blob(self, i: int) -> bytes:
        s = self.samples[i]
        return b"".join(np.asarray(s[n], dtype="<f4").tobytes() for n in self.names)

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for i in range(len(self.samples)):
            h.update(self.blob(i))
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(self.manifest(), indent=1))
            for i in range(len(self.samples)):
                zf.writestr(_blob_name(i), self.blob(i))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TensorSet":
        try:
            zf = zipfile.ZipFile(io.BytesIO(data))
            man = json.loads(zf.read("manifest.json"))
        except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"not a tensor archive: {exc}") from exc
        if not isinstance(man, dict) or set(man) != _MANIFEST_KEYS:
            raise FormatError(f"manifest keys must be exactly {sorted(_MANIFEST_KEYS)}")
        if man["format"] != FORMAT or man["version"] != VERSION:
            raise FormatError(f"unsupported tensor archive {man['format']!r} v{man['version']}")
        names, shapes = [], []
        for t in man["tensors"]:
            if set(t) != {"name", "shape", "dtype"} or t["dtype"] != "f32":
                raise FormatError(f"bad tensor entry {t}")
            names.append(str(t["name"]))
            shapes.append(tuple(int(d) for d in t["shape"]))
        sizes = [math.prod(s) for s in shapes]
        samples = []
        for i in range(int(man["samples"])):
            try:
                raw = zf.read(_blob_name(i))
            except KeyError as exc:
                raise FormatError(f"missing blob {_blob_name(i)}") from exc
            if len(raw) != 4 * sum(sizes):
                raise FormatError(f"{_blob_name(i)}: expected {4 * sum(sizes)} bytes, got {len(raw)}")
            flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            sample, off = {}, 0
            for n, s, k in zip(names, shapes, sizes):
                sample[n] = flat[off : off + k].reshape(s)
                off += k
            samples.append(sample)
        return cls(tuple(names), tuple(shapes), samples)

    def save(self, path):
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "TensorSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
