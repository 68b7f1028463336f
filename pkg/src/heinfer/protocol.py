"""The five protocol steps as file-to-file operations.

Model owner: :func:`keyparams` (step 1) and :func:`inference` (step 4).
Data owner: :func:`keygen_files` (2), :func:`encrypt_file` (3) and
:func:`decrypt_file` (5).  Only keyparams, the evaluation key and ciphertexts
cross between the parties; the calibrated-model sidecar stays with the model
owner.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approx import Polynomial
from .backend import EvalKey, SecretKey, backend_for, dump_ciphertext, dump_key, keygen, load_ciphertext, load_key
from .calibration import MEAN_STD, MIN_MAX, CalibratedModel, DomainMethod, EdgeStats, calibrate
from .errors import CapacityError, FormatError, KeyMismatchError, ShapeError
from .fileio import atomic_write
from .graph import prepare
from .lowering import ExecutionPlan, ReluPolicy, RunReport, execute, plan
from .params import KeyParams, derive_ckks_params, derive_tfhe_params
from .tensorfile import TensorSet

SIDECAR_FORMAT = "heinfer.calibrated"
SIDECAR_VERSION = 1
_SIDECAR_KEYS = {
    "format", "version", "model_file", "model_sha256", "backend", "relu_degree", "domain_method",
    "compose", "calibration", "stats", "polynomials", "plan",
}


def sidecar_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".calibrated.json")


def _read(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p.read_bytes()


def default_domain(backend: str) -> DomainMethod:
    return MEAN_STD if backend == "ckks" else MIN_MAX


@dataclass
class Sidecar:
    """Model-owner-side calibration record stored next to the ONNX file."""

    model_file: str
    model_sha256: str
    backend: str
    relu_degree: int | None
    domain_method: DomainMethod
    compose: bool
    samples: int
    dataset_digest: str
    stats: dict[str, EdgeStats]
    polynomials: dict[str, Polynomial]
    plan_summary: list

    def to_json(self) -> str:
        d = {
            "format": SIDECAR_FORMAT,
            "version": SIDECAR_VERSION,
            "model_file": self.model_file,
            "model_sha256": self.model_sha256,
            "backend": self.backend,
            "relu_degree": self.relu_degree,
            "domain_method": str(self.domain_method),
            "compose": self.compose,
            "calibration": {"samples": self.samples, "dataset_digest": self.dataset_digest},
            "stats": {e: s.to_dict() for e, s in self.stats.items()},
            "polynomials": {n: p.to_dict() for n, p in self.polynomials.items()},
            "plan": self.plan_summary,
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "Sidecar":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"calibrated-model sidecar is not valid JSON: {exc}") from exc
        if not isinstance(d, dict) or d.get("format") != SIDECAR_FORMAT:
            raise FormatError("not a calibrated-model sidecar")
        if d.get("version") != SIDECAR_VERSION:
            raise FormatError(f"unsupported sidecar version {d.get('version')!r}")
        if set(d) != _SIDECAR_KEYS:
            raise FormatError(f"sidecar fields must be exactly {sorted(_SIDECAR_KEYS)}")
        try:
            return cls(
                model_file=str(d["model_file"]),
                model_sha256=str(d["model_sha256"]),
                backend=str(d["backend"]),
                relu_degree=d["relu_degree"],
                domain_method=DomainMethod.parse(d["domain_method"]),
                compose=bool(d["compose"]),
                samples=int(d["calibration"]["samples"]),
                dataset_digest=str(d["calibration"]["dataset_digest"]),
                stats={e: EdgeStats.from_dict(s) for e, s in d["stats"].items()},
                polynomials={n: Polynomial.from_dict(p) for n, p in d["polynomials"].items()},
                plan_summary=list(d["plan"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"corrupt sidecar: {exc}") from exc

    def policy(self) -> ReluPolicy:
        if self.backend == "ckks":
            return ReluPolicy(self.relu_degree, self.domain_method)
        return ReluPolicy(self.relu_degree, MEAN_STD, tfhe_domain=self.domain_method)


def keyparams(model_path, calibration_path, out_path, backend="ckks", lambda_bits=128, relu_degree=3,
              domain_method: DomainMethod | None = None, msg_bits=6, compose=True,
              workers=1) -> tuple[KeyParams, Path]:
    """Step 1: calibrate, derive parameters, write keyparams.json and the sidecar."""
    model_bytes = _read(model_path)
    cal = TensorSet.from_bytes(_read(calibration_path))
    g = prepare(model_bytes)
    cm = calibrate(g, cal, workers=workers)
    domain = domain_method or default_domain(backend)
    if backend == "ckks":
        kp = derive_ckks_params(cm, lambda_bits, relu_degree if relu_degree is not None else 3)
        policy = ReluPolicy(relu_degree, domain)
    elif backend == "tfhe":
        kp = derive_tfhe_params(cm, lambda_bits, msg_bits, domain)
        policy = ReluPolicy(relu_degree, MEAN_STD, tfhe_domain=domain)
    else:
        raise FormatError(f"unknown backend {backend!r}")
    p = plan(cm, kp, policy, compose=compose)
    side = Sidecar(
        model_file=Path(model_path).name,
        model_sha256=hashlib.sha256(model_bytes).hexdigest(),
        backend=backend,
        relu_degree=relu_degree,
        domain_method=domain,
        compose=compose,
        samples=cm.samples,
        dataset_digest=cm.dataset_digest,
        stats=cm.stats,
        polynomials=p.polynomials,
        plan_summary=p.summary(),
    )
    side_path = sidecar_path(model_path)
    atomic_write(out_path, kp.to_json().encode())
    atomic_write(side_path, side.to_json().encode())
    return kp, side_path


def load_keyparams(path) -> KeyParams:
    return KeyParams.from_json(_read(path))


def keygen_files(keyparams_path, out_secret, out_eval, seed=None) -> tuple[SecretKey, EvalKey]:
    """Step 2."""
    kp = load_keyparams(keyparams_path)
    sk, ek = keygen(kp, seed)
    atomic_write(out_secret, dump_key(sk))
    atomic_write(out_eval, dump_key(ek))
    return sk, ek


def load_secret(path) -> SecretKey:
    key = load_key(_read(path))
    if not isinstance(key, SecretKey):
        raise FormatError(f"{path} holds an evaluation key; a secret key is required")
    return key


def load_eval(path) -> EvalKey:
    key = load_key(_read(path))
    if not isinstance(key, EvalKey):
        raise FormatError(f"{path} holds a secret key; refusing to use it as an evaluation key")
    return key


def encrypt_array(sk: SecretKey, x) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    kp = sk.params
    if kp.backend == "ckks" and x.size > kp.ckks.slots:
        raise CapacityError(f"tensor of {x.size} elements exceeds {kp.ckks.slots} slots")
    if x.shape != kp.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match the model input {kp.input_shape}")
    return dump_ciphertext(backend_for(sk).encrypt(x))


def encrypt_file(secret_path, input_path, out_path):
    """Step 3: the input file is a one-sample tensor archive."""
    sk = load_secret(secret_path)
    ts = TensorSet.from_bytes(_read(input_path))
    if len(ts) != 1 or len(ts.names) != 1:
        raise FormatError(f"{input_path}: expected exactly one tensor in one sample")
    atomic_write(out_path, encrypt_array(sk, ts.samples[0][ts.names[0]]))


def load_model_owner_state(model_or_sidecar) -> tuple[CalibratedModel, Sidecar]:
    p = Path(model_or_sidecar)
    if p.suffix == ".onnx":
        side_p, model_p = sidecar_path(p), p
        side = Sidecar.from_json(_read(side_p))
    else:
        side = Sidecar.from_json(_read(p))
        model_p = p.with_name(side.model_file)
    model_bytes = _read(model_p)
    if hashlib.sha256(model_bytes).hexdigest() != side.model_sha256:
        raise FormatError(f"{model_p} does not match the digest recorded in its calibration sidecar")
    g = prepare(model_bytes)
    if set(side.stats) != set(g.edges):
        raise FormatError("sidecar statistics do not cover the model's edges")
    cm = CalibratedModel(g, side.stats, side.samples, side.dataset_digest)
    return cm, side


def build_plan(cm: CalibratedModel, side: Sidecar, kp: KeyParams) -> ExecutionPlan:
    if kp.backend != side.backend:
        raise FormatError(f"model was calibrated for {side.backend}, keys are {kp.backend}")
    return plan(cm, kp, side.policy(), compose=side.compose, polynomials=side.polynomials)


def infer_bytes(pl: ExecutionPlan, ek: EvalKey, ct_bytes: bytes) -> tuple[bytes, RunReport]:
    ct = load_ciphertext(ct_bytes)
    be = backend_for(ek)
    if ct.key_id != ek.key_id:
        raise KeyMismatchError("ciphertext was not produced under this evaluation key")
    out, rep = execute(pl, be, ct)
    if hasattr(out, "pending") and out.pending:
        out = be.flush(out)
    return dump_ciphertext(out), rep


def inference(model_or_sidecar, eval_path, ct_in_path, out_path) -> dict:
    """Step 4; returns the machine-readable run report."""
    cm, side = load_model_owner_state(model_or_sidecar)
    ek = load_eval(eval_path)
    pl = build_plan(cm, side, ek.params)
    out, rep = infer_bytes(pl, ek, _read(ct_in_path))
    atomic_write(out_path, out)
    d = rep.to_dict()
    d["output_shape"] = list(pl.output_shapes[pl.graph_outputs[0]])
    return d


def decrypt_bytes(sk: SecretKey, ct_bytes: bytes) -> np.ndarray:
    ct = load_ciphertext(ct_bytes)
    return backend_for(sk).decrypt(ct)


def decrypt_file(secret_path, ct_path, out_path) -> np.ndarray:
    """Step 5.  An evaluation key here is a key-role mismatch, not a format error."""
    key = load_key(_read(secret_path))
    if not isinstance(key, SecretKey):
        raise KeyMismatchError("decryption requires the secret key; got an evaluation key")
    y = decrypt_bytes(key, _read(ct_path))
    TensorSet.single("output", [y.astype(np.float32)]).save(out_path)
    return y
