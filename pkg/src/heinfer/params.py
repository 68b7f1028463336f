"""Automatic encryption-parameter derivation and the keyparams.json document."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .approx import poly_depth
from .calibration import MIN_MAX, CalibratedModel, DomainMethod, Interval, edge_interval
from .errors import FormatError, ParamsError
from .graph import ModelGraph, pad_is_folded, topo_order

# log2 N -> largest total coefficient-modulus bit count at 128-bit security
CKKS_MAX_Q_BITS = {12: 109, 13: 218, 14: 438, 15: 881}
CKKS_EDGE_BITS = 30
CKKS_MAX_SCALE_BITS = 40
CKKS_MIN_SCALE_BITS = 16

# security level -> (RLWE N, log2 RLWE sigma, LWE dimension, log2 LWE sigma)
TFHE_ROWS = {
    80: (2048, -60, 542, -23),
    128: (4096, -62, 938, -23),
}
DEFAULT_MSG_BITS = 6

KEYPARAMS_FORMAT = "heinfer.keyparams"
KEYPARAMS_VERSION = 1

_ZERO_COST = {"Add", "Pad", "Flatten", "Reshape"}
_ONE_COST = {"Conv", "Gemm", "MatMul", "AveragePool", "Mul"}


@dataclass
class DepthReport:
    d_m: int
    node_cost: dict[str, int] = field(default_factory=dict)
    node_depth: dict[str, int] = field(default_factory=dict)
    max_tensor_elements: int = 0


def node_cost(g: ModelGraph, node, relu_degree: int) -> int:
    if node.op == "Relu":
        return poly_depth(relu_degree)
    if node.op == "Pad":
        # an unfolded Pad is applied as its own plaintext matrix product
        return 0 if pad_is_folded(g, node) else 1
    if node.op in _ONE_COST:
        return 1
    if node.op in _ZERO_COST:
        return 0
    raise ParamsError(f"no depth cost for operator {node.op}")


def multiplicative_depth(model: CalibratedModel | ModelGraph, relu_degree: int = 3) -> DepthReport:
    """Longest cost-weighted path from any graph input to any output."""
    g = model.graph if isinstance(model, CalibratedModel) else model
    depth = {e: 0 for e in g.graph_inputs}
    rep = DepthReport(0)
    for i in topo_order(g):
        n = g.nodes[i]
        c = node_cost(g, n, relu_degree)
        d = max((depth[e] for e in n.inputs if e in depth), default=0) + c
        for e in n.outputs:
            depth[e] = d
        rep.node_cost[n.name] = c
        rep.node_depth[n.name] = d
    rep.d_m = max((depth[e] for e in g.graph_outputs), default=0)
    rep.max_tensor_elements = max(
        (g.spec(e).element_count for e in g.activation_edges() if g.edges.get(e) is not None),
        default=0,
    )
    return rep


@dataclass(frozen=True)
class CkksParams:
    log2_n: int
    coeff_bit_chain: tuple[int, ...]
    scale_bits: int

    def __post_init__(self):
        object.__setattr__(self, "coeff_bit_chain", tuple(int(b) for b in self.coeff_bit_chain))
        if self.log2_n not in CKKS_MAX_Q_BITS:
            raise ParamsError(f"log2_n {self.log2_n} not in {sorted(CKKS_MAX_Q_BITS)}")
        if len(self.coeff_bit_chain) < 2:
            raise ParamsError("coefficient chain needs at least two primes")
        if self.total_bits > CKKS_MAX_Q_BITS[self.log2_n]:
            raise ParamsError(
                f"coefficient modulus {self.total_bits} bits exceeds the "
                f"{CKKS_MAX_Q_BITS[self.log2_n]}-bit cap for N=2^{self.log2_n}"
            )

    @property
    def slots(self) -> int:
        return 2 ** (self.log2_n - 1)

    @property
    def levels(self) -> int:
        return len(self.coeff_bit_chain) - 2

    @property
    def total_bits(self) -> int:
        return sum(self.coeff_bit_chain)


@dataclass(frozen=True)
class TfheParams:
    rlwe_n: int
    rlwe_sigma_log2: int
    lwe_k: int
    lwe_sigma_log2: int
    msg_bits: int
    input_interval: Interval

    def __post_init__(self):
        row = (self.rlwe_n, self.rlwe_sigma_log2, self.lwe_k, self.lwe_sigma_log2)
        if row not in TFHE_ROWS.values():
            raise ParamsError(f"TFHE parameters {row} are not a supported parameter set")
        if not 1 <= self.msg_bits <= 16:
            raise ParamsError("msg_bits must be in [1, 16]")


@dataclass(frozen=True)
class KeyParams:
    backend: str
    lambda_bits: int
    input_shape: tuple[int, ...]
    ckks: CkksParams | None = None
    tfhe: TfheParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.backend == "ckks":
            if self.ckks is None or self.tfhe is not None or self.lambda_bits != 128:
                raise ParamsError("CKKS key params need a ckks section and lambda 128")
        elif self.backend == "tfhe":
            if self.tfhe is None or self.ckks is not None:
                raise ParamsError("TFHE key params need a tfhe section")
            if TFHE_ROWS.get(self.lambda_bits) != (
                self.tfhe.rlwe_n,
                self.tfhe.rlwe_sigma_log2,
                self.tfhe.lwe_k,
                self.tfhe.lwe_sigma_log2,
            ):
                raise ParamsError(f"TFHE parameter row does not match lambda {self.lambda_bits}")
        else:
            raise ParamsError(f"unknown backend {self.backend!r}")

    def to_dict(self) -> dict:
        d = {
            "format": KEYPARAMS_FORMAT,
            "version": KEYPARAMS_VERSION,
            "backend": self.backend,
            "lambda_bits": self.lambda_bits,
            "input_shape": list(self.input_shape),
        }
        if self.ckks:
            d["ckks"] = {
                "log2_n": self.ckks.log2_n,
                "coeff_bit_chain": list(self.ckks.coeff_bit_chain),
                "scale_bits": self.ckks.scale_bits,
            }
        if self.tfhe:
            t = self.tfhe
            d["tfhe"] = {
                "rlwe_n": t.rlwe_n,
                "rlwe_sigma_log2": t.rlwe_sigma_log2,
                "lwe_k": t.lwe_k,
                "lwe_sigma_log2": t.lwe_sigma_log2,
                "msg_bits": t.msg_bits,
                "input_interval": t.input_interval.to_list(),
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "KeyParams":
        if not isinstance(d, dict):
            raise FormatError("keyparams must be a JSON object")
        if d.get("format") != KEYPARAMS_FORMAT:
            raise FormatError(f"not a keyparams document (format={d.get('format')!r})")
        if d.get("version") != KEYPARAMS_VERSION:
            raise FormatError(f"unsupported keyparams version {d.get('version')!r}")
        backend = d.get("backend")
        top = {"format", "version", "backend", "lambda_bits", "input_shape", backend}
        if set(d) != top:
            raise FormatError(f"keyparams fields must be exactly {sorted(map(str, top))}, got {sorted(d)}")
        try:
            if backend == "ckks":
                c = d["ckks"]
                _exact_keys(c, {"log2_n", "coeff_bit_chain", "scale_bits"}, "ckks")
                return cls(
                    "ckks",
                    int(d["lambda_bits"]),
                    tuple(d["input_shape"]),
                    ckks=CkksParams(int(c["log2_n"]), tuple(c["coeff_bit_chain"]), int(c["scale_bits"])),
                )
            if backend == "tfhe":
                t = d["tfhe"]
                _exact_keys(
                    t,
                    {"rlwe_n", "rlwe_sigma_log2", "lwe_k", "lwe_sigma_log2", "msg_bits", "input_interval"},
                    "tfhe",
                )
                return cls(
                    "tfhe",
                    int(d["lambda_bits"]),
                    tuple(d["input_shape"]),
                    tfhe=TfheParams(
                        int(t["rlwe_n"]),
                        int(t["rlwe_sigma_log2"]),
                        int(t["lwe_k"]),
                        int(t["lwe_sigma_log2"]),
                        int(t["msg_bits"]),
                        Interval(*t["input_interval"]),
                    ),
                )
        except (TypeError, ValueError, ParamsError) as exc:
            raise FormatError(f"invalid keyparams: {exc}") from exc
        raise FormatError(f"unknown backend {backend!r}")

    @classmethod
    def from_json(cls, text: str | bytes) -> "KeyParams":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"keyparams is not valid JSON: {exc}") from exc


def _exact_keys(d, keys, where):
    if not isinstance(d, dict) or set(d) != keys:
        raise FormatError(f"{where} section fields must be exactly {sorted(keys)}")


def ckks_scale_bits(log2_n: int, d_m: int) -> int:
    if d_m == 0:
        return CKKS_MAX_SCALE_BITS
    return min(CKKS_MAX_SCALE_BITS, (CKKS_MAX_Q_BITS[log2_n] - 2 * CKKS_EDGE_BITS) // d_m)


def ckks_infeasibility(log2_n: int, d_m: int, max_elements: int) -> str | None:
    """Reason ``log2_n`` cannot host the computation, or None when it can."""
    slots = 2 ** (log2_n - 1)
    if max_elements > slots:
        return f"tensor size {max_elements} exceeds {slots} slots"
    if ckks_scale_bits(log2_n, d_m) < CKKS_MIN_SCALE_BITS:
        return (
            f"depth {d_m} leaves fewer than {CKKS_MIN_SCALE_BITS} scale bits within "
            f"{CKKS_MAX_Q_BITS[log2_n]} modulus bits"
        )
    return None


def _input_shape(g: ModelGraph) -> tuple[int, ...]:
    if len(g.graph_inputs) != 1:
        raise ParamsError("exactly one graph input is supported for encryption")
    return g.spec(g.graph_inputs[0]).shape


def derive_ckks_params(cm: CalibratedModel, lambda_bits: int = 128, relu_degree: int = 3) -> KeyParams:
    """Smallest ring dimension whose slots and modulus budget fit the model."""
    if lambda_bits != 128:
        raise ParamsError(f"CKKS parameters exist only for lambda=128, got {lambda_bits}")
    rep = multiplicative_depth(cm, relu_degree)
    reason = None
    for log2_n in sorted(CKKS_MAX_Q_BITS):
        reason = ckks_infeasibility(log2_n, rep.d_m, rep.max_tensor_elements)
        if reason is None:
            scale = ckks_scale_bits(log2_n, rep.d_m)
            chain = (CKKS_EDGE_BITS,) + (scale,) * rep.d_m + (CKKS_EDGE_BITS,)
            return KeyParams("ckks", lambda_bits, _input_shape(cm.graph), ckks=CkksParams(log2_n, chain, scale))
    raise ParamsError(f"no CKKS parameters up to N=2^15: {reason}")


def derive_tfhe_params(
    cm: CalibratedModel,
    lambda_bits: int = 128,
    msg_bits: int = DEFAULT_MSG_BITS,
    domain: DomainMethod = MIN_MAX,
) -> KeyParams:
    if lambda_bits not in TFHE_ROWS:
        raise ParamsError(f"no TFHE parameter set for lambda={lambda_bits} (have {sorted(TFHE_ROWS)})")
    n, sn, k, sk = TFHE_ROWS[lambda_bits]
    shape = _input_shape(cm.graph)
    iv = edge_interval(cm, cm.graph.graph_inputs[0], domain)
    return KeyParams("tfhe", lambda_bits, shape, tfhe=TfheParams(n, sn, k, sk, msg_bits, iv))
