"""Lower graph nodes onto backend primitives and run encrypted forward passes."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .approx import Polynomial, fit_relu_polynomial, poly_depth
from .backend import Backend, CkksBackend, TfheBackend, backend_for
from .backend import functions as fn
from .calibration import MEAN_STD, MIN_MAX, CalibratedModel, DomainMethod, Interval, edge_interval
from .errors import DepthError, PlanError, ShapeError
from .graph import LINEAR_OPS, ModelGraph, Node, pad_is_folded, topo_order
from .params import KeyParams

DEFAULT_MAX_MATRIX_ELEMENTS = 2**26


@dataclass(frozen=True)
class LinearMapPlan:
    matrix: np.ndarray  # (out_elems, in_elems)
    bias: np.ndarray  # (out_elems,)
    source: str

    def apply(self, x) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=np.float64).reshape(-1) + self.bias

    def then(self, other: "LinearMapPlan") -> "LinearMapPlan":
        """Composite map ``other(self(x))``."""
        return LinearMapPlan(
            other.matrix @ self.matrix,
            other.matrix @ self.bias + other.bias,
            f"{self.source}+{other.source}",
        )


@dataclass(frozen=True)
class ReluPolicy:
    degree: int | None = 3
    domain: DomainMethod = MEAN_STD
    tfhe_domain: DomainMethod = MIN_MAX

    def describe(self) -> dict:
        return {"degree": self.degree, "domain": str(self.domain), "tfhe_domain": str(self.tfhe_domain)}


DEFAULT_POLICY = ReluPolicy()


@dataclass
class Step:
    kind: str  # linear | elementwise | activation | shape
    nodes: tuple[str, ...]
    inputs: tuple[str, ...]
    output: str
    out_shape: tuple[int, ...]
    linear: LinearMapPlan | None = None
    op: str = ""  # add | mul for elementwise
    plain: np.ndarray | None = None
    poly: Polynomial | None = None
    lut: fn.UnivariateFn | None = None
    interval: Interval | None = None

    @property
    def name(self) -> str:
        return "+".join(self.nodes)


@dataclass
class ExecutionPlan:
    backend: str
    steps: list[Step]
    graph_inputs: tuple[str, ...]
    graph_outputs: tuple[str, ...]
    output_shapes: dict[str, tuple[int, ...]]
    intervals: dict[str, Interval]
    policy: ReluPolicy
    compose: bool

    @property
    def polynomials(self) -> dict[str, Polynomial]:
        return {s.name: s.poly for s in self.steps if s.poly is not None}

    def summary(self) -> list[dict]:
        out = []
        for s in self.steps:
            d = {"kind": s.kind, "nodes": list(s.nodes), "output": s.output, "shape": list(s.out_shape)}
            if s.linear is not None:
                d["matrix"] = list(s.linear.matrix.shape)
            if s.poly is not None:
                d["poly"] = s.poly.to_dict()
            out.append(d)
        return out


# ---------------------------------------------------------------- matrices


def _spatial(node: Node, kernel):
    strides = tuple(node.attr("strides") or (1, 1))
    pads = tuple(node.attr("pads") or (0, 0, 0, 0))
    if node.attr("auto_pad") == "VALID":
        pads = (0, 0, 0, 0)
    return tuple(kernel), strides, pads


def _out_size(size, k, s, pb, pe):
    out = (size + pb + pe - k) // s + 1
    if out < 1:
        raise ShapeError(f"kernel {k} does not fit input {size} with pads ({pb}, {pe})")
    return out


def im2col_matrix(in_shape, weights, strides=(1, 1), pads=(0, 0, 0, 0), group=1, bias=None,
                  source="conv") -> LinearMapPlan:
    """Dense matrix ``A`` with ``A @ flatten(x) == flatten(conv(x))`` for one NCHW sample."""
    in_shape = tuple(in_shape)
    if len(in_shape) == 4:
        if in_shape[0] != 1:
            raise ShapeError(f"batch must be 1, got {in_shape}")
        in_shape = in_shape[1:]
    c, h, w = in_shape
    weights = np.asarray(weights, dtype=np.float64)
    m, cg, kh, kw = weights.shape
    if c != cg * group or m % group:
        raise ShapeError(f"channels {c} incompatible with weights {weights.shape}, group {group}")
    sh, sw = strides
    ho = _out_size(h, kh, sh, pads[0], pads[2])
    wo = _out_size(w, kw, sw, pads[1], pads[3])
    mg = m // group

    # index grids over (out channel, oy, ox, in channel within group, ky, kx)
    oc, oy, ox, ic, ky, kx = np.meshgrid(
        np.arange(m), np.arange(ho), np.arange(wo), np.arange(cg), np.arange(kh), np.arange(kw),
        indexing="ij",
    )
    y = oy * sh - pads[0] + ky
    x = ox * sw - pads[1] + kx
    cin = (oc // mg) * cg + ic
    inside = (y >= 0) & (y < h) & (x >= 0) & (x < w)
    rows = ((oc * ho + oy) * wo + ox)[inside]
    cols = ((cin * h + y) * w + x)[inside]
    vals = weights[oc, ic, ky, kx][inside]
    A = np.zeros((m * ho * wo, c * h * w))
    np.add.at(A, (rows, cols), vals)
    b = np.zeros(m * ho * wo)
    if bias is not None:
        b = np.repeat(np.asarray(bias, dtype=np.float64).reshape(m), ho * wo)
    return LinearMapPlan(A, b, source)


def avgpool_matrix(in_shape, kernel, strides, pads=(0, 0, 0, 0), count_include_pad=False,
                   source="avgpool") -> LinearMapPlan:
    in_shape = tuple(in_shape)
    if len(in_shape) == 4:
        in_shape = in_shape[1:]
    c, h, w = in_shape
    kh, kw = kernel
    ones = np.ones((c, 1, kh, kw))
    plan = im2col_matrix((c, h, w), ones, strides, pads, group=c, source=source)
    if count_include_pad:
        A = plan.matrix / (kh * kw)
    else:
        A = plan.matrix / plan.matrix.sum(axis=1, keepdims=True)
    return LinearMapPlan(A, plan.bias, source)


def pad_matrix(in_shape, pads, value=0.0, source="pad") -> LinearMapPlan:
    in_shape = tuple(int(d) for d in in_shape)
    r = len(in_shape)
    pads = [int(p) for p in pads]
    out_shape = tuple(in_shape[i] + pads[i] + pads[i + r] for i in range(r))
    n_in, n_out = math.prod(in_shape), math.prod(out_shape)
    idx = np.indices(in_shape).reshape(r, -1)
    dst = np.ravel_multi_index(tuple(idx[i] + pads[i] for i in range(r)), out_shape)
    A = np.zeros((n_out, n_in))
    A[dst, np.arange(n_in)] = 1.0
    b = np.full(n_out, float(value))
    b[dst] = 0.0
    return LinearMapPlan(A, b, source)


def gemm_matrix(a_shape, B, C=None, alpha=1.0, beta=1.0, trans_b=False, source="gemm") -> LinearMapPlan:
    rows, k = a_shape
    Bm = np.asarray(B, dtype=np.float64)
    Bm = Bm.T if trans_b else Bm
    if Bm.shape[0] != k:
        raise ShapeError(f"Gemm inner dimensions differ: {k} vs {Bm.shape[0]}")
    n = Bm.shape[1]
    A = np.kron(np.eye(rows), alpha * Bm.T)
    b = np.zeros((rows, n))
    if C is not None:
        b = b + beta * np.asarray(C, dtype=np.float64)
    return LinearMapPlan(A, b.reshape(-1), source)


def matmul_matrix(x_shape, W, source="matmul") -> LinearMapPlan:
    rows = math.prod(x_shape[:-1])
    return gemm_matrix((rows, x_shape[-1]), W, source=source)


def lower_linear(g: ModelGraph, node: Node) -> LinearMapPlan:
    x_shape = g.spec(node.inputs[0]).shape
    init = g.initializers
    if node.op == "Conv":
        w = init[node.inputs[1]]
        k, s, p = _spatial(node, w.shape[2:])
        b = init[node.inputs[2]] if len(node.inputs) > 2 and node.inputs[2] else None
        return im2col_matrix(x_shape, w, s, p, node.attr("group"), b, node.name)
    if node.op == "AveragePool":
        k, s, p = _spatial(node, node.attr("kernel_shape"))
        return avgpool_matrix(x_shape, k, s, p, bool(node.attr("count_include_pad")), node.name)
    if node.op == "Gemm":
        c = init[node.inputs[2]] if len(node.inputs) > 2 and node.inputs[2] else None
        out = g.spec(node.outputs[0]).shape
        if c is not None:
            c = np.broadcast_to(c, out)
        return gemm_matrix(x_shape, init[node.inputs[1]], c, node.attr("alpha"), node.attr("beta"),
                           bool(node.attr("transB")), node.name)
    if node.op == "MatMul":
        return matmul_matrix(x_shape, init[node.inputs[1]], node.name)
    if node.op == "Pad":
        value = 0.0
        if len(node.inputs) > 2 and node.inputs[2]:
            value = float(init[node.inputs[2]].reshape(-1)[0])
        return pad_matrix(x_shape, init[node.inputs[1]], value, node.name)
    raise PlanError(f"{node.name}: {node.op} is not a linear operator")


# ---------------------------------------------------------------- planning


def plan(cm: CalibratedModel, kp: KeyParams, relu_policy: ReluPolicy = DEFAULT_POLICY,
         compose: bool = True, max_matrix_elements: int = DEFAULT_MAX_MATRIX_ELEMENTS,
         polynomials: dict[str, Polynomial] | None = None) -> ExecutionPlan:
    """Build the step list for ``cm`` under ``kp``'s backend.

    Pads feeding a linear operator are always folded into its matrix.  With
    ``compose`` set, linear maps separated only by shape-only nodes are also
    multiplied together, saving one CKKS level per fusion.
    """
    g = cm.graph
    backend = kp.backend
    if backend == "ckks" and relu_policy.degree is None and any(n.op == "Relu" for n in g.nodes):
        raise PlanError("ReLU under CKKS requires a polynomial degree (1, 3 or 7)")
    polynomials = dict(polynomials or {})
    consumers = g.consumers()

    def iv(edge):
        return edge_interval(cm, edge, relu_policy.tfhe_domain)

    steps: list[Step] = []
    for i in topo_order(g):
        n = g.nodes[i]
        out = n.outputs[0]
        shape = g.spec(out).shape
        if n.op in LINEAR_OPS or n.op == "Pad":
            lin = lower_linear(g, n)
            steps.append(Step("linear", (n.name,), (n.inputs[0],), out, shape, linear=lin, interval=iv(out)))
        elif n.op in ("Flatten", "Reshape"):
            steps.append(Step("shape", (n.name,), (n.inputs[0],), out, shape))
        elif n.op == "Relu":
            st = Step("activation", (n.name,), (n.inputs[0],), out, shape, interval=iv(out))
            if backend == "ckks":
                p = polynomials.get(n.name)
                if p is None:
                    p = fit_relu_polynomial(edge_interval(cm, n.inputs[0], relu_policy.domain),
                                            relu_policy.degree)
                st.poly = p
            else:
                st.lut = fn.relu()
            steps.append(st)
        elif n.op in ("Add", "Mul"):
            a, b = n.inputs
            op = n.op.lower()
            if g.is_const(a) or g.is_const(b):
                ct_in, const = (b, a) if g.is_const(a) else (a, b)
                if g.spec(ct_in).shape != shape:
                    raise PlanError(f"{n.name}: constant operand would broadcast the encrypted tensor "
                                    f"{g.spec(ct_in).shape} to {shape}")
                c = g.initializers[const]
                st = Step("elementwise", (n.name,), (ct_in,), out, shape, op=op,
                          plain=np.broadcast_to(c, shape).reshape(-1).copy(), interval=iv(out))
                if backend == "tfhe" and c.size == 1:
                    v = float(c.reshape(-1)[0])
                    st = Step("activation", (n.name,), (ct_in,), out, shape, interval=iv(out),
                              lut=fn.affine(1.0, v) if op == "add" else fn.affine(v, 0.0))
                steps.append(st)
            else:
                if op == "mul" and backend == "tfhe":
                    raise PlanError(f"{n.name}: encrypted-by-encrypted Mul is not supported by TFHE")
                if g.spec(a).shape != shape or g.spec(b).shape != shape:
                    raise PlanError(f"{n.name}: broadcasting between encrypted tensors is not supported")
                steps.append(Step("elementwise", (n.name,), (a, b), out, shape, op=op, interval=iv(out)))
        else:
            raise PlanError(f"{n.name}: no lowering for {n.op}")

    steps = _fuse(g, steps, compose, consumers)
    for s in steps:
        if s.linear is not None and s.linear.matrix.size > max_matrix_elements:
            raise PlanError(f"{s.name}: matrix {s.linear.matrix.shape} exceeds the "
                            f"{max_matrix_elements}-element cap")
    return ExecutionPlan(
        backend=backend,
        steps=steps,
        graph_inputs=g.graph_inputs,
        graph_outputs=g.graph_outputs,
        output_shapes={e: g.spec(e).shape for e in g.graph_outputs},
        intervals={e: iv(e) for e in g.activation_edges()},
        policy=relu_policy,
        compose=compose,
    )


def _fuse(g: ModelGraph, steps: list[Step], compose: bool, consumers) -> list[Step]:
    by_output = {s.output: s for s in steps}
    pad_nodes = {n.name for n in g.nodes if n.op == "Pad" and pad_is_folded(g, n)}
    removed: set[int] = set()

    def single_use(edge):
        return len(consumers.get(edge, [])) == 1 and edge not in g.graph_outputs

    for s in steps:
        if s.kind != "linear":
            continue
        # walk back through shape-only steps to the producing step
        chain = []
        edge = s.inputs[0]
        prev = by_output.get(edge)
        while prev is not None and prev.kind == "shape" and single_use(edge):
            chain.append(prev)
            edge = prev.inputs[0]
            prev = by_output.get(edge)
        if prev is None or prev.kind != "linear" or not single_use(edge) or id(prev) in removed:
            continue
        if not (compose or set(prev.nodes) <= pad_nodes):
            continue
        s.linear = prev.linear.then(s.linear)
        s.nodes = prev.nodes + tuple(n for c in reversed(chain) for n in c.nodes) + s.nodes
        s.inputs = prev.inputs
        removed.add(id(prev))
        removed.update(id(c) for c in chain)
    steps = [s for s in steps if id(s) not in removed]

    # collapse runs of shape-only steps into one reshape
    by_output = {s.output: s for s in steps}
    removed = set()
    for s in steps:
        if s.kind != "shape":
            continue
        prev = by_output.get(s.inputs[0])
        if prev is not None and prev.kind == "shape" and len(consumers.get(s.inputs[0], [])) == 1 \
                and s.inputs[0] not in g.graph_outputs and id(prev) not in removed:
            s.nodes = prev.nodes + s.nodes
            s.inputs = prev.inputs
            removed.add(id(prev))
    return [s for s in steps if id(s) not in removed]


# ---------------------------------------------------------------- execution


@dataclass
class RunReport:
    backend: str
    levels_consumed: int = 0
    flushes: int = 0
    quantizations: int = 0
    clamped: int = 0
    latency_s: float = 0.0
    step_levels: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "latency_s": self.latency_s,
            "levels_consumed": self.levels_consumed,
            "flushes": self.flushes,
            "quantizations": self.quantizations,
            "clamped": self.clamped,
        }


def eval_poly_power_tree(be: CkksBackend, ct, coeffs):
    """Evaluate ``sum c_k x^k`` using ceil(log2(deg+1)) levels.

    Powers x^(2^j) come from repeated squaring; each monomial multiplies its
    coefficient into the lowest power first so the constant costs no extra level.
    """
    deg = len(coeffs) - 1
    if deg < 1:
        return be.add_plain(be.mul_plain(ct, 0.0), coeffs[0] if coeffs else 0.0)
    powers = [ct]
    while 2 ** len(powers) <= deg:
        powers.append(be.square(powers[-1]))
    terms = []
    for k in range(1, deg + 1):
        bits = [j for j in range(len(powers)) if (k >> j) & 1]
        t = be.mul_plain(powers[bits[0]], coeffs[k])
        for j in bits[1:]:
            t = be.mul_ct(t, powers[j])
        terms.append(t)
    acc = terms[0]
    for t in terms[1:]:
        acc = be.add_ct(acc, t)
    return be.add_plain(acc, coeffs[0])


def _input_level(ct):
    return getattr(ct, "level", None)


def execute(plan: ExecutionPlan, be: Backend, ct_in) -> tuple[object, RunReport]:
    """Run ``plan`` on ``be``; returns the output ciphertext and a report."""
    if len(plan.graph_inputs) != 1:
        raise PlanError("exactly one graph input is supported")
    before = be.counters.snapshot()
    t0 = time.perf_counter()
    env = {plan.graph_inputs[0]: ct_in}
    rep = RunReport(be.name)
    tfhe = isinstance(be, TfheBackend)

    def ready(edge):
        ct = env[edge]
        if tfhe and ct.pending:
            ct = be.flush(ct, plan.intervals.get(edge))
            env[edge] = ct
        return ct

    for s in plan.steps:
        try:
            if s.kind == "shape":
                env[s.output] = be.reshape(env[s.inputs[0]], s.out_shape)
            elif s.kind == "linear":
                x = ready(s.inputs[0])
                env[s.output] = be.linear_map(x, s.linear.matrix, s.linear.bias, s.out_shape, s.interval)
            elif s.kind == "activation":
                x = env[s.inputs[0]]
                if tfhe:
                    env[s.output] = be.reshape(be.lut(x, s.lut), s.out_shape)
                else:
                    env[s.output] = eval_poly_power_tree(be, x, s.poly.coeffs)
            elif s.kind == "elementwise":
                if s.plain is not None:
                    x = ready(s.inputs[0])
                    f = be.add_plain if s.op == "add" else be.mul_plain
                    env[s.output] = f(x, s.plain.reshape(x.shape))
                else:
                    a, b = ready(s.inputs[0]), ready(s.inputs[1])
                    env[s.output] = be.add_ct(a, b) if s.op == "add" else be.mul_ct(a, b)
            else:
                raise PlanError(f"unknown step kind {s.kind}")
        except DepthError as exc:
            raise DepthError(str(exc), node=s.name) from exc
        lv = _input_level(env[s.output])
        if lv is not None:
            rep.step_levels[s.name] = lv

    outs = [ready(e) for e in plan.graph_outputs]
    out = outs[0]
    rep.latency_s = time.perf_counter() - t0
    after = be.counters.snapshot()
    rep.flushes = after["flushes"] - before["flushes"]
    rep.quantizations = after["quantizations"] - before["quantizations"]
    rep.clamped = after["clamped"] - before["clamped"]
    if _input_level(ct_in) is not None:
        rep.levels_consumed = ct_in.level - out.level
    if tuple(out.shape) != tuple(plan.output_shapes[plan.graph_outputs[0]]):
        raise ShapeError(f"output shape {out.shape} != {plan.output_shapes[plan.graph_outputs[0]]}")
    return out, rep


def run_inference(plan: ExecutionPlan, ek, ct_in):
    """Evaluate the plan with an evaluation key; returns the output ciphertext."""
    be = backend_for(ek)
    if be.name != plan.backend:
        raise PlanError(f"plan built for {plan.backend}, key is {be.name}")
    out, _ = execute(plan, be, ct_in)
    return out


def relu_depths(plan: ExecutionPlan) -> dict[str, int]:
    return {s.name: poly_depth(s.poly.degree) for s in plan.steps if s.poly is not None}
