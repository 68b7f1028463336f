"""ONNX ingestion: parse, validate, shape-infer and order a supported operator subset."""

from __future__ import annotations

import dataclasses
import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import onnx
from google.protobuf.message import DecodeError
from onnx import helper, numpy_helper

from .errors import GraphError, ParseError, ShapeError, UnsupportedModelError

SUPPORTED_OPS = frozenset(
    {"Add", "Mul", "MatMul", "Gemm", "Conv", "AveragePool", "Relu", "Pad", "Flatten", "Reshape"}
)
SHAPE_ONLY_OPS = frozenset({"Flatten", "Reshape"})

# Semantics of every supported operator are identical across these default-domain opsets.
SUPPORTED_OPSETS = range(13, 18)
EXPORT_OPSET = 13

# attribute name -> default, per operator; anything else is rejected by validation
_ATTR_DEFAULTS: dict[str, dict[str, Any]] = {
    "Add": {},
    "Mul": {},
    "MatMul": {},
    "Relu": {},
    "Gemm": {"alpha": 1.0, "beta": 1.0, "transA": 0, "transB": 0},
    "Conv": {
        "auto_pad": "NOTSET",
        "dilations": None,
        "group": 1,
        "kernel_shape": None,
        "pads": None,
        "strides": None,
    },
    "AveragePool": {
        "auto_pad": "NOTSET",
        "ceil_mode": 0,
        "count_include_pad": 0,
        "dilations": None,
        "kernel_shape": None,
        "pads": None,
        "strides": None,
    },
    "Pad": {"mode": "constant"},
    "Flatten": {"axis": 1},
    "Reshape": {"allowzero": 0},
}

# input positions that must be initializers (plaintext model data)
_CONST_INPUTS = {
    "Conv": (1, 2),
    "Gemm": (1, 2),
    "MatMul": (1,),
    "Pad": (1, 2),
    "Reshape": (1,),
}
_INT_INPUTS = {"Pad": (1,), "Reshape": (1,)}


@dataclass(frozen=True)
class TensorSpec:
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 1 for d in self.shape):
            raise ShapeError(f"non-positive extent in shape {self.shape}")

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)
    name: str = ""

    def attr(self, key: str):
        if key in self.attrs:
            return self.attrs[key]
        return _ATTR_DEFAULTS.get(self.op, {}).get(key)


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """Immutable operator graph.

    ``edges`` maps every edge id to its ``TensorSpec`` (``None`` until shapes are
    inferred); ``initializers`` hold float64 copies of all constant tensors.
    """

    nodes: tuple[Node, ...]
    edges: Mapping[str, TensorSpec | None]
    initializers: Mapping[str, np.ndarray]
    graph_inputs: tuple[str, ...]
    graph_outputs: tuple[str, ...]
    opset: int = EXPORT_OPSET
    name: str = "graph"

    def spec(self, edge: str) -> TensorSpec:
        s = self.edges.get(edge)
        if s is None:
            raise ShapeError(f"edge {edge!r} has no inferred shape")
        return s

    def is_const(self, edge: str) -> bool:
        return edge in self.initializers

    def producers(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for i, n in enumerate(self.nodes):
            for e in n.outputs:
                if e in out:
                    raise GraphError(f"edge {e!r} has more than one producer")
                out[e] = i
        return out

    def consumers(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {e: [] for e in self.edges}
        for i, n in enumerate(self.nodes):
            for e in n.inputs:
                if e:
                    out.setdefault(e, []).append(i)
        return out

    def activation_edges(self) -> list[str]:
        """Edges that carry data-dependent (encrypted) values."""
        out = list(self.graph_inputs)
        for n in self.nodes:
            out.extend(e for e in n.outputs if e not in out)
        return out


@dataclass
class UnsupportedReport:
    issues: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, where: str, reason: str):
        self.issues.append((where, reason))

    def __str__(self):
        if self.ok:
            return "model is supported"
        return "\n".join(f"unsupported: {w}: {r}" for w, r in self.issues)


def _attr_value(a: onnx.AttributeProto):
    v = helper.get_attribute_value(a)
    if isinstance(v, bytes):
        return v.decode()
    if isinstance(v, list):
        return tuple(x.decode() if isinstance(x, bytes) else x for x in v)
    if isinstance(v, onnx.TensorProto):
        return numpy_helper.to_array(v).astype(np.float64)
    return v


def _value_info_shape(vi: onnx.ValueInfoProto) -> tuple[int, ...] | None:
    if not vi.type.HasField("tensor_type") or not vi.type.tensor_type.HasField("shape"):
        return None
    dims = []
    for d in vi.type.tensor_type.shape.dim:
        if not d.HasField("dim_value") or d.dim_value <= 0:
            return None
        dims.append(d.dim_value)
    return tuple(dims)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def load_model(data: bytes) -> ModelGraph:
    """Parse serialized ONNX bytes into a :class:`ModelGraph` (no validation)."""
    proto = onnx.ModelProto()
    try:
        proto.ParseFromString(bytes(data))
    except (DecodeError, ValueError, TypeError) as exc:
        raise ParseError(f"malformed ONNX protobuf: {exc}") from exc
    if not proto.HasField("graph"):
        raise ParseError("ONNX model has no graph")
    g = proto.graph

    opset = 0
    for imp in proto.opset_import:
        if imp.domain in ("", "ai.onnx"):
            opset = imp.version

    inits: dict[str, np.ndarray] = {}
    try:
        for t in g.initializer:
            inits[t.name] = _frozen(numpy_helper.to_array(t))
    except Exception as exc:  # onnx raises assorted types for corrupt tensors
        raise ParseError(f"cannot decode initializer: {exc}") from exc

    nodes = []
    for i, n in enumerate(g.node):
        attrs = {a.name: _attr_value(a) for a in n.attribute}
        if n.op_type == "Constant" and n.domain in ("", "ai.onnx"):
            # constants are data; materialize them like initializers
            if "value" not in attrs or len(n.output) != 1:
                raise ParseError(f"unsupported Constant node {n.name or i}")
            inits[n.output[0]] = _frozen(attrs["value"])
            continue
        nodes.append(
            Node(
                op=n.op_type,
                inputs=tuple(n.input),
                outputs=tuple(n.output),
                attrs=attrs,
                name=n.name or f"{n.op_type}_{i}",
            )
        )

    edges: dict[str, TensorSpec | None] = {}
    graph_inputs = []
    for vi in g.input:
        if vi.name in inits:
            continue
        graph_inputs.append(vi.name)
        shape = _value_info_shape(vi)
        edges[vi.name] = TensorSpec(shape) if shape else None
    for name, arr in inits.items():
        edges[name] = TensorSpec(arr.shape) if arr.size else None
    known = {vi.name: _value_info_shape(vi) for vi in list(g.value_info) + list(g.output)}
    for n in nodes:
        for e in list(n.inputs) + list(n.outputs):
            if e and e not in edges:
                shape = known.get(e)
                edges[e] = TensorSpec(shape) if shape else None

    return ModelGraph(
        nodes=tuple(nodes),
        edges=edges,
        initializers=inits,
        graph_inputs=tuple(graph_inputs),
        graph_outputs=tuple(o.name for o in g.output),
        opset=opset,
        name=g.name or "graph",
    )


def load_model_file(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return load_model(fh.read())


def serialize_model(g: ModelGraph) -> bytes:
    """Inverse of :func:`load_model` on the supported subset."""
    int_edges = set()
    for n in g.nodes:
        for pos in _INT_INPUTS.get(n.op, ()):
            if pos < len(n.inputs) and n.inputs[pos]:
                int_edges.add(n.inputs[pos])

    inits = []
    for name, arr in g.initializers.items():
        if name in int_edges:
            a = arr.astype(np.int64)
        elif np.array_equal(arr.astype(np.float32).astype(np.float64), arr):
            a = arr.astype(np.float32)
        else:
            a = arr
        inits.append(numpy_helper.from_array(np.asarray(a), name))

    def vi(e):
        s = g.edges.get(e)
        return helper.make_tensor_value_info(e, onnx.TensorProto.FLOAT, list(s.shape) if s else None)

    nodes = [
        helper.make_node(n.op, list(n.inputs), list(n.outputs), name=n.name, **dict(n.attrs))
        for n in g.nodes
    ]
    graph = helper.make_graph(
        nodes,
        g.name,
        [vi(e) for e in g.graph_inputs],
        [vi(e) for e in g.graph_outputs],
        initializer=inits,
        value_info=[
            vi(e)
            for e, s in g.edges.items()
            if s is not None and e not in g.initializers and e not in g.graph_inputs
            and e not in g.graph_outputs
        ],
    )
    model = helper.make_model(
        graph, opset_imports=[helper.make_opsetid("", g.opset)], producer_name="heinfer"
    )
    model.ir_version = 8
    return model.SerializeToString()


def _spatial_attrs(n: Node, rank: int):
    k = n.attr("kernel_shape")
    strides = n.attr("strides") or (1,) * rank
    pads = n.attr("pads") or (0,) * (2 * rank)
    return tuple(k) if k is not None else None, tuple(strides), tuple(pads)


def validate_supported(g: ModelGraph) -> UnsupportedReport:
    """Collect every reason the graph cannot be executed homomorphically."""
    rep = UnsupportedReport()
    if g.opset not in SUPPORTED_OPSETS:
        rep.add(
            "<model>",
            f"opset {g.opset} not supported (accepted: {SUPPORTED_OPSETS.start}"
            f"-{SUPPORTED_OPSETS.stop - 1})",
        )
    if not g.graph_inputs:
        rep.add("<model>", "graph has no data inputs")
    for e in g.graph_inputs:
        s = g.edges.get(e)
        if s is None:
            rep.add(e, "graph input shape is not concrete")
        elif len(s.shape) == 0 or s.shape[0] != 1:
            rep.add(e, f"only batch size 1 is supported, got shape {s.shape}")

    for n in g.nodes:
        where = f"{n.name} ({n.op})"
        if n.op not in SUPPORTED_OPS:
            rep.add(where, f"operator {n.op} is not supported")
            continue
        unknown = set(n.attrs) - set(_ATTR_DEFAULTS[n.op])
        if unknown:
            rep.add(where, f"unsupported attributes {sorted(unknown)}")
        for pos in _CONST_INPUTS.get(n.op, ()):
            if pos < len(n.inputs) and n.inputs[pos] and not g.is_const(n.inputs[pos]):
                rep.add(where, f"input {pos} must be a model initializer")
        if n.op not in SHAPE_ONLY_OPS and n.inputs and all(
            g.is_const(e) for e in n.inputs if e
        ):
            rep.add(where, "node has only constant inputs (constant folding is not performed)")

        if n.op in ("Conv", "AveragePool"):
            if n.attr("auto_pad") not in ("NOTSET", "VALID"):
                rep.add(where, f"auto_pad={n.attr('auto_pad')} not supported")
            dil = n.attr("dilations")
            if dil is not None and any(d != 1 for d in dil):
                rep.add(where, f"dilations {tuple(dil)} != 1")
            k = n.attr("kernel_shape")
            if n.op == "AveragePool" and k is None:
                rep.add(where, "kernel_shape is required")
            if k is not None and len(k) != 2:
                rep.add(where, "only 2-D spatial kernels are supported")
            if n.op == "Conv" and len(n.inputs) > 1 and g.is_const(n.inputs[1]):
                if g.initializers[n.inputs[1]].ndim != 4:
                    rep.add(where, "only 2-D convolution weights are supported")
            if n.op == "AveragePool" and n.attr("ceil_mode"):
                rep.add(where, "ceil_mode=1 not supported")
        elif n.op == "Gemm":
            if n.attr("transA"):
                rep.add(where, "transA=1 not supported")
        elif n.op == "MatMul":
            if len(n.inputs) > 1 and g.is_const(n.inputs[1]):
                if g.initializers[n.inputs[1]].ndim != 2:
                    rep.add(where, "MatMul weight must be 2-D")
            if n.inputs and g.is_const(n.inputs[0]):
                rep.add(where, "MatMul with a constant left operand is not supported")
        elif n.op == "Pad":
            if n.attr("mode") != "constant":
                rep.add(where, f"pad mode {n.attr('mode')!r} not supported")
            if len(n.inputs) > 3 and n.inputs[3]:
                rep.add(where, "Pad axes input not supported")
            if len(n.inputs) > 1 and g.is_const(n.inputs[1]):
                if np.any(g.initializers[n.inputs[1]] < 0):
                    rep.add(where, "negative pads not supported")
            elif len(n.inputs) < 2:
                rep.add(where, "Pad requires a pads input")
        elif n.op == "Reshape":
            if n.attr("allowzero"):
                rep.add(where, "allowzero=1 not supported")
        elif n.op in ("Add", "Mul"):
            if len(n.inputs) != 2:
                rep.add(where, "expects exactly two inputs")
    return rep


def topo_order(g: ModelGraph) -> list[int]:
    """Indices of ``g.nodes`` in dependency order; ties broken by node index."""
    producers = g.producers()
    available = set(g.graph_inputs) | set(g.initializers)
    deps: list[set[int]] = []
    for i, n in enumerate(g.nodes):
        d = set()
        for e in n.inputs:
            if not e:
                continue
            if e in producers:
                d.add(producers[e])
            elif e not in available:
                raise GraphError(f"{n.name}: input edge {e!r} has no producer")
        if i in d:
            raise GraphError(f"{n.name}: node consumes its own output (cycle)")
        deps.append(d)

    waiting = [len(d) for d in deps]
    users: list[list[int]] = [[] for _ in g.nodes]
    for i, d in enumerate(deps):
        for j in d:
            users[j].append(i)
    ready = [i for i, w in enumerate(waiting) if w == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for u in users[i]:
            waiting[u] -= 1
            if waiting[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(g.nodes):
        stuck = [g.nodes[i].name for i in range(len(g.nodes)) if waiting[i] > 0]
        raise GraphError(f"graph contains a cycle through {stuck}")
    return order


def _pool_out(size, k, s, pb, pe, where):
    out = (size + pb + pe - k) // s + 1
    if out < 1:
        raise ShapeError(f"kernel {k} larger than padded input {size + pb + pe}", where)
    return out


def node_output_shape(g: ModelGraph, n: Node, shapes: Mapping[str, tuple[int, ...]]):
    """Standard ONNX shape rule for one supported node."""
    ins = [shapes[e] if e else None for e in n.inputs]
    x = ins[0]
    where = n.name
    if n.op == "Relu":
        return x
    if n.op in ("Add", "Mul"):
        try:
            return tuple(np.broadcast_shapes(ins[0], ins[1]))
        except ValueError as exc:
            raise ShapeError(f"cannot broadcast {ins[0]} with {ins[1]}", where) from exc
    if n.op == "Gemm":
        a, b = ins[0], ins[1]
        if len(a) != 2 or len(b) != 2:
            raise ShapeError(f"Gemm expects 2-D operands, got {a} and {b}", where)
        m, k = a
        kb, nn = (b[1], b[0]) if n.attr("transB") else b
        if k != kb:
            raise ShapeError(f"Gemm inner dimensions differ: {k} vs {kb}", where)
        if len(ins) > 2 and ins[2] is not None:
            try:
                if tuple(np.broadcast_shapes(ins[2], (m, nn))) != (m, nn):
                    raise ValueError
            except ValueError as exc:
                raise ShapeError(f"Gemm bias {ins[2]} not broadcastable to {(m, nn)}", where) from exc
        return (m, nn)
    if n.op == "MatMul":
        a, b = ins
        if len(b) != 2 or len(a) < 1 or a[-1] != b[0]:
            raise ShapeError(f"MatMul inner dimensions differ: {a} @ {b}", where)
        return tuple(a[:-1]) + (b[1],)
    if n.op in ("Conv", "AveragePool"):
        if len(x) != 4:
            raise ShapeError(f"expected NCHW input, got {x}", where)
        nb, c, h, w = x
        if n.op == "Conv":
            wshape = ins[1]
            k = tuple(n.attr("kernel_shape") or wshape[2:])
            if tuple(wshape[2:]) != k:
                raise ShapeError(f"kernel_shape {k} disagrees with weights {wshape}", where)
            group = n.attr("group")
            if c != wshape[1] * group or wshape[0] % group:
                raise ShapeError(
                    f"channel mismatch: input C={c}, weight {wshape}, group={group}", where
                )
            if len(ins) > 2 and ins[2] is not None and tuple(ins[2]) != (wshape[0],):
                raise ShapeError(f"bias shape {ins[2]} != ({wshape[0]},)", where)
            cout = wshape[0]
        else:
            k = tuple(n.attr("kernel_shape"))
            cout = c
        _, s, p = _spatial_attrs(n, 2)
        if n.attr("auto_pad") == "VALID":
            p = (0, 0, 0, 0)
        return (
            nb,
            cout,
            _pool_out(h, k[0], s[0], p[0], p[2], where),
            _pool_out(w, k[1], s[1], p[1], p[3], where),
        )
    if n.op == "Pad":
        pads = [int(v) for v in g.initializers[n.inputs[1]]]
        r = len(x)
        if len(pads) != 2 * r:
            raise ShapeError(f"pads length {len(pads)} != 2*rank {2 * r}", where)
        return tuple(x[i] + pads[i] + pads[i + r] for i in range(r))
    if n.op == "Flatten":
        axis = n.attr("axis")
        if axis < 0:
            axis += len(x)
        return (math.prod(x[:axis]), math.prod(x[axis:]))
    if n.op == "Reshape":
        target = [int(v) for v in g.initializers[n.inputs[1]]]
        out = [x[i] if d == 0 else d for i, d in enumerate(target)]
        total = math.prod(x)
        if out.count(-1) > 1:
            raise ShapeError("more than one -1 in Reshape target", where)
        if -1 in out:
            rest = math.prod(d for d in out if d != -1)
            if rest == 0 or total % rest:
                raise ShapeError(f"cannot reshape {x} to {target}", where)
            out[out.index(-1)] = total // rest
        if math.prod(out) != total:
            raise ShapeError(f"cannot reshape {x} to {target}", where)
        return tuple(out)
    raise ShapeError(f"no shape rule for {n.op}", where)


def infer_shapes(g: ModelGraph) -> ModelGraph:
    """Return a copy of ``g`` whose every edge carries a concrete TensorSpec."""
    shapes: dict[str, tuple[int, ...]] = {}
    for e in g.graph_inputs:
        s = g.edges.get(e)
        if s is None:
            raise ShapeError(f"graph input {e!r} has no concrete shape")
        shapes[e] = s.shape
    for e, a in g.initializers.items():
        shapes[e] = a.shape
    for i in topo_order(g):
        n = g.nodes[i]
        out = node_output_shape(g, n, shapes)
        declared = g.edges.get(n.outputs[0])
        if declared is not None and declared.shape != tuple(out):
            raise ShapeError(f"declared shape {declared.shape} != inferred {tuple(out)}", n.name)
        shapes[n.outputs[0]] = tuple(out)
    edges = dict(g.edges)
    for e, s in shapes.items():
        if e in edges or e in g.initializers:
            edges[e] = TensorSpec(s) if all(d > 0 for d in s) else edges.get(e)
    for e in g.graph_outputs:
        if e not in shapes:
            raise ShapeError(f"graph output {e!r} is never produced")
    return dataclasses.replace(g, edges=edges)


def prepare(data: bytes) -> ModelGraph:
    """load + validate + infer shapes; raises on unsupported models."""
    g = load_model(data)
    rep = validate_supported(g)
    if not rep.ok:
        raise UnsupportedModelError(rep)
    return infer_shapes(g)


LINEAR_OPS = frozenset({"Conv", "Gemm", "MatMul", "AveragePool"})


def single_consumer_chain(g: ModelGraph, edge: str) -> Node | None:
    """Follow ``edge`` through shape-only nodes while each edge has exactly one
    consumer; return the first non-shape-only consumer, or None."""
    consumers = g.consumers()
    seen = set()
    while edge not in seen:
        seen.add(edge)
        users = consumers.get(edge, [])
        if len(users) != 1 or edge in g.graph_outputs:
            return None
        n = g.nodes[users[0]]
        if n.op not in SHAPE_ONLY_OPS:
            return n if n.inputs and n.inputs[0] == edge else None
        edge = n.outputs[0]
    return None


def pad_is_folded(g: ModelGraph, node: Node) -> bool:
    """A Pad feeding (only) a linear operator is absorbed into that operator's matrix."""
    nxt = single_consumer_chain(g, node.outputs[0])
    return nxt is not None and nxt.op in LINEAR_OPS
