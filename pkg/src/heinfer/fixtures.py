"""Random-weight networks with the evaluation architectures, exported as ONNX."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import onnx
from onnx import helper, numpy_helper

from .graph import EXPORT_OPSET, ModelGraph, prepare
from .tensorfile import TensorSet

FIXTURE_NAMES = ("CryptoNets", "LeNet5", "MobileFaceNetsClassifier")
_ALIASES = {n.lower(): n for n in FIXTURE_NAMES} | {"lenet-5": "LeNet5", "mobilefacenets": "MobileFaceNetsClassifier"}

# published trainable-parameter counts of the three networks
EXPECTED_PARAMS = {"CryptoNets": 52722, "LeNet5": 61706, "MobileFaceNetsClassifier": 56960}
BIAS_STD = 0.1


@dataclass(frozen=True)
class Fixture:
    name: str
    seed: int
    onnx_bytes: bytes
    graph: ModelGraph
    calibration: TensorSet

    @property
    def input_name(self) -> str:
        return self.graph.graph_inputs[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.graph.spec(self.input_name).shape

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.graph.initializers.values() if a.dtype.kind == "f")

    def sample_inputs(self, n: int, seed: int) -> list[np.ndarray]:
        """Fresh inputs from the calibration distribution (uniform on [0, 1])."""
        rng = np.random.default_rng(seed)
        return [rng.uniform(0.0, 1.0, self.input_shape) for _ in range(n)]


def canonical_name(name: str) -> str:
    key = name.lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown fixture {name!r}; choose one of {', '.join(FIXTURE_NAMES)}")
    return _ALIASES[key]


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes = []
        self.inits = []
        self.count = 0

    def _weight(self, name, shape, fan_in):
        w = self.rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape).astype(np.float32)
        self.inits.append(numpy_helper.from_array(w, name))
        return name

    def _bias(self, name, n):
        b = self.rng.normal(0.0, BIAS_STD, (n,)).astype(np.float32)
        self.inits.append(numpy_helper.from_array(b, name))
        return name

    def node(self, op, inputs, **attrs):
        self.count += 1
        out = f"{op.lower()}{self.count}_out"
        self.nodes.append(helper.make_node(op, inputs, [out], name=f"{op.lower()}{self.count}", **attrs))
        return out

    def conv(self, x, cin, cout, k, stride=1, group=1, bias=True):
        i = self.count + 1
        w = self._weight(f"conv{i}_w", (cout, cin // group, k, k), (cin // group) * k * k)
        ins = [x, w] + ([self._bias(f"conv{i}_b", cout)] if bias else [])
        return self.node("Conv", ins, kernel_shape=[k, k], strides=[stride, stride], group=group)

    def fc(self, x, cin, cout):
        i = self.count + 1
        w = self._weight(f"fc{i}_w", (cout, cin), cin)
        b = self._bias(f"fc{i}_b", cout)
        return self.node("Gemm", [x, w, b], transB=1)

    def model(self, name, x_shape, out, out_shape) -> bytes:
        graph = helper.make_graph(
            self.nodes,
            name,
            [helper.make_tensor_value_info("input", onnx.TensorProto.FLOAT, list(x_shape))],
            [helper.make_tensor_value_info(out, onnx.TensorProto.FLOAT, list(out_shape))],
            initializer=self.inits,
        )
        m = helper.make_model(graph, opset_imports=[helper.make_opsetid("", EXPORT_OPSET)],
                              producer_name="heinfer.fixtures")
        m.ir_version = 8
        onnx.checker.check_model(m)
        return m.SerializeToString()


def _cryptonets(b: _Builder) -> bytes:
    h = b.conv("input", 1, 4, 5, stride=3)
    h = b.node("Relu", [h])
    h = b.node("Flatten", [h])
    h = b.fc(h, 400, 128)
    h = b.node("Relu", [h])
    h = b.fc(h, 128, 10)
    return b.model("CryptoNets", (1, 1, 32, 32), h, (1, 10))


def _lenet5(b: _Builder) -> bytes:
    h = b.conv("input", 1, 6, 5)
    h = b.node("Relu", [h])
    h = b.node("AveragePool", [h], kernel_shape=[2, 2], strides=[2, 2])
    h = b.conv(h, 6, 16, 5)
    h = b.node("Relu", [h])
    h = b.node("AveragePool", [h], kernel_shape=[2, 2], strides=[2, 2])
    h = b.conv(h, 16, 120, 5)
    h = b.node("Relu", [h])
    h = b.node("Flatten", [h])
    h = b.fc(h, 120, 84)
    h = b.node("Relu", [h])
    h = b.fc(h, 84, 10)
    return b.model("LeNet5", (1, 1, 32, 32), h, (1, 10))


def _mobilefacenets(b: _Builder) -> bytes:
    h = b.conv("input", 320, 320, 7, group=320)
    h = b.conv(h, 320, 128, 1, bias=False)
    return b.model("MobileFaceNetsClassifier", (1, 320, 7, 7), h, (1, 128, 1, 1))


_BUILDERS = {"CryptoNets": _cryptonets, "LeNet5": _lenet5, "MobileFaceNetsClassifier": _mobilefacenets}


def build_fixture(name: str, seed: int = 0, calibration_samples: int = 100) -> Fixture:
    """Build ``name`` with weights drawn from ``seed``.

    Weights are N(0, 1/fan_in) so post-linear activations stay near unit
    scale; biases are N(0, 0.01).  The calibration set draws inputs uniformly
    from [0, 1] with an independent stream of the same seed.
    """
    name = canonical_name(name)
    ss = np.random.SeedSequence([seed, FIXTURE_NAMES.index(name)])
    w_seed, c_seed = ss.spawn(2)
    data = _BUILDERS[name](_Builder(np.random.default_rng(w_seed)))
    g = prepare(data)
    shape = g.spec(g.graph_inputs[0]).shape
    rng = np.random.default_rng(c_seed)
    cal = TensorSet.single(g.graph_inputs[0],
                           [rng.uniform(0.0, 1.0, shape).astype(np.float32) for _ in range(calibration_samples)])
    return Fixture(name, seed, data, g, cal)
