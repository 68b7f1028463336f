"""Small ONNX model builders for tests."""

from __future__ import annotations

import numpy as np
import onnx
from onnx import helper, numpy_helper


def make_model(nodes, inputs, outputs, inits=(), opset=13, value_info=()):
    """``inputs``/``outputs`` are (name, shape) pairs; ``inits`` maps name -> array."""
    inits = dict(inits)
    graph = helper.make_graph(
        nodes,
        "test",
        [helper.make_tensor_value_info(n, onnx.TensorProto.FLOAT, list(s)) for n, s in inputs],
        [helper.make_tensor_value_info(n, onnx.TensorProto.FLOAT, list(s) if s else None) for n, s in outputs],
        initializer=[numpy_helper.from_array(np.asarray(v), k) for k, v in inits.items()],
        value_info=list(value_info),
    )
    m = helper.make_model(graph, opset_imports=[helper.make_opsetid("", opset)])
    m.ir_version = 8
    return m.SerializeToString()


def single_node(op, x_shape, inits=(), extra_inputs=(), out_shape=None, **attrs):
    names = ["x"] + list(extra_inputs)
    node = helper.make_node(op, names, ["y"], name=op.lower(), **attrs)
    return make_model([node], [("x", x_shape)], [("y", out_shape)], inits)


def f32(a):
    return np.asarray(a, dtype=np.float32)
