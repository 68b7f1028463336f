"""Direct float64 kernels for cleartext evaluation of the supported operators.

These are written independently of the matrix lowering in :mod:`heinfer.lowering`
so that they can act as its oracle.
"""

import numpy as np

from .errors import ShapeError
from .graph import node_output_shape


def _spatial(node, default_k=None):
    k = node.attr("kernel_shape") or default_k
    strides = tuple(node.attr("strides") or (1, 1))
    pads = tuple(node.attr("pads") or (0, 0, 0, 0))
    if node.attr("auto_pad") == "VALID":
        pads = (0, 0, 0, 0)
    return tuple(k), strides, pads


def _windows(xp, kh, kw, sh, sw, ho, wo):
    """Yield (i, j, view) for every kernel offset; view is (N, C, ho, wo)."""
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]


def conv2d(x, w, b=None, strides=(1, 1), pads=(0, 0, 0, 0), group=1):
    n, c, h, wd = x.shape
    m, cg, kh, kw = w.shape
    if c != cg * group or m % group:
        raise ShapeError(f"conv channel mismatch: x {x.shape}, w {w.shape}, group {group}")
    sh, sw = strides
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    ho = (h + pads[0] + pads[2] - kh) // sh + 1
    wo = (wd + pads[1] + pads[3] - kw) // sw + 1
    mg = m // group
    wg = w.reshape(group, mg, cg, kh, kw)
    out = np.zeros((n, group, mg, ho, wo))
    for i, j, view in _windows(xp, kh, kw, sh, sw, ho, wo):
        v = view.reshape(n, group, cg, ho, wo)
        out += np.einsum("ngchw,gmc->ngmhw", v, wg[:, :, :, i, j])
    out = out.reshape(n, m, ho, wo)
    if b is not None:
        out += np.asarray(b).reshape(1, m, 1, 1)
    return out


def average_pool(x, kernel, strides, pads=(0, 0, 0, 0), count_include_pad=False):
    n, c, h, wd = x.shape
    kh, kw = kernel
    sh, sw = strides
    ho = (h + pads[0] + pads[2] - kh) // sh + 1
    wo = (wd + pads[1] + pads[3] - kw) // sw + 1
    padding = ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3]))
    xp = np.pad(x, padding)
    mask = np.pad(np.ones((1, 1, h, wd)), padding)
    total = np.zeros((n, c, ho, wo))
    count = np.zeros((1, 1, ho, wo))
    for _, _, view in _windows(xp, kh, kw, sh, sw, ho, wo):
        total += view
    for _, _, view in _windows(mask, kh, kw, sh, sw, ho, wo):
        count += view
    if count_include_pad:
        return total / (kh * kw)
    return total / count


def pad(x, pads, value=0.0):
    r = x.ndim
    widths = [(int(pads[i]), int(pads[i + r])) for i in range(r)]
    return np.pad(x, widths, constant_values=value)


def gemm(a, b, c=None, alpha=1.0, beta=1.0, trans_b=False):
    y = alpha * (a @ (b.T if trans_b else b))
    if c is not None:
        y = y + beta * c
    return y


def run_node(g, node, inputs):
    """Evaluate one node on float64 arrays; returns the output array."""
    x = inputs[0]
    op = node.op
    if op == "Relu":
        return np.maximum(x, 0.0)
    if op == "Add":
        return inputs[0] + inputs[1]
    if op == "Mul":
        return inputs[0] * inputs[1]
    if op == "MatMul":
        return x @ inputs[1]
    if op == "Gemm":
        c = inputs[2] if len(inputs) > 2 else None
        return gemm(x, inputs[1], c, node.attr("alpha"), node.attr("beta"), bool(node.attr("transB")))
    if op == "Conv":
        w = inputs[1]
        _, s, p = _spatial(node, w.shape[2:])
        b = inputs[2] if len(inputs) > 2 else None
        return conv2d(x, w, b, s, p, node.attr("group"))
    if op == "AveragePool":
        k, s, p = _spatial(node)
        return average_pool(x, k, s, p, bool(node.attr("count_include_pad")))
    if op == "Pad":
        value = float(inputs[2].reshape(-1)[0]) if len(inputs) > 2 and inputs[2] is not None else 0.0
        return pad(x, inputs[1].astype(np.int64), value)
    if op in ("Flatten", "Reshape"):
        shapes = {e: np.shape(v) for e, v in zip(node.inputs, inputs) if e}
        return x.reshape(node_output_shape(g, node, shapes))
    raise ShapeError(f"no reference kernel for {op}", node.name)
