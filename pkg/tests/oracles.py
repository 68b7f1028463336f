"""Independent reference computations used only by the tests."""

from __future__ import annotations

from fractions import Fraction
from itertools import product

import numpy as np


def conv2d_loops(x, w, b=None, stride=(1, 1), pads=(0, 0, 0, 0), group=1):
    """Seven nested loops, no vectorization: (C,H,W) input, (M,C/g,kh,kw) weights."""
    c, h, wd = x.shape
    m, cg, kh, kw = w.shape
    pt, pl, pb, pr = pads
    ho = (h + pt + pb - kh) // stride[0] + 1
    wo = (wd + pl + pr - kw) // stride[1] + 1
    out = np.zeros((m, ho, wo))
    mg = m // group
    for oc, oy, ox in product(range(m), range(ho), range(wo)):
        acc = 0.0 if b is None else float(b[oc])
        g = oc // mg
        for ic, ky, kx in product(range(cg), range(kh), range(kw)):
            y = oy * stride[0] - pt + ky
            xx = ox * stride[1] - pl + kx
            if 0 <= y < h and 0 <= xx < wd:
                acc += w[oc, ic, ky, kx] * x[g * cg + ic, y, xx]
        out[oc, oy, ox] = acc
    return out


def _gauss_solve(a, rhs):
    n = len(rhs)
    a = [row[:] + [r] for row, r in zip(a, rhs)]
    for col in range(n):
        piv = next(r for r in range(col, n) if a[r][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col] / a[col][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
    return [a[i][n] / a[i][i] for i in range(n)]


def continuous_relu_ls(lo, hi, degree):
    """Exact L2 projection of ReLU onto polynomials of ``degree`` over [lo, hi], in rationals."""
    lo, hi = Fraction(lo), Fraction(hi)

    def integral(k, a, b):  # int_a^b x^k dx
        return (b ** (k + 1) - a ** (k + 1)) / (k + 1)

    gram = [[integral(i + j, lo, hi) for j in range(degree + 1)] for i in range(degree + 1)]
    a = max(lo, Fraction(0))
    rhs = [integral(i + 1, a, hi) if hi > a else Fraction(0) for i in range(degree + 1)]
    return [float(c) for c in _gauss_solve(gram, rhs)]


def longest_path(n_nodes, edges, cost, sources, sinks):
    """Brute-force maximum path weight by enumerating every source-to-sink path."""
    succ = {i: [] for i in range(n_nodes)}
    for a, b in edges:
        succ[a].append(b)
    best = 0

    def walk(v, acc):
        nonlocal best
        acc += cost[v]
        if v in sinks:
            best = max(best, acc)
        for u in succ[v]:
            walk(u, acc)

    for s in sources:
        walk(s, 0)
    return best


def two_pass_stats(values):
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    mean = sum(v.tolist()) / len(v)
    var = sum((x - mean) ** 2 for x in v.tolist()) / len(v)
    return float(v.min()), float(v.max()), mean, var
