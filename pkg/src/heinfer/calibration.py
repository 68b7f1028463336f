"""Cleartext reference execution and per-edge value statistics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import reference
from .errors import CalibrationError, ShapeError
from .graph import ModelGraph, topo_order
from .tensorfile import TensorSet

DEGENERATE_EPS = 2.0**-20


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError(f"interval bounds must be finite, got [{lo}, {hi}]")
        if lo > hi:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all((x >= self.lo) & (x <= self.hi)))

    def widened(self) -> "Interval":
        """Symmetric widening of a zero-width interval; other intervals unchanged."""
        if self.lo < self.hi:
            return self
        eps = DEGENERATE_EPS * max(1.0, abs(self.lo))
        return Interval(self.lo - eps, self.hi + eps)

    def to_list(self):
        return [self.lo, self.hi]


@dataclass(frozen=True)
class DomainMethod:
    kind: str = "meanstd"
    k: float = 3.0

    def __post_init__(self):
        if self.kind not in ("minmax", "meanstd"):
            raise ValueError(f"unknown domain method {self.kind!r}")
        if not self.k > 0:
            raise ValueError("MeanStd k must be positive")

    @classmethod
    def parse(cls, text: str) -> "DomainMethod":
        """``minmax``, ``meanstd`` or ``meanstd:<k>``."""
        kind, _, k = text.strip().lower().partition(":")
        return cls(kind, float(k) if k else 3.0)

    def __str__(self):
        return "minmax" if self.kind == "minmax" else f"meanstd:{self.k:g}"


MIN_MAX = DomainMethod("minmax")
MEAN_STD = DomainMethod("meanstd", 3.0)


@dataclass
class EdgeStats:
    min: float = math.inf
    max: float = -math.inf
    mean: float = 0.0
    m2: float = 0.0
    count: int = 0

    @classmethod
    def of(cls, values) -> "EdgeStats":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return cls()
        mean = float(v.mean())
        return cls(float(v.min()), float(v.max()), mean, float(np.sum((v - mean) ** 2)), int(v.size))

    def merge(self, other: "EdgeStats") -> "EdgeStats":
        # pairwise update of Chan, Golub & LeVeque
        if other.count == 0:
            return EdgeStats(self.min, self.max, self.mean, self.m2, self.count)
        if self.count == 0:
            return EdgeStats(other.min, other.max, other.mean, other.m2, other.count)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        mean = min(max(mean, min(self.min, other.min)), max(self.max, other.max))
        return EdgeStats(min(self.min, other.min), max(self.max, other.max), mean, m2, n)

    def update(self, values) -> "EdgeStats":
        return self.merge(EdgeStats.of(values))

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(max(self.variance, 0.0))

    def to_dict(self):
        return {"min": self.min, "max": self.max, "mean": self.mean, "m2": self.m2, "count": self.count}

    @classmethod
    def from_dict(cls, d) -> "EdgeStats":
        return cls(float(d["min"]), float(d["max"]), float(d["mean"]), float(d["m2"]), int(d["count"]))


@dataclass
class CalibratedModel:
    graph: ModelGraph
    stats: dict[str, EdgeStats]
    samples: int = 0
    dataset_digest: str = ""
    meta: dict = field(default_factory=dict)

    def interval(self, edge: str, method: DomainMethod = MIN_MAX) -> Interval:
        return edge_interval(self, edge, method)


def _inputs_dict(g: ModelGraph, x) -> dict[str, np.ndarray]:
    if isinstance(x, Mapping):
        feeds = {k: np.asarray(v, dtype=np.float64) for k, v in x.items()}
    else:
        if len(g.graph_inputs) != 1:
            raise ShapeError(f"graph has {len(g.graph_inputs)} inputs; pass a mapping")
        feeds = {g.graph_inputs[0]: np.asarray(x, dtype=np.float64)}
    for name in g.graph_inputs:
        if name not in feeds:
            raise ShapeError(f"missing value for graph input {name!r}")
        spec = g.edges.get(name)
        if spec is not None:
            a = feeds[name]
            if a.shape != spec.shape:
                if a.size != spec.element_count:
                    raise ShapeError(f"input {name!r}: got shape {a.shape}, expected {spec.shape}")
                feeds[name] = a.reshape(spec.shape)
    return feeds


def cleartext_forward(g: ModelGraph, x):
    """Exact float64 forward pass.

    Returns ``(output, trace)`` where ``trace`` maps every edge (inputs,
    initializers and intermediates) to its value.  ``output`` is the array of the
    single graph output, or a dict when the graph has several outputs.
    """
    trace: dict[str, np.ndarray] = dict(g.initializers)
    trace.update(_inputs_dict(g, x))
    for i in topo_order(g):
        n = g.nodes[i]
        ins = [trace[e] if e else None for e in n.inputs]
        trace[n.outputs[0]] = reference.run_node(g, n, ins)
    outs = {e: trace[e] for e in g.graph_outputs}
    out = outs[g.graph_outputs[0]] if len(outs) == 1 else outs
    return out, trace


def _stats_for(g: ModelGraph, samples) -> dict[str, EdgeStats]:
    acc: dict[str, EdgeStats] = {}
    for s in samples:
        _, trace = cleartext_forward(g, s)
        for e, v in trace.items():
            acc[e] = acc.get(e, EdgeStats()).update(v)
    return acc


def calibrate(g: ModelGraph, data: TensorSet | list, workers: int = 1) -> CalibratedModel:
    """Aggregate per-edge statistics over every sample of ``data``.

    With ``workers > 1`` samples are split into contiguous chunks whose partial
    statistics are merged in order; results then match the sequential pass to
    floating-point rounding, not bit for bit.
    """
    if isinstance(data, TensorSet):
        samples = data.samples
        digest = data.digest()
    else:
        samples = list(data)
        digest = ""
    if not samples:
        raise CalibrationError("calibration dataset is empty")

    if workers > 1 and len(samples) > 1:
        chunks = np.array_split(np.arange(len(samples)), min(workers, len(samples)))
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda idx: _stats_for(g, [samples[i] for i in idx]), chunks))
        stats = parts[0]
        for p in parts[1:]:
            stats = {e: stats[e].merge(p[e]) for e in stats}
    else:
        stats = _stats_for(g, samples)

    missing = set(g.edges) - set(stats)
    if missing:
        raise CalibrationError(f"edges never evaluated: {sorted(missing)}")
    return CalibratedModel(g, {e: stats[e] for e in g.edges}, len(samples), digest)


def edge_interval(cm: CalibratedModel, edge: str, method: DomainMethod = MIN_MAX) -> Interval:
    st = cm.stats[edge]
    if method.kind == "minmax":
        iv = Interval(st.min, st.max)
    else:
        iv = Interval(st.mean - method.k * st.std, st.mean + method.k * st.std)
    return iv.widened()
