"""Univariate functions that a programmable bootstrap can evaluate as a lookup table."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class UnivariateFn:
    tag: str
    args: tuple = ()

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.tag == "relu":
            return np.maximum(x, 0.0)
        if self.tag == "identity":
            return x.copy()
        if self.tag == "affine":
            a, b = self.args
            return a * x + b
        if self.tag == "poly":
            acc = np.zeros_like(x)
            for c in reversed(self.args):
                acc = acc * x + c
            return acc
        if self.tag == "table":
            lo, hi, samples = self.args
            samples = np.asarray(samples)
            n = len(samples)
            if hi == lo:
                return np.full_like(x, samples[0])
            idx = np.clip(np.rint((x - lo) / (hi - lo) * (n - 1)), 0, n - 1).astype(np.int64)
            return samples[idx]
        if self.tag == "compose":
            for f in self.args:
                x = f(x)
            return x
        raise ValueError(f"unknown univariate function {self.tag!r}")


def relu() -> UnivariateFn:
    return UnivariateFn("relu")


def identity() -> UnivariateFn:
    return UnivariateFn("identity")


def affine(a: float, b: float) -> UnivariateFn:
    return UnivariateFn("affine", (float(a), float(b)))


def poly(coeffs) -> UnivariateFn:
    return UnivariateFn("poly", tuple(float(c) for c in coeffs))


def table(lo: float, hi: float, samples) -> UnivariateFn:
    return UnivariateFn("table", (float(lo), float(hi), tuple(float(s) for s in samples)))


def compose(*fns: UnivariateFn) -> UnivariateFn:
    """``compose(f, g)(x) == g(f(x))``."""
    return UnivariateFn("compose", tuple(fns))
