"""Least-squares polynomial surrogates for ReLU."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial as _NpPoly
from numpy.polynomial import legendre

from .calibration import Interval
from .errors import ApproxError

GRID_POINTS = 4097
SUPPORTED_DEGREES = (1, 3, 7)


@dataclass(frozen=True)
class Polynomial:
    coeffs: tuple[float, ...]  # ascending degree
    domain: Interval

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if len(self.coeffs) > 8:
            raise ApproxError("polynomial degree above 7")
        if not self.domain.lo < self.domain.hi:
            raise ApproxError(f"degenerate domain {self.domain}")

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, x):
        return eval_poly_reference(self, x)

    def to_dict(self):
        return {"coeffs": list(self.coeffs), "domain": self.domain.to_list()}

    @classmethod
    def from_dict(cls, d) -> "Polynomial":
        return cls(tuple(d["coeffs"]), Interval(*d["domain"]))


def _simpson_weights(m: int) -> np.ndarray:
    w = np.ones(m)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w


def relu(x):
    return np.maximum(x, 0.0)


def fit_relu_polynomial(domain: Interval, degree: int, grid_points: int = GRID_POINTS) -> Polynomial:
    """Least-squares fit of ReLU on ``domain``; coefficients returned in the monomial basis.

    The residual is weighted with composite Simpson weights over a uniform grid,
    so the discrete problem reproduces the continuous L2 fit on the interval.
    """
    if degree not in SUPPORTED_DEGREES:
        raise ApproxError(f"degree must be one of {SUPPORTED_DEGREES}, got {degree}")
    if grid_points < 3 or grid_points % 2 == 0:
        raise ApproxError("grid_points must be odd and >= 3")
    if not domain.lo < domain.hi:
        raise ApproxError(f"degenerate domain {domain}")

    # one-signed domains: ReLU is itself a polynomial there, and the monomial
    # conversion below is badly conditioned for narrow intervals far from zero
    if domain.lo >= 0.0 or domain.hi <= 0.0:
        coeffs = np.zeros(degree + 1)
        coeffs[1] = 1.0 if domain.lo >= 0.0 else 0.0
        return Polynomial(tuple(coeffs), domain)

    center = 0.5 * (domain.lo + domain.hi)
    half = 0.5 * (domain.hi - domain.lo)
    t = np.linspace(-1.0, 1.0, grid_points)
    x = center + half * t
    y = relu(x)
    w = _simpson_weights(grid_points)

    V = legendre.legvander(t, degree)
    gram = V.T @ (w[:, None] * V)
    rhs = V.T @ (w * y)
    c_leg = np.linalg.solve(gram, rhs)

    # Legendre series in t -> monomials in t -> substitute t = (x - center) / half
    in_t = _NpPoly(legendre.leg2poly(c_leg))
    in_x = in_t(_NpPoly([-center / half, 1.0 / half]))
    coeffs = np.zeros(degree + 1)
    coeffs[: len(in_x.coef)] = in_x.coef
    return Polynomial(tuple(coeffs), domain)


def poly_depth(degree: int) -> int:
    """Multiplicative depth of evaluating a degree-``degree`` polynomial with a power tree."""
    if degree not in SUPPORTED_DEGREES:
        raise ApproxError(f"degree must be one of {SUPPORTED_DEGREES}, got {degree}")
    return math.ceil(math.log2(degree + 1))


def eval_poly_reference(p: Polynomial, x):
    """Horner evaluation; no clipping outside the fitted domain."""
    x = np.asarray(x, dtype=np.float64)
    acc = np.zeros_like(x)
    for c in reversed(p.coeffs):
        acc = acc * x + c
    return acc if acc.ndim else float(acc)
