import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import continuous_relu_ls

from heinfer.approx import (
    GRID_POINTS,
    Polynomial,
    eval_poly_reference,
    fit_relu_polynomial,
    poly_depth,
)
from heinfer.calibration import Interval
from heinfer.errors import ApproxError

TOL = 1e-6


def _close(a, b, tol=TOL):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) <= tol


def test_degree1_symmetric_closed_form():
    p = fit_relu_polynomial(Interval(-10, 10), 1)
    assert _close(p.coeffs, [2.5, 0.5])


def test_degree3_symmetric_closed_form():
    p = fit_relu_polynomial(Interval(-10, 10), 3)
    a = 10.0
    assert _close(p.coeffs, [3 * a / 32, 0.5, 15 / (32 * a), 0.0])
    assert _close(p.coeffs, [0.9375, 0.5, 0.046875, 0.0])


def test_nonnegative_domain_is_exact():
    p = fit_relu_polynomial(Interval(0, 5), 1)
    assert _close(p.coeffs, [0.0, 1.0], 1e-12)
    x = np.linspace(0, 5, 101)
    assert np.max(np.abs(p(x) - x)) < 1e-12


@pytest.mark.parametrize("degree", [3, 7])
def test_one_signed_narrow_domains_are_exact(degree):
    x = np.linspace(18.0, 18.01171875, 33)
    assert np.max(np.abs(fit_relu_polynomial(Interval(18.0, 18.01171875), degree)(x) - x)) == 0.0
    assert fit_relu_polynomial(Interval(-5.0, -4.0), degree).coeffs == (0.0,) * (degree + 1)
    assert fit_relu_polynomial(Interval(-5.0, 0.0), degree).coeffs == (0.0,) * (degree + 1)


@pytest.mark.parametrize("lo,hi", [(-10, 10), (-3, 7), (-0.5, 0.25), (-40, 2), (1, 9)])
@pytest.mark.parametrize("degree", [1, 3, 7])
def test_fit_matches_continuous_oracle(lo, hi, degree):
    p = fit_relu_polynomial(Interval(lo, hi), degree)
    ref = continuous_relu_ls(lo, hi, degree)
    # compare on the function level (monomial coefficients of wide domains are ill-scaled)
    x = np.linspace(lo, hi, 257)
    scale = max(abs(lo), abs(hi))
    assert np.max(np.abs(p(x) - np.polyval(ref[::-1], x))) <= TOL * scale
    if degree <= 3:
        tol = TOL * max(1.0, scale)
        assert _close(p.coeffs, ref, tol)


def test_unsupported_degree():
    for d in (0, 2, 5, 8):
        with pytest.raises(ApproxError):
            fit_relu_polynomial(Interval(-1, 1), d)
        with pytest.raises(ApproxError):
            poly_depth(d)


def test_poly_depth_values():
    assert [poly_depth(d) for d in (1, 3, 7)] == [1, 2, 3]


def test_eval_reference():
    p = Polynomial((2.5, 0.5), Interval(-10, 10))
    assert eval_poly_reference(p, 10.0) == 7.5
    q = Polynomial((1.25, -3.0, 0.5, 7.0), Interval(-1, 1))
    assert eval_poly_reference(q, 0.0) == 1.25
    z = Polynomial((0.0, 0.0, 0.0), Interval(-1, 1))
    assert eval_poly_reference(z, 123.0) == 0.0
    # outside the domain is evaluated, not clipped
    assert eval_poly_reference(p, 100.0) == 52.5


def test_polynomial_invariants():
    with pytest.raises(ApproxError):
        Polynomial(tuple(range(9)), Interval(-1, 1))
    with pytest.raises(ApproxError):
        Polynomial((1.0,), Interval(1, 1))
    p = fit_relu_polynomial(Interval(-2, 3), 3)
    assert Polynomial.from_dict(p.to_dict()) == p


def test_grid_size():
    assert GRID_POINTS == 4097


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1000.0))
def test_symmetric_odd_part_is_half_x(a):
    for degree in (3, 7):
        c = fit_relu_polynomial(Interval(-a, a), degree).coeffs
        assert abs(c[1] - 0.5) <= TOL
        for k in range(3, degree + 1, 2):
            assert abs(c[k]) * a ** (k - 1) <= TOL


def _residual(p, lo, hi):
    x = np.linspace(lo, hi, 20001)
    return float(np.mean((p(x) - np.maximum(x, 0)) ** 2))


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 100))
def test_residual_non_increasing_in_degree(lo, width):
    hi = lo + width
    r = [_residual(fit_relu_polynomial(Interval(lo, hi), d), lo, hi) for d in (1, 3, 7)]
    slack = 1e-9 * max(1.0, abs(lo), abs(hi)) ** 2
    assert r[0] + slack >= r[1] and r[1] + slack >= r[2]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 20), st.floats(0.05, 20), st.sampled_from([1, 3, 7]))
def test_scale_covariance(a, s, degree):
    # relu(s t) = s relu(t) for s > 0, so the fit on [-sa, sa] is x -> s * p_a(x / s)
    pa = fit_relu_polynomial(Interval(-a, a), degree)
    psa = fit_relu_polynomial(Interval(-s * a, s * a), degree)
    expected = [s * c / s**k for k, c in enumerate(pa.coeffs)]
    for k, (got, want) in enumerate(zip(psa.coeffs, expected)):
        # relative error per coefficient, measured against the coefficient's natural scale
        nat = max(abs(want), (s * a) ** (1 - k) * 1e-3)
        assert abs(got - want) <= TOL * nat
