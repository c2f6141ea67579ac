import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phg import (AnalyticGerm, IndexMonoidError, InputError, PhgSeries,
                 SpectralMismatchError, build_index_set, circle_model,
                 compose_analytic, integrate_monomial, point_model)

P = point_model()


def mono(e, j, val, trunc=math.inf, model=P):
    coeff = np.zeros(model.L)
    coeff[0] = val
    return PhgSeries.monomial(model, e, j, coeff, truncation=trunc)


# -- add ---------------------------------------------------------------------

def test_add_cancellation_prunes():
    s = mono(1.0, 0, 1.0) + mono(1.0, 0, -1.0)
    assert s.is_zero()


def test_add_disjoint_keys():
    s = mono(1.0, 1, 1.0) + mono(1.0, 0, 1.0)
    assert [(e, j) for e, j, _ in s.terms] == [(1.0, 1), (1.0, 0)]


def test_add_like_terms():
    s = mono(2.0, 0, 2.0) + mono(2.0, 0, 3.0)
    assert len(s) == 1
    assert s.coefficient(2.0, 0)[0] == 5.0


def test_add_mismatched_models():
    c = circle_model(modes=3)
    with pytest.raises(SpectralMismatchError):
        mono(1.0, 0, 1.0).add(PhgSeries.zero(c))


# -- multiply ----------------------------------------------------------------

def test_multiply_exponent_addition():
    s = mono(1.0, 0, 1.0).multiply(mono(1.0, 1, 1.0))
    assert [(e, j) for e, j, _ in s.terms] == [(2.0, 1)]
    assert s.coefficient(2.0, 1)[0] == pytest.approx(1.0, abs=1e-15)


def test_multiply_identity_constant_one():
    one = PhgSeries.constant(P, 1.0)
    s = mono(1.5, 2, 0.7) + mono(2.0, 0, -0.3)
    prod = one.multiply(s)
    assert prod.allclose(s, rtol=1e-14)


def test_multiply_point_model_scalars():
    a, b = 0.7, -1.3
    prod = mono(1.0, 0, a).multiply(mono(1.0, 0, b))
    assert prod.coefficient(2.0, 0)[0] == pytest.approx(a * b, rel=1e-15)


def test_multiply_validates_against_index_set():
    idx = build_index_set(P, 4.0)  # integers only
    ok = mono(1.0, 0, 1.0).multiply(mono(2.0, 0, 1.0), index_set=idx)
    assert ok.coefficient(3.0, 0)[0] == 1.0
    with pytest.raises(IndexMonoidError):
        mono(1.5, 0, 1.0).multiply(mono(1.0, 0, 1.0), index_set=idx)


def test_multiply_truncation_drops_high_orders():
    s = mono(2.0, 0, 1.0, trunc=3.0).multiply(mono(2.0, 0, 1.0, trunc=3.0))
    assert s.is_zero()


# -- the cusp operator N -----------------------------------------------------

def test_apply_n_kills_x_log_x():
    # N(x log x) = (3/2) x: the indicial factor vanishes at i=1
    s = mono(1.0, 1, 1.0).apply_n()
    assert [(e, j) for e, j, _ in s.terms] == [(1.0, 0)]
    assert s.coefficient(1.0, 0)[0] == pytest.approx(1.5, rel=1e-15)


def test_apply_n_constant():
    s = PhgSeries.constant(P, 2.0).apply_n()
    assert s.coefficient(0.0, 0)[0] == pytest.approx(-2.0, rel=1e-15)


def test_apply_n_cubic():
    s = mono(3.0, 0, 1.0).apply_n()
    assert s.coefficient(3.0, 0)[0] == pytest.approx(5.0, rel=1e-15)


def _fd_n(fn, x, h):
    """N f = x^2 f''/2 + x f' - f by 4th-order central differences."""
    f = [fn(x + k * h) for k in (-2, -1, 0, 1, 2)]
    d1 = (-f[4] + 8 * f[3] - 8 * f[1] + f[0]) / (12 * h)
    d2 = (-f[4] + 16 * f[3] - 30 * f[2] + 16 * f[1] - f[0]) / (12 * h * h)
    return 0.5 * x * x * d2 + x * d1 - f[2]


def test_apply_n_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(50):
        e = rng.uniform(0, 6)
        j = rng.integers(0, 5)
        s = mono(e, int(j), 1.0)
        ns = s.apply_n()
        for x in (0.3, 0.1, 0.03):
            sym = ns.evaluate(np.array([x]))[0, 0]
            num = _fd_n(lambda t: s.evaluate(np.array([t]))[0, 0], x, x * 1e-2)
            scale = max(abs(sym), abs(num), 1.0)
            assert abs(sym - num) / scale < 1e-6


# -- Laplacian ---------------------------------------------------------------

def test_laplacian_annihilates_constants():
    c = circle_model(modes=5)
    s = PhgSeries.constant(c, 3.0).apply_laplacian()
    assert s.is_zero()


def test_laplacian_point_model_identically_zero():
    assert mono(1.0, 1, 2.0).apply_laplacian().is_zero()


def test_laplacian_eigenmode():
    c = circle_model(modes=5)
    e3 = np.zeros(5)
    e3[3] = 1.0  # eigenvalue 4
    s = PhgSeries.monomial(c, 1.0, 0, e3).apply_laplacian()
    assert s.coefficient(1.0, 0)[3] == pytest.approx(-4.0, rel=1e-15)


# -- analytic composition ------------------------------------------------------

def test_compose_identity_germ():
    s = mono(1.0, 1, 0.4, trunc=4.0) + mono(2.0, 0, -0.2, trunc=4.0)
    assert compose_analytic(AnalyticGerm.identity(), s).allclose(s)


def test_compose_mercator_series():
    a = 0.5
    s = mono(1.0, 0, a, trunc=3.0)
    g = compose_analytic(AnalyticGerm.log1p(), s)
    assert g.coefficient(1.0, 0)[0] == pytest.approx(a)
    assert g.coefficient(2.0, 0)[0] == pytest.approx(-a * a / 2)
    assert g.coefficient(3.0, 0)[0] == pytest.approx(a ** 3 / 3)


def test_compose_exp_log_roundtrip():
    s = mono(1.0, 1, 0.3, trunc=4.0) + mono(1.5, 0, -0.8, trunc=4.0)
    g = compose_analytic(AnalyticGerm.log1p(), s)
    back = compose_analytic(AnalyticGerm.expm1(), g)
    assert back.allclose(s, rtol=1e-12)


def test_compose_quadratic_error_contract():
    for germ in (AnalyticGerm.log1p(), AnalyticGerm.expm1(),
                 AnalyticGerm.from_coefficients([1.0, 0.25, -2.0])):
        s = mono(1.0, 0, 0.7, trunc=5.0) + mono(1.5, 1, -0.2, trunc=5.0)
        diff = compose_analytic(germ, s) - s
        assert diff.min_exponent() >= 2 * s.min_exponent() - 1e-12


def test_compose_rejects_constant_term():
    s = PhgSeries.constant(P, 1.0, truncation=2.0) + mono(1.0, 0, 1.0, trunc=2.0)
    with pytest.raises(InputError):
        compose_analytic(AnalyticGerm.log1p(), s)


def test_compose_rejects_bad_derivative():
    with pytest.raises(InputError):
        compose_analytic(AnalyticGerm.from_coefficients([2.0]),
                         mono(1.0, 0, 1.0, trunc=2.0))


# -- monomial integration --------------------------------------------------------

def test_integrate_pure_log_power_zero():
    assert integrate_monomial(0, 0) == [(0, 1, Fraction(1))]


def test_integrate_log_squared():
    assert integrate_monomial(0, 2) == [(0, 3, Fraction(1, 3))]


def test_integrate_by_parts_case():
    # antiderivative of (log x): x log x - x
    assert integrate_monomial(1, 1) == [(1, 1, Fraction(1)), (1, 0, Fraction(-1))]


@pytest.mark.parametrize("a,j", [(1, 0), (2, 3), (Fraction(3, 2), 2), (5, 4)])
def test_integrate_right_inverse_exact(a, j):
    # applying x d/dx to the antiderivative of x^(a-1)(log x)^j and dividing
    # by x^a must reproduce (log x)^j exactly, in rational arithmetic
    terms = integrate_monomial(a, j)
    derived = {}
    for e, m, c in terms:
        derived[m] = derived.get(m, Fraction(0)) + Fraction(a) * c
        if m >= 1:
            derived[m - 1] = derived.get(m - 1, Fraction(0)) + m * c
    derived = {m: c for m, c in derived.items() if c != 0}
    assert derived == {j: Fraction(1)}


def test_integrate_float_path():
    terms = integrate_monomial(1.5, 1)
    x = 0.37
    val = sum(float(c) * x ** float(e) * math.log(x) ** m for e, m, c in terms)
    # quadrature oracle after t = u^4 (integrand 16 u^5 log u, 5 smooth
    # derivatives at 0, so Gauss-Legendre converges fast)
    from numpy.polynomial.legendre import leggauss
    nodes, weights = leggauss(120)
    r = x ** 0.25
    u = r / 2 * (nodes + 1)
    quad = np.sum(weights * r / 2 * 16 * u ** 5 * np.log(u))
    assert val == pytest.approx(quad, rel=1e-9)


# -- ring laws (property-based) ---------------------------------------------------

coeffs = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False)
exps = st.sampled_from([0.0, 1.0, 1.5, 2.0, 2.5, 3.0])
logps = st.integers(min_value=0, max_value=2)
term_lists = st.lists(st.tuples(exps, logps, coeffs), min_size=0, max_size=4)


def build(ts, trunc=6.0):
    return PhgSeries(P, [(e, j, np.array([c])) for e, j, c in ts], trunc)


@settings(max_examples=60, deadline=None)
@given(term_lists, term_lists)
def test_ring_add_commutes(ta, tb):
    a, b = build(ta), build(tb)
    assert (a + b).allclose(b + a, rtol=1e-13)


@settings(max_examples=60, deadline=None)
@given(term_lists, term_lists)
def test_ring_multiply_commutes(ta, tb):
    a, b = build(ta), build(tb)
    assert a.multiply(b).allclose(b.multiply(a), rtol=1e-13)


@settings(max_examples=40, deadline=None)
@given(term_lists, term_lists, term_lists)
def test_ring_associativity(ta, tb, tc):
    a, b, c = build(ta), build(tb), build(tc)
    left = a.multiply(b).multiply(c)
    right = a.multiply(b.multiply(c))
    assert left.allclose(right, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(term_lists, term_lists, term_lists)
def test_ring_distributivity(ta, tb, tc):
    a, b, c = build(ta), build(tb), build(tc)
    assert a.multiply(b + c).allclose(a.multiply(b) + a.multiply(c), rtol=1e-12)


# -- structure and serialization ---------------------------------------------------

def test_terms_sorted_exponent_then_logpow_desc():
    s = build([(2.0, 0, 1.0), (1.0, 0, 1.0), (1.0, 2, 1.0), (2.0, 1, 1.0)])
    assert [(e, j) for e, j, _ in s.terms] == [(1.0, 2), (1.0, 0), (2.0, 1), (2.0, 0)]


def test_nearby_exponents_merge():
    s = PhgSeries(P, [(1.0, 0, np.array([1.0])), (1.0 + 2e-10, 0, np.array([1.0]))])
    assert len(s) == 1
    assert s.coefficient(1.0, 0)[0] == 2.0


def test_negative_exponent_rejected():
    with pytest.raises(InputError):
        mono(-0.5, 0, 1.0)


def test_series_immutable():
    s = mono(1.0, 0, 1.0)
    with pytest.raises(ValueError):
        s.terms[0][2][0] = 5.0


def test_json_round_trip_bit_exact():
    rng = np.random.default_rng(3)
    c = circle_model(modes=4)
    terms = [(float(rng.uniform(0, 3)), int(rng.integers(0, 3)), rng.standard_normal(4))
             for _ in range(5)]
    s = PhgSeries(c, terms, truncation=2.75)
    doc = s.to_json_dict()
    back = PhgSeries.from_json_dict(c, doc)
    assert back.truncation == s.truncation
    assert len(back) == len(s)
    for (e1, j1, c1), (e2, j2, c2) in zip(s.terms, back.terms):
        assert e1 == e2 and j1 == j2
        assert np.array_equal(c1, c2)  # bit-exact
    # and through an actual JSON encode/decode cycle
    import json
    again = PhgSeries.from_json_dict(c, json.loads(json.dumps(doc)))
    for (e1, j1, c1), (e2, j2, c2) in zip(s.terms, again.terms):
        assert e1 == e2 and j1 == j2 and np.array_equal(c1, c2)


def test_json_infinite_truncation_is_null():
    s = mono(1.0, 0, 1.0)
    doc = s.to_json_dict()
    assert doc["truncation"] is None
    assert math.isinf(PhgSeries.from_json_dict(P, doc).truncation)


def test_evaluate_per_mode_values():
    c = circle_model(modes=3)
    vec = np.array([0.5, -1.0, 2.0])
    s = PhgSeries.monomial(c, 2.0, 1, vec)
    x = np.array([0.1, 0.2])
    vals = s.evaluate(x)
    expect = vec[:, None] * (x ** 2 * np.log(x))[None, :]
    np.testing.assert_allclose(vals, expect, rtol=1e-15)
