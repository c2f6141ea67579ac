import math

import numpy as np
import pytest

import phg
from phg import (ConvergenceError, InputError, ModelProblem,
                 NonIntegrableForcing, PhgSeries, build_index_set,
                 characteristic_roots, circle_model, formal_expansion,
                 integrate_monomial, make_source, point_model)
from phg.formal import FormalSolution
from phg.modeode import (Grid, ModeSolution, average_theta, fit_remainder,
                         picard_solve, solve_mode_ode, substitution_residual,
                         theta_average_modes)

G512 = Grid.geometric(0.1, 1e-6, 512)


def antiderivative_value(alpha, p, t):
    """Closed-form antiderivative of  s^(alpha-1) (log s)^p  at s = t."""
    return sum(float(c) * t ** float(e) * math.log(t) ** m
               for e, m, c in integrate_monomial(alpha, p))


def closed_form_mode_solution(lam, a, p, datum, grid):
    """Independent oracle: the bounded-solution formula with its integrals of
    x^(a-1-m) (log x)^p evaluated symbolically via integrate_monomial."""
    r = characteristic_roots(lam)
    mb, mu = r.m_bar, r.m_under
    x0 = grid.x0
    x = grid.points

    def int_under(t):  # from 0 to t; the boundary term at 0 vanishes
        return antiderivative_value(a - mu, p, t)

    def int_bar(lo, hi):
        return antiderivative_value(a - mb, p, hi) - antiderivative_value(a - mb, p, lo)

    c1 = datum * x0 ** -mb + 2 * x0 ** (mu - mb) / (mb - mu) * int_under(x0)
    vals = np.array([
        c1 * xx ** mb
        - 2 * xx ** mb / (mb - mu) * int_bar(xx, x0)
        - 2 * xx ** mu / (mb - mu) * int_under(xx)
        for xx in x])
    return vals


# -- grids ---------------------------------------------------------------------

def test_grid_geometric_defaults():
    g = Grid.geometric()
    assert g.points[0] == 1e-6 and g.points[-1] == 0.1 and g.count == 512
    assert np.all(np.diff(g.points) > 0)


def test_grid_validation():
    with pytest.raises(InputError):
        Grid.geometric(x0=1e-6, xmin=0.1)
    with pytest.raises(InputError):
        Grid.geometric(count=8)
    with pytest.raises(InputError):
        Grid(np.linspace(0.01, 0.1, 64), 0.1, 0.01, 64)  # not geometric


# -- mode ODE solver ---------------------------------------------------------------

def test_pure_kernel_branch():
    sol = solve_mode_ode(0.0, np.zeros(512), 0.7, G512)
    exact = 0.7 * (G512.points / 0.1)
    np.testing.assert_allclose(sol.values, exact, rtol=1e-8)


def test_pure_kernel_branch_general_root():
    lam = 7.0
    mb = characteristic_roots(lam).m_bar
    sol = solve_mode_ode(lam, np.zeros(512), -1.3, G512)
    exact = -1.3 * (G512.points / 0.1) ** mb
    np.testing.assert_allclose(sol.values, exact, rtol=1e-8, atol=1e-300)


def test_constant_forcing_particular_solution():
    c = 0.3
    sol = solve_mode_ode(0.0, np.full(512, c), -c + 0.1, G512, tail=(0.0, 0))
    np.testing.assert_allclose(sol.values, G512.points - c, rtol=1e-12)


def test_resonant_forcing_log_emergence():
    # lam=5 (m_bar=3), forcing x^3: the solution picks up (2/7) x^3 log x,
    # checked against the symbolic-integral oracle
    x = G512.points
    sol = solve_mode_ode(5.0, x ** 3, 0.0, G512, tail=(3.0, 0))
    oracle = closed_form_mode_solution(5.0, 3.0, 0, 0.0, G512)
    np.testing.assert_allclose(sol.values, oracle,
                               rtol=1e-9, atol=1e-12 * np.max(np.abs(oracle)))
    # the log coefficient in the formula is 2/((p+1)(m_bar - m_under)) = 2/7
    rlog = (sol.values - sol.values[-1] * (x / 0.1) ** 3 * 0) / x ** 3
    slope = np.polyfit(np.log(x[100:300]), rlog[100:300], 1)[0]
    assert slope == pytest.approx(2.0 / 7.0, rel=1e-5)


@pytest.mark.parametrize("lam,a,p", [(0.0, 2.0, 1), (1.0, 1.0, 0),
                                     (5.0, 2.5, 2), (12.0, 4.0, 1)])
def test_poly_log_forcing_against_symbolic_oracle(lam, a, p):
    x = G512.points
    forcing = x ** a * np.log(x) ** p
    datum = 0.4
    sol = solve_mode_ode(lam, forcing, datum, G512, tail=(a, p))
    oracle = closed_form_mode_solution(lam, a, p, datum, G512)
    scale = np.max(np.abs(oracle))
    np.testing.assert_allclose(sol.values, oracle, rtol=2e-9, atol=1e-11 * scale)


def test_resonant_log_increment_is_exactly_one():
    # forcing x^m_bar (log x)^p at the resonance raises the log power by
    # exactly one: the symbolic oracle's x^m_bar part is a degree-(p+1)
    # polynomial in log x, and the solver tracks it
    lam = 1.0
    mb = characteristic_roots(lam).m_bar
    p = 1
    x = G512.points
    forcing = x ** mb * np.log(x) ** p
    sol = solve_mode_ode(lam, forcing, 0.0, G512, tail=(mb, p))
    oracle = closed_form_mode_solution(lam, mb, p, 0.0, G512)
    scale = np.max(np.abs(oracle))
    np.testing.assert_allclose(sol.values, oracle, rtol=1e-8, atol=1e-11 * scale)
    # the ratio v / x^m_bar is a polynomial in log x of degree exactly p+1:
    # its (p+2)-th log-derivative vanishes, its (p+1)-th does not
    ratio = sol.values / x ** mb
    coeffs = np.polyfit(np.log(x[50:-50]), ratio[50:-50], p + 2)
    assert abs(coeffs[0]) < 1e-7 * np.max(np.abs(ratio))   # no log^(p+2)
    assert abs(coeffs[1]) > 1e-3 * np.max(np.abs(ratio))   # log^(p+1) present


def test_substitution_residual_contract():
    rng = np.random.default_rng(42)
    g = Grid.geometric(0.1, 1e-6, 2048)
    x = g.points
    for _ in range(6):
        lam = rng.uniform(0.0, 50.0)
        a = rng.uniform(1.0, 5.0)
        p = rng.integers(0, 3)
        forcing = x ** a * np.log(x) ** p
        sol = solve_mode_ode(lam, forcing, rng.uniform(-1, 1), g, tail=(a, int(p)))
        assert substitution_residual(sol, forcing, g) < 1e-6


def test_solver_is_linear():
    x = G512.points
    # same leading structure: the tail completion superposes exactly
    f1 = x ** 1.5 * (1.0 + 0.2 * x)
    f2 = x ** 1.5 * (-0.5 + 1.1 * x)
    a, b = 0.7, -1.9
    s1 = solve_mode_ode(3.0, f1, 0.2, G512, tail=(1.5, 0))
    s2 = solve_mode_ode(3.0, f2, -0.5, G512, tail=(1.5, 0))
    s12 = solve_mode_ode(3.0, a * f1 + b * f2, a * 0.2 + b * -0.5, G512,
                         tail=(1.5, 0))
    combo = a * s1.values + b * s2.values
    scale = np.max(np.abs(combo))
    np.testing.assert_allclose(s12.values, combo, rtol=1e-12, atol=1e-13 * scale)


def test_solver_linear_mixed_shapes_interior():
    # mixed leading shapes: the below-grid tail completion is a per-forcing
    # approximation, so strict superposition holds away from the bottom edge
    x = G512.points
    f1 = x ** 1.5
    f2 = x ** 2 * np.log(x) ** 2
    a, b = 0.7, -1.9
    s1 = solve_mode_ode(3.0, f1, 0.2, G512, tail=(1.5, 0))
    s2 = solve_mode_ode(3.0, f2, -0.5, G512, tail=(2.0, 2))
    s12 = solve_mode_ode(3.0, a * f1 + b * f2, a * 0.2 + b * -0.5, G512,
                         tail=(1.5, 0))
    combo = a * s1.values + b * s2.values
    scale = np.max(np.abs(combo))
    inner = x >= 10 * G512.xmin
    np.testing.assert_allclose(s12.values[inner], combo[inner],
                               rtol=1e-11, atol=1e-12 * scale)


def test_boundedness_selection_no_singular_branch():
    # with F = 0 the computed solution is a pure x^m_bar multiple: the ratio
    # v / x^m_bar over the lower quarter equals its value at x0 to 1e-4
    for lam, datum in ((0.0, 1.0), (5.0, -0.3), (11.0, 2.0)):
        mb = characteristic_roots(lam).m_bar
        sol = solve_mode_ode(lam, np.zeros(512), datum, G512)
        ratio = sol.values / G512.points ** mb
        anchor = datum / G512.x0 ** mb
        quarter = ratio[: 512 // 4]
        assert np.max(np.abs(quarter - anchor)) <= 1e-4 * abs(anchor)


def test_quadrature_order_of_convergence():
    # halving the panel size must cut the defect against the closed form by
    # at least a factor 8 (the claimed 3rd-order floor; observed far higher)
    lam, a, p = 2.0, 1.5, 1
    defects = []
    for count in (33, 65):
        g = Grid.geometric(0.1, 1e-3, count)
        forcing = g.points ** a * np.log(g.points) ** p
        sol = solve_mode_ode(lam, forcing, 0.1, g, tail=(a, p))
        oracle = closed_form_mode_solution(lam, a, p, 0.1, g)
        defects.append(np.max(np.abs(sol.values - oracle)) / np.max(np.abs(oracle)))
    assert defects[0] / defects[1] >= 8.0


def test_non_integrable_forcing_detected():
    x = G512.points
    with pytest.raises(NonIntegrableForcing):
        solve_mode_ode(0.0, x ** -1.5, 0.0, G512)  # worse than x^(m_under+1)


def test_forcing_callable_path():
    x = G512.points
    sol_arr = solve_mode_ode(2.0, x ** 2, 0.0, G512, tail=(2.0, 0))
    sol_fn = solve_mode_ode(2.0, x ** 2, 0.0, G512, tail=(2.0, 0),
                            forcing_fn=lambda t: t ** 2)
    np.testing.assert_allclose(sol_arr.values, sol_fn.values, rtol=1e-10)


# -- theta averaging -----------------------------------------------------------------

def test_average_theta_identity_on_constants():
    avg, info = average_theta(lambda t: np.array([1.5, -2.0]), 8)
    np.testing.assert_allclose(avg, [1.5, -2.0], rtol=1e-15)
    assert not info["aliased"]


def test_average_theta_kills_harmonics():
    avg, info = average_theta(lambda t: 0.7 + math.sin(t), 2)
    assert avg == pytest.approx(0.7, abs=1e-15)
    assert not info["aliased"]


def test_average_theta_alias_detection():
    # a harmonic at exactly the sample count aliases to a constant; the
    # resampled average differs, which is the reported signal
    m = 8
    avg, info = average_theta(lambda t: math.cos(m * t), m)
    assert avg == pytest.approx(1.0)  # aliased value
    assert info["aliased"]
    assert info["defect"] > 0.5


def test_theta_average_modes_projection():
    model = circle_model(modes=5)
    nodes, _ = model.quadrature()

    def fn(theta):
        # theta-dependence (pure harmonic) + divisor dependence cos(phi)
        return math.sin(theta) + 0.3 * np.cos(nodes[0])[None, :] \
            + np.zeros((2, nodes.shape[1]))

    coeffs, info = theta_average_modes(model, fn, 16)
    assert coeffs.shape == (2, 5)
    np.testing.assert_allclose(coeffs[:, 1], 0.3 * math.sqrt(math.pi), rtol=1e-12)
    assert np.max(np.abs(coeffs[:, [0, 2, 3, 4]])) < 1e-13
    assert not info["aliased"]


# -- Picard iteration ----------------------------------------------------------------

def point_problem(tilde, c0=1.0, cutoff=4.5):
    model = point_model()
    idx = build_index_set(model, cutoff)
    return ModelProblem(model, idx, make_source(model, tilde, c0), c0)


def test_picard_trivial_fixed_point():
    prob = point_problem({})
    res = picard_solve(prob, G512, np.zeros(1), tol=1e-12)
    assert res.iterations == 1
    assert np.max(np.abs(res.values())) == 0.0


def test_picard_converges_small_data():
    prob = point_problem({1: 0.1})
    sol = formal_expansion(prob, 3.0)
    datum = sol.evaluate(np.array([0.1]))[:, 0]
    res = picard_solve(prob, G512, datum, tol=1e-10, max_iter=50)
    assert res.iterations <= 50
    assert res.defect < 1e-10


def test_picard_grid_doubling_self_convergence():
    prob = point_problem({1: 0.09})
    sol = formal_expansion(prob, 2.0)
    vals = {}
    for count in (256, 511):
        g = Grid.geometric(0.1, 1e-6, count)
        datum = sol.evaluate(np.array([0.1]))[:, 0]
        res = picard_solve(prob, g, datum, tol=1e-12, max_iter=50)
        vals[count] = (g.points, res.values()[0])
    # count=511 shares every other point with count=256
    x_c, v_c = vals[256]
    x_f, v_f = vals[511]
    np.testing.assert_allclose(x_f[::2], x_c, rtol=1e-12)
    assert np.max(np.abs(v_f[::2] - v_c)) < 1e-6


def test_picard_nonconvergence_reports_defect():
    prob = point_problem({1: 0.3})
    with pytest.raises(ConvergenceError) as err:
        picard_solve(prob, G512, np.zeros(1), tol=1e-14, max_iter=1)
    assert err.value.defect is not None and err.value.defect > 0


# -- remainder fits -------------------------------------------------------------------

def fake_formal(problem, terms, order):
    psi = PhgSeries(problem.model, terms, truncation=order)
    return FormalSolution(problem, psi, order, psi.log_bounds(), (), 0)


def test_fit_synthetic_power_remainder():
    prob = point_problem({}, c0=0.0, cutoff=3.0)
    formal = fake_formal(prob, [(1.0, 0, np.array([2.0]))], 1.0)
    v = 2 * G512.points + 3 * G512.points ** 2
    sols = [ModeSolution(0.0, characteristic_roots(0.0), v, v[-1], mode=0)]
    rep = fit_remainder(sols, formal, G512)
    fit = next(r for r in rep.remainder_fits if abs(r.k - 1.0) < 1e-12)
    assert fit.slope == pytest.approx(2.0, abs=0.02)
    assert fit.amplitude == pytest.approx(3.0, abs=0.01)
    assert fit.logpow == 0


def test_fit_synthetic_log_remainder():
    prob = point_problem({}, c0=0.0, cutoff=3.0)
    formal = fake_formal(prob, [], 0.0)
    v = G512.points * np.log(G512.points)
    sols = [ModeSolution(0.0, characteristic_roots(0.0), v, v[-1], mode=0)]
    rep = fit_remainder(sols, formal, G512)
    fit = rep.remainder_fits[0]
    assert fit.slope == pytest.approx(1.0, abs=0.02)
    assert fit.logpow == 1


def test_fit_window_too_short():
    g = Grid.geometric(0.1, 1e-2, 64)  # only one decade: window collapses
    prob = point_problem({}, c0=0.0, cutoff=3.0)
    formal = fake_formal(prob, [], 0.0)
    v = g.points.copy()
    sols = [ModeSolution(0.0, characteristic_roots(0.0), v, v[-1], mode=0)]
    with pytest.raises(InputError):
        fit_remainder(sols, formal, g)


def test_fit_end_to_end_coefficient_recovery():
    # every non-free coefficient of the order-2 expansion is recovered from
    # the oracle within 2 percent
    prob = point_problem({1: 0.09})
    formal = formal_expansion(prob, 2.0)
    datum = formal.evaluate(np.array([0.1]))[:, 0]
    res = picard_solve(prob, G512, datum, tol=1e-11)
    rep = fit_remainder(res, formal, G512)
    checked = 0
    for d in rep.discrepancies:
        if d.formal != 0.0:
            assert abs(d.fitted - d.formal) <= 0.02 * abs(d.formal), \
                (d.exponent, d.logpow, d.formal, d.fitted)
            checked += 1
    assert checked >= 4
    free = [f for f in rep.fitted_free if abs(f.exponent - 1.0) < 1e-9]
    assert len(free) == 1 and abs(free[0].value) < 1e-5


def test_torus_end_to_end():
    # full pipeline on a positive-dimensional divisor with a four-fold
    # degenerate resonance: the log law still reads (2/3) * mean
    model = phg.torus_model(n=2, lattice_cutoff=1)
    idx = build_index_set(model, 3.8)
    a = 0.05
    source = make_source(model, {1: a}, 1.0)
    problem = ModelProblem(model, idx, source, 1.0)
    formal = formal_expansion(problem, 2.0)
    assert formal.psi.coefficient(1.0, 1)[0] == \
        pytest.approx((2 * a / 3) * model.sqrt_volume, rel=1e-12)
    grid = Grid.geometric(0.1, 1e-6, 256)
    datum = formal.evaluate(np.array([grid.x0]))[:, 0]
    res = picard_solve(problem, grid, datum, tol=1e-10)
    rep = fit_remainder(res, formal, grid)
    fitted = next(d.fitted for d in rep.discrepancies
                  if abs(d.exponent - 1.0) < 1e-9 and d.logpow == 1 and d.mode == 0)
    assert fitted == pytest.approx((2 * a / 3) * model.sqrt_volume, rel=0.02)
    # the degenerate m_bar level contributes one free channel per mode
    mbar = characteristic_roots(1.0).m_bar
    frees = [f for f in rep.fitted_free if abs(f.exponent - mbar) < 1e-9]
    assert len(frees) == 4
    assert all(abs(f.value) < 1e-6 for f in frees)


def test_fit_reports_match_formal_rows():
    prob = point_problem({1: 0.05})
    formal = formal_expansion(prob, 2.0)
    datum = formal.evaluate(np.array([0.1]))[:, 0]
    res = picard_solve(prob, G512, datum, tol=1e-10)
    rep = fit_remainder(res, formal, G512)
    assert set((i, j, m) for i, j, m, _, _ in rep.coefficients) == \
        set((e, j, m) for e, j, c in formal.psi.terms for m in range(1))
    doc = rep.to_json_dict()
    assert set(doc) == {"coefficients", "free_components", "remainders",
                        "discrepancies", "meta"}
