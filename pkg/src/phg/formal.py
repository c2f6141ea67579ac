"""Order-by-order construction of the formal cusp expansion.

The model problem replaces the moving-metric determinant by a scalar analytic
nonlinearity with the same linearization and quadratic-error structure:

    Q(psi) = G(L psi) - psi - (f + c0),      L = Laplace(D) + x^2/2 d^2/dx^2 + x d/dx,

so the linearization of Q at 0 is Laplace(D) + N with N = L - 1.  Starting
from psi = 0 the solver repeatedly cancels the leading residual term
d x^i (log x)^j:

* non-resonant i: solve (Laplace(D) + i^2/2 + i/2 - 1) c = -d and add
  c x^i (log x)^j;
* resonant i = m_bar_l: split d = d0 + dperp against the lam_l-eigenspace,
  add the log correction rho x^i (log x)^(j+1) with
  rho = -d0 / ((j+1)(i+1/2)) and solve the shifted problem for -dperp with
  the kernel component pinned to zero (recorded as a free global term).

Each step strictly advances the leading residual position in the well-order
(exponent ascending, then log power descending), so the recursion reaches any
requested order in finitely many steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, IndexMonoidError, InputError
from .indices import COINCIDENCE_TOL, IndexSet
from .series import AnalyticGerm, PhgSeries, compose_analytic, _indicial

# Relative threshold below which residual coefficients count as cancelled.
CANCEL_RTOL = 1e-12


def make_source(model, tilde_f, c0, truncation=math.inf):
    """Series of f from its per-order data: tilde_f maps integer exponent i
    to either a constant value or a coefficient vector; the exponent-0 term
    -c0 is added automatically."""
    terms = [(0.0, 0, model.constant(-c0))]
    for i, val in tilde_f.items():
        coeff = model.constant(val) if np.ndim(val) == 0 else np.asarray(val, dtype=float)
        terms.append((float(i), 0, coeff))
    return PhgSeries(model, terms, truncation)


@dataclass(frozen=True)
class ModelProblem:
    """Everything the recursion and the mode-ODE oracle consume.

    `source` is the series of f (exponent-0 coefficient must be the constant
    -c0); `strict` enforces the geometric contract that f has only integer
    exponents and no logs, and is relaxed for synthetic scenarios that force
    a non-integer index directly.
    """

    model: object
    index_set: IndexSet
    source: PhgSeries
    c0: float
    germ: AnalyticGerm = field(default_factory=AnalyticGerm.log1p)
    perturbation: PhgSeries | None = None
    strict: bool = True

    def __post_init__(self):
        if not self.model.compatible(self.source.model):
            raise InputError("source series does not live on the problem's model")
        expected = self.model.constant(-self.c0)
        got = self.source.coefficient(0.0, 0)
        scale = max(1.0, abs(self.c0))
        if not np.allclose(got, expected, atol=1e-12 * scale):
            raise InputError(
                "exponent-0 source coefficient must be the constant -c0 "
                f"(got {got}, expected {expected})")
        for e, j, _ in self.source.terms:
            if j > 0 and e <= COINCIDENCE_TOL:
                raise InputError("source may not carry logs at exponent 0")
            if self.strict:
                if j != 0:
                    raise InputError("strict source must have log power 0")
                if abs(e - round(e)) > COINCIDENCE_TOL:
                    raise InputError(
                        f"strict source must have integer exponents, got {e}; "
                        "pass strict=False for synthetic forcing")
        if self.perturbation is not None:
            pmin = self.perturbation.min_exponent()
            if pmin is not None and pmin < 1.0 - COINCIDENCE_TOL:
                raise InputError("operator perturbation must be O(x)")

    @property
    def source_positive(self):
        """f + c0: the source with its exponent-0 part cancelled."""
        kept = [(e, j, c) for e, j, c in self.source.terms if e > COINCIDENCE_TOL]
        return PhgSeries(self.model, kept, self.source.truncation)


@dataclass(frozen=True)
class FreeComponent:
    """A resonant kernel coefficient pinned to zero by the local recursion."""

    exponent: float
    logpow: int
    eigenvalue: float
    modes: tuple[int, ...]


@dataclass(frozen=True)
class StepInfo:
    position: tuple[float, int]       # (exponent, logpow) that was cancelled
    added_log: bool
    free: FreeComponent | None


@dataclass(frozen=True)
class FormalSolution:
    """Partial sum psi with residual pushed beyond `order`."""

    problem: ModelProblem
    psi: PhgSeries
    order: float
    log_bounds: dict
    free_components: tuple[FreeComponent, ...]
    n_steps: int
    log_insertions: tuple = ()  # (exponent, new logpow) of each rho insertion

    def partial_sum(self, k):
        """psi_k: the terms with exponent <= k."""
        return self.psi.restrict(k)

    def evaluate(self, x):
        return self.psi.evaluate(x)

    def coefficient_rows(self):
        """Flat (i, j, mode, value) rows for reports, sorted as stored."""
        rows = []
        for e, j, c in self.psi.terms:
            for mode, v in enumerate(c):
                rows.append((e, j, mode, float(v)))
        return rows


def residual(problem, psi, truncation=None):
    """Q(psi) = G(L psi) - psi - (f + c0), as a series up to the truncation.

    With psi = 0 this is -(f + c0); its linearization at 0 is Laplace(D) + N.
    An operator perturbation P acts multiplicatively inside the germ:
    L psi -> L psi + P * (L psi).
    """
    trunc = psi.truncation if truncation is None else min(truncation, psi.truncation)
    pmin = psi.min_exponent()
    if pmin is not None and pmin <= COINCIDENCE_TOL:
        raise InputError("psi must have strictly positive exponents")
    psi_t = psi.truncate(trunc)
    lpsi = psi_t.apply_laplacian().add(psi_t.apply_n()).add(psi_t)
    if problem.perturbation is not None:
        lpsi = lpsi.add(problem.perturbation.truncate(trunc)
                        .multiply(lpsi, problem.index_set))
    g = compose_analytic(problem.germ, lpsi, problem.index_set)
    return g - psi_t - problem.source_positive.truncate(trunc)


def _step(problem, psi, r):
    """One cancellation step; returns (new psi, StepInfo) or (psi, None)."""
    model = problem.model
    lead = r.leading()
    if lead is None:
        return psi, None
    i, j, d = lead
    if problem.index_set.locate(i) is None:
        raise IndexMonoidError(
            f"leading residual exponent {i} is outside the index monoid; "
            "the model and source are inconsistent")
    marks = problem.index_set.resonant_modes_at(i)
    new_terms = list(psi.terms)
    free = None
    added_log = False
    if len(marks) > 0:
        lam = float(model.eigenvalues[marks[0]])
        d0, dperp = model.project_eigenspace(d, lam)
        if np.any(d0 != 0.0):
            rho = -d0 / ((j + 1) * (i + 0.5))
            new_terms.append((i, j + 1, rho))
            added_log = True
        c = model.solve_shifted_poisson(-dperp, lam)
        if np.any(c != 0.0):
            new_terms.append((i, j, c))
        free = FreeComponent(i, j, lam, tuple(int(m) for m in marks))
    else:
        mu = _indicial(i)
        if len(model.kernel_indices(mu)) > 0:
            raise IndexMonoidError(
                f"exponent {i} is unmarked but {mu} is an eigenvalue; "
                "resonance marks are inconsistent with the model")
        c = -model.solve_shifted_poisson(d, mu)
        new_terms.append((i, j, c))
    return PhgSeries(model, new_terms, psi.truncation), \
        StepInfo((i, j), added_log, free)


def step_correction(problem, psi, r=None):
    """Cancel the leading residual term of psi; returns the corrected series
    (psi unchanged when the residual is already zero at this truncation)."""
    if r is None:
        r = residual(problem, psi)
    scale = max(r.max_abs(), psi.max_abs(), problem.source_positive.max_abs(), 1.0)
    new_psi, _ = _step(problem, psi, r.prune(CANCEL_RTOL * scale))
    return new_psi


def formal_expansion(problem, order, max_steps=None, initial=None):
    """Iterate cancellation steps until the residual is pushed past `order`.

    `order` must be an element of the index set.  Records the log bounds N_i
    the recursion actually produced and the resonant kernel components it
    pinned to zero.  `initial` seeds the recursion with gauge terms (kernel
    components of resonant coefficients), selecting another member of the
    formal family; the recursion leaves those components where they are.
    """
    idx = problem.index_set
    if idx.locate(order) is None:
        raise InputError(f"order {order} is not an element of the index set")
    count = int(np.sum(idx.values() <= order + idx.tol))
    if initial is None:
        psi = PhgSeries.zero(problem.model, truncation=float(order))
    else:
        if initial.min_exponent() is not None and \
                initial.min_exponent() <= COINCIDENCE_TOL:
            raise InputError("gauge seed must have positive exponents")
        psi = initial.truncate(float(order))
    steps = 0
    last_pos = None
    max_logpow = 0
    free = []
    seen = set()
    insertions = []
    while True:
        cap = max_steps if max_steps is not None else 10 * count * (max_logpow + 2)
        if steps > cap:
            raise ConvergenceError(
                f"formal recursion exceeded {cap} steps before order {order}")
        r = residual(problem, psi)
        scale = max(r.max_abs(), psi.max_abs(),
                    problem.source_positive.max_abs(), 1.0)
        r = r.prune(CANCEL_RTOL * scale)
        lead = r.leading()
        if lead is None:
            break
        pos = (lead[0], -lead[1])
        if last_pos is not None and pos <= last_pos:
            raise ConvergenceError(
                f"residual position failed to advance at {lead[:2]}")
        last_pos = pos
        psi, info = _step(problem, psi, r)
        steps += 1
        max_logpow = max(max_logpow, info.position[1] + (1 if info.added_log else 0))
        if info.added_log:
            insertions.append((info.position[0], info.position[1] + 1))
        if info.free is not None:
            key = (round(info.free.exponent / idx.tol), info.free.eigenvalue)
            if key not in seen:
                seen.add(key)
                free.append(info.free)

    return FormalSolution(problem, psi, float(order), psi.log_bounds(),
                          tuple(free), steps, tuple(insertions))


def first_log_coefficient(problem):
    """The x log x coefficient forced at order 1: (2/3) * mean of f_1 over D.

    Computed directly from the source and independent of the recursion; it
    agrees with the x log x coefficient of `formal_expansion` whenever the
    source reaches order 1.
    """
    f1 = problem.source.coefficient(1.0, 0)
    return (2.0 / 3.0) * problem.model.mean(f1)
