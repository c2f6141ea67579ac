"""Indicial roots of the mode operator and the exponent monoid.

For each eigenvalue lam of -Laplace(D), the characteristic polynomial
m^2/2 + m/2 - 1 - lam has two real zeros m_bar >= 1 and m_under <= -2; the
admissible exponents of the expansion form the additive monoid generated by
{1} and the m_bar values.  Where 9 + 8*lam is a perfect rational square the
roots are rational and tracked exactly, so the common integer-resonance
models stay drift-free under monoid sums.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DegenerateModelError, IndexMonoidError, InputError

# Tolerance for declaring two exponents coincident anywhere in the package.
COINCIDENCE_TOL = 1e-9


def _as_exact(value, rtol=1e-13):
    """Fraction representation of value, or None if it is not recognizably
    rational at the given relative tolerance."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    frac = Fraction(value).limit_denominator(10 ** 9)
    if abs(float(frac) - value) <= rtol * max(1.0, abs(value)):
        return frac
    return None


def _exact_sqrt(frac):
    """Exact square root of a nonnegative Fraction, or None."""
    if frac < 0:
        return None
    pn = math.isqrt(frac.numerator)
    pd = math.isqrt(frac.denominator)
    if pn * pn == frac.numerator and pd * pd == frac.denominator:
        return Fraction(pn, pd)
    return None


@dataclass(frozen=True)
class IndicialRoots:
    """Zeros (m_bar, m_under) of m^2/2 + m/2 - 1 - eigenvalue."""

    eigenvalue: float
    m_bar: float
    m_under: float
    exact_m_bar: Fraction | None = None
    exact_m_under: Fraction | None = None

    def residual(self, m):
        return 0.5 * m * m + 0.5 * m - 1.0 - self.eigenvalue


def characteristic_roots(lam):
    """Indicial roots for eigenvalue lam >= 0.

    m_bar = (-1 + sqrt(9 + 8 lam))/2 >= 1,  m_under = (-1 - sqrt(9+8 lam))/2,
    with Vieta m_bar + m_under = -1 and m_bar*m_under = -2 - 2 lam.
    Rational roots are detected and carried exactly.
    """
    lam = float(lam)
    if lam < 0:
        raise InputError(f"eigenvalue must be nonnegative, got {lam}")
    exact_bar = exact_under = None
    lam_frac = _as_exact(lam)
    if lam_frac is not None:
        root = _exact_sqrt(9 + 8 * lam_frac)
        if root is not None:
            exact_bar = (-1 + root) / 2
            exact_under = (-1 - root) / 2
    if exact_bar is not None:
        m_bar, m_under = float(exact_bar), float(exact_under)
    else:
        disc = math.sqrt(9.0 + 8.0 * lam)
        m_bar, m_under = (-1.0 + disc) / 2.0, (-1.0 - disc) / 2.0
    return IndicialRoots(lam, m_bar, m_under, exact_bar, exact_under)


@dataclass(frozen=True)
class IndexElement:
    value: float
    exact: Fraction | None
    resonant_modes: tuple[int, ...]  # modes l with m_bar(lam_l) == value

    @property
    def resonant(self):
        return bool(self.resonant_modes)


@dataclass(frozen=True)
class IndexSet:
    """The sorted monoid intersected with [0, cutoff], with resonance marks."""

    cutoff: float
    elements: tuple[IndexElement, ...]
    generators: tuple[float, ...]
    roots: tuple[IndicialRoots, ...]  # one entry per mode of the model
    tol: float = COINCIDENCE_TOL
    _values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vals = np.array([e.value for e in self.elements])
        object.__setattr__(self, "_values", vals)

    def values(self):
        return self._values.copy()

    def locate(self, x):
        """Index of the element equal to x within tolerance, else None."""
        i = bisect.bisect_left(self._values, x - self.tol)
        if i < len(self._values) and abs(self._values[i] - x) <= self.tol:
            return i
        return None

    def __contains__(self, x):
        return self.locate(x) is not None

    def next_after(self, k):
        """The successor k_+ of k; k must itself be an element below cutoff."""
        i = self.locate(k)
        if i is None:
            raise IndexMonoidError(f"{k} is not an element of the index set")
        if i + 1 >= len(self.elements):
            raise IndexMonoidError(
                f"{k} is the last element below the cutoff {self.cutoff}")
        return self.elements[i + 1].value

    def resonant_modes_at(self, x):
        i = self.locate(x)
        return self.elements[i].resonant_modes if i is not None else ()

    def epsilon_ledger(self):
        """Per-step margins eps_k > 0 available to remainder fits.

        For each consecutive pair (k, k_+):
        eps = min(k_+ - k, min{m_bar - k_+ : resonant m_bar > k_+})/2.
        """
        bars = sorted({r.m_bar for r in self.roots})
        out = []
        for a, b in zip(self.elements[:-1], self.elements[1:]):
            gap = b.value - a.value
            over = [m - b.value for m in bars if m > b.value + self.tol]
            eps = min([gap] + over) / 2.0
            if eps <= 0:
                raise DegenerateModelError(
                    f"nonpositive expansion margin between {a.value} and {b.value}")
            out.append((a.value, b.value, eps))
        return out


def build_index_set(model, cutoff, tol=COINCIDENCE_TOL):
    """Enumerate the monoid generated by {1} and the m_bar roots, up to cutoff.

    Breadth-first over sums of generators; values closer than tol merge (an
    exact rational representative wins when one is available).  Each element
    is marked with the modes whose m_bar coincides with it.
    """
    if not cutoff > 0:
        raise InputError("cutoff must be positive")
    roots = tuple(characteristic_roots(lam) for lam in model.eigenvalues)

    # one generator per distinct eigenvalue level; two levels whose roots
    # cannot be separated at the working tolerance are degenerate
    gens = []  # (float value, Fraction|None)
    for lam, _modes in model.eigen_levels():
        r = characteristic_roots(lam)
        if r.m_bar > cutoff + tol:
            break
        for gv, ge in gens:
            if abs(gv - r.m_bar) <= tol:
                raise DegenerateModelError(
                    f"generators {gv} and {r.m_bar} (eigenvalue {lam}) are "
                    f"closer than the coincidence tolerance {tol}")
        gens.append((r.m_bar, r.exact_m_bar))
    if not any(abs(gv - 1.0) <= tol for gv, _ in gens):
        gens.append((1.0, Fraction(1)))  # lam_0 = 0 always contributes m_bar = 1
    gens.sort()

    accepted_vals = [0.0]
    accepted_exact = [Fraction(0)]
    frontier = [(0.0, Fraction(0))]
    while frontier:
        new_frontier = []
        for val, exact in frontier:
            for gv, ge in gens:
                cand_exact = (exact + ge) if (exact is not None and ge is not None) else None
                cand = float(cand_exact) if cand_exact is not None else val + gv
                if cand > cutoff + tol:
                    continue
                i = bisect.bisect_left(accepted_vals, cand - tol)
                if i < len(accepted_vals) and abs(accepted_vals[i] - cand) <= tol:
                    if accepted_exact[i] is None and cand_exact is not None:
                        accepted_vals[i] = cand
                        accepted_exact[i] = cand_exact
                    continue
                accepted_vals.insert(i, cand)
                accepted_exact.insert(i, cand_exact)
                new_frontier.append((cand, cand_exact))
        frontier = new_frontier

    elements = []
    for val, exact in zip(accepted_vals, accepted_exact):
        marks = tuple(l for l, r in enumerate(roots) if abs(r.m_bar - val) <= tol)
        elements.append(IndexElement(val, exact, marks))
    return IndexSet(float(cutoff), tuple(elements), tuple(gv for gv, _ in gens),
                    roots, tol)
