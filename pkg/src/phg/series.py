"""Exact algebra of finite log-power series with spectral coefficients.

A series is a finite sum of terms  c_{i,j} * x^i * (log x)^j  where each
coefficient c_{i,j} is a function on D stored as a length-L vector in the
model's eigenbasis.  Exponents are reals merged at the global coincidence
tolerance; log powers are nonnegative integers.  Everything here is
immutable and pure: operations return fresh series.

The module also provides the exact indicial action of the cusp operator
N = x^2/2 d^2/dx^2 + x d/dx - 1, closed-form antiderivatives of
x^(a-1) (log x)^j, and composition with an analytic germ G (G(0)=0,
G'(0)=1), whose error away from the identity is quadratic in the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import IndexMonoidError, InputError, SpectralMismatchError
from .indices import COINCIDENCE_TOL


@dataclass(frozen=True, order=True)
class LogMonomial:
    """One basis monomial x^exponent * (log x)^logpow."""

    exponent: float
    logpow: int

    def __post_init__(self):
        if self.exponent < -COINCIDENCE_TOL:
            raise InputError(f"negative exponent {self.exponent} not representable")
        if self.logpow < 0 or self.logpow != int(self.logpow):
            raise InputError(f"log power must be a nonnegative integer, got {self.logpow}")


def _indicial(i):
    """Eigenvalue of N on x^i: i^2/2 + i/2 - 1."""
    return 0.5 * i * i + 0.5 * i - 1.0


class PhgSeries:
    """Finite sum of x^i (log x)^j terms with eigenbasis-vector coefficients.

    Terms are kept sorted by (exponent ascending, log power descending); all
    arithmetic silently discards exponents above `truncation`.
    """

    __slots__ = ("model", "truncation", "_terms")

    def __init__(self, model, terms=(), truncation=math.inf):
        self.model = model
        self.truncation = float(truncation)
        merged_e, merged_j, merged_c = [], [], []
        for e, j, c in sorted(terms, key=lambda t: (t[0], -t[1])):
            e = float(e)
            j = int(j)
            LogMonomial(e, j)
            if e > self.truncation + COINCIDENCE_TOL:
                continue
            c = model.validate_function(c)
            placed = False
            for k in range(len(merged_e) - 1, -1, -1):
                if abs(merged_e[k] - e) > COINCIDENCE_TOL:
                    break
                if merged_j[k] == j:
                    merged_c[k] = merged_c[k] + c
                    placed = True
                    break
            if not placed:
                merged_e.append(e)
                merged_j.append(j)
                merged_c.append(c.copy())
        kept = [(e, j, c) for e, j, c in zip(merged_e, merged_j, merged_c)
                if np.any(c != 0.0)]
        for _, _, c in kept:
            c.setflags(write=False)
        self._terms = tuple(kept)

    # -- constructors --------------------------------------------------------

    @classmethod
    def zero(cls, model, truncation=math.inf):
        return cls(model, (), truncation)

    @classmethod
    def monomial(cls, model, exponent, logpow, coeff, truncation=math.inf):
        return cls(model, [(exponent, logpow, coeff)], truncation)

    @classmethod
    def constant(cls, model, value, truncation=math.inf):
        return cls(model, [(0.0, 0, model.constant(value))], truncation)

    # -- inspection ------------------------------------------------------------

    @property
    def terms(self):
        return self._terms

    def __len__(self):
        return len(self._terms)

    def is_zero(self):
        return not self._terms

    def coefficient(self, exponent, logpow):
        """Coefficient vector at (exponent, logpow), or zeros if absent."""
        for e, j, c in self._terms:
            if abs(e - exponent) <= COINCIDENCE_TOL and j == logpow:
                return c.copy()
        return np.zeros(self.model.L)

    def min_exponent(self):
        if not self._terms:
            return None
        return self._terms[0][0]

    def leading(self):
        """(exponent, logpow, coeff) of the leading term: smallest exponent,
        then largest log power."""
        if not self._terms:
            return None
        return self._terms[0]

    def max_abs(self):
        if not self._terms:
            return 0.0
        return max(float(np.max(np.abs(c))) for _, _, c in self._terms)

    def log_bounds(self):
        """Observed max log power per exponent, ascending in exponent."""
        out = {}
        for e, j, _ in self._terms:
            key = next((k for k in out if abs(k - e) <= COINCIDENCE_TOL), e)
            out[key] = max(out.get(key, 0), j)
        return out

    def allclose(self, other, rtol=1e-12, atol=1e-13):
        a, b = self, other
        keys = {(e, j) for e, j, _ in a._terms} | {(e, j) for e, j, _ in b._terms}
        scale = max(a.max_abs(), b.max_abs(), 1.0)
        for e, j in keys:
            if not np.allclose(a.coefficient(e, j), b.coefficient(e, j),
                               rtol=rtol, atol=atol * scale):
                return False
        return True

    # -- ring operations --------------------------------------------------------

    def _check_model(self, other):
        if not self.model.compatible(other.model):
            raise SpectralMismatchError("series belong to different spectral models")

    def add(self, other):
        """Termwise sum; truncates to the finer of the two orders."""
        self._check_model(other)
        trunc = min(self.truncation, other.truncation)
        return PhgSeries(self.model, list(self._terms) + list(other._terms), trunc)

    __add__ = add

    def scale(self, factor):
        return PhgSeries(self.model, [(e, j, factor * c) for e, j, c in self._terms],
                         self.truncation)

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        return self.add(other.scale(-1.0))

    def multiply(self, other, index_set=None):
        """Cauchy product; coefficients multiply through the model's triple
        product.  With an index set supplied, every surviving exponent must
        lie in the monoid (a violation signals an inconsistent model)."""
        self._check_model(other)
        trunc = min(self.truncation, other.truncation)
        out = []
        for e1, j1, c1 in self._terms:
            if e1 > trunc + COINCIDENCE_TOL:
                break
            for e2, j2, c2 in other._terms:
                e = e1 + e2
                if e > trunc + COINCIDENCE_TOL:
                    break
                out.append((e, j1 + j2, self.model.multiply(c1, c2)))
        result = PhgSeries(self.model, out, trunc)
        if index_set is not None:
            for e, j, _ in result._terms:
                if e <= index_set.cutoff + index_set.tol and index_set.locate(e) is None:
                    raise IndexMonoidError(
                        f"product exponent {e} is not in the index monoid")
        return result

    def truncate(self, order):
        return PhgSeries(self.model, self._terms, min(self.truncation, order))

    def restrict(self, max_exponent):
        """Partial sum keeping exponents <= max_exponent (tolerance-inclusive);
        the truncation order is preserved."""
        kept = [(e, j, c) for e, j, c in self._terms
                if e <= max_exponent + COINCIDENCE_TOL]
        return PhgSeries(self.model, kept, self.truncation)

    def prune(self, threshold):
        """Drop terms whose coefficient magnitude is below `threshold`."""
        kept = [(e, j, c) for e, j, c in self._terms
                if float(np.max(np.abs(c))) > threshold]
        return PhgSeries(self.model, kept, self.truncation)

    def map_coefficients(self, fn):
        return PhgSeries(self.model, [(e, j, fn(c)) for e, j, c in self._terms],
                         self.truncation)

    # -- operators ---------------------------------------------------------------

    def apply_n(self):
        """Exact indicial action of N = x^2/2 d^2/dx^2 + x d/dx - 1:

        N(c x^i (log x)^j) = (i^2/2 + i/2 - 1) c x^i (log x)^j
                           + j (i + 1/2) c x^i (log x)^(j-1)
                           + j (j-1)/2 c x^i (log x)^(j-2).
        """
        out = []
        for e, j, c in self._terms:
            out.append((e, j, _indicial(e) * c))
            if j >= 1:
                out.append((e, j - 1, j * (e + 0.5) * c))
            if j >= 2:
                out.append((e, j - 2, 0.5 * j * (j - 1) * c))
        return PhgSeries(self.model, out, self.truncation)

    def apply_laplacian(self):
        """Laplace(D), diagonal in the eigenbasis: mode l scales by -lam_l."""
        factors = -self.model.eigenvalues
        return self.map_coefficients(lambda c: factors * c)

    # -- evaluation and serialization ----------------------------------------------

    def evaluate(self, x):
        """Evaluate at positive points x; returns per-mode values (L, len(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x <= 0):
            raise InputError("series evaluation needs x > 0")
        logx = np.log(x)
        out = np.zeros((self.model.L, x.size))
        for e, j, c in self._terms:
            out += c[:, None] * (x ** e * logx ** j)[None, :]
        return out

    def to_json_dict(self):
        return {
            "truncation": None if math.isinf(self.truncation) else self.truncation,
            "terms": [{"i": e, "j": j, "coeff": [float(v) for v in c]}
                      for e, j, c in self._terms],
        }

    @classmethod
    def from_json_dict(cls, model, doc):
        try:
            trunc = doc["truncation"]
            terms = [(t["i"], t["j"], np.asarray(t["coeff"], dtype=float))
                     for t in doc["terms"]]
        except (KeyError, TypeError) as e:
            raise InputError(f"malformed series document: {e}") from e
        return cls(model, terms, math.inf if trunc is None else trunc)

    def __repr__(self):
        inside = ", ".join(f"x^{e:.6g}*log^{j}" for e, j, _ in self._terms[:6])
        if len(self._terms) > 6:
            inside += ", ..."
        return f"PhgSeries[{len(self._terms)} terms: {inside}]"


# ---------------------------------------------------------------------------
# Analytic germs and composition.
# ---------------------------------------------------------------------------

class AnalyticGerm:
    """Taylor germ G(t) = sum_{k>=1} g_k t^k with G(0)=0, G'(0)=1."""

    def __init__(self, name, coefficient_fn, max_order=None):
        self.name = name
        self._fn = coefficient_fn
        self.max_order = max_order

    def coefficient(self, k):
        if k < 1:
            raise InputError("germ coefficients start at order 1")
        if self.max_order is not None and k > self.max_order:
            return 0.0
        return float(self._fn(k))

    @classmethod
    def identity(cls):
        return cls("identity", lambda k: 1.0 if k == 1 else 0.0, max_order=1)

    @classmethod
    def log1p(cls):
        """Germ of log(1+t): g_k = (-1)^(k+1)/k."""
        return cls("log1p", lambda k: (-1.0) ** (k + 1) / k)

    @classmethod
    def expm1(cls):
        """Germ of exp(t)-1: g_k = 1/k!."""
        return cls("expm1", lambda k: 1.0 / math.factorial(k))

    @classmethod
    def from_coefficients(cls, coeffs, name="custom"):
        coeffs = [float(c) for c in coeffs]
        return cls(name, lambda k: coeffs[k - 1] if k <= len(coeffs) else 0.0,
                   max_order=len(coeffs))

    def __repr__(self):
        return f"AnalyticGerm({self.name})"


def compose_analytic(germ, s, index_set=None):
    """G(s) for a series s with strictly positive minimal exponent.

    Horner evaluation of the germ in the series ring, truncated at s's
    truncation order.  The leading term of G(s) equals the leading term of s,
    and G(s) - s starts at twice the minimal exponent of s.
    """
    if abs(germ.coefficient(1) - 1.0) > 1e-12:
        raise InputError("germ must satisfy G'(0) = 1")
    if s.is_zero():
        return s
    min_exp = s.min_exponent()
    if min_exp <= COINCIDENCE_TOL:
        raise InputError("series has a constant term; composition at a shifted "
                         "point is not supported")
    if math.isinf(s.truncation):
        if germ.max_order is None:
            raise InputError("untruncated series needs a polynomial germ")
        depth = germ.max_order
    else:
        depth = int(math.floor((s.truncation + COINCIDENCE_TOL) / min_exp))
        if germ.max_order is not None:
            depth = min(depth, germ.max_order)
    acc = PhgSeries.zero(s.model, s.truncation)
    for k in range(depth, 0, -1):
        acc = s.multiply(acc, index_set).add(s.scale(germ.coefficient(k)))
    return acc


def integrate_monomial(a, j):
    """Exact antiderivative of x^(a-1) (log x)^j.

    Returns [(exponent, logpow, coefficient)] with
      a == 0:  (log x)^(j+1)/(j+1)
      a != 0:  x^a * sum_{m=0..j} (-1)^(j-m) (j!/m!) a^-(j-m+1) (log x)^m.
    Coefficients are Fractions whenever `a` is given exactly (int/Fraction).
    """
    j = int(j)
    if j < 0:
        raise InputError("log power must be nonnegative")
    exact = isinstance(a, (int, Fraction))
    if (exact and a == 0) or (not exact and a == 0.0):
        return [(a if exact else 0.0, j + 1, Fraction(1, j + 1) if exact else 1.0 / (j + 1))]
    terms = []
    for m in range(j, -1, -1):
        ratio = Fraction(math.factorial(j), math.factorial(m)) if exact \
            else math.factorial(j) / math.factorial(m)
        if exact:
            coeff = (-1) ** (j - m) * ratio * Fraction(1, 1) / Fraction(a) ** (j - m + 1)
        else:
            coeff = (-1.0) ** (j - m) * ratio * float(a) ** -(j - m + 1)
        terms.append((a, m, coeff))
    return terms
