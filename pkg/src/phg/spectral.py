"""Finite spectral models of a closed manifold D.

A model packages the data the expansion engine actually consumes:

* eigenvalues 0 = lam_0 <= lam_1 <= ... of -Laplace(D), one entry per mode,
* the volume of D,
* the triple-product tensor T[i,j,k] = integral of phi_i*phi_j*phi_k, which
  encodes multiplication of functions expressed in the eigenbasis.

Functions on D live as plain length-L float vectors ("spectral functions"):
component 0 multiplies the constant eigenfunction phi_0 = volume**-0.5, so a
constant c has coefficient vector c*sqrt(volume)*e_0.

Built-in backends are the point (L=1), the circle of a given radius, and flat
square tori; their triple products come from an exact convolution rule on
complex-exponential amplitudes, so structural zeros are exact zeros.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import InputError, SolvabilityViolation, SpectralMismatchError

# |lam_l - mu| <= KERNEL_RTOL*max(1, mu) counts as a kernel mode.
KERNEL_RTOL = 1e-9


def _paired_inverse_sqrt(v):
    """Return (s, inv) with s = sqrt(v) and inv*s == 1.0 exactly.

    inv is within one ulp of 1/s; the nudge makes identities that multiply
    a normalization by its inverse round-trip bit-exactly.
    """
    s = math.sqrt(v)
    inv = 1.0 / s
    if inv * s == 1.0:
        return s, inv
    up = dn = inv
    for _ in range(3):
        up = math.nextafter(up, math.inf)
        dn = math.nextafter(dn, 0.0)
        if up * s == 1.0:
            return s, up
        if dn * s == 1.0:
            return s, dn
    return s, inv  # give up; off by <= 1 ulp


class SpectralModel:
    """Immutable spectral data for D; safe to share between workers."""

    def __init__(self, kind, dim_d, eigenvalues, volume, *, triple=None,
                 amplitudes=None, meta=None):
        eigenvalues = np.asarray(eigenvalues, dtype=float)
        if eigenvalues.ndim != 1 or eigenvalues.size == 0:
            raise InputError("eigenvalues must be a nonempty 1-d list")
        if not np.all(np.isfinite(eigenvalues)):
            raise InputError("eigenvalues must be finite")
        if abs(eigenvalues[0]) > 1e-12:
            raise InputError(f"lowest eigenvalue must be 0, got {eigenvalues[0]}")
        if np.any(np.diff(eigenvalues) < -1e-12):
            raise InputError("eigenvalues must be nondecreasing")
        if not volume > 0:
            raise InputError("volume must be positive")
        self.kind = kind
        self.dim_d = int(dim_d)
        self.eigenvalues = eigenvalues
        self.eigenvalues.setflags(write=False)
        self.volume = float(volume)
        self.sqrt_volume, self.inv_sqrt_volume = _paired_inverse_sqrt(self.volume)
        self._triple = triple
        self._amplitudes = amplitudes  # list of {freq tuple: complex}, trig models
        self.meta = dict(meta or {})

    @property
    def L(self):
        return self.eigenvalues.size

    # -- multiplication ----------------------------------------------------

    @property
    def triple_product(self):
        """Dense T[i,j,k]; built lazily for the trigonometric backends."""
        if self._triple is None:
            self._triple = _triple_from_amplitudes(
                self._amplitudes, self.volume, self.inv_sqrt_volume)
            self._triple.setflags(write=False)
        return self._triple

    def multiply(self, a, b):
        """Band-limited product: c_k = sum_ij T[i,j,k] a_i b_j."""
        a = self.validate_function(a)
        b = self.validate_function(b)
        return np.einsum("ijk,i,j->k", self.triple_product, a, b)

    def multiply_batch(self, a, b):
        """Same as multiply, columnwise on (L, n) arrays."""
        return np.einsum("ijk,ix,jx->kx", self.triple_product, a, b)

    # -- structure ----------------------------------------------------------

    def validate_function(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.L,):
            raise SpectralMismatchError(
                f"expected coefficient vector of length {self.L}, got shape {coeffs.shape}")
        if not np.all(np.isfinite(coeffs)):
            raise SpectralMismatchError("coefficients must be finite")
        return coeffs

    def compatible(self, other):
        return (self is other) or (
            self.L == other.L
            and self.volume == other.volume
            and np.array_equal(self.eigenvalues, other.eigenvalues))

    def constant(self, value):
        """Coefficient vector of the constant function `value`."""
        c = np.zeros(self.L)
        c[0] = value * self.sqrt_volume
        return c

    def mean(self, coeffs):
        """Average of the function over D (inverse of `constant`)."""
        return self.validate_function(coeffs)[0] * self.inv_sqrt_volume

    def kernel_indices(self, mu, rtol=KERNEL_RTOL):
        """Modes whose eigenvalue equals mu within tolerance."""
        tol = rtol * max(1.0, abs(mu))
        return np.nonzero(np.abs(self.eigenvalues - mu) <= tol)[0]

    def eigen_levels(self):
        """Distinct eigenvalues with their mode index groups, ascending."""
        levels = []
        for l, lam in enumerate(self.eigenvalues):
            if levels and abs(lam - levels[-1][0]) <= KERNEL_RTOL * max(1.0, lam):
                levels[-1][1].append(l)
            else:
                levels.append((lam, [l]))
        return [(lam, tuple(idx)) for lam, idx in levels]

    # -- linear solves -------------------------------------------------------

    def project_eigenspace(self, d, lam):
        """Split d = d0 + dperp orthogonally against the lam-eigenspace."""
        d = self.validate_function(d)
        kernel = self.kernel_indices(lam)
        d0 = np.zeros_like(d)
        d0[kernel] = d[kernel]
        return d0, d - d0

    def solve_shifted_poisson(self, d, mu, *, kernel_rtol=KERNEL_RTOL):
        """Solve (Laplace(D) + mu) c = d, minimal-norm on kernel modes.

        Diagonal in the eigenbasis: c_l = d_l / (mu - lam_l) off the kernel.
        Raises SolvabilityViolation if d has a significant kernel component
        (an upstream log correction is missing).
        """
        d = self.validate_function(d)
        kernel = self.kernel_indices(mu, kernel_rtol)
        tol = kernel_rtol * max(1.0, float(np.max(np.abs(d))) if d.size else 1.0)
        for l in kernel:
            if abs(d[l]) > tol:
                raise SolvabilityViolation(int(l), float(d[l]), tol)
        c = np.zeros_like(d)
        mask = np.ones(self.L, dtype=bool)
        mask[kernel] = False
        c[mask] = d[mask] / (mu - self.eigenvalues[mask])
        return c

    # -- pointwise evaluation (trigonometric backends only) -------------------

    def basis_values(self, points):
        """Evaluate all eigenfunctions at points (shape (dim_d, P) or (P,)).

        Supported for the built-in trigonometric models; a dense user model
        carries no eigenfunction data.
        """
        if self._amplitudes is None:
            raise InputError(f"model kind '{self.kind}' has no pointwise basis")
        points = np.asarray(points, dtype=float)
        if self.dim_d == 0:
            n = 1 if points.ndim == 0 else points.shape[-1]
            return np.ones((1, n))
        if points.ndim == 1:
            points = points[None, :]
        vals = np.zeros((self.L, points.shape[1]))
        for a, amps in enumerate(self._amplitudes):
            acc = np.zeros(points.shape[1], dtype=complex)
            for freq, amp in amps.items():
                acc += amp * np.exp(1j * (np.asarray(freq) @ points))
            vals[a] = acc.real
        return vals

    def quadrature(self, factor=4):
        """Uniform product quadrature (nodes, weights), exact for products
        of up to three basis functions when factor >= 3."""
        if self._amplitudes is None:
            raise InputError(f"model kind '{self.kind}' has no quadrature rule")
        if self.dim_d == 0:
            return np.zeros((0, 1)), np.array([self.volume])
        kmax = max((max(abs(c) for f in amps for c in f) for amps in self._amplitudes),
                   default=0)
        n1 = int(factor) * max(kmax, 1) + 1
        axes = [np.arange(n1) * (2 * np.pi / n1)] * self.dim_d
        mesh = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([m.ravel() for m in mesh])
        weights = np.full(nodes.shape[1], self.volume / nodes.shape[1])
        return nodes, weights

    def project_samples(self, samples, nodes=None, weights=None):
        """Expand pointwise samples on quadrature nodes into coefficients."""
        if nodes is None or weights is None:
            nodes, weights = self.quadrature()
        phi = self.basis_values(nodes)
        samples = np.asarray(samples, dtype=float)
        return samples @ (phi * weights).T

    # -- serialization --------------------------------------------------------

    def to_json_dict(self):
        doc = {
            "dimD": self.dim_d,
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "volume": self.volume,
        }
        if self.kind == "dense":
            doc["triple_product"] = {
                "kind": "dense",
                "data": [float(x) for x in self.triple_product.ravel()],
            }
        elif self.kind == "circle":
            doc["triple_product"] = {"kind": "circle", "radius": self.meta["radius"],
                                     "modes": self.L}
        elif self.kind == "torus":
            doc["triple_product"] = {"kind": "torus",
                                     "lattice_cutoff": self.meta["lattice_cutoff"]}
        elif self.kind == "point":
            doc["triple_product"] = {"kind": "point"}
        else:  # pragma: no cover
            raise InputError(f"cannot serialize model kind '{self.kind}'")
        return doc

    def __repr__(self):
        return (f"SpectralModel(kind={self.kind!r}, L={self.L}, dimD={self.dim_d}, "
                f"volume={self.volume:.6g})")


# ---------------------------------------------------------------------------
# Trigonometric amplitude machinery.
#
# Each basis function is a finite combination sum_f amp[f] * exp(i f.x) with
# dyadic-rational amplitudes times a common normalization, which makes the
# triple integrals exact:  int exp(i(f1+f2+f3).x) = volume iff f1+f2+f3 = 0.
# ---------------------------------------------------------------------------

def _triple_from_amplitudes(amplitudes, volume, inv_sqrt_volume):
    L = len(amplitudes)
    T = np.zeros((L, L, L))
    # Triples containing the constant mode reduce to orthonormality:
    # integral of phi_0 phi_b phi_c = delta_bc / sqrt(volume), exactly.
    for b in range(L):
        T[0, b, b] = T[b, 0, b] = T[b, b, 0] = inv_sqrt_volume
    for a in range(1, L):
        for b in range(a, L):
            conv = {}
            for fa, ca in amplitudes[a].items():
                for fb, cb in amplitudes[b].items():
                    f = tuple(x + y for x, y in zip(fa, fb))
                    conv[f] = conv.get(f, 0j) + ca * cb
            for c in range(b, L):
                s = 0j
                for fc, cc in amplitudes[c].items():
                    key = tuple(-x for x in fc)
                    if key in conv:
                        s += conv[key] * cc
                val = volume * s.real
                for i, j, k in itertools.permutations((a, b, c)):
                    T[i, j, k] = val
    return T


def _trig_pair(freq, norm):
    """Amplitude dicts for cos(f.x)*norm and sin(f.x)*norm."""
    neg = tuple(-x for x in freq)
    cos_amp = {freq: norm * 0.5 + 0j, neg: norm * 0.5 + 0j}
    sin_amp = {freq: norm * -0.5j, neg: norm * 0.5j}
    return cos_amp, sin_amp


def point_model():
    """The n=1 stand-in: D is a point, L=1, multiplication is scalar."""
    model = SpectralModel("point", 0, [0.0], 1.0,
                          triple=np.ones((1, 1, 1)),
                          amplitudes=[{(): 1.0 + 0j}])
    return model


def circle_model(radius=1.0, modes=5):
    """Fourier modes on a circle of circumference 2*pi*radius.

    Eigenvalues (k/radius)^2, each nonzero k contributing a cos/sin pair;
    `modes` counts basis functions, so an even count ends on a lone cosine.
    """
    if modes < 1:
        raise InputError("modes must be >= 1")
    if not radius > 0:
        raise InputError("radius must be positive")
    volume = 2 * math.pi * radius
    norm0 = _paired_inverse_sqrt(volume)[1]
    normk = math.sqrt(2.0) * norm0
    amps = [{(0,): norm0 + 0j}]
    lams = [0.0]
    k = 1
    while len(amps) < modes:
        cos_amp, sin_amp = _trig_pair((k,), normk)
        for amp in (cos_amp, sin_amp):
            if len(amps) < modes:
                amps.append(amp)
                lams.append((k / radius) ** 2)
        k += 1
    return SpectralModel("circle", 1, lams, volume, amplitudes=amps,
                         meta={"radius": radius})


def torus_model(n=2, lattice_cutoff=2):
    """Real Fourier basis on the flat square torus of real dimension 2n-2.

    Keeps every lattice vector with 0 < |xi|^2 <= lattice_cutoff (plus the
    constant), eigenvalue |xi|^2, side length 2*pi in each coordinate.
    """
    d = 2 * int(n) - 2
    if d < 1:
        raise InputError("torus needs n >= 2 (positive-dimensional D)")
    if lattice_cutoff < 1:
        raise InputError("lattice_cutoff must be >= 1")
    volume = (2 * math.pi) ** d
    norm0 = _paired_inverse_sqrt(volume)[1]
    normk = math.sqrt(2.0) * norm0
    rmax = int(math.isqrt(int(lattice_cutoff)))
    reps = []
    for xi in itertools.product(range(-rmax, rmax + 1), repeat=d):
        q = sum(c * c for c in xi)
        if 0 < q <= lattice_cutoff:
            first = next(c for c in xi if c != 0)
            if first > 0:  # one representative per +-xi pair
                reps.append((q, xi))
    reps.sort(key=lambda t: (t[0], t[1]))
    amps = [{(0,) * d: norm0 + 0j}]
    lams = [0.0]
    for q, xi in reps:
        cos_amp, sin_amp = _trig_pair(xi, normk)
        amps.extend([cos_amp, sin_amp])
        lams.extend([float(q), float(q)])
    return SpectralModel("torus", d, lams, volume, amplitudes=amps,
                         meta={"lattice_cutoff": lattice_cutoff, "n": int(n)})


def builtin_model(kind, **params):
    """Factory for the bundled backends: point | circle | torus."""
    if kind == "point":
        return point_model()
    if kind == "circle":
        return circle_model(**params)
    if kind == "torus":
        return torus_model(**params)
    raise InputError(f"unsupported model kind '{kind}'")


def model_from_json_dict(doc):
    """Load a model file; see README for the schema."""
    try:
        dim_d = doc["dimD"]
        eigenvalues = doc["eigenvalues"]
        volume = doc["volume"]
        tp = doc["triple_product"]
        kind = tp["kind"]
    except (KeyError, TypeError) as e:
        raise InputError(f"model file missing field: {e}") from e
    if kind == "dense":
        L = len(eigenvalues)
        data = np.asarray(tp["data"], dtype=float)
        if data.size != L ** 3:
            raise InputError(f"dense triple product needs {L ** 3} entries, got {data.size}")
        T = data.reshape(L, L, L)
        if not np.allclose(T, np.transpose(T, (0, 2, 1)), atol=1e-12) or \
           not np.allclose(T, np.transpose(T, (1, 0, 2)), atol=1e-12):
            raise InputError("dense triple product is not symmetric")
        return SpectralModel("dense", dim_d, eigenvalues, volume, triple=T)
    if kind == "point":
        if len(eigenvalues) != 1 or abs(eigenvalues[0]) > 1e-12 \
                or not math.isclose(volume, 1.0, rel_tol=1e-12):
            raise InputError("point model must have one zero eigenvalue and volume 1")
        return point_model()
    if kind == "circle":
        radius = tp.get("radius", volume / (2 * math.pi))
        model = circle_model(radius=radius, modes=tp.get("modes", len(eigenvalues)))
    elif kind == "torus":
        n = tp.get("n", dim_d // 2 + 1)
        model = torus_model(n=n, lattice_cutoff=tp["lattice_cutoff"])
    else:
        raise InputError(f"unsupported triple_product kind '{kind}'")
    if len(eigenvalues) != model.L or not np.allclose(
            model.eigenvalues, np.asarray(eigenvalues, dtype=float), atol=1e-9):
        raise InputError("eigenvalue list does not match the declared backend")
    if not math.isclose(volume, model.volume, rel_tol=1e-12):
        raise InputError("volume does not match the declared backend")
    return model
