"""Anisotropic norms with analytic derivatives, dual norms and ellipticity sampling.

All evaluation methods are vectorized over leading axes: ``xi`` may have shape
``(n,)`` or ``(..., n)``.  Gradients come back with shape ``(..., n)`` and
Hessians with shape ``(..., n, n)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize
from scipy.stats import norm as _gauss
from scipy.stats import qmc

__all__ = [
    "DomainError",
    "AnisotropicNorm",
    "Euclidean",
    "WeightedEuclidean",
    "PowerCombination",
    "EllipticityConstants",
    "unit_sphere_samples",
    "verify_dual_identity",
    "estimate_ellipticity",
    "make_norm",
]

# angular grid resolution and refinement sweeps for the numerical dual norm
DUAL_GRID_2D = 720
DUAL_ICOSPHERE_LEVEL = 3
DUAL_REFINE_ITERS = 20

_NOT_UNIFORMLY_CONVEX = {"l1", "linf", "l-inf", "max", "manhattan", "taxicab", "sup", "chebyshev"}


class DomainError(ValueError):
    """Raised when a derivative is requested where it does not exist."""


def _as_points(xi, dim):
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1:] != (dim,):
        raise ValueError(f"expected trailing dimension {dim}, got shape {xi.shape}")
    return xi


def _require_nonzero(xi):
    if np.any(np.all(xi == 0.0, axis=-1)):
        raise DomainError("derivatives of a norm are undefined at the origin")


class AnisotropicNorm:
    """Base class.  Subclasses implement ``_value``, ``_grad`` and ``_hess``
    on 2-D arrays of shape ``(m, n)`` with nonzero rows."""

    dim: int
    analytic = True

    # -- evaluation -----------------------------------------------------
    def value(self, xi):
        xi = _as_points(xi, self.dim)
        flat = xi.reshape(-1, self.dim)
        return self._value(flat).reshape(xi.shape[:-1])

    __call__ = value

    def gradient(self, xi):
        xi = _as_points(xi, self.dim)
        _require_nonzero(xi)
        flat = xi.reshape(-1, self.dim)
        return self._grad(flat).reshape(xi.shape)

    def hessian(self, xi):
        xi = _as_points(xi, self.dim)
        _require_nonzero(xi)
        flat = xi.reshape(-1, self.dim)
        return self._hess(flat).reshape(xi.shape + (self.dim,))

    def dual(self, x):
        """Dual norm ``sup_{xi != 0} x.xi / H(xi)``."""
        x = _as_points(x, self.dim)
        flat = x.reshape(-1, self.dim)
        out = np.zeros(flat.shape[0])
        nz = np.any(flat != 0.0, axis=1)
        if np.any(nz):
            out[nz] = self._dual(flat[nz])
        return out.reshape(x.shape[:-1])

    def _dual(self, x):
        return numerical_dual(self, x)

    # -- structural constants ---------------------------------------------
    def origin_metric(self):
        """Matrix used for the Hessian of ``H^2/2`` at the origin.

        ``H^2`` is twice differentiable at 0 only for quadratic norms; for the
        others the average of the (0-homogeneous) Hessian over the coordinate
        directions is returned.
        """
        dirs = np.vstack([np.eye(self.dim), -np.eye(self.dim)])
        h = self._value(dirs)[:, None, None]
        g = self._grad(dirs)
        m = h * self._hess(dirs) + g[:, :, None] * g[:, None, :]
        return m.mean(axis=0)

    @property
    def alpha(self):
        """Certified constant with ``|xi| <= alpha * H(xi)``."""
        raise NotImplementedError

    @cached_property
    def sampled_alpha(self):
        """Sampled ``max |xi|`` over the unit H-sphere, inflated by 1%."""
        d = unit_sphere_samples(self.dim, 10_000, seed=0)
        return 1.01 * float(np.max(1.0 / self._value(d)))

    @cached_property
    def gradient_bound(self):
        """Sampled ``max |grad H|`` (0-homogeneous), inflated by 1%.

        Plays the role of ``C(H)`` in ``|a(xi)| <= C(H) H^{p-1}(xi)``.
        """
        d = unit_sphere_samples(self.dim, 10_000, seed=0)
        return 1.01 * float(np.max(np.linalg.norm(self._grad(d), axis=1)))

    @property
    def gradient_lower_bound(self):
        """``1/alpha``: lower bound for ``|grad H|`` from ``H_0(grad H) = 1``."""
        return 1.0 / self.alpha

    @property
    def is_euclidean(self):
        return False

    def describe(self) -> str:
        return type(self).__name__


@dataclass(frozen=True)
class Euclidean(AnisotropicNorm):
    dim: int = 2

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dimension must be at least 2")

    def _value(self, xi):
        return np.linalg.norm(xi, axis=1)

    def _grad(self, xi):
        return xi / np.linalg.norm(xi, axis=1)[:, None]

    def _hess(self, xi):
        r = np.linalg.norm(xi, axis=1)
        u = xi / r[:, None]
        eye = np.eye(self.dim)[None]
        return (eye - u[:, :, None] * u[:, None, :]) / r[:, None, None]

    def _dual(self, x):
        return np.linalg.norm(x, axis=1)

    def origin_metric(self):
        return np.eye(self.dim)

    @property
    def alpha(self):
        return 1.0

    @property
    def is_euclidean(self):
        return True

    def describe(self):
        return "euclidean"


@dataclass(frozen=True)
class WeightedEuclidean(AnisotropicNorm):
    """``H(xi) = sqrt(sum_i w_i xi_i^2)`` with positive weights."""

    weights: tuple = (1.0, 1.0)
    dim: int = field(init=False)

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) < 2:
            raise ValueError("need at least two weights")
        if min(w) <= 0.0 or not all(map(math.isfinite, w)):
            raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "dim", len(w))

    @cached_property
    def _w(self):
        return np.asarray(self.weights)

    def _value(self, xi):
        return np.sqrt(np.einsum("mi,i,mi->m", xi, self._w, xi))

    def _grad(self, xi):
        return (xi * self._w) / self._value(xi)[:, None]

    def _hess(self, xi):
        h = self._value(xi)
        wx = xi * self._w
        return (np.diag(self._w)[None] - wx[:, :, None] * wx[:, None, :] / (h**2)[:, None, None]) / h[:, None, None]

    def _dual(self, x):
        return np.sqrt(np.einsum("mi,i,mi->m", x, 1.0 / self._w, x))

    def origin_metric(self):
        return np.diag(self._w)

    @property
    def alpha(self):
        return 1.0 / math.sqrt(min(self.weights))

    def describe(self):
        return "weighted(" + ",".join(f"{w:g}" for w in self.weights) + ")"


@dataclass(frozen=True)
class PowerCombination(AnisotropicNorm):
    """``H = (a * sharp^q + b * star^q)^(1/q)`` for two base norms.

    ``sharp`` must itself have a uniformly convex unit ball; ``star`` only
    needs to be a C^2 norm.  The exponent ``q`` is independent of the PDE
    exponent.
    """

    sharp: AnisotropicNorm = field(default_factory=Euclidean)
    star: AnisotropicNorm = field(default_factory=lambda: WeightedEuclidean((1.0, 4.0)))
    a: float = 1.0
    b: float = 1.0
    exponent: float = 2.0
    dim: int = field(init=False)
    analytic = True

    def __post_init__(self):
        if self.sharp.dim != self.star.dim:
            raise ValueError("base norms must share the dimension")
        if self.a <= 0 or self.b <= 0:
            raise ValueError("weights a and b must be positive")
        if self.exponent <= 1:
            raise ValueError("combination exponent must exceed 1")
        object.__setattr__(self, "dim", self.sharp.dim)

    def _parts(self, xi):
        q = self.exponent
        hs, ht = self.sharp._value(xi), self.star._value(xi)
        h = (self.a * hs**q + self.b * ht**q) ** (1.0 / q)
        return q, hs, ht, h

    def _value(self, xi):
        return self._parts(xi)[3]

    def _grad(self, xi):
        q, hs, ht, h = self._parts(xi)
        gs, gt = self.sharp._grad(xi), self.star._grad(xi)
        num = (self.a * hs ** (q - 1))[:, None] * gs + (self.b * ht ** (q - 1))[:, None] * gt
        return num * (h ** (1 - q))[:, None]

    def _hess(self, xi):
        # H^q = a Hs^q + b Ht^q; differentiate twice and solve for D^2 H
        q, hs, ht, h = self._parts(xi)
        gs, gt = self.sharp._grad(xi), self.star._grad(xi)
        Hs, Ht = self.sharp._hess(xi), self.star._hess(xi)

        def d2pow(hh, g, hh2):  # D^2(hh^q) / q
            outer = g[:, :, None] * g[:, None, :]
            return ((q - 1) * hh ** (q - 2))[:, None, None] * outer + (hh ** (q - 1))[:, None, None] * hh2

        d2g = self.a * d2pow(hs, gs, Hs) + self.b * d2pow(ht, gt, Ht)
        g = self._grad(xi)
        outer = g[:, :, None] * g[:, None, :]
        return (d2g - ((q - 1) * h ** (q - 2))[:, None, None] * outer) / (h ** (q - 1))[:, None, None]

    @property
    def alpha(self):
        q = self.exponent
        return min(self.a ** (-1.0 / q) * self.sharp.alpha, self.b ** (-1.0 / q) * self.star.alpha)

    def describe(self):
        return f"power(a={self.a:g},b={self.b:g},q={self.exponent:g};{self.sharp.describe()},{self.star.describe()})"


# ---------------------------------------------------------------------------
# sampling helpers


def unit_sphere_samples(dim, count, seed=0):
    """Quasi-random points on the Euclidean unit sphere (scrambled Halton).

    A larger ``count`` with the same seed extends the smaller sample set.
    """
    if dim == 2:
        t = qmc.Halton(d=1, scramble=True, seed=seed).random(count)[:, 0]
        ang = 2.0 * np.pi * t
        return np.column_stack([np.cos(ang), np.sin(ang)])
    u = qmc.Halton(d=dim, scramble=True, seed=seed).random(count)
    g = _gauss.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _icosphere(level):
    t = (1.0 + 5**0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), len(faces)


def numerical_dual(H, x):
    """Maximize ``x.d / H(d)`` over unit directions ``d``.

    Coarse search over a fixed angular grid followed by local refinement.
    ``x`` has shape ``(m, n)`` with nonzero rows.
    """
    if H.dim == 2:
        return _dual_2d(H, x)
    verts, _ = _icosphere(DUAL_ICOSPHERE_LEVEL) if H.dim == 3 else (unit_sphere_samples(H.dim, 4000), None)
    probe = verts / H._value(verts)[:, None]
    start = verts[np.argmax(x @ probe.T, axis=1)]
    out = np.empty(x.shape[0])
    for k, (xk, d0) in enumerate(zip(x, start)):
        def neg(d, xk=xk):
            return -(xk @ d) / H._value(d[None])[0]

        res = optimize.minimize(neg, d0, method="BFGS", options={"maxiter": 200, "gtol": 1e-12})
        out[k] = max(-res.fun, -neg(d0))
    return out


def _dual_2d(H, x):
    theta = 2.0 * np.pi * np.arange(DUAL_GRID_2D) / DUAL_GRID_2D
    d = np.column_stack([np.cos(theta), np.sin(theta)])
    probe = d / H._value(d)[:, None]
    best = np.argmax(x @ probe.T, axis=1)
    step = 2.0 * np.pi / DUAL_GRID_2D

    def ratio(t):
        dd = np.stack([np.cos(t), np.sin(t)], axis=-1)
        return np.einsum("mi,mi->m", x, dd) / H._value(dd)

    lo, hi = theta[best] - step, theta[best] + step
    gr = (np.sqrt(5.0) - 1.0) / 2.0
    c, e = hi - gr * (hi - lo), lo + gr * (hi - lo)
    fc, fe = ratio(c), ratio(e)
    for _ in range(DUAL_REFINE_ITERS):
        left = fc > fe
        hi = np.where(left, e, hi)
        lo = np.where(left, lo, c)
        c_new = hi - gr * (hi - lo)
        e_new = lo + gr * (hi - lo)
        # golden section reuses one interior point per sweep
        fc_new = np.where(left, ratio(c_new), fe)
        fe_new = np.where(left, fc, ratio(e_new))
        c, e, fc, fe = c_new, e_new, fc_new, fe_new
    return np.maximum(np.maximum(fc, fe), np.max(x @ probe.T, axis=1))


def verify_dual_identity(H, samples):
    """Max over samples of ``|H_0(grad H(xi)) - 1|``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("empty sample list")
    return float(np.max(np.abs(H.dual(H.gradient(samples)) - 1.0)))


@dataclass(frozen=True)
class EllipticityConstants:
    """Sampled ("empirical") bounds; not certified."""

    lam: float
    Lam: float
    c_lower: float
    C_upper: float
    sample_count: int

    def __post_init__(self):
        if not (0 < self.lam <= self.Lam):
            raise ValueError(f"invalid ellipticity pair ({self.lam}, {self.Lam})")


def ellipticity_samples(dim, eps, count, seed=0):
    """Sample points for the ellipticity quotient.

    For ``eps == 0`` the quotient is 0-homogeneous, so the unit sphere suffices.
    For ``eps > 0`` it depends only on ``xi/eps``, so radii are spread
    log-uniformly in ``eps * [1e-3, 1e3]``.
    """
    d = unit_sphere_samples(dim, count, seed)
    if eps == 0:
        return d
    t = qmc.Halton(d=1, scramble=True, seed=seed + 7919).random(count)[:, 0]
    return d * (eps * 10.0 ** (6.0 * t - 3.0))[:, None]


def estimate_ellipticity(H, p, eps=0.0, samples=10_000, seed=0):
    """Sampled constants for ``D^2(B_eps o H)(xi) / (eps^2 + |xi|^2)^((p-2)/2)``.

    ``samples`` is either a count or an explicit ``(m, n)`` array.
    """
    from .operator import RegularizedOperator

    if p <= 1:
        raise ValueError("p must exceed 1")
    if np.isscalar(samples):
        pts = ellipticity_samples(H.dim, eps, int(samples), seed)
    else:
        pts = np.atleast_2d(np.asarray(samples, dtype=float))
    if np.any(np.linalg.norm(pts, axis=1) == 0):
        raise ValueError("degenerate (zero) sample")
    op = RegularizedOperator(H, p, eps)
    A = op.stress_jacobian(pts)
    w = (eps**2 + np.einsum("mi,mi->m", pts, pts)) ** ((p - 2) / 2)
    eig = np.linalg.eigvalsh(A) / w[:, None]
    absum = np.abs(A).sum(axis=(1, 2)) / w
    return EllipticityConstants(
        lam=float(eig.min()),
        Lam=float(eig.max()),
        c_lower=float(eig.min()),
        C_upper=float(absum.max()),
        sample_count=int(pts.shape[0]),
    )


def make_norm(family, dim=2, weights=None, a=1.0, b=1.0, p_comb=2.0, sharp=None, star=None):
    """Build a norm from a family name, as used by the configuration layer."""
    fam = str(family).strip().lower()
    if fam in _NOT_UNIFORMLY_CONVEX or fam.startswith("l1"):
        raise ValueError(
            f"norm family {family!r} is not supported: its unit ball is not uniformly convex "
            "(flat faces or corners), so the operator is not elliptic"
        )
    if fam in ("euclidean", "euclid", "l2"):
        return Euclidean(dim)
    if fam in ("weighted", "weighted_euclidean"):
        if weights is None:
            raise ValueError("weighted family needs weights")
        return WeightedEuclidean(tuple(weights))
    if fam in ("power", "power_combination"):
        sharp = sharp if sharp is not None else Euclidean(dim)
        star = star if star is not None else WeightedEuclidean(tuple(weights) if weights else (1.0,) + (4.0,) * (dim - 1))
        return PowerCombination(sharp, star, float(a), float(b), float(p_comb))
    raise ValueError(f"unknown norm family {family!r}")
