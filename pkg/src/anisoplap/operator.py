"""Pointwise nonlinear maps of the regularized anisotropic p-Laplacian.

For ``phi(t) = B_eps(t) = ((eps^2 + t^2)^(p/2) - eps^p) / p`` the stress is
``a_eps(xi) = phi'(H(xi)) grad H(xi)`` and its Jacobian is

    A_eps = phi''(H) gradH gradH^T + phi'(H) D^2 H.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .norms import AnisotropicNorm, DomainError

__all__ = ["RegularizedOperator", "truncate_source", "fit_monotonicity_constant"]


@dataclass(frozen=True)
class RegularizedOperator:
    norm: AnisotropicNorm
    p: float
    eps: float = 0.0

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if not 0 <= self.eps < 1:
            raise ValueError("eps must lie in [0, 1)")

    @property
    def dim(self):
        return self.norm.dim

    # -- radial profile ---------------------------------------------------
    def b_eps(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("B_eps is defined for t >= 0")
        p, e = self.p, self.eps
        return ((e * e + t * t) ** (p / 2) - e**p) / p

    def profile_d1(self, t):
        """``phi'(t) = (eps^2 + t^2)^((p-2)/2) t``."""
        t = np.asarray(t, dtype=float)
        if self.eps == 0:
            # direct power: t * t underflows for tiny t
            return t ** (self.p - 1)
        return (self.eps**2 + t * t) ** ((self.p - 2) / 2) * t

    def profile_d2(self, t):
        """``phi''(t) = (eps^2 + t^2)^((p-4)/2) (eps^2 + (p-1) t^2)``."""
        t = np.asarray(t, dtype=float)
        if self.eps == 0:
            with np.errstate(divide="ignore"):
                return (self.p - 1) * t ** (self.p - 2)
        s = self.eps**2 + t * t
        return s ** ((self.p - 4) / 2) * (self.eps**2 + (self.p - 1) * t * t)

    def weight(self, xi):
        """Euclidean ellipticity weight ``(eps^2 + |xi|^2)^((p-2)/2)``."""
        xi = np.asarray(xi, dtype=float)
        return (self.eps**2 + np.einsum("...i,...i->...", xi, xi)) ** ((self.p - 2) / 2)

    def h_weight(self, xi):
        """Anisotropic weight ``(eps^2 + H^2(xi))^((p-2)/2)``."""
        h = self.norm.value(xi)
        with np.errstate(divide="ignore"):
            return (self.eps**2 + h * h) ** ((self.p - 2) / 2)

    # -- stress and Jacobian ------------------------------------------------
    def stress(self, xi):
        xi = np.asarray(xi, dtype=float)
        flat = xi.reshape(-1, self.dim)
        out = np.zeros_like(flat)
        nz = np.any(flat != 0.0, axis=1)
        if np.any(nz):
            x, scale = _rescale(flat[nz])
            h = scale * self.norm._value(x)
            out[nz] = self.profile_d1(h)[:, None] * self.norm._grad(x)
        return out.reshape(xi.shape)

    def stress_jacobian(self, xi):
        xi = np.asarray(xi, dtype=float)
        flat = xi.reshape(-1, self.dim)
        nz = np.any(flat != 0.0, axis=1)
        if not np.all(nz) and self.eps == 0:
            raise DomainError("stress Jacobian at xi = 0 requires eps > 0")
        out = np.empty(flat.shape + (self.dim,))
        if np.any(nz):
            x, scale = _rescale(flat[nz])
            h = scale * self.norm._value(x)
            g = self.norm._grad(x)
            out[nz] = (self.profile_d2(h)[:, None, None] * g[:, :, None] * g[:, None, :]
                       + (self.profile_d1(h) / scale)[:, None, None] * self.norm._hess(x))
        if not np.all(nz):
            out[~nz] = self.eps ** (self.p - 2) * self.norm.origin_metric()
        return out.reshape(xi.shape + (self.dim,))

    def dual_stress_magnitude(self, xi):
        """``[eps^2 + H^2]^((p-2)/2) H``; equals ``H_0(a_eps(xi))``."""
        return self.profile_d1(self.norm.value(xi))

    def gap(self, xi, eta):
        """Monotonicity gap ``(a_eps(xi) - a_eps(eta)) . (xi - eta)``."""
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        return np.einsum("...i,...i->...", self.stress(xi) - self.stress(eta), xi - eta)

    tolksdorf_gap = gap

    def with_eps(self, eps):
        return RegularizedOperator(self.norm, self.p, eps)


def _rescale(x):
    # H is 1-homogeneous: evaluate on max-normalized rows so tiny vectors do not underflow
    scale = np.abs(x).max(axis=1)
    return x / scale[:, None], scale


def truncate_source(f_values, eps):
    """Clamp a source to ``[-1/eps, 1/eps]``."""
    if not eps > 0:
        raise ValueError("truncation needs eps > 0; use the raw source when eps = 0")
    return np.clip(np.asarray(f_values, dtype=float), -1.0 / eps, 1.0 / eps)


def fit_monotonicity_constant(op, count=100_000, seed=0, scale=3.0):
    """Empirical lower constant for the monotonicity gap over random pairs.

    For ``p >= 2`` the ratio is ``gap / |xi - eta|^p``; for ``p < 2`` it is
    ``gap / ((1 + |xi| + |eta|)^(p-2) |xi - eta|^2)``.  Returns the minimum.
    """
    rng = np.random.default_rng(seed)
    xi = rng.normal(scale=scale, size=(count, op.dim))
    eta = rng.normal(scale=scale, size=(count, op.dim))
    d = np.linalg.norm(xi - eta, axis=1)
    keep = d > 1e-9
    xi, eta, d = xi[keep], eta[keep], d[keep]
    gap = op.gap(xi, eta)
    if op.p >= 2:
        ref = d**op.p
    else:
        ref = (1 + np.linalg.norm(xi, axis=1) + np.linalg.norm(eta, axis=1)) ** (op.p - 2) * d**2
    return float(np.min(gap / ref))
