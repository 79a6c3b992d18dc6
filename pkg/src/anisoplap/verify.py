"""Evaluate both sides of interior estimates on discrete solutions.

Every check returns an :class:`EstimateReport` (or a small table) holding the
left-hand side, the named right-hand terms in their exact algebraic form and
the empirical constant ``c_emp = lhs / sum(rhs)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as sp_integrate
from scipy.special import gammaln

from .mesh import (
    RegionError,
    _subsample_barycentric,
    ball_volume,
    gradient,
    hessian,
    holder_seminorm,
    integrate,
    integrate_qp,
    morrey_norm,
    recover_gradient,
)
from .operator import RegularizedOperator, fit_monotonicity_constant
from .solver import galerkin_residual, poisson_solve, w1p_norm

__all__ = [
    "ESTIMATES",
    "EstimateReport",
    "CriticalSetTable",
    "ConvergenceTable",
    "sobolev_constant",
    "source_exponent",
    "energy_constant",
    "check_energy_bound",
    "check_caccioppoli",
    "check_stress_estimates",
    "check_hessian_estimates",
    "check_critical_set",
    "check_level_sets",
    "check_campanato_lemma",
    "check_convergence",
    "gradient_holder_quotient",
    "spread",
    "torsion_weighted_hessian",
    "torsion_critical_measure",
]

ESTIMATES = {
    "energy_bound": "explicit bound on int (eps^2 + H^2(grad u_eps))^(p/2) over the domain",
    "caccioppoli": "weighted Hessian of u_eps controlled through a cutoff and f_eps",
    "stress_gradient": "||grad a(grad u)||_L2(B_R/2) vs annulus L1 stress and ||f||_L2(B_2R)",
    "stress_l2": "||a(grad u)||_L2(B_R) vs annulus L1 stress and R ||f||_L2(B_2R)",
    "stress_l1_annulus": "||a(grad u)||_L1(annulus) vs ||grad u||^(p-1)_L(p-1)(annulus)",
    "stress_l2_squared": "int_B_R |a_eps|^2 vs squared annulus stress and R^2 int f_eps^2",
    "stress_gradient_squared": "int_B_R/2 ||grad a_eps||^2 vs squared annulus stress and int f_eps^2",
    "hessian_unweighted": "int_B_R/2 ||D^2 u||^2 for 1 < p <= 2",
    "hessian_weighted": "int_(B_R/2 minus critical set) H^(2(p-2)) ||D^2 u||^2, any p > 1",
    "critical_set": "measure of {|grad u| < delta} and the source mass on it",
    "morrey_poisson": "Holder norm of grad w, -Laplace w = f, against the Morrey norm of f",
    "eps_convergence": "W^{1,p} and monotonicity-gap distance of u_eps to the reference",
}


@dataclass
class EstimateReport:
    estimate_id: str
    lhs: float
    rhs_terms: dict
    instance: dict = field(default_factory=dict)
    hard: bool = False
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def rhs(self):
        return float(sum(self.rhs_terms.values()))

    @property
    def c_emp(self):
        if self.lhs == 0:
            return 0.0
        return self.lhs / self.rhs if self.rhs > 0 else math.inf

    @property
    def passed(self):
        """Hard checks: ``lhs <= rhs``.  Soft checks: finite constant."""
        if self.hard:
            return self.lhs <= self.rhs * (1 + 1e-12)
        return math.isfinite(self.c_emp)


def spread(values):
    """Relative variation ``max/min - 1`` of positive values."""
    v = np.asarray(values, dtype=float)
    if v.size == 0 or np.any(v <= 0) or not np.all(np.isfinite(v)):
        return math.inf
    return float(v.max() / v.min() - 1.0)


# ---------------------------------------------------------------------------
# explicit constants


def sobolev_constant(r, n):
    """Sharp constant of ``||v||_{L^{r*}} <= C ||grad v||_{L^r}`` in R^n.

    Closed form valid for ``1 <= r < n``; ``r = 1`` gives the isoperimetric value.
    """
    if not 1 <= r < n:
        raise ValueError("need 1 <= r < n")
    if r == 1:
        return math.pi**-0.5 / n * math.exp(gammaln(1 + n / 2) / n)
    lg = gammaln(1 + n / 2) + gammaln(n) - gammaln(n / r) - gammaln(1 + n - n / r)
    return (math.pi**-0.5 * n ** (-1 / r) * ((r - 1) / (n - r)) ** (1 - 1 / r)
            * math.exp(lg / n))


def source_exponent(p, n):
    """Integrability exponent ``q`` of the source."""
    if p >= 2 * n / (n + 2):
        return 2.0
    return n * p / (n * p - n + p)


def energy_constant(p, n, alpha, measure):
    """``C_lower = 2^(p'+1) (p-1) alpha^p' C0^p'`` with the Sobolev-based ``C0``."""
    pc = p / (p - 1)
    if p >= 2 * n / (n + 2):
        c0 = sobolev_constant(2 * n / (n + 2), n) * measure ** (0.5 + 1 / n - 1 / p)
    else:
        c0 = sobolev_constant(p, n)
    return 2 ** (pc + 1) * (p - 1) * alpha**pc * c0**pc


# ---------------------------------------------------------------------------
# helpers


def _instance(spec, report=None, **kw):
    out = {"name": spec.name, "p": spec.p, "norm": spec.norm.describe(), "h": spec.mesh.h,
           "eps": None if report is None else report.eps}
    out.update(kw)
    return out


def _cells(mesh, nodal):
    """Cell averages of a nodal field, NaN treated as missing (zero weight)."""
    vals = np.asarray(nodal)[mesh.cells]
    return np.nan_to_num(vals).mean(axis=1)


def _interior(region, mesh):
    return region.restrict(mesh.interior_cells)


def _frobenius2(m):
    return np.sum(np.reshape(m, (m.shape[0], -1)) ** 2, axis=1)


def _source_l2_sq(spec, region, eps):
    return integrate_qp(spec.mesh, spec.source_qp(eps) ** 2, region)


def _annulus_stress_l1(mesh, stress, center, R):
    ann = mesh.annulus(center, R, 2 * R)
    return integrate(mesh, np.linalg.norm(stress, axis=1), ann)


# ---------------------------------------------------------------------------
# checks


def check_energy_bound(report, spec, reference):
    """Hard assertion of the explicit energy bound at ``report.eps``.

    ``reference`` is the nodal reference solution (finest-eps solve) sharing the
    boundary data of ``spec``.
    """
    if reference is None:
        raise ValueError("energy bound needs a reference solution")
    mesh, p, n, eps = spec.mesh, spec.p, spec.dim, report.eps
    H = spec.norm
    lhs = integrate(mesh, (eps**2 + H.value(gradient(mesh, report.u)) ** 2) ** (p / 2))
    q = source_exponent(p, n)
    f_q = integrate_qp(mesh, np.abs(spec.source_qp(0.0)) ** q) ** (1 / q)
    c_low = energy_constant(p, n, H.alpha, mesh.measure)
    terms = {
        "reference_energy": (2**p + 1) * integrate(mesh, H.value(gradient(mesh, reference)) ** p),
        "source": c_low * f_q ** (p / (p - 1)),
        "regularization": 2**p * eps**p * mesh.measure,
    }
    return EstimateReport("energy_bound", float(lhs), terms, _instance(spec, report), hard=True,
                          extra={"C_lower": c_low, "q": q})


def check_caccioppoli(report, spec, cutoff):
    eps = report.eps
    if not eps > 0:
        raise ValueError("the Caccioppoli estimate is stated for eps > 0")
    mesh, p = spec.mesh, spec.p
    if not mesh.contains_ball(cutoff.center, cutoff.s):
        raise RegionError("cutoff support leaves the domain")
    g = gradient(mesh, report.u)
    h2 = spec.norm.value(g) ** 2
    w = (eps**2 + h2) ** (p - 2)
    eta = cutoff.values
    hess2 = _cells(mesh, _frobenius2(hessian(mesh, report.u)))
    eta2 = mesh.cell_average(eta**2)
    support = mesh.ball(cutoff.center, cutoff.s)
    lhs = integrate(mesh, eta2 * w * hess2, _interior(support, mesh))
    grad_eta2 = np.sum(gradient(mesh, eta) ** 2, axis=1)
    f2 = spec.source_qp(eps) ** 2 * mesh.interpolate_qp(eta**2)
    terms = {
        "weighted_cutoff_gradient": integrate(mesh, w * h2 * grad_eta2),
        "cutoff_source": integrate_qp(mesh, f2),
    }
    return EstimateReport("caccioppoli", float(lhs), terms,
                          _instance(spec, report, R=cutoff.s, t=cutoff.t))


def check_stress_estimates(report, spec, R, center):
    """Five stress estimates on ``B_{R/2} subset B_R subset B_{2R}``.

    The limit forms use ``a`` (no regularization) and the raw source evaluated
    on ``grad u_eps``; the squared pre-limit forms use ``a_eps`` and ``f_eps``.
    """
    mesh, p, n, eps = spec.mesh, spec.p, spec.dim, report.eps
    center = np.asarray(center, dtype=float)
    if not mesh.contains_ball(center, 2 * R):
        raise RegionError(f"B_2R with R={R:g} is not compactly inside the domain")
    g = gradient(mesh, report.u)
    inst = _instance(spec, report, R=R)
    half = _interior(mesh.ball(center, R / 2), mesh)
    ball_R = mesh.ball(center, R)
    ball_2R = mesh.ball(center, 2 * R)
    ann = mesh.annulus(center, R, 2 * R)
    out = []
    for label, e, f_eps in (("limit", 0.0, 0.0), ("regularized", eps, eps)):
        a = RegularizedOperator(spec.norm, p, e).stress(g)
        grad_a2 = _cells(mesh, _frobenius2(recover_gradient(mesh, a)))
        a_l1 = _annulus_stress_l1(mesh, a, center, R)
        f_l2_sq = _source_l2_sq(spec, ball_2R, f_eps)
        grad_a_sq = integrate(mesh, grad_a2, half)
        a_l2_sq = integrate(mesh, np.sum(a * a, axis=1), ball_R)
        if label == "limit":
            out.append(EstimateReport("stress_gradient", math.sqrt(grad_a_sq), {
                "annulus_stress": R ** (-n / 2 - 1) * a_l1,
                "source": math.sqrt(f_l2_sq)}, inst))
            out.append(EstimateReport("stress_l2", math.sqrt(a_l2_sq), {
                "annulus_stress": R ** (-n / 2) * a_l1,
                "source": R * math.sqrt(f_l2_sq)}, inst))
            gnorm = integrate(mesh, np.linalg.norm(g, axis=1) ** (p - 1), ann)
            out.append(EstimateReport("stress_l1_annulus", a_l1, {"gradient_power": gnorm}, inst))
        else:
            out.append(EstimateReport("stress_l2_squared", a_l2_sq, {
                "annulus_stress": R**-n * a_l1**2,
                "source": R**2 * f_l2_sq}, inst))
            out.append(EstimateReport("stress_gradient_squared", grad_a_sq, {
                "annulus_stress": R ** (-n - 2) * a_l1**2,
                "source": f_l2_sq}, inst))
    return out


def check_hessian_estimates(report, spec, R, center, form="unweighted", delta=0.0, eps=None):
    """Hessian integrals over ``B_{R/2}``.

    ``form="unweighted"`` (requires ``p <= 2``) integrates ``||D^2 u||^2``;
    ``form="weighted"`` integrates ``[eps^2 + H^2(grad u)]^(p-2) ||D^2 u||^2`` over
    the cells where ``|grad u| >= delta`` (``eps`` defaults to 0).  Both use the
    right-hand bracket ``R^(-n-2) ||a||_L1(annulus)^2 + ||f||_L2(B_2R)^2``.
    """
    mesh, p, n = spec.mesh, spec.p, spec.dim
    center = np.asarray(center, dtype=float)
    if form not in ("unweighted", "weighted"):
        raise ValueError(f"unknown form {form!r}")
    if form == "unweighted" and p > 2:
        raise ValueError("the unweighted Hessian bound needs p <= 2")
    if not mesh.contains_ball(center, 2 * R):
        raise RegionError(f"B_2R with R={R:g} is not compactly inside the domain")
    g = gradient(mesh, report.u)
    hess2 = _cells(mesh, _frobenius2(hessian(mesh, report.u)))
    region = _interior(mesh.ball(center, R / 2), mesh)
    if form == "weighted":
        e = 0.0 if eps is None else float(eps)
        h2 = spec.norm.value(g) ** 2
        keep = np.linalg.norm(g, axis=1) >= delta
        keep &= (h2 > 0) | (e > 0)
        with np.errstate(divide="ignore"):
            w = np.where(keep, (e * e + h2) ** (p - 2), 0.0)
        lhs = integrate(mesh, w * hess2, region.restrict(keep))
    else:
        lhs = integrate(mesh, hess2, region)
    a = RegularizedOperator(spec.norm, p, 0.0).stress(g)
    terms = {
        "annulus_stress": R ** (-n - 2) * _annulus_stress_l1(mesh, a, center, R) ** 2,
        "source": _source_l2_sq(spec, mesh.ball(center, 2 * R), 0.0),
    }
    return EstimateReport(f"hessian_{form}", float(lhs), terms,
                          _instance(spec, report, R=R, delta=delta))


@dataclass
class CriticalSetTable:
    deltas: np.ndarray
    measures: np.ndarray
    source_mass: np.ndarray
    applicable: bool

    @property
    def exponent(self):
        """Least-squares slope of ``log m`` against ``log delta``."""
        ok = self.measures > 0
        if ok.sum() < 2:
            return math.nan
        return float(np.polyfit(np.log(self.deltas[ok]), np.log(self.measures[ok]), 1)[0])

    @property
    def decreasing(self):
        order = np.argsort(-self.deltas)
        m, s = self.measures[order], self.source_mass[order]
        return bool(np.all(np.diff(m) < 0) and np.all(np.diff(s) < 0))


def check_critical_set(report, spec, delta_ladder):
    """``m(delta) = |{|grad u| < delta}|`` and ``int_{|grad u| < delta} |f|``."""
    mesh = spec.mesh
    deltas = np.asarray(delta_ladder, dtype=float)
    if np.any(deltas <= 0):
        raise ValueError("thresholds must be positive")
    gnorm = np.linalg.norm(gradient(mesh, report.u), axis=1)
    f_qp = spec.source_qp(0.0)
    cell_f = (np.abs(f_qp) @ mesh.qp_weights) * mesh.volumes
    measures = np.array([mesh.volumes[gnorm < d].sum() for d in deltas])
    mass = np.array([cell_f[gnorm < d].sum() for d in deltas])
    applicable = bool(np.mean(f_qp == 0) < 1e-3)
    return CriticalSetTable(deltas, measures, mass, applicable)


def check_level_sets(report, spec, level, delta_ladder):
    """Measure of ``{|u - level| < delta}`` sampled on sub-cell points."""
    mesh = spec.mesh
    bary = _subsample_barycentric(mesh.dim)
    vals = np.einsum("sk,mk->ms", bary, report.u[mesh.cells])
    s = bary.shape[0]
    return np.array([float(np.sum((np.abs(vals - level) < d).sum(axis=1) * mesh.volumes) / s)
                     for d in delta_ladder])


def check_campanato_lemma(mesh, f, lam, center=None, radius=None, n_pairs=4096, seed=0,
                          morrey_centers=None, morrey_radii=None):
    """``F = grad w`` with ``-Laplace w = f``: Holder norm of ``F`` on an inner ball
    against the Morrey norm of ``f``; exponent ``(lam - n + 2) / 2``."""
    n = mesh.dim
    if not n - 2 < lam < n:
        raise ValueError(f"lambda must lie in ({n - 2}, {n}), got {lam}")
    alpha = (lam - n + 2) / 2
    w = poisson_solve(mesh, f)
    F = gradient(mesh, w)
    residual = galerkin_residual(mesh, F, f)
    center = (mesh.lower + mesh.upper) / 2 if center is None else np.asarray(center, float)
    radius = 0.3 * float(np.min(mesh.upper - mesh.lower)) if radius is None else radius
    region = mesh.ball(center, radius).require_inside(mesh)
    hol = holder_seminorm(mesh, F, alpha, region, n_pairs=n_pairs, seed=seed)
    f_nodes = mesh.eval_qp(f)
    f_cell = np.sqrt((f_nodes**2) @ mesh.qp_weights)
    mor = morrey_norm(mesh, f_cell, lam, morrey_centers, morrey_radii)
    return EstimateReport("morrey_poisson", hol, {"morrey": mor},
                          {"n": n, "lambda": lam, "alpha": alpha, "h": mesh.h, "R": radius},
                          extra={"residual": residual})


@dataclass
class ConvergenceTable:
    eps: np.ndarray
    w1p_error: np.ndarray
    gap: np.ndarray
    gamma0: float

    def decreasing(self, slack=0.1):
        def mono(v):
            return bool(np.all(v[1:] <= (1 + slack) * v[:-1] + 1e-300))
        return mono(self.w1p_error) and mono(self.gap)


def check_convergence(reports, reference, spec):
    """Distance of each stage to the reference solve.

    The gap integrand is ``gamma0 (1 + |xi| + |eta|)^(p-2) |xi - eta|^2`` for
    ``p < 2`` and ``gamma0 |xi - eta|^p`` otherwise, with ``gamma0`` fitted on
    random pairs.
    """
    if len(reports) < 3:
        raise ValueError("need at least 3 schedule stages")
    mesh, p = spec.mesh, spec.p
    gamma0 = fit_monotonicity_constant(spec.operator(0.0), count=20_000, seed=0)
    g_ref = gradient(mesh, reference)
    errs, gaps = [], []
    for rep in reports:
        g = gradient(mesh, rep.u)
        d = np.linalg.norm(g - g_ref, axis=1)
        if p < 2:
            dens = (1 + np.linalg.norm(g, axis=1) + np.linalg.norm(g_ref, axis=1)) ** (p - 2) * d**2
        else:
            dens = d**p
        errs.append(w1p_norm(mesh, rep.u - reference, p))
        gaps.append(gamma0 * integrate(mesh, dens))
    return ConvergenceTable(np.array([r.eps for r in reports]), np.array(errs), np.array(gaps), gamma0)


def gradient_holder_quotient(mesh, u, beta, region=None, n_pairs=4096, seed=0):
    """Sampled Holder quotient of the cellwise gradient."""
    return holder_seminorm(mesh, gradient(mesh, u), beta, region, n_pairs, seed, return_parts=True)[2]


# ---------------------------------------------------------------------------
# radial oracles for the torsion solution


def torsion_weighted_hessian(p, n, outer, inner=0.0):
    """``int_{inner < r < outer} |grad u|^(2(p-2)) ||D^2 u||^2`` by radial quadrature."""

    def integrand(r):
        d1 = (r / n) ** (1 / (p - 1))
        d2 = d1 / ((p - 1) * r)
        dens = d1 ** (2 * (p - 2)) * (d2**2 + (n - 1) * (d1 / r) ** 2)
        return dens * n * ball_volume(n) * r ** (n - 1)

    val, _ = sp_integrate.quad(integrand, inner, outer, limit=200)
    return val


def torsion_critical_measure(p, n, delta):
    """Exact ``|{|grad u| < delta}|`` for the torsion solution (inside its ball)."""
    return ball_volume(n, n * np.asarray(delta, float) ** (p - 1))
