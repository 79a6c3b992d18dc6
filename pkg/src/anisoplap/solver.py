"""P1 Galerkin minimization of the regularized energy and epsilon continuation.

The discrete problem minimizes

    J_eps(v) = (1/p) int (eps^2 + H^2(grad v))^(p/2) - int f_eps v

over P1 fields that agree with the boundary data on boundary nodes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mesh import Mesh, gradient, lq_norm
from .norms import AnisotropicNorm, Euclidean
from .operator import RegularizedOperator, truncate_source

__all__ = [
    "ProblemSpec",
    "SolveReport",
    "ManufacturedCase",
    "ConvergenceError",
    "energy",
    "energy_gradient",
    "energy_hessian",
    "minimize",
    "continuation_solve",
    "default_eps_schedule",
    "poisson_solve",
    "stiffness_matrix",
    "galerkin_residual",
    "manufactured_torsion",
    "w1p_norm",
    "JACOBIAN_EPS_FLOOR",
]

JACOBIAN_EPS_FLOOR = 1e-12
ARMIJO = 1e-4
MAX_HALVINGS = 40


class ConvergenceError(RuntimeError):
    """Raised by callers that require a converged solve."""


def _nodal(mesh, data, name):
    if data is None:
        return np.zeros(mesh.n_nodes)
    if callable(data):
        vals = np.asarray(data(mesh.points), dtype=float)
        return np.broadcast_to(vals, (mesh.n_nodes,)).astype(float)
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 0:
        return np.full(mesh.n_nodes, float(arr))
    if arr.shape != (mesh.n_nodes,):
        raise ValueError(f"{name} must be nodal")
    return arr.copy()


@dataclass
class ProblemSpec:
    """A Dirichlet problem on a box mesh.

    ``source`` may be a callable of points ``(k, n) -> (k,)``, a constant or
    raw nodal data.  Callables are sampled at quadrature points.
    """

    mesh: Mesh
    norm: AnisotropicNorm
    p: float
    source: Callable | np.ndarray | float = 0.0
    boundary: Callable | np.ndarray | float | None = None
    eps_schedule: tuple = (0.5, 0.25, 0.125)
    tol: float = 1e-10
    energy_tol: float = 1e-14
    max_iter: int = 200
    name: str = ""

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if self.norm.dim != self.mesh.dim:
            raise ValueError("norm and mesh dimensions differ")
        sched = tuple(float(e) for e in self.eps_schedule)
        if not sched:
            raise ValueError("empty eps schedule")
        if any(not 0 <= e < 1 for e in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValueError("eps schedule must be strictly decreasing in [0, 1)")
        if sched[-1] == 0 and self.p < 2:
            raise ValueError("eps = 0 is only allowed for p >= 2")
        self.eps_schedule = sched
        self.g = _nodal(self.mesh, self.boundary, "boundary data")
        if not np.all(np.isfinite(self.g[self.mesh.boundary])):
            raise ValueError("boundary data must be finite")
        self._f_qp = self.mesh.eval_qp(self.source)
        self.free = np.flatnonzero(~self.mesh.boundary)

    @property
    def dim(self):
        return self.mesh.dim

    def operator(self, eps):
        return RegularizedOperator(self.norm, self.p, eps)

    def source_qp(self, eps):
        return truncate_source(self._f_qp, eps) if eps > 0 else self._f_qp

    def load(self, eps):
        return self.mesh.load_vector(self.source_qp(eps))

    def lift(self, free_values):
        v = self.g.copy()
        v[self.free] = free_values
        return v

    def check_boundary(self, v):
        b = self.mesh.boundary
        if v.shape != (self.mesh.n_nodes,):
            raise ValueError("field must be nodal")
        if not np.allclose(v[b], self.g[b], rtol=0, atol=1e-12 * (1 + np.abs(self.g[b]).max(initial=0))):
            raise ValueError("field does not match the boundary data")

    def with_mesh(self, mesh):
        kw = {k: getattr(self, k) for k in ("norm", "p", "source", "boundary", "eps_schedule",
                                            "tol", "energy_tol", "max_iter", "name")}
        return ProblemSpec(mesh=mesh, **kw)


@dataclass
class SolveReport:
    u: np.ndarray
    eps: float
    energies: list
    grad_norms: list
    iterations: int
    wall_time: float
    converged: bool
    line_search_failed: bool = False
    max_iter_reached: bool = False
    increment: float | None = None  # W^{1,p} distance to previous stage

    @property
    def energy(self):
        return self.energies[-1]

    @property
    def grad_norm(self):
        return self.grad_norms[-1]


@dataclass
class ManufacturedCase:
    name: str
    p: float
    dim: int
    u: Callable
    grad: Callable
    source: Callable
    stress: Callable
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    radius: float = 1.0


# ---------------------------------------------------------------------------
# energy and derivatives


def _cell_grads(spec, v):
    return gradient(spec.mesh, v)


def energy(spec, v, eps):
    """Discrete ``J_eps(v)``."""
    v = np.asarray(v, dtype=float)
    spec.check_boundary(v)
    return _energy(spec, v, eps, spec.load(eps))


def _energy(spec, v, eps, load):
    h = spec.norm.value(_cell_grads(spec, v))
    dens = (eps * eps + h * h) ** (spec.p / 2) / spec.p
    return float(np.dot(spec.mesh.volumes, dens) - np.dot(load, v))


def _full_gradient(spec, v, eps, load):
    mesh = spec.mesh
    a = spec.operator(eps).stress(_cell_grads(spec, v))
    local = np.einsum("md,mkd->mk", a, mesh.grad_basis) * mesh.volumes[:, None]
    return mesh.incidence @ local.ravel() - load


def energy_gradient(spec, v, eps):
    """Residual ``int a_eps(grad v).grad phi_i - int f_eps phi_i`` at interior nodes
    (zero on boundary nodes)."""
    v = np.asarray(v, dtype=float)
    spec.check_boundary(v)
    out = _full_gradient(spec, v, eps, spec.load(eps))
    out[spec.mesh.boundary] = 0.0
    return out


def _jacobians(spec, xi, eps):
    op = spec.operator(eps)
    if eps > 0:
        return op.stress_jacobian(xi)
    zero = ~np.any(xi != 0, axis=1)
    out = np.empty(xi.shape + (xi.shape[1],))
    if np.any(~zero):
        out[~zero] = op.stress_jacobian(xi[~zero])
    if np.any(zero):
        out[zero] = op.with_eps(JACOBIAN_EPS_FLOOR).stress_jacobian(xi[zero])
    return out


def energy_hessian(spec, v, eps):
    """Full sparse stiffness ``int grad phi_i^T A_eps(grad v) grad phi_j``."""
    mesh = spec.mesh
    A = _jacobians(spec, _cell_grads(spec, v), eps)
    G = mesh.grad_basis
    local = np.einsum("mad,mde,mbe->mab", G, A, G) * mesh.volumes[:, None, None]
    k = mesh.cells.shape[1]
    rows = np.repeat(mesh.cells, k, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, k)).ravel()
    return sparse.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2)


def stiffness_matrix(mesh):
    G = mesh.grad_basis
    local = np.einsum("mad,mbd->mab", G, G) * mesh.volumes[:, None, None]
    k = mesh.cells.shape[1]
    rows = np.repeat(mesh.cells, k, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, k)).ravel()
    return sparse.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2)


# ---------------------------------------------------------------------------
# minimization


def minimize(spec, eps, warm_start=None):
    """Damped Newton with Armijo backtracking and a Barzilai-Borwein fallback.

    Stops when the max-abs energy gradient over interior nodes is at most
    ``spec.tol``.  A stalled line search or exhausted iteration budget is
    reported through the flags, never as convergence.
    """
    if eps == 0 and spec.p < 2:
        raise ValueError("eps = 0 requires p >= 2")
    t0 = time.perf_counter()
    mesh, free = spec.mesh, spec.free
    load = spec.load(eps)
    if warm_start is None:
        v = spec.g.copy()
        v[free] = 0.0
    else:
        v = np.asarray(warm_start, dtype=float).copy()
        v[mesh.boundary] = spec.g[mesh.boundary]

    J = _energy(spec, v, eps, load)
    g = _full_gradient(spec, v, eps, load)[free]
    energies, norms = [J], [float(np.max(np.abs(g), initial=0.0))]
    bb_step = None
    failed = False
    it = 0
    while norms[-1] > spec.tol and it < spec.max_iter:
        it += 1
        d = None
        try:
            K = energy_hessian(spec, v, eps)[free][:, free].tocsc()
            d = -spla.spsolve(K, g)
            if not np.all(np.isfinite(d)) or np.dot(g, d) >= 0:
                d = None
        except (RuntimeError, ValueError, np.linalg.LinAlgError):
            d = None
        directions = [d] if d is not None else []
        if bb_step is None:
            scale = 1.0 / max(np.abs(g).max(), 1e-300)
            bb_step = min(1.0, scale) * mesh.h**2
        directions.append(-bb_step * g)

        accepted = False
        flat = spec.energy_tol * max(abs(J), 1.0)
        for direction in directions:
            slope = float(np.dot(g, direction))
            t = 1.0
            for _ in range(MAX_HALVINGS + 1):
                trial = v.copy()
                trial[free] += t * direction
                Jt = _energy(spec, trial, eps, load)
                if Jt <= J + ARMIJO * t * slope and (Jt < J or t == 1.0):
                    accepted = True
                elif Jt <= J + flat:
                    # roundoff regime: energy flat to machine precision
                    gt = _full_gradient(spec, trial, eps, load)[free]
                    accepted = np.abs(gt).max() < norms[-1]
                if accepted:
                    break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            failed = True
            break
        gt = _full_gradient(spec, trial, eps, load)[free]
        s, y = trial[free] - v[free], gt - g
        sy = float(np.dot(s, y))
        bb_step = float(np.dot(s, s) / sy) if sy > 0 else bb_step
        v, J, g = trial, Jt, gt
        energies.append(Jt)
        norms.append(float(np.abs(g).max()))
    converged = norms[-1] <= spec.tol
    return SolveReport(
        u=v,
        eps=float(eps),
        energies=energies,
        grad_norms=norms,
        iterations=it,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        line_search_failed=failed,
        max_iter_reached=(not converged and not failed),
    )


def w1p_norm(mesh, v, p, region=None):
    """Full ``W^{1,p}`` norm of a P1 field."""
    lp = lq_norm(mesh, v, p, region)
    gp = lq_norm(mesh, gradient(mesh, v), p, region)
    return (lp**p + gp**p) ** (1.0 / p)


def continuation_solve(spec, schedule=None):
    """Solve along a decreasing eps schedule, warm-starting each stage."""
    schedule = spec.eps_schedule if schedule is None else tuple(schedule)
    reports, prev = [], None
    for eps in schedule:
        rep = minimize(spec, eps, warm_start=None if prev is None else prev.u)
        if prev is not None:
            rep.increment = w1p_norm(spec.mesh, rep.u - prev.u, spec.p)
        reports.append(rep)
        prev = rep
    return reports


def default_eps_schedule(h, floor=1e-4):
    """``0.5^k`` for ``k = 1, 2, ...`` while at least ``max(floor, h)``."""
    stop = max(floor, h)
    out, k = [], 1
    while 0.5**k >= stop:
        out.append(0.5**k)
        k += 1
    return tuple(out) if out else (0.5,)


# ---------------------------------------------------------------------------
# linear helpers


def poisson_solve(mesh, f):
    """P1 solution of ``-Laplace w = f`` with ``w = 0`` on the boundary."""
    free = np.flatnonzero(~mesh.boundary)
    K = stiffness_matrix(mesh)[free][:, free].tocsc()
    b = mesh.load_vector(mesh.eval_qp(f))[free]
    w = np.zeros(mesh.n_nodes)
    w[free] = spla.spsolve(K, b)
    return w


def galerkin_residual(mesh, F, f):
    """Max over interior basis functions of ``|int F.grad phi_i - int f phi_i|``
    for a P0 vector field ``F``."""
    F = np.asarray(F, dtype=float)
    local = np.einsum("md,mkd->mk", F, mesh.grad_basis) * mesh.volumes[:, None]
    r = mesh.incidence @ local.ravel() - mesh.load_vector(mesh.eval_qp(f))
    return float(np.abs(r[~mesh.boundary]).max(initial=0.0))


# ---------------------------------------------------------------------------
# manufactured solutions


def manufactured_torsion(p, n=2, radius=1.0, center=None, norm=None):
    """Radial solution of ``-div(|grad u|^(p-2) grad u) = 1``.

    ``u = (p-1)/p * n^(-1/(p-1)) * (R^(p') - r^(p'))`` vanishes on the sphere of
    radius ``R``; its stress is ``-(x - x0)/n``.
    """
    if norm is not None and not norm.is_euclidean:
        raise ValueError("the torsion solution is only explicit for the Euclidean norm")
    if not p > 1:
        raise ValueError("p must exceed 1")
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    pc = p / (p - 1)
    k = (p - 1) / p * n ** (-1 / (p - 1))

    def u(x):
        r = np.linalg.norm(np.asarray(x) - center, axis=-1)
        return k * (radius**pc - r**pc)

    def grad(x):
        y = np.asarray(x) - center
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > 0, (r / n) ** (1 / (p - 1)) / r, 0.0)
        return -scale * y

    def source(x):
        return np.ones(np.shape(x)[:-1])

    def stress(x):
        return -(np.asarray(x) - center) / n

    return ManufacturedCase(f"torsion(p={p:g},n={n})", float(p), n, u, grad, source, stress, center, float(radius))


def torsion_problem(p, mesh, eps_schedule, center=None, **kw):
    """Torsion instance on a box with exact boundary data and ``f = 1``."""
    case = manufactured_torsion(p, mesh.dim, radius=1.0, center=center)
    spec = ProblemSpec(mesh, Euclidean(mesh.dim), p, source=1.0, boundary=case.u,
                       eps_schedule=eps_schedule, name=case.name, **kw)
    return spec, case


__all__ += ["torsion_problem"]
