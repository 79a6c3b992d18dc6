"""Structured simplicial meshes of boxes, ball regions and discrete calculus.

Fields are plain numpy arrays.  A *nodal* (P1) field has leading length
``mesh.n_nodes``; a *cell* (P0) field has leading length ``mesh.n_cells``.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

__all__ = [
    "Mesh",
    "Region",
    "RegionError",
    "CutoffFunction",
    "gradient",
    "hessian",
    "recover_gradient",
    "integrate",
    "integrate_qp",
    "lq_norm",
    "sobolev_seminorm",
    "morrey_norm",
    "holder_seminorm",
    "make_cutoff",
    "write_field_csv",
    "ball_volume",
]


class RegionError(ValueError):
    """A region does not fit inside the mesh domain."""


def ball_volume(n, r=1.0):
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * r**n


def _subsample_barycentric(dim, k=4):
    """Barycentric sample points, one per sub-simplex of a k-fold refinement (2-D)
    or a regular interior lattice (3-D)."""
    if dim == 2:
        pts = []
        for i in range(k):
            for j in range(k - i):
                pts.append(((i + 1 / 3) / k, (j + 1 / 3) / k))  # upward
        for i in range(k - 1):
            for j in range(k - 1 - i):
                pts.append(((i + 2 / 3) / k, (j + 2 / 3) / k))  # downward
        xy = np.array(pts)
        return np.column_stack([1 - xy.sum(axis=1), xy])
    combos = [c for c in itertools.product(range(k + 1), repeat=dim + 1) if sum(c) == k]
    lat = np.array(combos, dtype=float)
    return (lat + 1.0 / (dim + 1)) / (k + 1)


def _quadrature_rule(dim):
    """Degree-2 interior rule on the reference simplex: barycentric points, weights."""
    if dim == 2:
        a, b = 2 / 3, 1 / 6
        bary = np.array([[a, b, b], [b, a, b], [b, b, a]])
        return bary, np.full(3, 1 / 3)
    if dim == 3:
        a, b = 0.5854101966249685, 0.1381966011250105
        bary = np.full((4, 4), b)
        np.fill_diagonal(bary, a)
        return bary, np.full(4, 0.25)
    raise ValueError("only dimensions 2 and 3 are supported")


class Mesh:
    """Conforming simplicial mesh of an axis-aligned box.

    Each grid cell is split into 2 triangles (2-D) or 6 Kuhn tetrahedra (3-D).
    """

    def __init__(self, points, cells, lower, upper, shape):
        self.points = np.asarray(points, dtype=float)
        self.cells = np.asarray(cells, dtype=np.int64)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.shape = tuple(shape)
        self.dim = self.points.shape[1]
        vol = self.volumes
        if np.any(vol <= 0):
            raise ValueError("mesh has non-positive cell volumes")

    @classmethod
    def box(cls, lower=(0.0, 0.0), upper=(1.0, 1.0), resolution=17):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        dim = lower.size
        if dim not in (2, 3) or upper.size != dim or np.any(upper <= lower):
            raise ValueError("need a non-degenerate 2-D or 3-D box")
        shape = (int(resolution),) * dim if np.isscalar(resolution) else tuple(int(r) for r in resolution)
        if len(shape) != dim or min(shape) < 2:
            raise ValueError("resolution must give at least 2 nodes per axis")
        axes = [np.linspace(lo, hi, m) for lo, hi, m in zip(lower, upper, shape)]
        grid = np.meshgrid(*axes, indexing="ij")
        points = np.column_stack([g.ravel(order="F") for g in grid])
        # node (i, j[, k]) -> i + nx*j (+ nx*ny*k)
        strides = np.cumprod((1,) + shape[:-1])
        base = np.array(list(itertools.product(*[range(m - 1) for m in reversed(shape)])))[:, ::-1]
        origin = base @ strides
        if dim == 2:
            off = {c: np.dot(c, strides) for c in itertools.product((0, 1), repeat=2)}
            cells = np.concatenate([
                np.column_stack([origin + off[(0, 0)], origin + off[(1, 0)], origin + off[(1, 1)]]),
                np.column_stack([origin + off[(0, 0)], origin + off[(1, 1)], origin + off[(0, 1)]]),
            ])
        else:
            tets = []
            for perm in itertools.permutations(range(3)):
                corner = np.zeros(3, dtype=int)
                verts = [origin.copy()]
                for ax in perm:
                    corner[ax] = 1
                    verts.append(origin + np.dot(corner, strides))
                tets.append(np.column_stack(verts))
            cells = np.concatenate(tets)
        return cls(points, cells, lower, upper, shape)

    # -- geometry -------------------------------------------------------------
    @property
    def n_nodes(self):
        return self.points.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @cached_property
    def _jacobians(self):
        v = self.points[self.cells]
        return np.transpose(v[:, 1:, :] - v[:, :1, :], (0, 2, 1))

    @cached_property
    def volumes(self):
        return np.abs(np.linalg.det(self._jacobians)) / math.factorial(self.dim)

    @cached_property
    def grad_basis(self):
        """Gradients of the barycentric functions, shape ``(M, n+1, n)``."""
        inv = np.linalg.inv(self._jacobians)  # rows = grad lambda_1..n
        g0 = -inv.sum(axis=1, keepdims=True)
        return np.concatenate([g0, inv], axis=1)

    @cached_property
    def centroids(self):
        return self.points[self.cells].mean(axis=1)

    @cached_property
    def boundary(self):
        tol = 1e-12 * np.max(self.upper - self.lower)
        x = self.points
        return np.any((np.abs(x - self.lower) < tol) | (np.abs(x - self.upper) < tol), axis=1)

    @cached_property
    def interior_cells(self):
        """Cells none of whose vertices lie on the boundary."""
        return ~np.any(self.boundary[self.cells], axis=1)

    @property
    def spacing(self):
        return (self.upper - self.lower) / (np.asarray(self.shape) - 1)

    @property
    def h(self):
        """Cell diameter."""
        return float(np.linalg.norm(self.spacing))

    @property
    def measure(self):
        return float(np.prod(self.upper - self.lower))

    @cached_property
    def incidence(self):
        """Sparse node-by-(cell, local vertex) incidence; column ``c*(n+1)+k``."""
        m, k = self.cells.shape
        rows = self.cells.ravel()
        cols = np.arange(m * k)
        return sparse.csr_matrix((np.ones(m * k), (rows, cols)), shape=(self.n_nodes, m * k))

    # -- quadrature -----------------------------------------------------------
    @cached_property
    def _qrule(self):
        return _quadrature_rule(self.dim)

    @property
    def qp_weights(self):
        return self._qrule[1]

    @cached_property
    def quadrature_points(self):
        bary = self._qrule[0]
        return np.einsum("qk,mkd->mqd", bary, self.points[self.cells])

    def interpolate_qp(self, nodal):
        """Values of a P1 field at the quadrature points, shape ``(M, Q)``."""
        return np.einsum("qk,mk->mq", self._qrule[0], np.asarray(nodal)[self.cells])

    def eval_qp(self, f):
        """Evaluate a callable, a constant or a nodal array at quadrature points."""
        if callable(f):
            pts = self.quadrature_points
            vals = np.asarray(f(pts.reshape(-1, self.dim)), dtype=float)
            return np.broadcast_to(vals, (pts.shape[0] * pts.shape[1],)).reshape(pts.shape[:2]).copy()
        f = np.asarray(f, dtype=float)
        if f.ndim == 0:
            return np.full((self.n_cells, self.qp_weights.size), float(f))
        if f.shape[0] != self.n_nodes:
            raise ValueError("raw source data must be nodal")
        return self.interpolate_qp(f)

    def load_vector(self, f_qp):
        """``b_i = int f phi_i`` from quadrature-point values ``(M, Q)``."""
        bary, w = self._qrule
        local = np.einsum("mq,q,qk->mk", f_qp, w, bary) * self.volumes[:, None]
        return self.incidence @ local.ravel()

    @cached_property
    def subsample_points(self):
        bary = _subsample_barycentric(self.dim)
        return np.einsum("sk,mkd->msd", bary, self.points[self.cells])

    @cached_property
    def hessian_fit(self):
        """Mesh-only part of the Hessian recovery: the patch design rows and
        their inverted normal matrices (see :func:`hessian`)."""
        n, k = self.dim, self.dim + 1
        E = _sym_basis(n)  # (s, n, n)
        verts = self.points[self.cells]
        d = verts - self.centroids[:, None, :]  # (M, k, n)
        quad = np.einsum("mid,sde,mie->msi", d, E, d)  # d_i^T E_s d_i
        corr = 0.5 * np.einsum("mid,msi->msd", self.grad_basis, quad)  # (M, s, n)
        offset = self.centroids[:, None, :] - verts  # c_T - x_node
        lin = np.einsum("sde,mke->mksd", E, offset)  # (M, k, s, n)
        cols = lin + corr[:, None, :, :]
        eye = np.broadcast_to(np.eye(n), (self.n_cells, k, n, n))
        design = np.concatenate([eye, np.transpose(cols, (0, 1, 3, 2))], axis=3)  # (M,k,n,n+s)
        return design, _patch_normal_inverse(self, design)

    # -- field helpers --------------------------------------------------------
    def location(self, values):
        n = np.asarray(values).shape[0]
        if n == self.n_nodes:
            return "node"
        if n == self.n_cells:
            return "cell"
        raise ValueError(f"field of length {n} matches neither nodes nor cells")

    def cell_average(self, nodal):
        return np.asarray(nodal)[self.cells].mean(axis=1)

    def to_cells(self, values):
        return self.cell_average(values) if self.location(values) == "node" else np.asarray(values)

    def node_lookup(self, x):
        """Index of the mesh node nearest to ``x``."""
        return int(np.argmin(np.linalg.norm(self.points - np.asarray(x, float), axis=1)))

    # -- regions --------------------------------------------------------------
    def whole(self):
        return Region("whole", None, 0.0, math.inf, np.ones(self.n_cells))

    def ball(self, center, radius):
        return self.annulus(center, 0.0, radius, kind="ball")

    def annulus(self, center, r_in, r_out, kind="annulus"):
        if not 0 <= r_in < r_out:
            raise ValueError("need 0 <= r_in < r_out")
        center = np.asarray(center, dtype=float)
        d = self._subsample_distance(center)
        inside = (d >= r_in) & (d < r_out) if r_in > 0 else d < r_out
        return Region(kind, center, float(r_in), float(r_out), inside.mean(axis=1))

    def _subsample_distance(self, center):
        # regions are rebuilt often around the same few centers
        cache = self.__dict__.setdefault("_distance_cache", {})
        key = tuple(center.tolist())
        if key not in cache:
            if len(cache) >= 8:
                cache.pop(next(iter(cache)))
            cache[key] = np.linalg.norm(self.subsample_points - center, axis=2)
        return cache[key]

    def contains_ball(self, center, radius):
        """Compact containment of the closed ball in the open box."""
        center = np.asarray(center, dtype=float)
        return bool(np.all(center - radius > self.lower) and np.all(center + radius < self.upper))


@dataclass
class Region:
    """Ball, annulus or whole domain with per-cell inclusion fractions."""

    kind: str
    center: np.ndarray | None
    r_in: float
    r_out: float
    weights: np.ndarray

    def contains(self, points):
        points = np.atleast_2d(points)
        if self.kind == "whole":
            return np.ones(points.shape[0], dtype=bool)
        d = np.linalg.norm(points - self.center, axis=1)
        return (d >= self.r_in) & (d < self.r_out) if self.r_in > 0 else d < self.r_out

    def restrict(self, mask):
        return Region(self.kind, self.center, self.r_in, self.r_out, self.weights * mask)

    def require_inside(self, mesh):
        if self.kind != "whole" and not mesh.contains_ball(self.center, self.r_out):
            raise RegionError(f"ball of radius {self.r_out:g} at {self.center} is not compactly inside the domain")
        return self


@dataclass
class CutoffFunction:
    center: np.ndarray
    t: float
    s: float
    values: np.ndarray


# ---------------------------------------------------------------------------
# differential operators


def gradient(mesh, u):
    """Per-cell gradient of a P1 field (exact for affine ``u``)."""
    u = np.asarray(u, dtype=float)
    return np.einsum("mk,mkd->md", u[mesh.cells], mesh.grad_basis)


def _patch_normal_inverse(mesh, design):
    """Inverted normal matrices ``(N_interior, q, q)`` of the patch fits."""
    m, k, r, q = design.shape
    dtd = np.einsum("mkrq,mkrs->mkqs", design, design).reshape(m * k, q * q)
    normal = (mesh.incidence @ dtd).reshape(-1, q, q)
    return np.linalg.inv(normal[~mesh.boundary])


def _patch_solve(mesh, design, data, normal_inv=None):
    """Least-squares fit per interior node from per-(cell, vertex) rows.

    ``design`` has shape ``(M, n+1, r, q)`` and ``data`` ``(M, n+1, r, c)``:
    for every cell and each of its vertices, ``r`` equations in ``q`` unknowns.
    Returns ``(N, q, c)`` solutions with NaN at boundary nodes.
    """
    m, k, r, q = design.shape
    c = data.shape[-1]
    if normal_inv is None:
        normal_inv = _patch_normal_inverse(mesh, design)
    dty = np.einsum("mkrq,mkrc->mkqc", design, data).reshape(m * k, q * c)
    rhs = (mesh.incidence @ dty).reshape(-1, q, c)
    out = np.full((mesh.n_nodes, q, c), np.nan)
    interior = ~mesh.boundary
    out[interior] = normal_inv @ rhs[interior]
    return out


def recover_gradient(mesh, cell_field):
    """Nodal Jacobian of a P0 field by an affine least-squares fit over each
    interior node's cell patch (values taken at centroids).

    ``cell_field`` has shape ``(M,)`` or ``(M, c)``; the result has shape
    ``(N, n)`` or ``(N, c, n)`` with ``[..., i, j] = d F_i / d x_j``.
    NaN marks boundary nodes.
    """
    F = np.asarray(cell_field, dtype=float)
    scalar = F.ndim == 1
    F = F.reshape(mesh.n_cells, -1)
    n, k = mesh.dim, mesh.dim + 1
    offset = mesh.centroids[:, None, :] - mesh.points[mesh.cells]  # (M, k, n)
    design = np.concatenate([np.ones(offset.shape[:2] + (1,)), offset], axis=2)[:, :, None, :]
    data = np.broadcast_to(F[:, None, None, :], (mesh.n_cells, k, 1, F.shape[1]))
    sol = _patch_solve(mesh, design, data)  # (N, 1+n, c)
    jac = np.transpose(sol[:, 1:, :], (0, 2, 1))
    return jac[:, 0, :] if scalar else jac


def _sym_basis(n):
    basis = []
    for a in range(n):
        for b in range(a, n):
            e = np.zeros((n, n))
            e[a, b] = e[b, a] = 1.0
            basis.append(e)
    return np.array(basis)


def hessian(mesh, u):
    """Recovered nodal Hessian of a P1 field, shape ``(N, n, n)``.

    Fits ``grad_T u = g + M (c_T - x) + K_T : M`` over the patch of each interior
    node, where ``K_T : M`` is the exact per-cell offset between the P1 gradient
    of a quadratic and its value at the centroid.  The fit is therefore exact
    for quadratics on any mesh; ``M`` is symmetric by construction.
    Boundary nodes are NaN.
    """
    u = np.asarray(u, dtype=float)
    n, k = mesh.dim, mesh.dim + 1
    E = _sym_basis(n)
    design, normal_inv = mesh.hessian_fit
    g = gradient(mesh, u)
    data = np.broadcast_to(g[:, None, :, None], (mesh.n_cells, k, n, 1))
    sol = _patch_solve(mesh, design, data, normal_inv)[:, n:, 0]  # (N, s)
    return np.einsum("ns,sde->nde", sol, E)


# ---------------------------------------------------------------------------
# quadrature and norms


def _magnitude(values, lead):
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        return np.abs(v)
    return np.sqrt(np.sum(v.reshape(lead, -1) ** 2, axis=1))


def integrate(mesh, g, region=None, weight=None):
    """Integral of a scalar field over a region.

    Nodal fields use vertex-average quadrature, cell fields the midpoint rule;
    a product of two nodal fields is formed at the vertices first.
    """
    g = np.asarray(g, dtype=float)
    w_reg = mesh.whole().weights if region is None else region.weights
    if w_reg.shape[0] != mesh.n_cells:
        raise ValueError("region belongs to a different mesh")
    if weight is not None:
        weight = np.asarray(weight, dtype=float)
        if mesh.location(g) == mesh.location(weight) == "node":
            g = g * weight
        else:
            g = mesh.to_cells(g) * mesh.to_cells(weight)
    return float(np.dot(mesh.to_cells(g) * w_reg, mesh.volumes))


def integrate_qp(mesh, values, region=None):
    """Integral of quadrature-point values ``(M, Q)`` over a region."""
    w_reg = mesh.whole().weights if region is None else region.weights
    cell = np.asarray(values) @ mesh.qp_weights
    return float(np.dot(cell * w_reg, mesh.volumes))


def lq_norm(mesh, g, q, region=None):
    """``L^q`` norm of a scalar, vector or matrix field (Euclidean/Frobenius
    magnitude); ``q = inf`` gives the max over the region."""
    if not q >= 1:
        raise ValueError("q must be >= 1")
    g = np.asarray(g, dtype=float)
    mag = _magnitude(g, g.shape[0])
    if math.isinf(q):
        w = mesh.whole().weights if region is None else region.weights
        cell = mesh.cells if mesh.location(mag) == "node" else None
        vals = mag[cell].max(axis=1) if cell is not None else mag
        sel = w > 0
        return float(vals[sel].max()) if np.any(sel) else 0.0
    return integrate(mesh, mag**q, region) ** (1.0 / q)


def sobolev_seminorm(mesh, u, p, region=None):
    """``||grad u||_{L^p}`` of a P1 field."""
    return lq_norm(mesh, gradient(mesh, u), p, region)


def _default_centers(mesh, count_per_axis=8):
    axes = [np.linspace(lo, hi, count_per_axis + 2)[1:-1] for lo, hi in zip(mesh.lower, mesh.upper)]
    return np.array(list(itertools.product(*axes)))


def morrey_norm(mesh, f, lam, centers=None, radii=None, return_argmax=False):
    """Sampled Morrey norm ``max [rho^-lam int_{B_rho(x) cap Omega} f^2]^(1/2)``.

    A lower bound for the exact supremum that grows with the sample sets.
    Default centers: an 8^n interior grid; default radii: a geometric ladder
    from ``2h`` to half the domain diameter.
    """
    n = mesh.dim
    if not n - 2 < lam < n:
        raise ValueError(f"Morrey exponent must lie in ({n - 2}, {n}), got {lam}")
    f = np.asarray(f, dtype=float)
    f2 = mesh.cell_average(f**2) if mesh.location(f) == "node" else f**2
    centers = _default_centers(mesh) if centers is None else np.atleast_2d(np.asarray(centers, float))
    diam = float(np.linalg.norm(mesh.upper - mesh.lower))
    if radii is None:
        radii = np.geomspace(2 * mesh.h, diam / 2, 12)
    radii = np.sort(np.asarray(radii, dtype=float))
    if np.any(radii <= 0) or radii[-1] > diam:
        raise ValueError("radii must be positive and within the domain diameter")
    if np.any(centers < mesh.lower) or np.any(centers > mesh.upper):
        raise ValueError("centers must lie in the domain")
    pts = mesh.subsample_points.reshape(-1, n)
    s = mesh.subsample_points.shape[1]
    mass = np.repeat(f2 * mesh.volumes / s, s)
    best, arg = 0.0, None
    for c in centers:
        d = np.linalg.norm(pts - c, axis=1)
        # bin j collects points with radii[j-1] <= d < radii[j]
        bins = np.searchsorted(radii, d, side="right")
        vals = np.cumsum(np.bincount(bins, weights=mass, minlength=radii.size + 1))[: radii.size]
        q = vals / radii**lam
        j = int(np.argmax(q))
        if q[j] > best:
            best, arg = float(q[j]), (tuple(c), float(radii[j]))
    val = math.sqrt(best)
    return (val, arg) if return_argmax else val


def holder_seminorm(mesh, F, alpha, region=None, n_pairs=4096, seed=0, return_parts=False):
    """Sampled ``C^{0,alpha}`` norm: ``sup|F| + max |F(x)-F(y)| / |x-y|^alpha``.

    Nodal fields are sampled at nodes, cell fields at centroids.  Pairs are
    the extreme pairs of the point cloud plus random pairs drawn in fixed-size
    chunks, so a larger ``n_pairs`` always extends a smaller one.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    F = np.asarray(F, dtype=float)
    pts = mesh.points if mesh.location(F) == "node" else mesh.centroids
    vals = F.reshape(F.shape[0], -1)
    if region is not None:
        keep = region.contains(pts)
        pts, vals = pts[keep], vals[keep]
    if pts.shape[0] == 0:
        raise ValueError("empty region")
    sup = float(np.max(np.linalg.norm(vals, axis=1)))
    m = pts.shape[0]
    ext = []
    for direction in itertools.product((-1.0, 0.0, 1.0), repeat=mesh.dim):
        if any(direction):
            proj = pts @ np.asarray(direction)
            ext.append((int(np.argmin(proj)), int(np.argmax(proj))))
    pairs = [np.array(ext)]
    rng = np.random.default_rng(seed)
    chunk = 1024
    drawn = 0
    while drawn < n_pairs:
        pairs.append(rng.integers(0, m, size=(chunk, 2))[: n_pairs - drawn])
        drawn += chunk
    pairs = np.concatenate(pairs)
    i, j = pairs[:, 0], pairs[:, 1]
    dist = np.linalg.norm(pts[i] - pts[j], axis=1)
    ok = dist > 0
    quot = np.linalg.norm(vals[i[ok]] - vals[j[ok]], axis=1) / dist[ok] ** alpha
    semi = float(quot.max()) if quot.size else 0.0
    return (sup + semi, sup, semi) if return_parts else sup + semi


def make_cutoff(mesh, center, t, s):
    """Radial piecewise-linear cutoff: 1 on ``B_t``, 0 outside ``B_s``."""
    if not 0 <= t < s:
        raise ValueError("cutoff radii need 0 <= t < s")
    center = np.asarray(center, dtype=float)
    if not mesh.contains_ball(center, s):
        raise RegionError("cutoff support leaves the domain")
    d = np.linalg.norm(mesh.points - center, axis=1)
    return CutoffFunction(center, float(t), float(s), np.clip((s - d) / (s - t), 0.0, 1.0))


def write_field_csv(path, mesh, fields, location="node"):
    """Write named fields as CSV rows ``x,y[,z],<names>`` at nodes or centroids."""
    coords = mesh.points if location == "node" else mesh.centroids
    axes = ["x", "y", "z"][: mesh.dim]
    names, cols = [], []
    for name, values in fields.items():
        v = np.asarray(values, dtype=float).reshape(coords.shape[0], -1)
        if v.shape[1] == 1:
            names.append(name)
        else:
            names += [f"{name}_{k}" for k in range(v.shape[1])]
        cols.append(v)
    table = np.hstack([coords] + cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(axes + names)
        for row in table:
            w.writerow([f"{x:.17g}" for x in row])
