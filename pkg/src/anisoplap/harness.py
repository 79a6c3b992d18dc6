"""Run solve and verification suites from a :class:`RunConfig` and write CSVs."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, RegionError, gradient, make_cutoff, write_field_csv
from .solver import ProblemSpec, continuation_solve, minimize
from .verify import (
    ESTIMATES,
    EstimateReport,
    check_caccioppoli,
    check_campanato_lemma,
    check_convergence,
    check_critical_set,
    check_energy_bound,
    check_hessian_estimates,
    check_stress_estimates,
    spread,
)

__all__ = ["NonConvergence", "Instance", "SuiteResult", "solve_instances", "run_verify",
           "critical_ladder", "write_reports", "write_solve_csv", "inject_fault"]

log = logging.getLogger(__name__)

STRESS_IDS = ("stress_gradient", "stress_l2", "stress_l1_annulus", "stress_l2_squared",
              "stress_gradient_squared")


class NonConvergence(RuntimeError):
    pass


@dataclass
class Instance:
    """One (source, p) problem solved on every configured resolution."""

    name: str
    p: float
    specs: list
    reports: list  # per resolution: list of SolveReport along the schedule
    references: list  # per resolution: final-stage field before any fault injection

    @property
    def finest(self):
        return self.specs[-1], self.reports[-1]


@dataclass
class SuiteResult:
    reports: list = field(default_factory=list)
    tables: list = field(default_factory=list)  # EstimateReport-shaped rows for tables
    failures: list = field(default_factory=list)

    def by_id(self, estimate_id):
        return [r for r in self.reports if r.estimate_id == estimate_id]


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(float(f"{x:.12e}"))
    return str(x)


def inject_fault(u, mesh, seed, amplitude=1.0):
    """Deterministic nodal noise on interior nodes (negative control)."""
    rng = np.random.default_rng(seed)
    out = u.copy()
    inner = ~mesh.boundary
    out[inner] += amplitude * (1.0 + np.abs(u).max()) * rng.standard_normal(inner.sum())
    return out


def solve_instances(cfg, fault_injection=False):
    norm = cfg.norm()
    out = []
    for p in cfg.p_values:
        for src_name, f in cfg.sources():
            boundary = cfg.boundary_for(src_name, p, norm)
            name = f"{src_name} p={p:g} H={norm.describe()}"
            specs, reps, refs = [], [], []
            for n_nodes in cfg.resolutions:
                mesh = Mesh.box(cfg.lower, cfg.upper, n_nodes)
                spec = ProblemSpec(mesh, norm, p, source=f, boundary=boundary,
                                   eps_schedule=cfg.schedule(mesh.h), tol=cfg.tol,
                                   max_iter=cfg.max_iter, name=name)
                stages = continuation_solve(spec)
                bad = [r for r in stages if not r.converged]
                if bad:
                    raise NonConvergence(f"{name} at {n_nodes} nodes/axis did not converge at eps={bad[0].eps:g}")
                refs.append(stages[-1].u.copy())
                if fault_injection:
                    for k, r in enumerate(stages):
                        r.u = inject_fault(r.u, mesh, cfg.seed + k)
                log.info("solved %s on %d^%d nodes", name, n_nodes, mesh.dim)
                specs.append(spec)
                reps.append(stages)
            out.append(Instance(name, p, specs, reps, refs))
    return out


def critical_ladder(mesh, u_grad_norm, count=6, min_cells=50, max_fraction=0.25):
    """Thresholds whose sublevel measures span ``min_cells`` cells to ``max_fraction``
    of the domain."""
    order = np.argsort(u_grad_norm)
    cum = np.cumsum(mesh.volumes[order])
    lo_mass = min_cells * mesh.volumes.mean()
    hi_mass = max_fraction * mesh.measure
    d_lo = u_grad_norm[order][np.searchsorted(cum, lo_mass)]
    d_hi = u_grad_norm[order][np.searchsorted(cum, hi_mass)]
    if not d_hi > d_lo > 0:
        return np.array([])
    return np.geomspace(d_hi, d_lo, count)


def _table_row(estimate_id, inst, spec, eps, r_col, lhs, terms, extra=None):
    rep = EstimateReport(estimate_id, float(lhs), terms,
                         {"name": inst.name, "p": inst.p, "h": spec.mesh.h, "eps": eps, "R": r_col})
    rep.extra.update(extra or {})
    rep.extra["table"] = True
    return rep


def run_verify(cfg, fault_injection=False, instances=None):
    """Run the configured checks; every hard-assertion failure is listed in
    ``result.failures``."""
    instances = solve_instances(cfg, fault_injection) if instances is None else instances
    res = SuiteResult()
    checks = set(cfg.checks)
    center = np.asarray(cfg.region_center, dtype=float)
    radii = cfg.radii

    def add(rep, inst, spec, eps, R=None):
        rep.instance.update({"name": inst.name, "p": inst.p, "h": spec.mesh.h, "eps": eps, "R": R})
        res.reports.append(rep)
        if not rep.passed:
            res.failures.append(f"{rep.estimate_id} [{inst.name}, h={spec.mesh.h:.4g}, eps={eps:g}]")

    for inst in instances:
        n_res = len(inst.specs)
        for k, (spec, stages, ref) in enumerate(zip(inst.specs, inst.reports, inst.references)):
            final = stages[-1]
            finest = k == n_res - 1
            if "energy_bound" in checks:
                for st in stages:
                    add(check_energy_bound(st, spec, ref), inst, spec, st.eps)
            r_list = radii if finest else radii[:1]
            for R in r_list:
                try:
                    if "caccioppoli" in checks and final.eps > 0:
                        cut = make_cutoff(spec.mesh, center, R, 2 * R)
                        add(check_caccioppoli(final, spec, cut), inst, spec, final.eps, R)
                    if checks & set(STRESS_IDS):
                        for rep in check_stress_estimates(final, spec, R, center):
                            if rep.estimate_id in checks:
                                add(rep, inst, spec, final.eps, R)
                    if "hessian_unweighted" in checks and inst.p <= 2:
                        add(check_hessian_estimates(final, spec, R, center), inst, spec, final.eps, R)
                except RegionError as exc:
                    log.warning("skipping R=%g for %s: %s", R, inst.name, exc)
            if "morrey_poisson" in checks and inst.p == cfg.p_values[0]:
                lam = cfg.morrey_lambda if cfg.morrey_lambda is not None else spec.dim - 0.5
                rep = check_campanato_lemma(spec.mesh, spec.source, lam, seed=cfg.seed)
                rep.extra["source"] = inst.name.split(" p=")[0]
                add(rep, inst, spec, 0.0, rep.instance["R"])
                if rep.extra["residual"] > 1e-8:
                    res.failures.append(f"morrey_poisson divergence residual {rep.extra['residual']:.2e}")

        spec, stages = inst.finest
        final = stages[-1]
        if "hessian_weighted" in checks:
            R = radii[0]
            g = np.linalg.norm(gradient(spec.mesh, final.u), axis=1)
            deltas = critical_ladder(spec.mesh, g)
            for st in stages:
                for d in np.concatenate([[0.0], deltas]):
                    try:
                        rep = check_hessian_estimates(st, spec, R, center, form="weighted",
                                                      delta=float(d), eps=st.eps)
                    except RegionError:
                        continue
                    rep.extra["delta"] = float(d)
                    add(rep, inst, spec, st.eps, R)
        if "critical_set" in checks:
            g = np.linalg.norm(gradient(spec.mesh, final.u), axis=1)
            deltas = critical_ladder(spec.mesh, g)
            if deltas.size:
                tab = check_critical_set(final, spec, deltas)
                for d, m, s in zip(tab.deltas, tab.measures, tab.source_mass):
                    res.tables.append(_table_row("critical_set", inst, spec, final.eps, float(d), m,
                                                 {"source_mass": float(s)},
                                                 {"exponent": tab.exponent, "applicable": tab.applicable}))
        if "eps_convergence" in checks and len(stages) >= 3:
            last = stages[-1].eps
            ref = minimize(spec, last / 4 if last > 0 else 0.0, warm_start=final.u)
            if not ref.converged:
                raise NonConvergence(f"{inst.name}: reference solve did not converge")
            tab = check_convergence(stages, ref.u, spec)
            for e, w, gp in zip(tab.eps, tab.w1p_error, tab.gap):
                res.tables.append(_table_row("eps_convergence", inst, spec, float(e), None, w,
                                             {"gap": float(gp)}, {"gamma0": tab.gamma0}))
    return res


# ---------------------------------------------------------------------------
# output


UNITS = "# units: all quantities dimensionless (unit-free domain); estimate_id={eid}"


def write_reports(result, out_dir):
    """One CSV per estimate id plus ``summary.csv``; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    rows = result.reports + result.tables
    for eid in ESTIMATES:
        group = [r for r in rows if r.estimate_id == eid]
        if not group:
            continue
        term_names = []
        for r in group:
            for t in r.rhs_terms:
                if t not in term_names:
                    term_names.append(t)
        path = os.path.join(out_dir, f"{eid}.csv")
        with open(path, "w", newline="") as fh:
            fh.write(UNITS.format(eid=eid) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instance", "estimate_id", "h", "eps", "R", "lhs"]
                       + [f"rhs_term:{t}" for t in term_names] + ["c_emp"])
            for r in group:
                inst = r.instance
                c = math.nan if r.extra.get("table") else r.c_emp
                w.writerow([inst.get("name", ""), eid, _fmt(inst.get("h")), _fmt(inst.get("eps")),
                            _fmt(inst.get("R")), _fmt(r.lhs)]
                           + [_fmt(r.rhs_terms.get(t)) for t in term_names] + [_fmt(c)])
        paths.append(path)
    path = os.path.join(out_dir, "summary.csv")
    with open(path, "w", newline="") as fh:
        fh.write(UNITS.format(eid="summary") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimate_id", "instance", "count", "c_emp_min", "c_emp_max", "spread", "status"])
        for eid in ESTIMATES:
            names = []
            for r in result.reports:
                if r.estimate_id == eid and r.instance["name"] not in names:
                    names.append(r.instance["name"])
            for name in names:
                group = [r for r in result.reports if r.estimate_id == eid and r.instance["name"] == name]
                c = [r.c_emp for r in group]
                pos = [x for x in c if x > 0]
                w.writerow([eid, name, len(group), _fmt(min(c)), _fmt(max(c)),
                            _fmt(spread(pos)) if pos else "", "pass" if all(r.passed for r in group) else "FAIL"])
    paths.append(path)
    return paths


def write_solve_csv(instances, out_dir, dump_fields=True):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "solve.csv")
    with open(path, "w", newline="") as fh:
        fh.write("# units: dimensionless; estimate_id=solve (energy history per continuation stage)\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "h", "eps", "iterations", "energy", "grad_norm", "converged",
                    "line_search_failed", "increment", "energy_history"])
        for inst in instances:
            for spec, stages in zip(inst.specs, inst.reports):
                for r in stages:
                    w.writerow([inst.name, _fmt(spec.mesh.h), _fmt(r.eps), r.iterations, _fmt(r.energy),
                                _fmt(r.grad_norm), int(r.converged), int(r.line_search_failed),
                                _fmt(r.increment), " ".join(_fmt(e) for e in r.energies)])
    paths = [path]
    if dump_fields:
        for i, inst in enumerate(instances):
            spec, stages = inst.finest
            fp = os.path.join(out_dir, f"field_{i}.csv")
            write_field_csv(fp, spec.mesh, {"u": stages[-1].u})
            paths.append(fp)
    return paths
