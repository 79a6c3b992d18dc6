import math

import numpy as np
import pytest
from scipy.special import gamma

from anisoplap.mesh import Mesh, make_cutoff
from anisoplap.norms import Euclidean, PowerCombination
from anisoplap.solver import ProblemSpec, continuation_solve, minimize, torsion_problem
from anisoplap.verify import (
    ESTIMATES,
    EstimateReport,
    check_caccioppoli,
    check_campanato_lemma,
    check_convergence,
    check_critical_set,
    check_energy_bound,
    check_hessian_estimates,
    check_level_sets,
    check_stress_estimates,
    energy_constant,
    sobolev_constant,
    source_exponent,
    spread,
    torsion_critical_measure,
    torsion_weighted_hessian,
)


@pytest.fixture(scope="module")
def torsion3():
    mesh = Mesh.box((-1, -1), (1, 1), 129)
    spec, case = torsion_problem(3.0, mesh, (0.5, 0.25, 0.125, 0.0625, 0.0))
    return spec, case, continuation_solve(spec)


def test_estimate_ids():
    assert len(ESTIMATES) == 12
    assert all(ESTIMATES.values())


def test_report_constants():
    r = EstimateReport("x", 2.0, {"a": 1.0, "b": 3.0}, {})
    assert r.rhs == 4.0 and r.c_emp == 0.5 and r.passed
    assert EstimateReport("x", 0.0, {"a": 0.0}, {}).c_emp == 0.0
    assert EstimateReport("x", 1.0, {"a": 0.0}, {}).c_emp == math.inf
    assert not EstimateReport("x", 1.0, {"a": 0.0}, {}).passed
    assert not EstimateReport("x", 2.0, {"a": 1.0}, {}, hard=True).passed


def test_spread():
    assert spread([1.0, 1.5, 1.2]) == pytest.approx(0.5)
    assert spread([1.0, 0.0]) == math.inf


@pytest.mark.parametrize("n", [3, 4, 5])
def test_sobolev_constant_p2_closed_form(n):
    expected = 1 / math.sqrt(math.pi * n * (n - 2)) * (gamma(n) / gamma(n / 2)) ** (1 / n)
    assert sobolev_constant(2, n) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("n", [2, 3])
def test_sobolev_constant_isoperimetric_limit(n):
    iso = 1 / (n * (math.pi ** (n / 2) / gamma(1 + n / 2)) ** (1 / n))
    assert sobolev_constant(1, n) == pytest.approx(iso, rel=1e-12)
    assert sobolev_constant(1 + 1e-7, n) == pytest.approx(iso, rel=1e-5)
    with pytest.raises(ValueError):
        sobolev_constant(n, n)


def test_source_exponent():
    assert source_exponent(3.0, 2) == 2.0
    assert source_exponent(1.1, 3) == pytest.approx(3.3 / (3.3 - 3 + 1.1))
    assert energy_constant(2.0, 2, 1.0, 4.0) > 0


def test_energy_bound_source_scaling():
    mesh = Mesh.box((-1, -1), (1, 1), 17)
    p = 3.0
    out = []
    for t in (1.0, 2.0):
        spec = ProblemSpec(mesh, PowerCombination(), p, source=t, boundary=0.0)
        rep = minimize(spec, 0.1)
        out.append(check_energy_bound(rep, spec, rep.u))
    assert out[1].rhs_terms["source"] / out[0].rhs_terms["source"] == pytest.approx(2 ** (p / (p - 1)))
    assert all(r.passed for r in out)


def test_energy_bound_needs_reference():
    mesh = Mesh.box((0, 0), (1, 1), 5)
    spec = ProblemSpec(mesh, Euclidean(2), 2.0)
    with pytest.raises(ValueError):
        check_energy_bound(minimize(spec, 0.1), spec, None)


def _affine_report(p):
    mesh = Mesh.box((-1, -1), (1, 1), 17)
    spec = ProblemSpec(mesh, Euclidean(2), p, source=0.0, boundary=lambda x: x @ [1.0, 0.5])
    return spec, minimize(spec, 0.1)


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_affine_solution_trivial_estimates(p):
    spec, rep = _affine_report(p)
    reps = {r.estimate_id: r for r in check_stress_estimates(rep, spec, 0.3, (0, 0))}
    assert all(r.passed for r in reps.values())
    # constant stress: no gradient
    assert reps["stress_gradient"].lhs == pytest.approx(0.0, abs=1e-9)
    assert reps["stress_gradient_squared"].lhs == pytest.approx(0.0, abs=1e-18)
    w = check_hessian_estimates(rep, spec, 0.3, (0, 0), form="weighted", eps=0.1)
    assert w.lhs == pytest.approx(0.0, abs=1e-12)
    cut = make_cutoff(spec.mesh, (0, 0), 0.3, 0.6)
    assert check_caccioppoli(rep, spec, cut).lhs == pytest.approx(0.0, abs=1e-12)


def test_guards():
    spec, rep = _affine_report(3.0)
    with pytest.raises(ValueError):
        check_hessian_estimates(rep, spec, 0.3, (0, 0))
    with pytest.raises(ValueError):
        check_hessian_estimates(rep, spec, 0.3, (0, 0), form="other")
    with pytest.raises(ValueError):
        check_stress_estimates(rep, spec, 0.6, (0, 0))
    with pytest.raises(ValueError):
        check_critical_set(rep, spec, [0.1, 0.0])
    with pytest.raises(ValueError):
        check_convergence([rep, rep], rep.u, spec)


def test_stress_estimates_torsion_exact_l1_identity(torsion3):
    spec, case, stages = torsion3
    reps = {r.estimate_id: r for r in check_stress_estimates(stages[-1], spec, 0.2, (0, 0))}
    # |a(grad u)| = |grad u|^(p-1) pointwise, so the annulus L1 estimate is an identity
    assert reps["stress_l1_annulus"].c_emp == pytest.approx(1.0, rel=1e-10)
    assert len(reps) == 5


def test_weighted_hessian_matches_radial_oracle(torsion3):
    spec, case, stages = torsion3
    R = 0.4
    rep = check_hessian_estimates(stages[-1], spec, R, (0, 0), form="weighted", eps=0.0)
    assert rep.lhs == pytest.approx(torsion_weighted_hessian(3.0, 2, R / 2), rel=0.05)


def test_critical_measure_p2():
    delta = np.array([0.01, 0.1])
    np.testing.assert_allclose(torsion_critical_measure(2.0, 2, delta), 4 * np.pi * delta**2)
    mesh = Mesh.box((-1, -1), (1, 1), 65)
    spec, _ = torsion_problem(2.0, mesh, (0.0,))
    rep = minimize(spec, 0.0)
    tab = check_critical_set(rep, spec, [0.3, 0.2, 0.1])
    np.testing.assert_allclose(tab.measures, 4 * np.pi * np.array([0.09, 0.04, 0.01]), rtol=0.1)
    assert tab.applicable and tab.decreasing
    assert tab.exponent == pytest.approx(2.0, rel=0.05)


def test_critical_set_not_applicable_without_source():
    spec, rep = _affine_report(2.0)
    assert not check_critical_set(rep, spec, [0.1, 0.5]).applicable


def test_level_sets_monotone():
    mesh = Mesh.box((-1, -1), (1, 1), 33)
    spec, _ = torsion_problem(2.0, mesh, (0.0,))
    rep = minimize(spec, 0.0)
    m = check_level_sets(rep, spec, 0.1, [0.1, 0.05, 0.01])
    assert np.all(np.diff(m) < 0) and m[-1] > 0


def test_campanato_zero_source_and_guard():
    mesh = Mesh.box((0, 0), (1, 1), 17)
    rep = check_campanato_lemma(mesh, 0.0, 1.5)
    assert rep.lhs == 0.0 and rep.extra["residual"] == 0.0
    with pytest.raises(ValueError):
        check_campanato_lemma(mesh, 1.0, 2.0)


def test_campanato_constant_source():
    mesh = Mesh.box((0, 0), (1, 1), 33)
    rep = check_campanato_lemma(mesh, 1.0, 1.5)
    assert rep.extra["residual"] < 1e-8
    assert rep.instance["alpha"] == pytest.approx(0.75)
    assert 0 < rep.c_emp < math.inf


def test_convergence_table_p2_flat():
    mesh = Mesh.box((0, 0), (1, 1), 17)
    spec = ProblemSpec(mesh, Euclidean(2), 2.0, source=1.0, boundary=0.0, eps_schedule=(0.5, 0.25, 0.125))
    stages = continuation_solve(spec)
    tab = check_convergence(stages, minimize(spec, 0.0).u, spec)
    assert np.all(tab.w1p_error <= 1e-8) and tab.gamma0 > 0
