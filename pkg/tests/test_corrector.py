import math

import numpy as np
import pytest
from scipy import integrate

from perfhom.cell import CellProblem, analytic_solution, capacity_numeric
from perfhom.corrector import (ErrorRecord, build_corrector, check_resolution, decompose_identity,
                               denominator, disk_defects, disk_log_profile, predicted_components,
                               support_defects, theorem_errors)
from perfhom.errors import CellProblemError, RegimeError, ResolutionError
from perfhom.fem import OperatorCoefficients, solve_homogenized, solve_perturbed
from perfhom.mesh import mesh_perforated, mesh_unperforated
from perfhom.perforation import (BoundaryLaw, Cavity, CavityShape, Domain, PerforationSpec, Rate,
                                 ScalingRegime, eta_for_gamma)
from perfhom.strange_term import assemble_beta_eps
from conftest import lattice_spec


def one_cavity(eps=0.25, eta=math.exp(-3), law=None, shape=None):
    dom = Domain.torus((-2 * eps, -2 * eps), (2 * eps, 2 * eps))
    cav = Cavity((0.0, 0.0), shape or CavityShape.disk(), law or BoundaryLaw())
    return PerforationSpec(dom, (cav,), ScalingRegime(eps, eta, 2, 4.0))


def at_radius(r):
    return np.array([[r, 0.0], [0.0, r], [-r / math.sqrt(2), r / math.sqrt(2)]])


def test_disk_dirichlet_end_values_and_midpoint():
    spec = one_cavity()
    corr = build_corrector(spec)
    eps, eta, R4 = spec.eps, spec.eta, spec.radii.R4
    assert np.all(corr(at_radius(eps * R4)) == pytest.approx(1.0, abs=1e-14))
    assert np.all(np.abs(corr(at_radius(eps * eta))) <= 1e-14)
    assert np.all(corr(at_radius(math.sqrt(eps * eta * eps * R4))) == pytest.approx(0.5, abs=1e-14))
    r = np.geomspace(eps * eta, eps * R4, 50)
    assert corr(np.column_stack([r, 0 * r])) == pytest.approx(disk_log_profile(r, eps, eta), abs=1e-14)


def test_disk_robin_boundary_value():
    law = BoundaryLaw("robin_linear_plus", 1.0)
    spec = one_cavity(law=law)
    corr = build_corrector(spec)
    D = abs(math.log(spec.eta)) + math.log(spec.radii.R4) + 1.0
    assert corr.denominators[0] == pytest.approx(D)
    assert np.all(corr(at_radius(spec.eps * spec.eta)) == pytest.approx(1 / D, rel=1e-13))


def test_outside_support_is_one_and_bounds():
    spec = lattice_spec(0.25)
    corr = build_corrector(spec)
    x = np.random.default_rng(0).uniform(-2, 2, (4000, 2))
    v, g = corr.evaluate(x)
    k, d = corr._nearest(x)
    far = np.linalg.norm(d, axis=1) >= spec.eps * spec.radii.R4
    assert np.all(v[far] == 1.0) and np.all(g[far] == 0.0)
    assert np.all((v >= 0) & (v <= 1))


def test_continuity_across_support_boundary():
    spec = one_cavity()
    corr = build_corrector(spec)
    r = spec.eps * spec.radii.R4
    inner = corr(at_radius(r * (1 - 1e-12)))
    assert np.max(np.abs(inner - 1)) <= 1e-10


def test_gradient_matches_finite_differences():
    spec = one_cavity(shape=CavityShape.disk())
    corr = build_corrector(spec, matrix=np.array([[2.0, 0.3], [0.3, 1.0]]))
    x = np.array([[0.05, 0.02], [-0.03, 0.07]])
    _, g = corr.evaluate(x)
    h = 1e-7
    fd = np.stack([(corr(x + h * e) - corr(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    assert np.max(np.abs(fd - g)) <= 1e-5 * np.abs(g).max()


def test_ellipse_tabulated_vanishes_on_hole():
    shape = CavityShape.ellipse(1.0, 0.75)
    spec = one_cavity(shape=shape)
    corr = build_corrector(spec)
    th = np.linspace(0, 2 * np.pi, 30, endpoint=False)
    s = spec.eps * spec.eta * (1 + 1e-6)
    pts = s * np.column_stack([np.cos(th), 0.75 * np.sin(th)])
    assert np.max(np.abs(corr(pts))) < 1e-3
    r = spec.eps * spec.radii.R4 * 0.999
    assert np.max(np.abs(corr(at_radius(r)) - 1)) < 5e-3


def test_missing_cell_and_bad_denominator():
    spec = lattice_spec(0.25)
    with pytest.raises(CellProblemError, match="cavity 1"):
        build_corrector(spec, cells=[analytic_solution(CellProblem(2, np.eye(2), CavityShape.disk()))])
    big = analytic_solution(CellProblem(2, np.eye(2), CavityShape.disk(2.0), truncation=10.0))
    with pytest.raises(RegimeError, match="eps\\*eta << eps\\*R4"):
        build_corrector(one_cavity(eta=0.9), cells=[big])


def test_denominator_forms():
    assert denominator(2, math.exp(-3), 0.0, 4 / 3) == pytest.approx(3 + math.log(4 / 3))
    assert denominator(3, 0.01, -1.0, 4 / 3) == pytest.approx(1 - 0.75 * 0.01)


def test_disk_defect_oracle():
    eps, eta, R4 = 0.25, math.exp(-3), 4 / 3
    D = math.log(R4 / eta)
    l2, h1 = disk_defects(eps, eta)
    ref, _ = integrate.quad(lambda s: (math.log(s / (eps * eta)) / D - 1) ** 2 * 2 * math.pi * s,
                            eps * eta, eps * R4, epsabs=1e-15)
    assert l2 == pytest.approx(ref, rel=1e-10)
    assert h1 == pytest.approx(2 * math.pi / D, rel=1e-14)
    mesh = mesh_perforated(one_cavity(eps, eta))
    q_l2, q_h1 = support_defects(build_corrector(one_cavity(eps, eta)), mesh, 0)
    assert q_l2 == pytest.approx(l2, rel=1e-2)
    assert q_h1 == pytest.approx(h1, rel=2e-2)


def test_gradient_mass_against_rate():
    ratios = []
    for eps in (0.354, 0.25, 0.177):
        eta = eta_for_gamma(eps, 4.0)
        reg = ScalingRegime(eps, eta, 2, 4.0)
        ratios.append(disk_defects(eps, eta)[1] / (1 / reg.kappa))
    assert all(0.5 <= r / ratios[0] <= 1.5 for r in ratios)


def _pair(spec, f=1.0):
    mesh = mesh_perforated(spec)
    coeffs = OperatorCoefficients(A0=1.0)
    ue = solve_perturbed(mesh, coeffs, f)
    field = assemble_beta_eps(spec, beta=1 / 16)
    u0 = solve_homogenized(mesh_unperforated(spec.domain, spec.eps / 4), coeffs, field, f)
    return ue, u0


def test_zero_source_gives_zero_errors():
    spec = one_cavity()
    ue, u0 = _pair(spec, 0.0)
    rec = theorem_errors(ue, u0, build_corrector(spec))
    assert rec.e_H1_corr == rec.e_L2 == rec.e_H1_plain == 0.0


def test_empty_perforation_zero_errors():
    dom = Domain.torus((-0.5, -0.5), (0.5, 0.5))
    spec = PerforationSpec(dom, (), ScalingRegime(0.25, 0.05, 2, 0.0))
    mesh = mesh_unperforated(dom, 0.1)
    f = lambda x: np.cos(2 * np.pi * x[:, 0])
    ue = solve_perturbed(mesh, OperatorCoefficients(A0=1.0), f)
    u0 = solve_homogenized(mesh, OperatorCoefficients(A0=1.0), None, f)
    rec = theorem_errors(ue, u0, build_corrector(spec))
    assert rec.e_H1_corr == pytest.approx(0, abs=1e-14) and rec.e_L2 == pytest.approx(0, abs=1e-14)
    assert decompose_identity(ue, u0, build_corrector(spec)) == 0.0


def test_identity_residual_small():
    spec = one_cavity()
    ue, u0 = _pair(spec)
    corr = build_corrector(spec)
    assert decompose_identity(ue, u0, corr) <= 1e-12
    rng = np.random.default_rng(5)
    ue.values[:] = rng.normal(size=ue.values.shape)
    u0.values[:] = rng.normal(size=u0.values.shape)
    assert decompose_identity(ue, u0, corr) <= 1e-12


def test_predicted_components():
    law = BoundaryLaw("robin_linear_plus", 1.0, mu2=Rate(1, -0.5, -0.5, -0.5), remainder="linear")
    spec = one_cavity(law=law)
    comps = predicted_components(spec, "thm1", criterion=0.01)
    r = spec.regime
    assert comps["eps"] == 0.25 and comps["criterion"] == pytest.approx(0.04)
    assert comps["mu2"] == pytest.approx(math.sqrt(r.eps * r.eta * r.kappa))
    t2 = predicted_components(spec, "thm2")
    assert t2["w21:eps_eta"] == pytest.approx(math.sqrt(r.eps * r.eta))
    assert t2["w21:ratio"] == pytest.approx(r.kappa**-0.5 / r.eps)


def test_record_serialisation():
    rec = ErrorRecord(0.25, 0.05, 4.0, 0.2, 0.1, 0.4, 1.0, {"eps": 0.25, "criterion": 0.1})
    assert rec.predicted == pytest.approx(0.35)
    lines = rec.to_csv().splitlines()
    assert lines[0].split(",")[:7] == ["eps", "eta", "gamma", "e_H1_corr", "e_L2", "e_H1_plain", "f_norm"]
    assert "pred:eps" in lines[0]


def test_resolution_guard():
    a = ErrorRecord(0.25, 0.05, 4.0, 0.2, 0.1, 0.4)
    b = ErrorRecord(0.25, 0.05, 4.0, 0.21, 0.1, 0.4)
    assert check_resolution(a, b)["e_H1_corr"] < 0.1
    with pytest.raises(ResolutionError, match="refine"):
        check_resolution(a, ErrorRecord(0.25, 0.05, 4.0, 0.3, 0.1, 0.4))
