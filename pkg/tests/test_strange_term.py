import math

import numpy as np
import pytest
from scipy import integrate

from perfhom.errors import ConfigError, CriterionError
from perfhom.geometry import ball_box_volume, disk_box_area
from perfhom.perforation import (BoundaryLaw, Cavity, CavityShape, Domain, Lattice, PerforationSpec,
                                 ScalingRegime, combine, generate_periodic, generate_perturbed)
from perfhom.strange_term import (LatticeWindow, assemble_beta_eps, ball_value, check_criterion,
                                  check_criterion_offsets, compute_capacities, identify_beta_moving_window,
                                  snapped_rho1, sparse_bound, upsilon, union_field)
from conftest import lattice_spec


def test_planar_ball_value():
    field = assemble_beta_eps(lattice_spec(0.25))
    assert field.values == pytest.approx(np.full(16, 4 / (9 * math.pi)), rel=1e-15)
    assert field(np.array([[0.0, 0.0]]))[0] == pytest.approx(4 / (9 * math.pi))
    assert field(np.array([[0.5, 0.5]]))[0] == 0.0


def test_spatial_ball_value_from_capacity():
    # (2 - n) K / (R3^3 * 4 pi / 3) with K = -1
    assert ball_value(3, 1.5, -1.0) == pytest.approx(2 / (9 * math.pi), rel=1e-15)


def test_missing_capacity_in_3d():
    lat = Lattice(np.eye(3) * 4.0)
    spec = generate_periodic(lat, 0.25, 0.01, shape=CavityShape.ball(), domain=lat.torus(0.25, 2))
    with pytest.raises(ConfigError, match="cavity 0"):
        assemble_beta_eps(spec)
    K = compute_capacities(spec)
    assert K == pytest.approx(np.full(len(spec), -1.0))
    field = assemble_beta_eps(spec, K)
    assert np.all(field.values > 0)


@pytest.mark.parametrize("A,n,expected", [
    (np.eye(2), 2, 2 * math.pi), (np.eye(3), 3, 4 * math.pi), (np.diag([4.0, 1.0]), 2, 4 * math.pi)])
def test_upsilon_values(A, n, expected):
    assert upsilon(A, n=n) == pytest.approx(expected, rel=1e-15)


def test_upsilon_rejects_indefinite():
    with pytest.raises(ConfigError):
        upsilon(np.diag([1.0, -1.0]))


def test_disk_box_area_against_quadrature():
    rng = np.random.default_rng(1)
    for _ in range(12):
        cx, cy = rng.uniform(-1, 1, 2)
        r = rng.uniform(0.2, 1.0)
        x0, y0 = rng.uniform(-1.5, 0.5, 2)
        x1, y1 = x0 + rng.uniform(0.1, 1.5), y0 + rng.uniform(0.1, 1.5)

        def chord(x):
            h = math.sqrt(max(r * r - (x - cx) ** 2, 0.0))
            return max(0.0, min(y1, cy + h) - max(y0, cy - h))

        a, b = max(x0, cx - r), min(x1, cx + r)
        kinks = [cx + sg * math.sqrt(r * r - (y - cy) ** 2) for y in (y0, y1) if abs(y - cy) < r for sg in (-1, 1)]
        ref = 0.0
        if a < b:
            # split at the chord/face crossings where the integrand kinks
            cuts = [a] + sorted(k for k in kinks if a < k < b) + [b]
            ref = sum(integrate.quad(chord, u, v, epsabs=1e-14, epsrel=1e-13)[0] for u, v in zip(cuts, cuts[1:]))
        got = disk_box_area(np.array([cx]), np.array([cy]), r, x0, x1, y0, y1)[0]
        assert got == pytest.approx(ref, abs=1e-10)


def test_ball_box_volume_full_and_half():
    v, _ = ball_box_volume(np.zeros(3), 1.0, -2 * np.ones(3), 2 * np.ones(3))
    assert v == pytest.approx(4 * math.pi / 3, rel=1e-10)
    v, _ = ball_box_volume(np.zeros(3), 1.0, np.array([0.0, -2, -2]), 2 * np.ones(3))
    assert v == pytest.approx(2 * math.pi / 3, rel=1e-10)


def test_aligned_periodic_windows_are_exact():
    eps = 0.25
    field = assemble_beta_eps(lattice_spec(eps), beta=1 / 16)
    win = LatticeWindow((1.0, 1.0), 4 * eps)
    rep = check_criterion(field, win)
    assert rep.sup_deviation < 1e-12
    rep0 = check_criterion(field, win, 0.0)
    assert rep0.sup_deviation == pytest.approx(1 / 16, abs=1e-14)


def test_empty_field_zero_deviation():
    spec = PerforationSpec(Domain.torus((0, 0), (1, 1)), (), ScalingRegime(0.1, 0.01))
    rep = check_criterion(assemble_beta_eps(spec), LatticeWindow((1.0, 1.0), 0.25), 0.0)
    assert rep.sup_deviation == 0.0


def test_windows_too_small():
    field = assemble_beta_eps(lattice_spec(0.25))
    with pytest.raises(CriterionError, match="cannot resolve"):
        check_criterion(field, LatticeWindow((1.0, 1.0), 0.5), 1 / 16)


def test_moving_window_periodic():
    eps = 0.25
    field = assemble_beta_eps(lattice_spec(eps))
    pts = np.random.default_rng(0).uniform(-2, 2, (30, 2))
    est, sup, skipped = identify_beta_moving_window(field, 4 * eps, pts, reference=1 / 16)
    assert sup < 1e-10 and not len(skipped)
    zero = assemble_beta_eps(PerforationSpec(field.spec.domain, (), field.spec.regime))
    est0, sup0, _ = identify_beta_moving_window(zero, 1.0, pts, reference=0.0)
    assert sup0 == 0.0


def test_moving_window_skips_outside_box():
    spec = generate_periodic(Lattice.square(4.0), 0.1, 0.01)
    field = assemble_beta_eps(spec)
    x = np.array([[0.5, 0.5], [0.05, 0.5]])
    est, _, skipped = identify_beta_moving_window(field, 0.4, x)
    assert list(skipped) == [1] and np.isnan(est[1])


def _sparse(eps, rho5=0.2):
    lat = Lattice.square(2 * rho5 / eps)
    return generate_periodic(lat, eps, 1e-3, domain=Domain.torus((0, 0), (2, 2)))


def test_sparse_case_quarter_per_halving():
    reps = [sparse_bound(assemble_beta_eps(_sparse(e)), 0.2) for e in (0.02, 0.01)]
    assert reps[0].passed
    assert reps[0].measured / reps[1].measured >= 3.0


def test_sparse_precondition():
    eps = 0.1
    field = assemble_beta_eps(lattice_spec(eps, cells=4))
    with pytest.raises(CriterionError):
        sparse_bound(field, eps * 1.5)


def test_additivity_of_union():
    spec = lattice_spec(0.25)
    a = spec.with_cavities(spec.cavities[::2])
    b = spec.with_cavities(spec.cavities[1::2])
    u = combine(a, b, "union")
    x = np.random.default_rng(2).uniform(-2, 2, (10000, 2))
    assert np.array_equal(assemble_beta_eps(u)(x), union_field(assemble_beta_eps(a), assemble_beta_eps(b))(x))


def test_jittered_offsets_scale_like_sqrt_eps():
    ratios = []
    for eps in (0.25, 0.125, 0.0625):
        base = generate_periodic(Lattice.square(4.0), eps, 1e-3, domain=Domain.torus((0, 0), (4, 4)))
        field = assemble_beta_eps(generate_perturbed(base, 0.3, seed=0))
        rep = check_criterion_offsets(field, (4.0, 4.0), snapped_rho1(eps), 1 / 16)
        ratios.append(rep.sup_deviation / math.sqrt(eps))
    assert all(0.5 <= r / ratios[0] <= 2 for r in ratios)


def test_field_export(tmp_path):
    field = assemble_beta_eps(lattice_spec(0.25))
    field.write(tmp_path / "beta")
    lines = (tmp_path / "beta.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,radius,value" and len(lines) == 17
