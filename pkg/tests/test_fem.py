import math

import numpy as np
import pytest
import sympy as sy

from perfhom.errors import ConfigError, ResolutionError
from perfhom.fem import (OperatorCoefficients, assembled_matrix, coercivity_margin, estimate_lambda0,
                         function_norm, galerkin_residual, norm, solve_homogenized, solve_perturbed)
from perfhom.mesh import GradingPolicy, mesh_perforated, mesh_unperforated, refine
from perfhom.perforation import (BoundaryLaw, Cavity, CavityShape, Domain, PerforationSpec, Rate,
                                 ScalingRegime)
from perfhom.strange_term import assemble_beta_eps
from conftest import lattice_spec

X, Y = sy.symbols("x y")


def manufactured(u_expr, A_expr, drift, a0, lam=0.0):
    """Source and exact (values, grads) for -div(A grad u) + drift.grad u + a0 u - lam u."""
    grad = sy.Matrix([sy.diff(u_expr, X), sy.diff(u_expr, Y)])
    flux = A_expr * grad
    f = -(sy.diff(flux[0], X) + sy.diff(flux[1], Y)) + drift[0] * grad[0] + drift[1] * grad[1] \
        + (a0 - lam) * u_expr
    fn = sy.lambdify((X, Y), f, "numpy")
    un = sy.lambdify((X, Y), u_expr, "numpy")
    gn = sy.lambdify((X, Y), list(grad), "numpy")
    A_fn = [[sy.lambdify((X, Y), A_expr[i, j], "numpy") for j in range(2)] for i in range(2)]

    def exact(x):
        g = gn(x[:, 0], x[:, 1])
        return un(x[:, 0], x[:, 1]) * np.ones(len(x)), np.column_stack([np.broadcast_to(c, len(x)) for c in g])

    def A(x):
        out = np.empty((len(x), 2, 2))
        for i in range(2):
            for j in range(2):
                out[:, i, j] = A_fn[i][j](x[:, 0], x[:, 1])
        return out

    return (lambda x: fn(x[:, 0], x[:, 1]) * np.ones(len(x))), exact, A


def test_lambda0_examples():
    assert estimate_lambda0(OperatorCoefficients(A0=1.0)) == -2.0
    assert estimate_lambda0(OperatorCoefficients(A0=0.0)) == -1.0
    assert estimate_lambda0(OperatorCoefficients(A=2.0, drift=(1.0, 0.0), c0=2.0)) == -1.5
    with pytest.raises(ConfigError):
        OperatorCoefficients(c0=0.0)


def test_lambda0_coercive_on_coarse_mesh():
    mesh = mesh_unperforated(Domain.unit_square(), 0.125)
    coeffs = OperatorCoefficients(A=2.0, drift=(1.0, 0.0), c0=2.0)
    lam0 = estimate_lambda0(coeffs)
    assert coercivity_margin(mesh, coeffs, lam0) > 0


def test_mms_hole_free_rates():
    u = sy.sin(sy.pi * X) * sy.sin(sy.pi * Y) * (1 + X)
    A = sy.Matrix([[1 + X**2, sy.Rational(1, 4)], [sy.Rational(1, 4), 1 + Y]])
    f, exact, Af = manufactured(u, A, (1, sy.Rational(1, 2)), 1 + X * Y)
    coeffs = OperatorCoefficients(A=Af, drift=(1.0, 0.5), A0=lambda x: 1 + x[:, 0] * x[:, 1])
    mesh = mesh_unperforated(Domain.unit_square(), 1 / 8)
    l2, h1 = [], []
    for _ in range(3):
        sol = solve_perturbed(mesh, coeffs, f)
        l2.append(norm(sol, exact, "L2"))
        h1.append(norm(sol, exact, "H1_semi"))
        mesh = refine(mesh)
    assert l2[-2] / l2[-1] >= 3.4 and h1[-2] / h1[-1] >= 1.8


def test_mms_one_hole_l2_rate():
    s = 0.075
    spec = PerforationSpec(Domain.torus((-0.5, -0.5), (0.5, 0.5)),
                           (Cavity((0.0, 0.0), CavityShape.disk(), BoundaryLaw()),),
                           ScalingRegime(0.25, s / 0.25, 2, 0.0))
    u = (X**2 + Y**2 - s**2) * sy.cos(sy.pi * X) ** 2 * sy.cos(sy.pi * Y) ** 2
    f, exact, _ = manufactured(u, sy.eye(2), (0, 0), 1)
    coeffs = OperatorCoefficients(A0=1.0)
    mesh = mesh_perforated(spec, GradingPolicy(h=0.08))
    errs = []
    for _ in range(3):
        errs.append(norm(solve_perturbed(mesh, coeffs, f), exact, "L2"))
        mesh = refine(mesh)
    assert errs[-2] / errs[-1] >= 3.4


def test_zero_source_zero_solution():
    mesh = mesh_perforated(lattice_spec(0.25))
    sol = solve_perturbed(mesh, OperatorCoefficients(A0=1.0), 0.0)
    assert np.all(sol.values == 0.0)


def test_constant_homogenized_solution():
    spec = lattice_spec(0.25)
    field = assemble_beta_eps(spec, beta=1 / 16)
    mesh = mesh_unperforated(spec.domain, 0.5)
    sol = solve_homogenized(mesh, OperatorCoefficients(A0=1.0), field, 1.0, gamma=4.0)
    assert np.max(np.abs(sol.values - 1 / (1 + math.pi / 2))) < 1e-12
    zero = solve_homogenized(mesh, OperatorCoefficients(A0=1.0), field, 0.0, gamma=4.0)
    assert np.all(zero.values == 0)


def test_gamma_zero_matches_hole_free_perturbed():
    mesh = mesh_unperforated(Domain.unit_square(), 0.1)
    field = assemble_beta_eps(PerforationSpec(Domain.unit_square(), (), ScalingRegime(0.1, 0.01)), beta=1.0)
    f = lambda x: np.sin(3 * x[:, 0]) + x[:, 1]
    a = solve_homogenized(mesh, OperatorCoefficients(A0=1.0), field, f, gamma=0.0)
    b = solve_perturbed(mesh, OperatorCoefficients(A0=1.0), f)
    assert np.max(np.abs(a.values - b.values)) < 1e-14


def robin_spec(law, eta=0.05):
    dom = Domain.torus((-0.5, -0.5), (0.5, 0.5))
    return PerforationSpec(dom, (Cavity((0.0, 0.0), CavityShape.disk(), law),), ScalingRegime(0.25, eta, 2, 4.0))


def test_symmetric_linear_robin_matrix():
    law = BoundaryLaw("robin_linear_plus", 1.0, mu2=Rate(1.0, -0.5, -0.5, -0.5), remainder="linear")
    mesh = mesh_perforated(robin_spec(law))
    A = assembled_matrix(mesh, OperatorCoefficients(A0=1.0), 0.0)
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()


def test_linear_robin_one_step_and_galerkin():
    law = BoundaryLaw("robin_linear_plus", 1.0, mu2=Rate(1.0, -0.5, -0.5, -0.5), remainder="linear")
    mesh = mesh_perforated(robin_spec(law))
    sol = solve_perturbed(mesh, OperatorCoefficients(A0=1.0), 1.0)
    assert sol.iterations == 1 and sol.method == "direct"
    assert galerkin_residual(sol, OperatorCoefficients(A0=1.0), 1.0) <= 1e-10


def test_monotone_nonlinear_residual_nonincreasing():
    law = BoundaryLaw("robin_linear_plus", 1.0, mu2=Rate(50.0, 0, 0, 0), remainder="tanh")
    mesh = mesh_perforated(robin_spec(law))
    coeffs = OperatorCoefficients(A0=1.0)
    sol = solve_perturbed(mesh, coeffs, lambda x: 20.0 * np.ones(len(x)))
    h = sol.history
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert sol.residual <= 1e-10
    assert galerkin_residual(sol, coeffs, lambda x: 20.0 * np.ones(len(x))) <= 1e-10 * 20 * mesh.area()


def test_dirichlet_nodes_exact():
    mesh = mesh_perforated(lattice_spec(0.25))
    sol = solve_perturbed(mesh, OperatorCoefficients(A0=1.0), 1.0)
    assert np.all(sol.values[mesh.dirichlet_nodes()] == 0.0)


def test_norm_examples():
    mesh = mesh_unperforated(Domain.unit_square(), 0.02)
    const = lambda x: (np.full(len(x), 3.0), np.zeros((len(x), 2)))
    assert norm(const, None, "L2", mesh) == pytest.approx(3.0, rel=1e-12)
    assert function_norm(lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]), mesh) == \
        pytest.approx(0.5, abs=1e-6)
    sol = solve_perturbed(mesh_unperforated(Domain.unit_square(), 0.1), OperatorCoefficients(A0=1.0), 1.0)
    assert norm(sol, sol) == 0.0
    with pytest.raises(ConfigError):
        norm(sol, None, "H2")


def test_cross_mesh_norm_reports_excluded_area():
    spec = robin_spec(BoundaryLaw(), eta=0.5)
    holed = mesh_perforated(spec)
    sol = solve_perturbed(holed, OperatorCoefficients(A0=1.0), 1.0)
    full = mesh_unperforated(spec.domain, 0.05)
    with pytest.raises(ResolutionError):
        norm(sol, None, "L2", full)
    rep = {}
    norm(sol, None, "L2", refine(holed), rep)
    assert rep["excluded_fraction"] <= 1e-6
