"""P1 Galerkin solves for the perforated and the homogenized problems.

Volume form: ``int A grad u . grad v + (A_j d_j u) v + (A0 - lam) u v``.
On Robin holes ``int a(u) v ds`` is added; Dirichlet holes and the outer
boundary (box domains) are eliminated.  Torus meshes identify slave vertices
with their masters through a 0/1 prolongation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import p1
from .errors import ConfigError, ResolutionError, SolverError
from .mesh import HOLE_ROBIN, Mesh
from .perforation import REMAINDERS, BoundaryLaw, ScalingRegime

PICARD_SWITCH = 1e-3
DEFAULT_TOL = 1e-10
MAX_EXCLUDED_FRACTION = 1e-6


def _as_matrix_field(A):
    if A is None:
        return lambda x: np.broadcast_to(np.eye(2), (len(x), 2, 2))
    if callable(A):
        return A
    A = np.asarray(A, float)
    if A.ndim == 0:
        A = float(A) * np.eye(2)
    return lambda x: np.broadcast_to(A, (len(x), 2, 2))


@dataclass(frozen=True)
class OperatorCoefficients:
    """Coefficients of ``-div(A grad) + sum_j A_j d_j + A0 - lam``.

    ``A`` may be None (identity), a scalar, a constant 2x2 matrix or a callable
    returning (M, 2, 2).  ``drift`` is None, a constant 2-vector or a callable
    returning (M, 2); ``A0`` is a scalar or callable returning (M,).
    """

    A: object = None
    drift: object = None
    A0: object = 0.0
    lam: float = 0.0
    c0: float = 1.0

    def __post_init__(self):
        if not self.c0 > 0:
            raise ConfigError("ellipticity floor c0 must be positive")

    def matrix(self, x) -> np.ndarray:
        return np.asarray(_as_matrix_field(self.A)(np.atleast_2d(x)), float)

    def drift_values(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.drift is None:
            return np.zeros((len(x), 2))
        if callable(self.drift):
            return np.asarray(self.drift(x), float)
        return np.broadcast_to(np.asarray(self.drift, float), (len(x), 2))

    def potential(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if callable(self.A0):
            return np.asarray(self.A0(x), float)
        return np.full(len(x), float(self.A0))

    def check_ellipticity(self, x) -> float:
        """Smallest eigenvalue minus c0 over the sample points (must be >= 0)."""
        M = self.matrix(x)
        if np.max(np.abs(M - np.swapaxes(M, -1, -2))) > 1e-12 * max(1.0, np.abs(M).max()):
            raise ConfigError("coefficient matrix is not symmetric")
        return float(np.linalg.eigvalsh(M).min() - self.c0)

    @property
    def has_drift(self) -> bool:
        return self.drift is not None


def _sample_grid(domain, m=33):
    axes = [np.linspace(a, b, m) for a, b in zip(domain.lo, domain.hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))


def estimate_lambda0(coeffs: OperatorCoefficients, domain=None, n: int = 2) -> float:
    """Coercivity shift ``-(|A0|_inf + n max_j |A_j|_inf^2 / (2 c0) + 1)`` from samples."""
    if not coeffs.c0 > 0:
        raise ConfigError("ellipticity floor c0 must be positive")
    x = _sample_grid(domain) if domain is not None else np.zeros((1, n))
    a0 = float(np.max(np.abs(coeffs.potential(x))))
    aj = float(np.max(np.abs(coeffs.drift_values(x)))) if coeffs.has_drift else 0.0
    return -(a0 + aj**2 * n / (2 * coeffs.c0) + 1.0)


def default_lambda(coeffs: OperatorCoefficients, domain=None) -> float:
    """lam = 0 when A0 >= 1 everywhere and there is no drift, else lambda0."""
    x = _sample_grid(domain) if domain is not None else np.zeros((1, 2))
    if not coeffs.has_drift and np.min(coeffs.potential(x)) >= 1.0:
        return 0.0
    return estimate_lambda0(coeffs, domain)


@dataclass
class FemSolution:
    mesh: Mesh
    values: np.ndarray
    lam: float
    iterations: int = 1
    residual: float = 0.0
    history: list = field(default_factory=list)
    method: str = "direct"
    _loc: object = field(default=None, repr=False)

    def locator(self) -> p1.PointLocator:
        if self._loc is None:
            d = self.mesh.domain
            per = (np.asarray(d.lo), d.lengths) if d.periodic else (None, None)
            self._loc = p1.PointLocator(self.mesh.points, self.mesh.triangles, *per)
        return self._loc

    def evaluate(self, x, grad: bool = False):
        return self.locator().interpolate(self.values, np.atleast_2d(x), grad=grad)

    def write(self, path) -> None:
        self.mesh.with_values(self.values, path)


# --------------------------------------------------------------------------
# assembly


def prolongation(mesh: Mesh, fixed: np.ndarray | None = None):
    """(P, free) with u_full = P u_free; slaves follow masters, fixed nodes are 0."""
    n = mesh.n_points
    master = mesh.period_map
    is_free = master == np.arange(n)
    if fixed is not None and len(fixed):
        is_free[np.unique(master[fixed])] = False
    free = np.flatnonzero(is_free)
    col = np.full(n, -1)
    col[free] = np.arange(len(free))
    c = col[master]
    rows = np.flatnonzero(c >= 0)
    P = sp.csr_matrix((np.ones(len(rows)), (rows, c[rows])), shape=(n, len(free)))
    return P, free


def volume_matrix(mesh: Mesh, coeffs: OperatorCoefficients, lam: float, potential=None):
    p, t = mesh.points, mesh.triangles
    A = coeffs.A
    if A is not None and not callable(A):
        A = np.asarray(A, float)
        A = float(A) * np.eye(2) if A.ndim == 0 else A
    K = p1.stiffness(p, t, A)
    if coeffs.has_drift:
        K = K + p1.convection(p, t, coeffs.drift if callable(coeffs.drift) else np.asarray(coeffs.drift, float))

    def zero_order(x):
        v = coeffs.potential(x) - lam
        if potential is not None:
            v = v + (potential(x) if callable(potential) else potential)
        return v

    return (K + p1.mass(p, t, zero_order)).tocsr()


@dataclass
class _RobinBlock:
    edges: np.ndarray
    linear: np.ndarray  # per-edge linear coefficient
    scale: np.ndarray  # per-edge coefficient in front of phi
    phi: Callable | None
    dphi: Callable | None


def robin_blocks(mesh: Mesh, laws=None, regime: ScalingRegime | None = None) -> list[_RobinBlock]:
    """Per-cavity Robin data from the mesh tags and the cavity laws."""
    spec = mesh.spec
    sel = mesh.edge_tags == HOLE_ROBIN
    if not sel.any():
        return []
    if spec is None:
        raise ConfigError("Robin-tagged mesh without a perforation spec")
    regime = regime or spec.regime
    laws = laws or [c.law for c in spec.cavities]
    s = regime.eps * regime.eta
    blocks = []
    for k in np.unique(mesh.edge_owner[sel]):
        e = mesh.edges[sel & (mesh.edge_owner == k)]
        law: BoundaryLaw = laws[k]
        mid = 0.5 * (mesh.points[e[:, 0]] + mesh.points[e[:, 1]])
        phi = dphi = None
        if law.kind == "robin_large":
            mu = law.mu1(regime)
            lin = np.full(len(e), mu)
            scale = np.full(len(e), mu)
        elif law.kind == "robin_linear_plus":
            xi = (mid - np.asarray(spec.cavities[k].center)) / s
            lin = law.b_values(xi) / s
            scale = np.full(len(e), law.mu2(regime) if law.mu2 is not None else 0.0)
        else:
            raise ConfigError(f"cavity {k} is tagged Robin but has law {law.kind!r}")
        if law.remainder == "linear":
            lin = lin + scale
        elif law.remainder != "none":
            phi, dphi = REMAINDERS[law.remainder]
        blocks.append(_RobinBlock(e, lin, scale, phi, dphi))
    return blocks


class _System:
    """Free-DOF system ``F(u) = K u + N(u) - b``."""

    def __init__(self, mesh: Mesh, K, b, blocks: list[_RobinBlock], fixed):
        self.mesh = mesh
        n = mesh.n_points
        R = sp.csr_matrix((n, n))
        for blk in blocks:
            R = R + p1.edge_mass(mesh.points, blk.edges, blk.linear)
        self.P, self.free = prolongation(mesh, fixed)
        PT = self.P.T.tocsr()
        self.A = (PT @ (K + R) @ self.P).tocsc()
        self.b = PT @ b
        self.nonlinear = [blk for blk in blocks if blk.phi is not None]
        self.PT = PT

    def full(self, u):
        return self.P @ u

    def N(self, u):
        """Nonlinear boundary vector and Jacobian on free DOFs."""
        n = self.mesh.n_points
        vec, J = np.zeros(n), sp.csr_matrix((n, n))
        uf = self.full(u)
        for blk in self.nonlinear:
            v, j = p1.edge_nonlinear(self.mesh.points, blk.edges, uf, blk.phi, blk.dphi, blk.scale)
            vec += v
            J = J + j
        return self.PT @ vec, (self.PT @ J @ self.P).tocsc()

    def residual(self, u):
        r = self.A @ u - self.b
        if self.nonlinear:
            r = r + self.N(u)[0]
        return r


def _solve_linear(A, b):
    if A.shape[0] == 0:
        return np.zeros(0)
    lu = spla.splu(A.tocsc(), permc_spec="COLAMD")
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values", [])
    return x


def _nonlinear_solve(sys: _System, tol: float, max_iter: int, switch: float):
    """Damped Picard with Aitken relaxation, then Newton with backtracking.

    Every accepted step lowers the residual; the history is kept for reporting.
    """
    lu = spla.splu(sys.A, permc_spec="COLAMD")
    scale = max(np.abs(sys.b).max(initial=0.0), 1e-300)
    u = lu.solve(sys.b)
    r = sys.residual(u)
    hist = [float(np.abs(r).max() / scale)]
    omega, prev_d = 1.0, None
    newton = False
    for it in range(1, max_iter + 1):
        if hist[-1] <= tol:
            return u, it - 1, hist, "newton" if newton else "picard"
        newton = newton or hist[-1] < switch
        if newton:
            Nv, J = sys.N(u)
            d = spla.spsolve((sys.A + J).tocsc(), -r)
        else:
            d = lu.solve(sys.b - sys.N(u)[0]) - u
            if prev_d is not None:
                dd = d - prev_d
                den = float(dd @ dd)
                if den > 0:
                    omega = float(np.clip(-omega * (prev_d @ dd) / den, 0.05, 1.5))
            prev_d = d
            d = omega * d
        t = 1.0
        for _ in range(30):
            u_try = u + t * d
            r_try = sys.residual(u_try)
            res = float(np.abs(r_try).max() / scale)
            if res <= hist[-1]:
                break
            t *= 0.5
        else:
            raise SolverError(f"no residual decrease at iteration {it}", hist)
        u, r = u_try, r_try
        hist.append(res)
    if hist[-1] <= tol:
        return u, max_iter, hist, "newton" if newton else "picard"
    raise SolverError(f"nonlinear iteration did not reach {tol:g} in {max_iter} steps", hist)


def _fixed_nodes(mesh: Mesh):
    return mesh.dirichlet_nodes()


def _solve(mesh, K, b, blocks, tol, max_iter, lam) -> FemSolution:
    sys = _System(mesh, K, b, blocks, _fixed_nodes(mesh))
    if not sys.nonlinear:
        u = _solve_linear(sys.A, sys.b)
        scale = max(np.abs(sys.b).max(initial=0.0), 1e-300)
        res = float(np.abs(sys.residual(u)).max(initial=0.0) / scale) if len(u) else 0.0
        return FemSolution(mesh, sys.full(u), lam, 1, res, [res], "direct")
    if not np.any(sys.b):
        return FemSolution(mesh, np.zeros(mesh.n_points), lam, 0, 0.0, [0.0], "trivial")
    u, its, hist, method = _nonlinear_solve(sys, tol, max_iter, PICARD_SWITCH)
    return FemSolution(mesh, sys.full(u), lam, its, hist[-1], hist, method)


def solve_perturbed(mesh: Mesh, coeffs: OperatorCoefficients, f, laws=None, regime=None,
                    lam: float | None = None, tol: float = DEFAULT_TOL, max_iter: int = 200) -> FemSolution:
    """Solve the perforated problem on a hole-fitted mesh."""
    lam = coeffs.lam if lam is None else lam
    K = volume_matrix(mesh, coeffs, lam)
    b = p1.load(mesh.points, mesh.triangles, f)
    return _solve(mesh, K, b, robin_blocks(mesh, laws, regime), tol, max_iter, lam)


def homogenized_potential(field, gamma: float | None = None):
    """x -> gamma * Upsilon(x) * beta(x) from a strange-term field with a limit attached."""
    g = field.spec.regime.gamma if gamma is None else gamma
    return lambda x: g * field.upsilon(x) * field.limit(x)


def solve_homogenized(mesh: Mesh, coeffs: OperatorCoefficients, field, f, gamma: float | None = None,
                      lam: float | None = None) -> FemSolution:
    """Solve ``(L + gamma Upsilon beta - lam) u0 = f`` on an unperforated mesh."""
    lam = coeffs.lam if lam is None else lam
    pot = None if field is None else homogenized_potential(field, gamma)
    K = volume_matrix(mesh, coeffs, lam, pot)
    b = p1.load(mesh.points, mesh.triangles, f)
    return _solve(mesh, K, b, [], DEFAULT_TOL, 1, lam)


def galerkin_residual(sol: FemSolution, coeffs: OperatorCoefficients, f, laws=None, regime=None,
                      potential=None) -> float:
    """max_i |a(u_h, phi_i) - (f, phi_i)| over the free basis functions."""
    mesh = sol.mesh
    K = volume_matrix(mesh, coeffs, sol.lam, potential)
    b = p1.load(mesh.points, mesh.triangles, f)
    blocks = robin_blocks(mesh, laws, regime) if potential is None else []
    sys = _System(mesh, K, b, blocks, _fixed_nodes(mesh))
    u = sol.values[sys.free]
    return float(np.abs(sys.residual(u)).max(initial=0.0))


def coercivity_margin(mesh: Mesh, coeffs: OperatorCoefficients, lam: float, laws=None, regime=None) -> float:
    """Smallest eigenvalue of the symmetric part relative to the mass matrix (dense; coarse meshes)."""
    from scipy.linalg import eigh

    K = volume_matrix(mesh, coeffs, lam)
    sys = _System(mesh, K, np.zeros(mesh.n_points), robin_blocks(mesh, laws, regime), _fixed_nodes(mesh))
    A = sys.A.toarray()
    S = 0.5 * (A + A.T)
    M = (sys.PT @ p1.mass(mesh.points, mesh.triangles, 1.0) @ sys.P).toarray()
    return float(eigh(S, M, eigvals_only=True, subset_by_index=[0, 0])[0])


def assembled_matrix(mesh: Mesh, coeffs: OperatorCoefficients, lam: float, laws=None, regime=None):
    K = volume_matrix(mesh, coeffs, lam)
    return _System(mesh, K, np.zeros(mesh.n_points), robin_blocks(mesh, laws, regime), _fixed_nodes(mesh)).A


# --------------------------------------------------------------------------
# norms


NORM_KINDS = ("L2", "H1_semi", "W21")


def _field_at(u, mesh: Mesh, x, elem_of_x):
    """Values and gradients of ``u`` at quadrature points ``x`` of ``mesh``.

    ``u`` may be a FemSolution (on this or another mesh), a callable returning
    (values, gradients), a callable returning values only (gradient taken as 0
    is not allowed), or None (zero field).
    """
    m = len(x)
    if u is None:
        return np.zeros(m), np.zeros((m, 2)), np.ones(m, bool)
    if isinstance(u, FemSolution):
        if u.mesh is mesh:
            t = mesh.triangles[elem_of_x]
            _, G = p1.gradients(mesh.points, mesh.triangles)
            bary = np.tile(p1.QUAD_BARY, (len(mesh.triangles), 1))
            vals = np.einsum("ni,ni->n", u.values[t], bary)
            grads = np.einsum("ni,nid->nd", u.values[t], G[elem_of_x])
            return vals, grads, np.ones(m, bool)
        v, g, ok = u.evaluate(x, grad=True)
        return np.nan_to_num(v), np.nan_to_num(g), ok
    out = u(x)
    if isinstance(out, tuple):
        v, g = out
        return np.asarray(v, float), np.asarray(g, float), np.ones(m, bool)
    raise ConfigError("callable fields must return (values, gradients)")


def norm(a, b=None, kind: str = "W21", mesh: Mesh | None = None, report: dict | None = None) -> float:
    """Norm of ``a - b`` integrated over ``mesh`` (default: the mesh of ``a``).

    Degree-5 quadrature; fields on other meshes are located and interpolated.
    Quadrature points outside the source mesh are excluded; their area
    fraction must stay below 1e-6.
    """
    if kind not in NORM_KINDS:
        raise ConfigError(f"unknown norm kind {kind!r}")
    if mesh is None:
        mesh = a.mesh if isinstance(a, FemSolution) else b.mesh
    x, w = p1.quad_points(mesh.points, mesh.triangles)
    elem = np.repeat(np.arange(len(mesh.triangles)), x.shape[1])
    x = x.reshape(-1, 2)
    w = w.ravel()
    va, ga, oka = _field_at(a, mesh, x, elem)
    vb, gb, okb = _field_at(b, mesh, x, elem)
    ok = oka & okb
    frac = float(w[~ok].sum() / w.sum())
    if report is not None:
        report["excluded_fraction"] = frac
    if frac > MAX_EXCLUDED_FRACTION:
        raise ResolutionError(f"point location excluded an area fraction {frac:.3g} > {MAX_EXCLUDED_FRACTION:g}")
    dv = np.where(ok, va - vb, 0.0)
    dg = np.where(ok[:, None], ga - gb, 0.0)
    l2 = float(w @ dv**2)
    h1 = float(w @ np.einsum("nd,nd->n", dg, dg))
    return math.sqrt({"L2": l2, "H1_semi": h1, "W21": l2 + h1}[kind])


def function_norm(f, mesh: Mesh, kind: str = "L2") -> float:
    """Norm of a closed-form callable ``f(x) -> values`` (L2 only) over ``mesh``."""
    if kind != "L2":
        raise ConfigError("closed-form norms support L2 only")
    x, w = p1.quad_points(mesh.points, mesh.triangles)
    v = p1._eval(f, x)
    v = np.broadcast_to(v, w.shape)
    return float(math.sqrt(np.sum(w * v**2)))
