"""Cell problems for the capacity constants K.

The exterior problem ``div(A grad X) = 0`` outside a cavity is normalised at
infinity by ``ln|A^{-1/2} xi| + K`` (n = 2) or ``1 + K |A^{-1/2} xi|^{2-n}``
(n >= 3).  Numerically we solve the truncated problem on
``|A^{-1/2} xi| < T`` with the outer datum written in terms of K and iterate
the datum against the extracted K.

All numerical work happens in ``zeta = A^{-1/2} xi`` where the equation is
the Laplacian (times sqrt(det A)) and the outer boundary is a circle.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import p1
from .errors import CellProblemError, ConfigError
from .perforation import BoundaryLaw, CavityShape, Radii, ScalingRegime

FIT_TOL = 1e-10
MAX_FIXED_POINT = 5
RESIDUAL_FLAG = 5e-2


def _sqrtm_inv(A):
    w, V = np.linalg.eigh(A)
    return (V / np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class CellProblem:
    n: int
    matrix: np.ndarray
    shape: CavityShape
    inner: str = "dirichlet"
    b: float = 1.0
    truncation: float = 1.0e3
    R2: float = Radii().R2

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if A.shape != (self.n, self.n):
            raise ConfigError(f"matrix must be {self.n}x{self.n}")
        if np.max(np.abs(A - A.T)) > 1e-14:
            raise ConfigError("cell matrix is not symmetric")
        if np.linalg.eigvalsh(A)[0] <= 0:
            raise ConfigError("cell matrix is not positive definite")
        object.__setattr__(self, "matrix", A)
        if self.inner not in ("dirichlet", "robin"):
            raise ConfigError(f"unknown inner condition {self.inner!r}")
        if self.inner == "robin" and not self.b > 0:
            raise ConfigError("Robin coefficient must be positive")
        if self.shape.dimension != self.n:
            raise ConfigError("shape dimension differs from problem dimension")
        if not self.truncation > self.R2:
            raise ConfigError(f"truncation radius {self.truncation} must exceed R2={self.R2}")

    @classmethod
    def for_cavity(cls, shape: CavityShape, law: BoundaryLaw, regime: ScalingRegime,
                   radii: Radii = Radii(), matrix=None):
        """Cell problem of one cavity; robin_large cavities carry the Dirichlet condition."""
        A = np.eye(regime.n) if matrix is None else matrix
        if law.is_dirichlet_like:
            inner, b = "dirichlet", 1.0
        else:
            if callable(law.b):
                raise CellProblemError("tabulated b is not supported by the cell solver")
            inner, b = "robin", float(law.b)
        return cls(regime.n, A, shape, inner, b, radii.R4 / regime.eta, radii.R2)

    @property
    def isotropic_factor(self) -> float | None:
        """c if A = c I, else None."""
        c = self.matrix[0, 0]
        return float(c) if np.allclose(self.matrix, c * np.eye(self.n), rtol=0, atol=1e-14 * c) else None

    @property
    def is_radial(self) -> bool:
        return self.shape.is_round and self.isotropic_factor is not None

    def outer_datum(self, K: float, radius: float | None = None) -> float:
        T = self.truncation if radius is None else radius
        return math.log(T) + K if self.n == 2 else 1.0 + K * T ** (2 - self.n)

    def template(self, rho, K):
        rho = np.asarray(rho, dtype=float)
        return np.log(rho) + K if self.n == 2 else 1.0 + K * rho ** (2 - self.n)

    def zeta_shape(self) -> CavityShape:
        """Cavity image under xi -> A^{-1/2} xi (2D)."""
        sh = self.shape
        if self.n != 2:
            raise CellProblemError("zeta_shape is planar only")
        a, b = (sh.semi_axes * 2)[:2] if sh.kind == "disk" else sh.semi_axes
        R = np.array([[math.cos(sh.angle), -math.sin(sh.angle)], [math.sin(sh.angle), math.cos(sh.angle)]])
        M = _sqrtm_inv(self.matrix) @ R @ np.diag([a, b])
        U, S, _ = np.linalg.svd(M)
        if abs(S[0] - S[1]) <= 1e-14 * S[0]:
            return CavityShape.disk(float(S[0]))
        return CavityShape.ellipse(float(S[0]), float(S[1]), math.atan2(U[1, 0], U[0, 0]))


@dataclass
class CellSolution:
    problem: CellProblem
    K: float
    residual: float
    iterations: int
    profile: Callable = field(repr=False)
    table: np.ndarray = field(repr=False)  # columns: |zeta|, Z along the first ray
    flagged: bool = False
    method: str = "analytic"
    history: list = field(default_factory=list, repr=False)
    grid: tuple | None = field(default=None, repr=False)  # planar: (zeta points, triangles, Z values)

    @property
    def truncation(self) -> float:
        return self.problem.truncation

    def __call__(self, xi):
        return self.profile(xi)

    def to_json(self) -> dict:
        return {"K": float(self.K), "residual": float(self.residual), "truncation": self.truncation,
                "iterations": int(self.iterations), "method": self.method, "flagged": bool(self.flagged)}

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["radius", "Z"])
            for r, z in self.table:
                w.writerow([repr(float(r)), repr(float(z))])
        stem.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# analytic


def capacity_analytic(shape: CavityShape, inner: str = "dirichlet", n: int | None = None,
                      A: float | np.ndarray = 1.0, b: float = 1.0) -> float:
    """Closed-form K for a centred disk/ball and ``A = c I``."""
    n = shape.dimension if n is None else n
    if not shape.is_round:
        raise CellProblemError("capacity_analytic needs a disk or ball; use capacity_numeric")
    c = float(A) if np.ndim(A) == 0 else None
    if c is None:
        Am = np.asarray(A, dtype=float)
        if not np.allclose(Am, Am[0, 0] * np.eye(n), rtol=0, atol=1e-14 * abs(Am[0, 0])):
            raise CellProblemError("non-isotropic A: defer to capacity_numeric")
        c = float(Am[0, 0])
    if c <= 0:
        raise ConfigError("A must be positive definite")
    r = shape.semi_axes[0]
    if n == 2:
        K = -math.log(r)
        if inner == "robin":
            K += c / (b * r)
        return K + 0.5 * math.log(c)
    if inner == "dirichlet":
        Kp = -r ** (n - 2)
    else:
        Kp = -b / (c * (n - 2) * r ** (1 - n) + b * r ** (2 - n))
    return Kp * c ** ((2 - n) / 2)


def ellipse_dirichlet_capacity(a: float, b: float) -> float:
    """Exterior conformal map value for a Dirichlet ellipse, A = I."""
    return -math.log(0.5 * (a + b))


def analytic_solution(problem: CellProblem) -> CellSolution:
    """Exact truncated solution for radial problems (it is exactly the template)."""
    if not problem.is_radial:
        raise CellProblemError("analytic solution only for round cavities with A = cI")
    c = problem.isotropic_factor
    K = capacity_analytic(problem.shape, problem.inner, problem.n, c, problem.b)
    M = _sqrtm_inv(problem.matrix)

    def profile(xi):
        rho = np.linalg.norm(np.atleast_2d(xi) @ M.T, axis=1)
        return problem.template(rho, K)

    r0 = problem.shape.semi_axes[0] / math.sqrt(c)
    rad = np.geomspace(r0, problem.truncation, 65)
    return CellSolution(problem, K, 0.0, 0, profile, np.column_stack([rad, problem.template(rad, K)]))


# --------------------------------------------------------------------------
# numerical


def _fixed_point(extract: Callable[[float], float], K0: float = 0.0):
    """Secant iteration on K -> extract(K); the map is affine so two steps suffice."""
    hist = []
    Ka, Fa = K0, extract(K0) - K0
    hist.append((Ka, Fa))
    Kb = Ka + Fa
    for it in range(1, MAX_FIXED_POINT + 1):
        Fb = extract(Kb) - Kb
        hist.append((Kb, Fb))
        if abs(Fb) <= FIT_TOL * max(1.0, abs(Kb)):
            return Kb, it, hist
        if Fb == Fa:
            break
        Ka, Kb, Fa = Kb, Kb - Fb * (Kb - Ka) / (Fb - Fa), Fb
    raise CellProblemError(f"datum/K fixed point did not converge: {hist}")


def _solve(Kmat, rhs, fixed, values):
    n = Kmat.shape[0]
    free = np.setdiff1d(np.arange(n), fixed)
    u = np.zeros(n)
    u[fixed] = values
    r = rhs - Kmat[:, fixed] @ values
    try:
        with np.errstate(all="raise"):
            u[free] = spla.spsolve(Kmat[free][:, free].tocsc(), r[free])
    except (RuntimeError, FloatingPointError) as exc:
        raise CellProblemError(f"singular cell system: {exc}") from exc
    if not np.all(np.isfinite(u)):
        raise CellProblemError("singular cell system")
    return u


class _RadialSolver:
    """P1 in t = ln|xi| with exact element fluxes (nodally exact for the radial ODE)."""

    def __init__(self, problem: CellProblem, nodes: int):
        c = problem.isotropic_factor
        n = problem.n
        self.problem = problem
        self.sc = math.sqrt(c)
        rxi = problem.shape.semi_axes[0]
        self.r0 = rxi / self.sc  # cavity radius in zeta
        t = np.linspace(math.log(rxi), math.log(problem.truncation * self.sc), nodes + 1)
        self.t = t - math.log(self.sc)  # stored as ln|zeta|
        # weak form c int X_t phi_t e^{(n-2)t} dt + b r0^{n-1} X phi; conductance 1/int(1/w)
        if n == 2:
            g = c / np.diff(t)
        else:
            k = n - 2
            g = c * k / (np.exp(-k * t[:-1]) - np.exp(-k * t[1:]))
        m = len(t)
        main = np.zeros(m)
        main[:-1] += g
        main[1:] += g
        if problem.inner == "robin":
            main[0] += problem.b * rxi ** (n - 1)
        self.K = sp.diags([main, -g, -g], [0, 1, -1], format="csr")
        self.fixed = np.array([m - 1] + ([0] if problem.inner == "dirichlet" else []))
        self.unit = _solve(self.K, np.zeros(m), self.fixed, np.array([1.0] + [0.0] * (len(self.fixed) - 1)))

    def values(self, K):
        return self.problem.outer_datum(K) * self.unit

    def at(self, rho, K):
        return np.interp(np.log(rho), self.t, self.values(K))


def _radial_numeric(problem: CellProblem, nodes: int) -> CellSolution:
    s = _RadialSolver(problem, nodes)
    rho_fit = math.sqrt(s.r0 * problem.truncation)
    n = problem.n

    def extract(K):
        z = s.at(np.array([rho_fit]), K)[0]
        return z - math.log(rho_fit) if n == 2 else (z - 1.0) * rho_fit ** (n - 2)

    K, its, hist = _fixed_point(extract)
    table = np.column_stack([np.exp(s.t), s.values(K)])
    resid = float(np.max(np.abs(s.values(K)[-1:] - problem.outer_datum(K))))
    resid = max(resid, abs(extract(K) - K))
    M = _sqrtm_inv(problem.matrix)

    def profile(xi):
        rho = np.linalg.norm(np.atleast_2d(xi) @ M.T, axis=1)
        return np.interp(np.log(np.maximum(rho, s.r0)), s.t, s.values(K))

    return CellSolution(problem, float(K), resid, its, profile, table, resid > RESIDUAL_FLAG, "radial", hist)


class _PlanarSolver:
    """Mapped log-polar grid around a star-shaped zeta-cavity, P1 triangles."""

    def __init__(self, problem: CellProblem, n_theta: int, n_radial: int | None = None):
        self.problem = problem
        zs = problem.zeta_shape()
        self.zs = zs
        T = problem.truncation
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        lin = np.log(zs.polar_radius(th))
        if n_radial is None:
            n_radial = int(math.ceil((math.log(T) - lin.min()) / (2 * np.pi / n_theta)))
        s = np.linspace(0.0, 1.0, n_radial + 1)
        self.th, self.s, self.lin, self.lT = th, s, lin, math.log(T)
        logr = (1 - s[:, None]) * lin[None, :] + s[:, None] * self.lT
        r = np.exp(logr)
        pts = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1).reshape(-1, 2)
        nt = n_theta
        idx = np.arange((n_radial + 1) * nt).reshape(n_radial + 1, nt)
        a, b = idx[:-1], np.roll(idx[:-1], -1, axis=1)
        c, d = idx[1:], np.roll(idx[1:], -1, axis=1)
        tris = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
        self.p, self.t, self.idx = pts, tris, idx
        A = problem.matrix
        detA = float(np.linalg.det(A))
        Kmat = p1.stiffness(pts, tris) * math.sqrt(detA)
        if problem.inner == "robin":
            edges = np.stack([idx[0], np.roll(idx[0], -1)], axis=1)
            # boundary measure in xi: map edge endpoints by A^{1/2}
            w, V = np.linalg.eigh(A)
            Ah = (V * np.sqrt(w)) @ V.T
            pe = pts @ Ah.T
            L = np.linalg.norm(pe[edges[:, 1]] - pe[edges[:, 0]], axis=1)
            Kmat = Kmat + p1.edge_mass(pts, edges, problem.b, lengths=L)
        self.K = Kmat.tocsr()
        outer = idx[-1]
        fixed = outer if problem.inner == "robin" else np.concatenate([outer, idx[0]])
        vals = np.concatenate([np.ones(nt), np.zeros(0 if problem.inner == "robin" else nt)])
        self.unit = _solve(self.K, np.zeros(len(pts)), fixed, vals)
        self.grid = self.unit.reshape(n_radial + 1, nt)

    def interp_unit(self, zeta):
        """Bilinear interpolation of the unit-datum solution in (s, theta)."""
        zeta = np.atleast_2d(zeta)
        rho = np.linalg.norm(zeta, axis=1)
        th = np.mod(np.arctan2(zeta[:, 1], zeta[:, 0]), 2 * np.pi)
        nt = len(self.th)
        ft = th / (2 * np.pi) * nt
        j0 = np.floor(ft).astype(int) % nt
        wt = ft - np.floor(ft)
        j1 = (j0 + 1) % nt
        lin = np.log(self.zs.polar_radius(th))
        sv = np.clip((np.log(np.maximum(rho, 1e-300)) - lin) / (self.lT - lin), 0.0, 1.0)
        nr = len(self.s) - 1
        fs = sv * nr
        i0 = np.minimum(np.floor(fs).astype(int), nr - 1)
        ws = fs - i0
        g = self.grid
        v0 = (1 - wt) * g[i0, j0] + wt * g[i0, j1]
        v1 = (1 - wt) * g[i0 + 1, j0] + wt * g[i0 + 1, j1]
        return (1 - ws) * v0 + ws * v1


def _planar_numeric(problem: CellProblem, n_theta: int, n_fit: int = 256):
    s = _PlanarSolver(problem, n_theta)
    rho_fit = math.sqrt(s.zs.max_radius * problem.truncation)
    ang = 2 * np.pi * (np.arange(n_fit) + 0.5) / n_fit
    circ = rho_fit * np.column_stack([np.cos(ang), np.sin(ang)])
    w = s.interp_unit(circ)
    tmpl = problem.template(rho_fit, 0.0)

    def extract(K):
        z = problem.outer_datum(K) * w
        if problem.n == 2:
            return float(np.mean(z - tmpl))
        return float(np.mean(z - 1.0) * rho_fit ** (problem.n - 2))

    K, its, hist = _fixed_point(extract)
    z = problem.outer_datum(K) * w
    rms = float(np.sqrt(np.mean((z - problem.template(rho_fit, K)) ** 2)))
    return s, K, rms, its, hist


def capacity_numeric(problem: CellProblem, resolution: int | dict | None = None,
                     richardson: bool = True) -> CellSolution:
    """Numerical K from the truncated problem.

    ``resolution`` is the radial node count (radial solver) or the angular
    node count (planar solver).  With ``richardson`` the planar solve is
    repeated at twice the resolution and K extrapolated assuming O(h^2).
    """
    if isinstance(resolution, dict):
        resolution = resolution.get("theta", resolution.get("radial"))
    if problem.is_radial:
        return _radial_numeric(problem, int(resolution or 400))
    if problem.n != 2:
        raise CellProblemError("numerical cell solves in 3D support balls with A = cI only")
    nt = int(resolution or 96)
    s, K1, rms, its, hist = _planar_numeric(problem, nt)
    K = K1
    if richardson:
        s, K2, rms, its2, hist2 = _planar_numeric(problem, 2 * nt)
        K = (4 * K2 - K1) / 3
        hist = hist + hist2
        its = max(its, its2)
    datum = problem.outer_datum(K)
    Mi = _sqrtm_inv(problem.matrix)

    def profile(xi):
        return datum * s.interp_unit(np.atleast_2d(xi) @ Mi.T)

    rad = np.exp((1 - s.s) * s.lin[0] + s.s * s.lT)
    table = np.column_stack([rad, datum * s.grid[:, 0]])
    grid = (s.p, s.t, datum * s.unit)
    return CellSolution(problem, float(K), rms, its, profile, table, rms > RESIDUAL_FLAG, "planar", hist, grid)


def solve_cell(problem: CellProblem, resolution=None) -> CellSolution:
    """Analytic when available, numerical otherwise."""
    if problem.is_radial:
        return analytic_solution(problem)
    return capacity_numeric(problem, resolution)


def truncation_study(problem: CellProblem, radii: Sequence[float], K_ref: float | None = None,
                     resolution=None, noise_floor: float = 1e-6):
    """Table of (radius, K, |K - K_ref|) and a flag for non-monotone errors."""
    radii = [float(r) for r in radii]
    if len(radii) < 2 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ConfigError("truncation_study needs increasing radii")
    if K_ref is None:
        if problem.is_radial:
            K_ref = capacity_analytic(problem.shape, problem.inner, problem.n,
                                      problem.isotropic_factor, problem.b)
        elif problem.inner == "dirichlet" and problem.isotropic_factor == 1.0 and problem.shape.kind == "ellipse":
            K_ref = ellipse_dirichlet_capacity(*problem.shape.semi_axes)
        else:
            fine = _replace_T(problem, 10 * radii[-1])
            K_ref = capacity_numeric(fine, 2 * int(resolution or 96)).K
    rows = []
    for R in radii:
        sol = capacity_numeric(_replace_T(problem, R), resolution)
        rows.append((R, sol.K, abs(sol.K - K_ref)))
    errs = [e for _, _, e in rows]
    flagged = any(b > a + noise_floor for a, b in zip(errs, errs[1:]))
    return rows, flagged


def _replace_T(problem: CellProblem, T: float) -> CellProblem:
    return CellProblem(problem.n, problem.matrix, problem.shape, problem.inner, problem.b, T, problem.R2)


def capacity_table(truncation: float = 1e3) -> list[dict]:
    """Numerical K against the analytic constants for unit disks and balls."""
    cases = [("disk", 2, "dirichlet"), ("disk", 2, "robin"), ("ball", 3, "dirichlet"), ("ball", 3, "robin")]
    out = []
    for kind, n, inner in cases:
        shape = CavityShape(kind, (1.0,))
        prob = CellProblem(n, np.eye(n), shape, inner, 1.0, truncation)
        sol = capacity_numeric(prob)
        exact = capacity_analytic(shape, inner, n)
        out.append({"shape": kind, "n": n, "inner": inner, "K_numeric": sol.K, "K_exact": exact,
                    "error": abs(sol.K - exact), "residual": sol.residual})
    return out
