"""Boundary-layer corrector and the error functionals of the convergence theorems.

Inside the support ``E_k = {|A_k^{-1/2}(x - M_k)| < eps R4}`` of cavity ``k``
the corrector is ``Z_k((x - M_k)/(eps eta)) / D_k``; elsewhere it equals 1.
``D_k`` is the value of the truncated cell solution on the outer sphere, so
the corrector is continuous across the support boundary.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import p1
from .cell import CellProblem, CellSolution, _sqrtm_inv, solve_cell
from .errors import CellProblemError, RegimeError, ResolutionError
from .fem import FemSolution, norm
from .mesh import Mesh
from .perforation import PerforationSpec, ScalingRegime


def denominator(n: int, eta: float, K: float, R4: float) -> float:
    if n == 2:
        return abs(math.log(eta)) + math.log(R4) + K
    return 1.0 + K * R4 ** (2 - n) * eta ** (n - 2)


@dataclass
class _CavityProfile:
    center: np.ndarray
    Mi: np.ndarray  # A^{-1/2}
    Ainv: np.ndarray
    K: float
    D: float
    rho_in: float | None  # hole radius in rho units (radial case)
    cell: CellSolution
    loc: p1.PointLocator | None = None


@dataclass
class CorrectorField:
    spec: PerforationSpec
    profiles: list = field(repr=False)

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def scale(self) -> float:
        return self.spec.eps * self.spec.eta

    @property
    def truncation(self) -> float:
        return self.spec.radii.R4 / self.spec.eta

    @property
    def denominators(self) -> np.ndarray:
        return np.array([p.D for p in self.profiles])

    @property
    def capacities(self) -> np.ndarray:
        return np.array([p.K for p in self.profiles])

    def _nearest(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        tree = self.spec.domain.kdtree(self.spec.centers)
        _, k = tree.query(self.spec.domain.tree_coords(x))
        d = self.spec.domain.min_image(x - self.spec.centers[k])
        return k, d

    def evaluate(self, x):
        """Values (M,) and gradients (M, n) of the corrector at points x."""
        x = np.atleast_2d(np.asarray(x, float))
        val = np.ones(len(x))
        grad = np.zeros((len(x), x.shape[1]))
        if not len(self.spec):
            return val, grad
        k, d = self._nearest(x)
        s = self.scale
        T = self.truncation
        n = self.n
        for j in np.unique(k):
            sel = np.flatnonzero(k == j)
            prof = self.profiles[j]
            xi = d[sel] / s
            rho = np.linalg.norm(xi @ prof.Mi.T, axis=1)
            inside = rho < T
            idx = sel[inside]
            if not len(idx):
                continue
            xi, rho = xi[inside], rho[inside]
            if prof.rho_in is not None:
                r = np.maximum(rho, prof.rho_in)
                z = np.log(r) + prof.K if n == 2 else 1.0 + prof.K * r ** (2 - n)
                live = rho > prof.rho_in
                q = np.einsum("ij,mj->mi", prof.Ainv, xi)  # A^{-1} xi
                if n == 2:
                    g = q / np.where(live, rho, 1.0)[:, None] ** 2
                else:
                    g = prof.K * (2 - n) * np.where(live, rho, 1.0)[:, None] ** (-n) * q
                g = np.where(live[:, None], g, 0.0) / s
            else:
                z, g = self._tabulated(prof, xi)
                g = g / s
            val[idx] = z / prof.D
            grad[idx] = g / prof.D
        return val, grad

    @staticmethod
    def _tabulated(prof: _CavityProfile, xi):
        zeta = xi @ prof.Mi.T
        vals, gz, ok = prof.loc.interpolate(prof.cell.grid[2], zeta, grad=True)
        if not ok.all():
            vals[~ok] = prof.cell.profile(xi[~ok])
            gz[~ok] = 0.0
        # d/dxi = Mi^T d/dzeta
        return vals, gz @ prof.Mi

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)[0]

    def as_field(self):
        return self.evaluate

    def times(self, u0: FemSolution):
        """Callable (values, gradients) of u0 * corrector, evaluated pointwise."""
        def fun(x):
            v, g, ok = u0.evaluate(x, grad=True)
            if not ok.all():
                raise ResolutionError("homogenized solution could not be located at all points")
            c, gc = self.evaluate(x)
            return v * c, g * c[:, None] + v[:, None] * gc
        return fun


def build_corrector(spec: PerforationSpec, cells=None, matrix=None, resolution=None) -> CorrectorField:
    """Corrector from one cell solution per cavity (solved here when ``cells`` is None).

    ``cells`` may be a list aligned with the cavities or a dict keyed by index.
    """
    if spec.n != 2 and cells is None and matrix is not None:
        raise CellProblemError("general matrices are supported in two dimensions only")
    A = np.eye(spec.n) if matrix is None else np.asarray(matrix, float)
    R4 = spec.radii.R4
    cache: dict = {}
    profiles = []
    for k, cav in enumerate(spec.cavities):
        if cells is not None:
            try:
                cs = cells[k]
            except (KeyError, IndexError):
                raise CellProblemError(f"missing cell solution for cavity {k}") from None
            if cs is None:
                raise CellProblemError(f"missing cell solution for cavity {k}")
        else:
            prob = CellProblem.for_cavity(cav.shape, cav.law, spec.regime, spec.radii, A)
            key = (cav.shape, prob.inner, prob.b)
            if key not in cache:
                cache[key] = solve_cell(prob, resolution)
            cs = cache[key]
        prob = cs.problem
        D = denominator(spec.n, spec.eta, cs.K, R4)
        if not D > 0:
            raise RegimeError(f"regime violates eps*eta << eps*R4 (denominator {D:.3g} at cavity {k})")
        Mi = _sqrtm_inv(prob.matrix)
        Ainv = np.linalg.inv(prob.matrix)
        rho_in = None
        loc = None
        if prob.is_radial:
            rho_in = prob.shape.semi_axes[0] / math.sqrt(prob.isotropic_factor)
        else:
            if cs.grid is None:
                raise CellProblemError(f"cavity {k}: cell solution carries no tabulated grid")
            loc = p1.PointLocator(cs.grid[0], cs.grid[1])
        profiles.append(_CavityProfile(np.asarray(cav.center, float), Mi, Ainv, cs.K, D, rho_in, cs, loc))
    return CorrectorField(spec, profiles)


def disk_log_profile(r, eps: float, eta: float, radius: float = 1.0, R4: float = 4 / 3):
    """Closed-form Dirichlet disk corrector (A = I) as a function of |x - M|."""
    r = np.clip(np.asarray(r, float), eps * eta * radius, eps * R4)
    return np.log(r / (eps * eta * radius)) / math.log(R4 / (eta * radius))


def disk_defects(eps: float, eta: float, radius: float = 1.0, R4: float = 4 / 3) -> tuple[float, float]:
    """Exact squared norms of (1 - corrector) and of its gradient over one support annulus."""
    D = math.log(R4 / (eta * radius))
    a = eps * R4
    # int (ln(a/s)/D)^2 2 pi s ds over [a exp(-D), a]
    t = D
    integral = 0.25 * (1 - math.exp(-2 * t) * (1 + 2 * t + 2 * t * t))
    l2 = 2 * math.pi * a * a * integral / D**2
    return l2, 2 * math.pi / D


def support_defects(corr: CorrectorField, mesh: Mesh, k: int) -> tuple[float, float]:
    """Quadrature of ||corrector - 1||^2 and ||grad corrector||^2 over E_k on ``mesh``."""
    x, w = p1.quad_points(mesh.points, mesh.triangles)
    x = x.reshape(-1, 2)
    w = w.ravel()
    kk, d = corr._nearest(x)
    sel = kk == k
    v, g = corr.evaluate(x[sel])
    return float(w[sel] @ (v - 1) ** 2), float(w[sel] @ np.einsum("nd,nd->n", g, g))


# --------------------------------------------------------------------------
# error functionals


@dataclass
class ErrorRecord:
    eps: float
    eta: float
    gamma: float
    e_H1_corr: float
    e_L2: float
    e_H1_plain: float
    f_norm: float = 1.0
    components: dict = field(default_factory=dict)
    which: str = "thm1"

    @property
    def predicted(self) -> float:
        """Envelope of the W21 estimate (corrected for thm1, plain for thm2)."""
        if self.which == "thm2":
            return float(sum(v for k, v in self.components.items() if k.startswith("w21:")))
        return float(sum(self.components.values()))

    @property
    def predicted_l2(self) -> float:
        return float(sum(v for k, v in self.components.items() if k.startswith("l2:")))

    def columns(self) -> list[str]:
        return ["eps", "eta", "gamma", "e_H1_corr", "e_L2", "e_H1_plain", "f_norm"] + \
            ["pred:" + k for k in sorted(self.components)]

    def row(self) -> list[float]:
        base = [self.eps, self.eta, self.gamma, self.e_H1_corr, self.e_L2, self.e_H1_plain, self.f_norm]
        return base + [self.components[k] for k in sorted(self.components)]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.columns())
        w.writerow([repr(float(v)) for v in self.row()])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"eps": self.eps, "eta": self.eta, "gamma": self.gamma, "e_H1_corr": self.e_H1_corr,
                "e_L2": self.e_L2, "e_H1_plain": self.e_H1_plain, "f_norm": self.f_norm,
                "components": dict(sorted(self.components.items())), "which": self.which}


def predicted_components(spec: PerforationSpec, which: str = "thm1", criterion: float = 0.0) -> dict:
    """Rate components of the theorem envelopes for one configuration.

    ``thm1`` keys are plain names and sum to the corrected W21 envelope.
    ``thm2`` keys are prefixed ``w21:`` and ``l2:`` for the two estimates.
    """
    r: ScalingRegime = spec.regime
    eps, eta, kap, n = r.eps, r.eta, r.kappa, r.n
    if which == "thm1":
        out = {"eps": eps, "gamma_mismatch": r.gamma_mismatch, "criterion": r.gamma * criterion}
        large = [c.law for c in spec.cavities if c.law.kind == "robin_large"]
        if large:
            out["mu1"] = max((eps * eta * kap * law.mu1(r)) ** -0.5 for law in large)
        lin = [c.law for c in spec.cavities if c.law.kind == "robin_linear_plus" and c.law.mu2 is not None]
        if lin:
            out["mu2"] = max(eps * eta * kap * law.mu2(r) for law in lin)
        return out
    if which == "thm2":
        return {"w21:eps": eps, "w21:ratio": eps**-1 * eta ** (n / 2 - 1) * kap**-0.5,
                "w21:eps_eta": math.sqrt(eps * eta), "l2:eps2": eps**2, "l2:ratio": r.ratio,
                "l2:eps_eta": eps * eta}
    raise ValueError(f"unknown theorem {which!r}")


def theorem_errors(u_eps: FemSolution, u0: FemSolution, corrector: CorrectorField, which: str = "thm1",
                   f_norm: float = 1.0, criterion: float = 0.0) -> ErrorRecord:
    """The three error norms over the perforated mesh, divided by ``f_norm``.

    ``u0 * corrector`` is formed at quadrature points of the perforated mesh.
    """
    spec = corrector.spec
    mesh = u_eps.mesh
    rep: dict = {}
    e_corr = norm(u_eps, corrector.times(u0), "W21", mesh=mesh)
    e_l2 = norm(u_eps, u0, "L2", mesh=mesh, report=rep)
    e_plain = norm(u_eps, u0, "W21", mesh=mesh)
    comps = predicted_components(spec, which, criterion)
    return ErrorRecord(spec.eps, spec.eta, spec.regime.gamma, e_corr / f_norm, e_l2 / f_norm,
                       e_plain / f_norm, f_norm, comps, which)


def check_resolution(coarse: ErrorRecord, fine: ErrorRecord, tol: float = 0.1) -> dict:
    """Relative change of each error under refinement; raises when any exceeds ``tol``."""
    out = {}
    for name in ("e_H1_corr", "e_L2", "e_H1_plain"):
        a, b = getattr(coarse, name), getattr(fine, name)
        out[name] = abs(a - b) / max(abs(b), 1e-300)
    bad = {k: v for k, v in out.items() if v > tol}
    if bad:
        worst = max(bad, key=bad.get)
        raise ResolutionError(f"{worst} changes by {bad[worst]:.1%} under refinement (> {tol:.0%} allowed); "
                              "refine the meshes")
    return out


def decompose_identity(u_eps, u0, corrector: CorrectorField, mesh: Mesh | None = None) -> float:
    """L2 norm over the perforated mesh of (u - u0) - (u - u0 Xi) + (1 - Xi) u0."""
    mesh = mesh or u_eps.mesh
    x, w = p1.quad_points(mesh.points, mesh.triangles)
    x = x.reshape(-1, 2)
    w = w.ravel()

    def vals(u):
        if isinstance(u, FemSolution):
            v, ok = u.evaluate(x)
            return v
        return np.asarray(u(x), float)

    ue, uo = vals(u_eps), vals(u0)
    xi = corrector(x)
    r = (ue - uo) - (ue - uo * xi) + (1 - xi) * uo
    return float(math.sqrt(w @ r**2))
