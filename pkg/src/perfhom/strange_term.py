"""Strange-term field beta_eps, weight Upsilon and window criteria."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cell import CellProblem, solve_cell
from .errors import ConfigError, CriterionError
from .geometry import ball_box_volume, disk_box_area
from .perforation import PerforationSpec, unit_ball_volume, unit_sphere_area


def upsilon(A, x=None, n: int = 2):
    """sqrt(det A(x)) * |unit sphere|; ``A`` is a matrix or a callable of x."""
    if callable(A):
        M = np.asarray(A(np.atleast_2d(x)), dtype=float)
    else:
        M = np.asarray(A, dtype=float)
    single = M.ndim == 2
    M = M.reshape((-1, n, n))
    if np.max(np.abs(M - np.swapaxes(M, 1, 2))) > 1e-12 * max(1.0, np.abs(M).max()):
        raise ConfigError("Upsilon needs a symmetric matrix")
    if np.any(np.linalg.eigvalsh(M)[:, 0] <= 0):
        raise ConfigError("Upsilon needs a positive definite matrix")
    val = np.sqrt(np.linalg.det(M)) * unit_sphere_area(n)
    return float(val[0]) if single else val


def ball_value(n: int, R3: float, K: float | None = None) -> float:
    """On-ball value of beta_eps."""
    if n == 2:
        return 1.0 / (R3**2 * math.pi)
    if K is None:
        raise ConfigError("n >= 3 needs the capacity K")
    return (2 - n) * K / (R3**n * unit_ball_volume(n))


@dataclass
class StrangeTermField:
    spec: PerforationSpec
    K: np.ndarray
    values: np.ndarray
    beta: float | Callable | None = None
    matrix: Callable | np.ndarray | None = None
    _tree: object = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def radius(self) -> float:
        return self.spec.eps * self.spec.radii.R3

    def _query(self):
        if self._tree is None and len(self.spec):
            self._tree = self.spec.domain.kdtree(self.spec.centers)
        return self._tree

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(len(x))
        if not len(self.spec):
            return out
        d, i = self._query().query(self.spec.domain.tree_coords(x))
        inside = d < self.radius
        out[inside] = self.values[i[inside]]
        return out

    def limit(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.beta is None:
            raise ConfigError("no limit beta attached")
        if callable(self.beta):
            return np.asarray(self.beta(x), dtype=float)
        return np.full(len(x), float(self.beta))

    def upsilon(self, x):
        A = np.eye(self.n) if self.matrix is None else self.matrix
        if callable(A):
            return upsilon(A, x, self.n)
        return np.full(len(np.atleast_2d(x)), upsilon(A, None, self.n))

    def sup_bound(self) -> float:
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    def ball_mass(self) -> np.ndarray:
        return self.values * unit_ball_volume(self.n) * self.radius**self.n

    def with_beta(self, beta) -> "StrangeTermField":
        return StrangeTermField(self.spec, self.K, self.values, beta, self.matrix)

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.n)] + ["radius", "value"])
            for c, v in zip(self.spec.centers, self.values):
                w.writerow([repr(float(t)) for t in c] + [repr(self.radius), repr(float(v))])
        head = {"n": self.n, "R3": self.spec.radii.R3, "eps": self.spec.eps, "eta": self.spec.eta}
        stem.with_suffix(".json").write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")


def compute_capacities(spec: PerforationSpec, matrix=None, resolution=None) -> np.ndarray:
    """K per cavity; identical (shape, law, A) combinations are solved once."""
    cache: dict = {}
    out = np.empty(len(spec))
    for k, cav in enumerate(spec.cavities):
        A = np.eye(spec.n) if matrix is None else np.asarray(matrix(np.asarray(cav.center)))
        prob = CellProblem.for_cavity(cav.shape, cav.law, spec.regime, spec.radii, A)
        key = (cav.shape, prob.inner, prob.b, A.tobytes(), prob.truncation)
        if key not in cache:
            cache[key] = solve_cell(prob, resolution).K
        out[k] = cache[key]
    return out


def assemble_beta_eps(spec: PerforationSpec, capacities: Sequence[float] | dict | None = None,
                      beta=None, matrix=None) -> StrangeTermField:
    n, R3 = spec.n, spec.radii.R3
    m = len(spec)
    K = np.full(m, np.nan)
    if capacities is not None:
        if isinstance(capacities, dict):
            for k, v in capacities.items():
                K[int(k)] = v
        else:
            cap = np.asarray(capacities, dtype=float)
            if cap.shape != (m,):
                raise ConfigError(f"expected {m} capacities, got {cap.shape}")
            K[:] = cap
    if n == 2:
        values = np.full(m, ball_value(2, R3))
    else:
        missing = np.flatnonzero(np.isnan(K))
        if missing.size:
            k = int(missing[0])
            raise ConfigError(f"missing capacity K for cavity {k} at {spec.cavities[k].center}")
        values = (2 - n) * K / (R3**n * unit_ball_volume(n))
    return StrangeTermField(spec, K, values, beta, matrix)


def union_field(a: StrangeTermField, b: StrangeTermField) -> Callable:
    return lambda x: a(x) + b(x)


# --------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class LatticeWindow:
    """Windows ``rho1 (G z + origin) + rho1 G [-1/2, 1/2)^n`` for a diagonal G."""

    generator: tuple[float, ...]
    rho1: float
    origin: tuple[float, ...] | None = None
    clip: bool = False

    def __post_init__(self):
        G = np.asarray(self.generator, dtype=float)
        if G.ndim == 2:
            if np.count_nonzero(G - np.diag(np.diag(G))):
                raise ConfigError("only axis-aligned (diagonal) window lattices are supported")
            G = np.diag(G)
        if np.any(G <= 0) or not self.rho1 > 0:
            raise ConfigError("window generator and scale must be positive")
        object.__setattr__(self, "generator", tuple(G))
        object.__setattr__(self, "origin", tuple(np.zeros(len(G)) if self.origin is None else self.origin))

    @property
    def sides(self) -> np.ndarray:
        return self.rho1 * np.asarray(self.generator)

    def boxes(self, domain) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper corners of the admissible windows (inside the domain box)."""
        side = self.sides
        lo, hi = np.asarray(domain.lo), np.asarray(domain.hi)
        shift = self.rho1 * np.asarray(self.generator) * np.asarray(self.origin)
        tol = 1e-12 * float(domain.lengths.max())
        ranges = []
        for i in range(domain.n):
            if domain.periodic:
                # no boundary: every window whose centre lies in the fundamental box
                z0 = math.ceil((lo[i] - shift[i]) / side[i] - 1e-12)
                z1 = math.ceil((hi[i] - shift[i]) / side[i] - 1e-12) - 1
            else:
                z0 = math.ceil((lo[i] - shift[i]) / side[i] + 0.5 - 1e-12)
                z1 = math.floor((hi[i] - shift[i]) / side[i] - 0.5 + 1e-12)
            ranges.append(np.arange(z0, z1 + 1))
        z = np.array(np.meshgrid(*ranges, indexing="ij")).reshape(domain.n, -1).T
        c = shift + z * side
        wlo, whi = c - side / 2, c + side / 2
        if domain.periodic:
            return wlo, whi
        ok = np.all((wlo >= lo - tol) & (whi <= hi + tol), axis=1)
        return wlo[ok], whi[ok]


def _box_integral_beta(field: StrangeTermField, lo, hi):
    """int over boxes of beta_eps (exact in 2D; slice quadrature in 3D) and an error estimate."""
    spec = field.spec
    out = np.zeros(len(lo))
    err = 0.0
    if not len(spec):
        return out, err
    R = field.radius
    dom = spec.domain
    tree = field._query()
    centers = spec.centers
    if dom.periodic and np.any((hi - lo).max(axis=0) + 2 * R > dom.lengths + 1e-12):
        raise CriterionError("window plus cavity diameter exceeds the torus period")
    mid = 0.5 * (lo + hi)
    reach = 0.5 * np.linalg.norm(hi - lo, axis=1) + R
    for w in range(len(lo)):
        idx = tree.query_ball_point(dom.tree_coords(mid[w])[0], reach[w])
        if not idx:
            continue
        idx = np.sort(idx)
        c = mid[w] + dom.min_image(centers[idx] - mid[w])
        if spec.n == 2:
            a = disk_box_area(c[:, 0], c[:, 1], R, lo[w, 0], hi[w, 0], lo[w, 1], hi[w, 1])
            out[w] = float(np.dot(a, field.values[idx]))
        else:
            s = 0.0
            for j, cc in zip(idx, c):
                v, e = ball_box_volume(cc, R, lo[w], hi[w])
                s += field.values[j] * v
                err = max(err, abs(field.values[j]) * e)
            out[w] = s
    return out, err


def _box_integral_candidate(beta, lo, hi, order=8):
    if beta is None or (not callable(beta) and float(beta) == 0.0):
        return np.zeros(len(lo))
    vol = np.prod(hi - lo, axis=1)
    if not callable(beta):
        return float(beta) * vol
    x, w = np.polynomial.legendre.leggauss(order)
    x, w = 0.5 * (x + 1), 0.5 * w
    n = lo.shape[1]
    grids = np.array(np.meshgrid(*([x] * n), indexing="ij")).reshape(n, -1).T
    wts = np.prod(np.array(np.meshgrid(*([w] * n), indexing="ij")).reshape(n, -1).T, axis=1)
    out = np.empty(len(lo))
    for k in range(len(lo)):
        pts = lo[k] + grids * (hi[k] - lo[k])
        out[k] = vol[k] * np.dot(wts, np.asarray(beta(pts), dtype=float))
    return out


@dataclass
class CriterionReport:
    rho1: float
    sup_deviation: float
    bound: float
    passed: bool
    n_windows: int
    worst_window: int
    stderr: float = 0.0
    deviations: np.ndarray = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"rho1": self.rho1, "sup_deviation": self.sup_deviation, "bound": self.bound,
                "pass": self.passed, "n_windows": self.n_windows, "stderr": self.stderr}


def check_criterion(field: StrangeTermField, window: LatticeWindow, beta_candidate=None, C: float = 1.0,
                    rho2: float | None = None) -> CriterionReport:
    """sup over windows of rho1^-n |int (beta_eps - beta)|, and the bound C (rho2 + rho1).

    ``rho2`` is the tolerance the deviation must meet for ``passed``; it
    defaults to ``rho1``.
    """
    spec = field.spec
    if beta_candidate is None:
        beta_candidate = field.beta if field.beta is not None else 0.0
    if len(spec) and window.sides.min() < 2 * field.radius - 1e-14:
        raise CriterionError(f"windows cannot resolve cavities: side {window.sides.min():.4g} "
                             f"< 2 eps R3 = {2 * field.radius:.4g}")
    lo, hi = window.boxes(spec.domain)
    if not len(lo):
        raise CriterionError("no admissible window inside the domain")
    ib, err = _box_integral_beta(field, lo, hi)
    if not window.clip and len(spec):
        total = float(field.ball_mass().sum())
        if abs(ib.sum() - total) > 1e-9 * max(abs(total), 1e-300):
            raise CriterionError("windows do not cover every cavity ball; enable clipping")
    dev = np.abs(ib - _box_integral_candidate(beta_candidate, lo, hi)) / window.rho1**spec.n
    k = int(np.argmax(dev))
    sup = float(dev[k])
    tol = window.rho1 if rho2 is None else rho2
    return CriterionReport(window.rho1, sup, C * (sup + window.rho1), sup <= tol, len(lo), k,
                           err / window.rho1**spec.n, dev)


def default_rho1(eps: float) -> float:
    return math.sqrt(eps)


def snapped_rho1(eps: float) -> float:
    """``eps * ceil(eps^-1/2)``: close to sqrt(eps) and a whole number of eps."""
    return eps * math.ceil(eps**-0.5 - 1e-12)


def check_criterion_offsets(field: StrangeTermField, generator, rho1: float, beta_candidate=None,
                            offsets: int = 4, C: float = 1.0, clip: bool = True) -> CriterionReport:
    """Worst criterion report over window lattices shifted by ``(a, b, ...) / offsets`` cells."""
    n = field.n
    worst = None
    for shift in np.ndindex(*([offsets] * n)):
        win = LatticeWindow(tuple(generator), rho1, origin=tuple(np.asarray(shift) / offsets), clip=clip)
        rep = check_criterion(field, win, beta_candidate, C)
        if worst is None or rep.sup_deviation > worst.sup_deviation:
            worst = rep
    return worst


# --------------------------------------------------------------------------
# moving windows


def _lens_area(d, r1, r2):
    """Intersection area of two disks at centre distance d (vectorised)."""
    d = np.asarray(d, dtype=float)
    out = np.zeros(d.shape)
    inner = d <= abs(r1 - r2)
    out[inner] = math.pi * min(r1, r2) ** 2
    mid = (d < r1 + r2) & ~inner
    dm = d[mid]
    a1 = r1**2 * np.arccos(np.clip((dm**2 + r1**2 - r2**2) / (2 * dm * r1), -1, 1))
    a2 = r2**2 * np.arccos(np.clip((dm**2 + r2**2 - r1**2) / (2 * dm * r2), -1, 1))
    tri = 0.5 * np.sqrt(np.maximum((-dm + r1 + r2) * (dm + r1 - r2) * (dm - r1 + r2) * (dm + r1 + r2), 0))
    out[mid] = a1 + a2 - tri
    return out


def identify_beta_moving_window(field: StrangeTermField, rho3: float, samples, window: str = "cube",
                                reference=None, min_factor: float = 2.0):
    """Average of beta_eps over ``x + rho3 * omega`` at each sample point.

    ``window`` is ``cube`` ([-1/2, 1/2)^n) or ``ball`` (unit disk, n = 2).
    Returns ``(estimates, sup_defect, skipped)``; ``sup_defect`` is against
    ``reference`` (None if no reference is given).
    """
    spec = field.spec
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(spec) and rho3 < min_factor * field.radius:
        raise CriterionError(f"rho3={rho3:g} < {min_factor:g} eps R3: windows cannot average cavities")
    dom = spec.domain
    if window == "cube":
        lo, hi = x - rho3 / 2, x + rho3 / 2
        vol = rho3**spec.n
    elif window == "ball" and spec.n == 2:
        r = rho3
        lo, hi = x - r, x + r
        vol = math.pi * r * r
    else:
        raise ConfigError(f"unsupported window {window!r}")
    if dom.periodic:
        keep = np.ones(len(x), bool)
    else:
        keep = np.all((lo >= np.asarray(dom.lo) - 1e-14) & (hi <= np.asarray(dom.hi) + 1e-14), axis=1)
    est = np.full(len(x), np.nan)
    idx = np.flatnonzero(keep)
    if window == "cube":
        est[idx] = _box_integral_beta(field, lo[idx], hi[idx])[0] / vol
    else:
        vals = np.zeros(len(idx))
        if len(spec):
            tree = field._query()
            for j, i in enumerate(idx):
                near = tree.query_ball_point(dom.tree_coords(x[i])[0], rho3 + field.radius)
                if near:
                    near = np.sort(near)
                    d = np.linalg.norm(dom.min_image(spec.centers[near] - x[i]), axis=1)
                    vals[j] = np.dot(_lens_area(d, rho3, field.radius), field.values[near])
        est[idx] = vals / vol
    sup = None
    if reference is not None:
        ref = reference(x[idx]) if callable(reference) else np.full(len(idx), float(reference))
        sup = float(np.max(np.abs(est[idx] - ref))) if len(idx) else 0.0
    return est, sup, np.flatnonzero(~keep)


# --------------------------------------------------------------------------
# sparse perforations


@dataclass
class SparseReport:
    measured: float
    predicted: float
    passed: bool
    rho5: float


def sparse_bound(field: StrangeTermField, rho5: float, C: float = 1.0) -> SparseReport:
    """Window deviation against beta = 0 at scale rho5, with the predicted envelope."""
    spec = field.spec
    eps, n = spec.eps, spec.n
    if eps / rho5 >= 0.25:
        raise CriterionError(f"sparse case needs eps/rho5 < 1/4, got {eps / rho5:g}")
    if len(spec) > 1:
        d, _ = spec.domain.kdtree(spec.centers).query(spec.domain.tree_coords(spec.centers), k=2)
        if d[:, 1].min() < 2 * rho5 * (1 - 1e-12):
            raise CriterionError(f"centres closer than 2 rho5 = {2 * rho5:g}")
    win = LatticeWindow((2.0,) * n, rho5, clip=True)
    rep = check_criterion(field, win, 0.0)
    tail = eps**2 * abs(math.log(eps)) if n == 2 else eps**2
    predicted = C * ((eps / rho5) ** n + tail)
    return SparseReport(rep.sup_deviation, predicted, rep.sup_deviation <= predicted, rho5)
