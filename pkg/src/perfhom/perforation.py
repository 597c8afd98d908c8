"""Perforation families: points, cavity shapes, boundary-law partition.

Physical cavities are ``M_k + eps*eta*shape_k`` where ``shape_k`` lives in the
stretched variable ``xi = (x - M_k)/(eps*eta)``.  Everything here is pure
and operates on immutable dataclasses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, GeometryError, RegimeError

SHAPE_KINDS = ("disk", "ellipse", "ball")
LAW_KINDS = ("dirichlet", "robin_large", "robin_linear_plus")

# Scalar nonlinearities phi with phi(0) = 0 and Lipschitz constant 1.
REMAINDERS: dict[str, tuple[Callable, Callable]] = {
    "none": (lambda u: np.zeros_like(u), lambda u: np.zeros_like(u)),
    "linear": (lambda u: u, lambda u: np.ones_like(u)),
    "tanh": (np.tanh, lambda u: 1.0 / np.cosh(u) ** 2),
    "sin": (np.sin, np.cos),
}
MONOTONE_REMAINDERS = ("none", "linear", "tanh")


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def unit_sphere_area(n: int) -> float:
    """(n-1)-dimensional measure of the unit sphere in R^n."""
    return n * unit_ball_volume(n)


# --------------------------------------------------------------------------
# scaling


@dataclass(frozen=True)
class ScalingRegime:
    eps: float
    eta: float
    n: int = 2
    gamma: float = 0.0

    def __post_init__(self):
        if not self.eps > 0:
            raise RegimeError(f"eps must be positive, got {self.eps}")
        if not 0 < self.eta <= 1:
            raise RegimeError(f"eta must lie in (0, 1], got {self.eta}")
        if self.n not in (2, 3):
            raise RegimeError(f"dimension must be 2 or 3, got {self.n}")
        if self.gamma < 0:
            raise RegimeError("gamma must be non-negative")

    @property
    def kappa(self) -> float:
        return abs(math.log(self.eta)) + 1.0 if self.n == 2 else 1.0

    @property
    def ratio(self) -> float:
        """eps^-2 eta^(n-2) / kappa, the quantity that tends to gamma."""
        return self.eps ** -2 * self.eta ** (self.n - 2) / self.kappa

    @property
    def gamma_mismatch(self) -> float:
        return abs(self.ratio - self.gamma)

    @property
    def hole_scale(self) -> float:
        return self.eps * self.eta


def eta_for_gamma(eps: float, gamma: float, n: int = 2, subcritical_exponent: float | None = None) -> float:
    """Hole-size function eta(eps) realising ``eps^-2 eta^(n-2) / kappa = gamma``.

    For ``gamma == 0`` a sub-critical law is needed: the ratio is then set to
    ``eps**subcritical_exponent``.
    """
    if not eps > 0:
        raise RegimeError("eps must be positive")
    if gamma < 0:
        raise RegimeError("gamma must be non-negative")
    if gamma == 0:
        if subcritical_exponent is None or subcritical_exponent <= 0:
            raise RegimeError("gamma = 0 needs a positive subcritical_exponent")
        target = eps ** subcritical_exponent
    else:
        target = gamma
    if n == 2:
        log_eta = 1.0 - 1.0 / (target * eps**2)
        eta = math.exp(log_eta) if log_eta > -745 else 0.0
    elif n >= 3:
        eta = (target * eps**2) ** (1.0 / (n - 2))
    else:
        raise RegimeError(f"unsupported dimension {n}")
    if eta >= 1:
        raise RegimeError(f"scaling not in regime: eta = {eta:g} >= 1 for eps={eps:g}, gamma={gamma:g}")
    if eta <= 0:
        raise RegimeError(f"eta underflows for eps={eps:g}, gamma={gamma:g}")
    return eta


@dataclass(frozen=True)
class Rate:
    """Rate descriptor ``coef * eps^p * eta^q * kappa^r``."""

    coef: float = 1.0
    eps_power: float = 0.0
    eta_power: float = 0.0
    kappa_power: float = 0.0

    def __call__(self, regime: ScalingRegime) -> float:
        return (self.coef * regime.eps**self.eps_power * regime.eta**self.eta_power
                * regime.kappa**self.kappa_power)

    def scaled(self, factor: float) -> "Rate":
        return replace(self, coef=self.coef * factor)

    @classmethod
    def from_dict(cls, d: dict | None) -> "Rate | None":
        return None if d is None else cls(**d)


# --------------------------------------------------------------------------
# cavities and laws


@dataclass(frozen=True)
class CavityShape:
    """Cavity in stretched coordinates, centred at the origin.

    ``semi_axes`` is ``(r,)`` for disks and balls and ``(a, b)`` for ellipses;
    ``angle`` rotates an ellipse; ``anchor`` is the centre of the inscribed
    ball used by Assumption A1.
    """

    kind: str = "disk"
    semi_axes: tuple[float, ...] = (1.0,)
    angle: float = 0.0
    anchor: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise GeometryError(f"unsupported cavity shape {self.kind!r}; catalog is {SHAPE_KINDS}")
        axes = tuple(float(a) for a in self.semi_axes)
        want = 2 if self.kind == "ellipse" else 1
        if len(axes) != want or min(axes) <= 0:
            raise GeometryError(f"{self.kind} needs {want} positive semi-axes, got {self.semi_axes}")
        object.__setattr__(self, "semi_axes", axes)
        if self.anchor is None:
            object.__setattr__(self, "anchor", (0.0,) * self.dimension)

    @classmethod
    def disk(cls, r=1.0):
        return cls("disk", (r,))

    @classmethod
    def ball(cls, r=1.0):
        return cls("ball", (r,))

    @classmethod
    def ellipse(cls, a, b, angle=0.0):
        return cls("ellipse", (a, b), angle)

    @property
    def dimension(self) -> int:
        return 3 if self.kind == "ball" else 2

    @property
    def is_round(self) -> bool:
        return self.kind in ("disk", "ball")

    @property
    def max_radius(self) -> float:
        return max(self.semi_axes)

    @property
    def min_radius(self) -> float:
        return min(self.semi_axes)

    def measure(self) -> float:
        if self.kind == "ellipse":
            return math.pi * self.semi_axes[0] * self.semi_axes[1]
        return unit_ball_volume(self.dimension) * self.semi_axes[0] ** self.dimension

    def polar_radius(self, theta):
        """Distance from the origin to the boundary along direction ``theta`` (2D)."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == "disk":
            return np.full_like(theta, self.semi_axes[0])
        if self.kind == "ellipse":
            a, b = self.semi_axes
            c, s = np.cos(theta - self.angle), np.sin(theta - self.angle)
            return 1.0 / np.sqrt((c / a) ** 2 + (s / b) ** 2)
        raise GeometryError("polar_radius is defined for planar shapes only")

    def polar_radius_derivative(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.kind == "disk":
            return np.zeros_like(theta)
        a, b = self.semi_axes
        c, s = np.cos(theta - self.angle), np.sin(theta - self.angle)
        q = (c / a) ** 2 + (s / b) ** 2
        dq = 2 * c * s * (1 / b**2 - 1 / a**2)
        return -0.5 * q ** -1.5 * dq

    def boundary(self, m: int = 256) -> np.ndarray:
        """``m`` boundary points (2D: at uniform polar angle; 3D: Fibonacci sphere)."""
        if self.dimension == 2:
            th = 2 * np.pi * np.arange(m) / m
            r = self.polar_radius(th)
            return np.column_stack([r * np.cos(th), r * np.sin(th)])
        return self.semi_axes[0] * fibonacci_sphere(m)

    def radial_margin(self, points) -> np.ndarray:
        """Positive inside: shape radius along the ray minus the point radius."""
        p = np.atleast_2d(points)
        rad = np.linalg.norm(p, axis=1)
        if self.dimension == 2:
            return self.polar_radius(np.arctan2(p[:, 1], p[:, 0])) - rad
        return self.semi_axes[0] - rad

    def contains(self, points) -> np.ndarray:
        return self.radial_margin(points) >= 0


def fibonacci_sphere(m: int) -> np.ndarray:
    i = np.arange(m) + 0.5
    z = 1 - 2 * i / m
    phi = math.pi * (3 - math.sqrt(5)) * i
    rho = np.sqrt(1 - z**2)
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


@dataclass(frozen=True)
class BoundaryLaw:
    """Boundary condition on one cavity.

    ``robin_large``: ``a(u) = mu1 (u + phi(u))`` with monotone ``phi``.
    ``robin_linear_plus``: ``a(u) = (eps eta)^-1 b u + mu2 phi(u)``.
    ``phi`` is chosen from :data:`REMAINDERS` by name.
    """

    kind: str = "dirichlet"
    b: float | Callable = 1.0
    mu1: Rate | None = None
    mu2: Rate | None = None
    remainder: str = "none"

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise ConfigError(f"unknown boundary law {self.kind!r}")
        if self.remainder not in REMAINDERS:
            raise ConfigError(f"unknown remainder {self.remainder!r}")
        if self.kind == "robin_large":
            if self.mu1 is None:
                raise ConfigError("robin_large needs a mu1 rate")
            if self.remainder not in ("none", "tanh"):
                raise ConfigError("robin_large allows only the monotone remainders none/tanh")
        if self.kind == "robin_linear_plus" and self.remainder != "none" and self.mu2 is None:
            raise ConfigError("a robin_linear_plus remainder needs a mu2 rate")

    @classmethod
    def dirichlet(cls):
        return cls()

    @property
    def is_dirichlet_like(self) -> bool:
        """Cavities whose cell problem carries the Dirichlet condition."""
        return self.kind in ("dirichlet", "robin_large")

    def b_values(self, xi) -> np.ndarray:
        xi = np.atleast_2d(xi)
        if callable(self.b):
            return np.asarray(self.b(xi), dtype=float)
        return np.full(len(xi), float(self.b))

    def check_b(self, xi, c2: float = 0.0) -> float:
        """Smallest sampled value of b minus ``c2``; must stay positive."""
        return float(np.min(self.b_values(xi)) - c2)

    def check_mu1_growth(self, regimes: Sequence[ScalingRegime]) -> bool:
        """eps*eta/kappa*mu1 strictly increasing in 1/eps over the grid."""
        if self.mu1 is None:
            return True
        rs = sorted(regimes, key=lambda r: -r.eps)
        vals = [r.eps * r.eta / r.kappa * self.mu1(r) for r in rs]
        return all(b > a for a, b in zip(vals, vals[1:]))


@dataclass(frozen=True)
class Cavity:
    center: tuple[float, ...]
    shape: CavityShape = field(default_factory=CavityShape)
    law: BoundaryLaw = field(default_factory=BoundaryLaw)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


@dataclass(frozen=True)
class Radii:
    """Constants R1 < R2 < R3 with R2 < R4 < R3.  Defaults follow the periodic example."""

    R1: float = 1.0
    R2: float = 7.0 / 6.0
    R3: float = 1.5
    R4: float = 4.0 / 3.0


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box; ``periodic`` turns it into a flat torus."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    periodic: bool = False

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or any(b <= a for a, b in zip(lo, hi)):
            raise ConfigError(f"bad domain bounds {lo} {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def unit_square(cls):
        return cls((0.0, 0.0), (1.0, 1.0))

    @classmethod
    def box(cls, lo, hi):
        return cls(tuple(lo), tuple(hi), False)

    @classmethod
    def torus(cls, lo, hi):
        return cls(tuple(lo), tuple(hi), True)

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def lengths(self) -> np.ndarray:
        return np.subtract(self.hi, self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def boundary_distance(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        if self.periodic:
            return np.full(len(p), np.inf)
        return np.minimum(p - np.asarray(self.lo), np.asarray(self.hi) - p).min(axis=1)

    def wrap(self, points) -> np.ndarray:
        """Map points into [lo, hi) (identity for boxes)."""
        p = np.array(points, dtype=float)
        if not self.periodic:
            return p
        lo, L = np.asarray(self.lo), self.lengths
        q = lo + np.mod(p - lo, L)
        return np.where(q >= lo + L, q - L, q)

    def min_image(self, delta) -> np.ndarray:
        d = np.array(delta, dtype=float)
        if self.periodic:
            L = self.lengths
            d -= L * np.round(d / L)
        return d

    def kdtree(self, points) -> cKDTree:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if not self.periodic:
            return cKDTree(p)
        L = self.lengths
        q = np.mod(p - np.asarray(self.lo), L)
        q[q >= L] = 0.0
        return cKDTree(q, boxsize=L)

    def tree_coords(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if not self.periodic:
            return p
        L = self.lengths
        q = np.mod(p - np.asarray(self.lo), L)
        q[q >= L] = 0.0
        return q


@dataclass(frozen=True)
class PerforationSpec:
    domain: Domain
    cavities: tuple[Cavity, ...]
    regime: ScalingRegime
    radii: Radii = field(default_factory=Radii)

    def __post_init__(self):
        object.__setattr__(self, "cavities", tuple(self.cavities))
        if self.domain.n != self.regime.n:
            raise ConfigError("domain and regime dimensions differ")
        for k, c in enumerate(self.cavities):
            if len(c.center) != self.n:
                raise ConfigError(f"cavity {k} centre has wrong dimension")

    @property
    def n(self) -> int:
        return self.regime.n

    @property
    def eps(self) -> float:
        return self.regime.eps

    @property
    def eta(self) -> float:
        return self.regime.eta

    def __len__(self):
        return len(self.cavities)

    @property
    def centers(self) -> np.ndarray:
        if not self.cavities:
            return np.zeros((0, self.n))
        return np.array([c.center for c in self.cavities])

    def indices(self, kind: str) -> list[int]:
        return [k for k, c in enumerate(self.cavities) if c.law.kind == kind]

    def with_cavities(self, cavities: Iterable[Cavity]) -> "PerforationSpec":
        return replace(self, cavities=tuple(cavities))


# --------------------------------------------------------------------------
# Assumption A1


@dataclass
class Check:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[Check]
    note: str = ""

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def as_dict(self) -> dict:
        return {"passed": self.passed, "note": self.note,
                "checks": [c.__dict__ for c in self.checks]}

    def __str__(self):
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name:20s} margin={c.margin:+.6g} {c.detail}"
                 for c in self.checks]
        return "\n".join(lines + ([self.note] if self.note else []))


def pair_margins(spec: PerforationSpec) -> tuple[float, tuple[int, int] | None, list[tuple[int, int]]]:
    """Smallest ``|M_k - M_j| - 2 eps R3`` and the violating pairs (sorted)."""
    centers = spec.centers
    if len(centers) < 2:
        return math.inf, None, []
    sep = 2 * spec.eps * spec.radii.R3
    tree = spec.domain.kdtree(centers)
    d, idx = tree.query(spec.domain.tree_coords(centers), k=2)
    i = int(np.argmin(d[:, 1]))
    closest = tuple(sorted((i, int(idx[i, 1]))))
    bad = sorted(tree.query_pairs(sep * (1 - 1e-13)))
    return float(d[:, 1].min() - sep), closest, bad


def validate_assumption_a1(spec: PerforationSpec, matrix: Callable | None = None,
                           samples: int = 256) -> ValidationReport:
    """Check the inequalities of Assumption A1 for every cavity.

    ``matrix`` optionally gives the coefficient matrix A(x); it enters only
    through the ellipsoidal supports E_k used by the corrector.
    """
    R = spec.radii
    if not spec.cavities:
        return ValidationReport([Check("radii_order", _radii_ok(R) >= 0, _radii_ok(R))],
                                note="empty perforation")
    checks = [Check("radii_order", _radii_ok(R) >= 0, _radii_ok(R), "R1<R2<R3, R2<R4<R3")]
    inscribed, contained = math.inf, math.inf
    worst_in = worst_out = 0
    for k, cav in enumerate(spec.cavities):
        sh = cav.shape
        if sh.dimension != spec.n:
            raise GeometryError(f"cavity {k}: shape {sh.kind!r} is not {spec.n}-dimensional")
        ring = np.asarray(sh.anchor) + R.R1 * (fibonacci_sphere(samples) if spec.n == 3
                                               else _circle(samples))
        m_in = float(sh.radial_margin(ring).min())
        m_out = R.R2 - float(np.linalg.norm(sh.boundary(samples), axis=1).max())
        if m_in < inscribed:
            inscribed, worst_in = m_in, k
        if m_out < contained:
            contained, worst_out = m_out, k
    checks.append(Check("inscribed_ball", inscribed >= -1e-12, inscribed,
                        f"B_R1(y) in shape; worst cavity {worst_in}"))
    checks.append(Check("containment", contained >= -1e-12, contained,
                        f"shape in B_R2(0); worst cavity {worst_out}"))

    margin, closest, bad = pair_margins(spec)
    detail = f"closest pair {closest}" if not bad else f"first violated pair {bad[0]}"
    checks.append(Check("disjointness", not bad, margin, detail))

    if spec.domain.periodic:
        checks.append(Check("boundary_distance", True, math.inf, "skipped on torus"))
    else:
        dist = spec.domain.boundary_distance(spec.centers) - R.R3 * spec.eps
        k = int(np.argmin(dist))
        checks.append(Check("boundary_distance", dist[k] >= -1e-14, float(dist[k]), f"worst cavity {k}"))

    # omega in B_{eps eta R2} in E_k in B_{eps R3}
    lo_margin, hi_margin = math.inf, math.inf
    for cav in spec.cavities:
        A = np.eye(spec.n) if matrix is None else np.asarray(matrix(np.asarray(cav.center)))
        ev = np.linalg.eigvalsh(A)
        lo_margin = min(lo_margin, R.R4 * math.sqrt(ev[0]) - spec.eta * R.R2)
        hi_margin = min(hi_margin, R.R3 - R.R4 * math.sqrt(ev[-1]))
    m = min(lo_margin, hi_margin)
    checks.append(Check("support_inclusion", lo_margin > 0 and hi_margin >= 0, m,
                        "B_{eps eta R2} in E_k in B_{eps R3}"))
    return ValidationReport(checks)


def _radii_ok(R: Radii) -> float:
    return min(R.R2 - R.R1, R.R3 - R.R2, R.R4 - R.R2, R.R3 - R.R4)


def _circle(m):
    th = 2 * np.pi * np.arange(m) / m
    return np.column_stack([np.cos(th), np.sin(th)])


def require_a1(spec: PerforationSpec, matrix=None) -> PerforationSpec:
    report = validate_assumption_a1(spec, matrix)
    if not report.passed:
        raise GeometryError("Assumption A1 violated:\n" + str(report))
    return spec


# --------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class Lattice:
    """Lattice ``G Z^n`` with fundamental cell ``G [-1/2, 1/2)^n``.

    ``offset`` shifts the points by ``G offset`` (lattice coordinates).
    """

    generator: tuple[tuple[float, ...], ...]
    offset: tuple[float, ...] | None = None

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.generator, dtype=float))
        if G.shape[0] != G.shape[1] or abs(np.linalg.det(G)) < 1e-14:
            raise ConfigError("lattice generator must be a non-singular square matrix")
        object.__setattr__(self, "generator", tuple(map(tuple, G)))
        off = np.zeros(len(G)) if self.offset is None else np.asarray(self.offset, dtype=float)
        object.__setattr__(self, "offset", tuple(off))

    @classmethod
    def square(cls, spacing: float = 4.0, n: int = 2):
        return cls(tuple(tuple(spacing if i == j else 0.0 for j in range(n)) for i in range(n)))

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.generator)

    @property
    def n(self) -> int:
        return len(self.generator)

    @property
    def cell_volume(self) -> float:
        return abs(float(np.linalg.det(self.matrix)))

    def inradius(self) -> float:
        """Radius of the largest ball centred at 0 inside the cell."""
        G = self.matrix
        # distance from the centre to each face pair is 1/(2 |row of G^-1|)
        return float(0.5 / np.linalg.norm(np.linalg.inv(G), axis=1).max())

    def torus(self, eps: float, cells: int | Sequence[int]) -> Domain:
        """Torus made of ``cells`` lattice cells per direction, lattice points at cell centres.

        Only axis-aligned generators give a box-shaped torus.
        """
        G = self.matrix
        if np.count_nonzero(G - np.diag(np.diag(G))):
            raise ConfigError("torus construction needs a diagonal generator")
        cells = np.broadcast_to(np.asarray(cells, dtype=float), (self.n,))
        period = eps * np.diag(G)
        lo = eps * (np.diag(G) * np.asarray(self.offset)) - period / 2
        return Domain.torus(tuple(lo), tuple(lo + cells * period))


def generate_periodic(lattice: Lattice, eps: float, eta: float, shape: CavityShape | None = None,
                      law: BoundaryLaw | None = None, domain: Domain | None = None,
                      radii: Radii | None = None, gamma: float = 0.0, validate=True) -> PerforationSpec:
    """One cavity per scaled lattice point ``eps G (k + offset)`` admissible in ``domain``."""
    shape = shape or CavityShape.disk()
    law = law or BoundaryLaw()
    radii = radii or Radii()
    domain = domain or Domain.unit_square()
    n = lattice.n
    if domain.n != n:
        raise ConfigError("lattice and domain dimensions differ")
    if lattice.inradius() < radii.R3 - 1e-12:
        raise GeometryError(f"lattice cell too small: B_R3(0) with R3={radii.R3} is not contained "
                            f"in the cell (inradius {lattice.inradius():.6g})")
    regime = ScalingRegime(eps, eta, n, gamma)
    G = eps * lattice.matrix
    off = np.asarray(lattice.offset)
    corners = np.array(np.meshgrid(*[(a, b) for a, b in zip(domain.lo, domain.hi)])).reshape(n, -1).T
    kc = np.linalg.solve(G, corners.T).T - off
    ranges = [np.arange(math.floor(kc[:, i].min()) - 1, math.ceil(kc[:, i].max()) + 2) for i in range(n)]
    ks = np.array(np.meshgrid(*ranges, indexing="ij")).reshape(n, -1).T
    pts = (ks + off) @ G.T
    lo, hi = np.asarray(domain.lo), np.asarray(domain.hi)
    tol = 1e-12 * float(np.max(domain.lengths))
    if domain.periodic:
        keep = np.all((pts >= lo - tol) & (pts < hi - tol), axis=1)
    else:
        keep = domain.boundary_distance(pts) >= radii.R3 * eps - tol
    pts = pts[keep]
    order = np.lexsort(pts.T[::-1])
    spec = PerforationSpec(domain, tuple(Cavity(tuple(p), shape, law) for p in pts[order]), regime, radii)
    if validate and spec.cavities:
        require_a1(spec)
    return spec


def generate_perturbed(base: PerforationSpec, jitter: float, seed: int = 0) -> PerforationSpec:
    """Displace every centre by at most ``jitter * eps`` (uniform in a ball)."""
    if jitter < 0:
        raise ConfigError("jitter must be non-negative")
    if jitter == 0 or not base.cavities:
        return base
    step = jitter * base.eps
    margin, closest, bad = pair_margins(base)
    if bad or 2 * step > margin:
        pair = bad[0] if bad else closest
        raise GeometryError(f"jitter {jitter:g} eps too large: pair {pair} has separation margin "
                            f"{margin:.6g} < {2 * step:.6g}")
    if not base.domain.periodic:
        dist = base.domain.boundary_distance(base.centers) - base.radii.R3 * base.eps
        if dist.min() < step:
            raise GeometryError(f"jitter {jitter:g} eps too large: cavity {int(np.argmin(dist))} "
                                f"is {dist.min():.6g} from the boundary band")
    rng = np.random.default_rng(seed)
    n = base.n
    direction = rng.normal(size=(len(base), n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = step * rng.random(len(base)) ** (1.0 / n)
    new = base.centers + direction * radius[:, None]
    cavs = [replace(c, center=tuple(p)) for c, p in zip(base.cavities, new)]
    return require_a1(base.with_cavities(cavs))


def combine(a: PerforationSpec, b: PerforationSpec, mode: str = "union") -> PerforationSpec:
    if a.domain != b.domain or a.radii != b.radii or a.regime != b.regime:
        raise ConfigError("perforations live on different domains, radii or regimes")
    if mode == "union":
        spec = a.with_cavities(a.cavities + b.cavities)
        report = validate_assumption_a1(spec)
        if not report.passed:
            raise GeometryError("union violates Assumption A1:\n" + str(report))
        return spec
    if mode == "difference":
        if not b.cavities:
            return a
        if not a.cavities:
            raise GeometryError("difference: no centres to match in the first perforation")
        tol = 1e-9 * a.eps
        tree = a.domain.kdtree(a.centers)
        d, idx = tree.query(a.domain.tree_coords(b.centers))
        if np.any(d > tol):
            j = int(np.argmax(d > tol))
            raise GeometryError(f"difference: centre {b.cavities[j].center} has no match")
        drop = set(int(i) for i in idx)
        return a.with_cavities(c for k, c in enumerate(a.cavities) if k not in drop)
    raise ConfigError(f"unknown combine mode {mode!r}")


# --------------------------------------------------------------------------
# text formats


def _fmt(x: float) -> str:
    return repr(float(x))


def _rate_str(r: Rate | None) -> str:
    return "-" if r is None else ",".join(_fmt(v) for v in (r.coef, r.eps_power, r.eta_power, r.kappa_power))


def _rate_parse(s: str) -> Rate | None:
    return None if s == "-" else Rate(*map(float, s.split(",")))


def spec_to_text(spec: PerforationSpec) -> str:
    """Line-oriented serialisation: a short header then one cavity per line."""
    r, R, d = spec.regime, spec.radii, spec.domain
    lines = [
        "# perforation v1",
        f"dimension {spec.n}",
        f"domain {'torus' if d.periodic else 'box'} " + " ".join(map(_fmt, d.lo + d.hi)),
        "radii " + " ".join(map(_fmt, (R.R1, R.R2, R.R3, R.R4))),
        f"regime {_fmt(r.eps)} {_fmt(r.eta)} {_fmt(r.gamma)}",
        f"cavities {len(spec)}",
    ]
    for c in spec.cavities:
        if callable(c.law.b):
            raise ConfigError("tabulated b cannot be serialised")
        sh, law = c.shape, c.law
        lines.append(" ".join(
            [*map(_fmt, c.center), sh.kind, ",".join(map(_fmt, sh.semi_axes)), _fmt(sh.angle),
             ",".join(map(_fmt, sh.anchor)), law.kind, _fmt(law.b), _rate_str(law.mu1),
             _rate_str(law.mu2), law.remainder]))
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> PerforationSpec:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    head = {}
    it = iter(rows)
    for row in it:
        head[row[0]] = row[1:]
        if row[0] == "cavities":
            break
    try:
        n = int(head["dimension"][0])
        kind, *bounds = head["domain"]
        bounds = list(map(float, bounds))
        domain = Domain(tuple(bounds[:n]), tuple(bounds[n:]), kind == "torus")
        radii = Radii(*map(float, head["radii"]))
        eps, eta, gamma = map(float, head["regime"])
        count = int(head["cavities"][0])
    except (KeyError, ValueError, IndexError) as exc:
        raise ConfigError(f"malformed perforation header: {exc}") from exc
    cavs = []
    for row in it:
        center = tuple(map(float, row[:n]))
        kind, axes, angle, anchor, lkind, b, mu1, mu2, rem = row[n:n + 9]
        shape = CavityShape(kind, tuple(map(float, axes.split(","))), float(angle),
                            tuple(map(float, anchor.split(","))))
        law = BoundaryLaw(lkind, float(b), _rate_parse(mu1), _rate_parse(mu2), rem)
        cavs.append(Cavity(center, shape, law))
    if len(cavs) != count:
        raise ConfigError(f"expected {count} cavities, read {len(cavs)}")
    return PerforationSpec(domain, tuple(cavs), ScalingRegime(eps, eta, n, gamma), radii)


# --------------------------------------------------------------------------
# structured config

CONFIG_KEYS = {"dimension", "domain", "lattice", "epsilon", "gamma", "eta_gamma",
               "subcritical_exponent", "eta", "shape", "law", "radii", "jitter", "seed", "name"}


def load_config(path: str | Path) -> dict[str, Any]:
    with open(path) as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - CONFIG_KEYS - {"scenario"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return cfg


def save_config(cfg: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def shape_from_config(d: dict | None) -> CavityShape:
    if d is None:
        return CavityShape.disk()
    return CavityShape(d.get("kind", "disk"), tuple(d.get("semi_axes", (1.0,))), d.get("angle", 0.0),
                       tuple(d["anchor"]) if "anchor" in d else None)


def law_from_config(d: dict | None) -> BoundaryLaw:
    if d is None:
        return BoundaryLaw()
    return BoundaryLaw(d.get("kind", "dirichlet"), d.get("b", 1.0), Rate.from_dict(d.get("mu1")),
                       Rate.from_dict(d.get("mu2")), d.get("remainder", "none"))


def regime_from_config(cfg: dict, eps: float) -> ScalingRegime:
    n = int(cfg.get("dimension", 2))
    gamma = float(cfg.get("gamma", 0.0))
    if "eta" in cfg:
        eta = float(cfg["eta"])
    else:
        eta = eta_for_gamma(eps, float(cfg.get("eta_gamma", gamma)), n, cfg.get("subcritical_exponent"))
    return ScalingRegime(eps, eta, n, gamma)


def epsilon_schedule(cfg: dict) -> list[float]:
    eps = cfg.get("epsilon")
    if eps is None:
        raise ConfigError("config has no epsilon")
    sched = [float(e) for e in (eps if isinstance(eps, list) else [eps])]
    if not sched:
        raise ConfigError("empty epsilon schedule")
    return sched


def spec_from_config(cfg: dict, eps: float | None = None) -> PerforationSpec:
    """Build a perforation from a config dict (periodic lattice plus optional jitter)."""
    n = int(cfg.get("dimension", 2))
    if eps is None:
        eps = epsilon_schedule(cfg)[0]
    regime = regime_from_config(cfg, eps)
    lat = cfg.get("lattice", {"spacing": 4.0})
    if "generator" in lat:
        lattice = Lattice(tuple(map(tuple, lat["generator"])), lat.get("offset"))
    else:
        lattice = Lattice(Lattice.square(float(lat.get("spacing", 4.0)), n).generator, lat.get("offset"))
    dom = cfg.get("domain", "unit_square")
    if dom == "unit_square":
        domain = Domain.unit_square() if n == 2 else Domain.box((0,) * n, (1,) * n)
    elif isinstance(dom, dict) and "cells" in dom:
        domain = lattice.torus(eps, dom["cells"])
    elif isinstance(dom, dict):
        domain = Domain(tuple(dom["lo"]), tuple(dom["hi"]), dom.get("kind", "box") == "torus")
    else:
        raise ConfigError(f"bad domain entry {dom!r}")
    radii = Radii(**cfg.get("radii", {}))
    spec = generate_periodic(lattice, eps, regime.eta, shape_from_config(cfg.get("shape")),
                             law_from_config(cfg.get("law")), domain, radii, regime.gamma)
    jitter = float(cfg.get("jitter", 0.0))
    if jitter:
        spec = generate_perturbed(spec, jitter, int(cfg.get("seed", 0)))
    return spec
