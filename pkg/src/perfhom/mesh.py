"""Hole-fitted triangular meshes of 2D perforated boxes and tori.

Each cavity is surrounded by structured log-polar layers from the exact hole
boundary out to the support circle ``|x - M| = eps R4``; the remainder is a
quality Delaunay mesh produced by Triangle.  Because ring vertices are stored
as offsets from machine-precision centres, holes many orders of magnitude
smaller than the spacing stay representable as long as the centre itself is
exactly representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import triangle as tr
from scipy.spatial import cKDTree

from .errors import MeshError
from .p1 import signed_areas
from .perforation import Domain, PerforationSpec

OUTER, HOLE_DIRICHLET, HOLE_ROBIN, PERIODIC = 0, 1, 2, 3
TAG_NAMES = {OUTER: "outer_dirichlet", HOLE_DIRICHLET: "hole_dirichlet", HOLE_ROBIN: "hole_robin",
             PERIODIC: "periodic_pair"}
MIN_SEGMENTS = 16
QUALITY_SEGMENTS = 56  # ln r interpolates to under 5% H1 error per ring
MIN_RELATIVE_RADIUS = 1e-10


@dataclass(frozen=True)
class GradingPolicy:
    growth: float = 1.6
    h: float = 0.05
    max_rings: int = 200
    min_angle: float = 18.0
    segments: int | None = None  # override the hole segment count

    def __post_init__(self):
        if not 1.2 < self.growth <= 2.5:
            raise MeshError(f"growth factor {self.growth} outside (1.2, 2.5]")
        if not self.h > 0:
            raise MeshError("h must be positive")

    def ring_count(self, r_hole: float, r_outer: float) -> int:
        """Rings of ratio at most ``growth`` between the two radii."""
        return max(1, int(math.ceil(math.log(r_outer / r_hole) / math.log(self.growth) - 1e-12)))

    def segment_count(self, r_outer: float) -> int:
        if self.segments is not None:
            m = self.segments
        else:
            m = max(MIN_SEGMENTS, QUALITY_SEGMENTS, int(math.ceil(2 * math.pi * r_outer / self.h)))
        return int(8 * math.ceil(m / 8))


@dataclass
class Mesh:
    points: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_tags: np.ndarray
    edge_owner: np.ndarray
    domain: Domain
    period_map: np.ndarray
    spec: PerforationSpec | None = None
    hole_index: np.ndarray | None = None
    rings: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def periodic(self) -> bool:
        return self.domain.periodic

    def areas(self) -> np.ndarray:
        return signed_areas(self.points, self.triangles)

    def area(self) -> float:
        return float(self.areas().sum())

    def angles(self) -> np.ndarray:
        p = self.points[self.triangles]
        out = np.empty((len(p), 3))
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            v = p[:, (i + 2) % 3] - p[:, i]
            cos = np.einsum("nd,nd->n", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            out[:, i] = np.degrees(np.arccos(np.clip(cos, -1, 1)))
        return out

    def min_angle(self) -> float:
        return float(self.angles().min())

    def tagged(self, tag: int, owner: int | None = None) -> np.ndarray:
        sel = self.edge_tags == tag
        if owner is not None:
            sel &= self.edge_owner == owner
        return self.edges[sel]

    def hole_loops(self) -> dict[int, np.ndarray]:
        """Cavity index -> hole boundary edges."""
        sel = (self.edge_tags == HOLE_DIRICHLET) | (self.edge_tags == HOLE_ROBIN)
        out: dict[int, list] = {}
        for e, k in zip(self.edges[sel], self.edge_owner[sel]):
            out.setdefault(int(k), []).append(e)
        return {k: np.array(v) for k, v in sorted(out.items())}

    def dirichlet_nodes(self) -> np.ndarray:
        sel = (self.edge_tags == OUTER) | (self.edge_tags == HOLE_DIRICHLET)
        return np.unique(self.edges[sel])

    def hole_distance(self) -> np.ndarray:
        """Distance from each vertex to the nearest cavity centre (inf without cavities)."""
        if self.spec is None or not len(self.spec):
            return np.full(self.n_points, np.inf)
        d, _ = self.domain.kdtree(self.spec.centers).query(self.domain.tree_coords(self.points))
        return d

    def write(self, path: str | Path) -> None:
        path = Path(path)
        d = self.domain
        lines = ["# perfhom mesh v1",
                 f"domain {'torus' if d.periodic else 'box'} " + " ".join(repr(v) for v in d.lo + d.hi),
                 f"vertices {self.n_points}"]
        lines += [f"{x!r} {y!r}" for x, y in self.points.tolist()]
        lines.append(f"triangles {self.n_triangles}")
        lines += [f"{a} {b} {c}" for a, b, c in self.triangles.tolist()]
        lines.append(f"edges {len(self.edges)}")
        lines += [f"{a} {b} {t} {o}" for (a, b), t, o in
                  zip(self.edges.tolist(), self.edge_tags.tolist(), self.edge_owner.tolist())]
        slaves = np.flatnonzero(self.period_map != np.arange(self.n_points))
        lines.append(f"periodic {len(slaves)}")
        lines += [f"{i} {self.period_map[i]}" for i in slaves.tolist()]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "Mesh":
        rows = Path(path).read_text().splitlines()
        it = iter(r for r in rows if r and not r.startswith("#"))
        head = next(it).split()
        vals = list(map(float, head[2:]))
        n = len(vals) // 2
        domain = Domain(tuple(vals[:n]), tuple(vals[n:]), head[1] == "torus")

        def block(name, conv):
            key, count = next(it).split()
            if key != name:
                raise MeshError(f"expected {name}, got {key}")
            return [list(map(conv, next(it).split())) for _ in range(int(count))]

        pts = np.array(block("vertices", float), dtype=float).reshape(-1, 2)
        tris = np.array(block("triangles", int), dtype=int).reshape(-1, 3)
        ed = np.array(block("edges", int), dtype=int).reshape(-1, 4)
        per = np.array(block("periodic", int), dtype=int).reshape(-1, 2)
        pmap = np.arange(len(pts))
        pmap[per[:, 0]] = per[:, 1]
        return cls(pts, tris, ed[:, :2], ed[:, 2], ed[:, 3], domain, pmap)

    def with_values(self, values, path: str | Path) -> None:
        """Mesh text format followed by a nodal-values block."""
        self.write(path)
        with open(path, "a") as fh:
            fh.write(f"values {len(values)}\n")
            fh.writelines(f"{float(v)!r}\n" for v in values)


# --------------------------------------------------------------------------
# construction helpers


def _box_boundary(domain: Domain, h: float):
    """Boundary vertices (counter-clockwise) with the same subdivision on opposite sides."""
    (x0, y0), (x1, y1) = domain.lo, domain.hi
    nx = max(1, int(math.ceil((x1 - x0) / h - 1e-9)))
    ny = max(1, int(math.ceil((y1 - y0) / h - 1e-9)))
    xs = x0 + (x1 - x0) * np.arange(nx + 1) / nx
    ys = y0 + (y1 - y0) * np.arange(ny + 1) / ny
    xs[-1], ys[-1] = x1, y1
    bottom = np.column_stack([xs[:-1], np.full(nx, y0)])
    right = np.column_stack([np.full(ny, x1), ys[:-1]])
    top = np.column_stack([xs[::-1][:-1], np.full(nx, y1)])
    left = np.column_stack([np.full(ny, x0), ys[::-1][:-1]])
    return np.concatenate([bottom, right, top, left])


def _cavity_rings(center, shape, scale, r_outer, m, layers):
    """Structured layers from the exact hole boundary to the circle r_outer."""
    th = 2 * np.pi * np.arange(m) / m
    lin = np.log(scale * shape.polar_radius(th))
    s = np.arange(layers + 1) / layers
    logr = (1 - s[:, None]) * lin[None, :] + s[:, None] * math.log(r_outer)
    r = np.exp(logr)
    r[-1] = r_outer
    pts = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    pts = pts + np.asarray(center)
    return pts, th


def _ring_triangles(idx):
    """Split each quad of the layer grid ``idx`` (layers+1, m) into two triangles."""
    a, b = idx[:-1], np.roll(idx[:-1], -1, axis=1)
    c, d = idx[1:], np.roll(idx[1:], -1, axis=1)
    # alternate diagonals by angular index for a more isotropic pattern
    flip = (np.arange(idx.shape[1]) % 2 == 1)[None, :].repeat(idx.shape[0] - 1, 0)
    t1 = np.where(flip[..., None], np.stack([a, b, c], -1), np.stack([a, b, d], -1))
    t2 = np.where(flip[..., None], np.stack([b, d, c], -1), np.stack([a, d, c], -1))
    return np.concatenate([t1.reshape(-1, 3), t2.reshape(-1, 3)])


def _edge_census(tris):
    e = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def _periodic_map(points, domain: Domain, tol=1e-12):
    """Identify vertices on opposite faces of a torus box; masters on the low faces."""
    n = len(points)
    pmap = np.arange(n)
    if not domain.periodic:
        return pmap
    lo, hi = np.asarray(domain.lo), np.asarray(domain.hi)
    L = hi - lo
    scale = tol * float(L.max())
    # one pass per axis; corners resolve through the composition
    for d in range(2):
        on_lo = np.flatnonzero(np.abs(points[:, d] - lo[d]) <= scale)
        on_hi = np.flatnonzero(np.abs(points[:, d] - hi[d]) <= scale)
        if len(on_hi) != len(on_lo):
            raise MeshError(f"periodic faces along axis {d} carry {len(on_lo)} and {len(on_hi)} vertices")
        if not len(on_hi):
            continue
        shifted = points[on_hi].copy()
        shifted[:, d] -= L[d]
        dist, j = cKDTree(points[on_lo]).query(shifted)
        if np.any(dist > scale):
            raise MeshError(f"unmatched periodic vertex near {points[on_hi[np.argmax(dist)]]}")
        pmap[on_hi] = on_lo[j]
    for _ in range(2):
        pmap = pmap[pmap]
    return pmap


def _pair_ids(points, edges, tags, owners, domain):
    """Give matching periodic edges on opposite faces the same pair id."""
    owners = owners.copy()
    pmap = _periodic_map(points, domain)
    sel = np.flatnonzero(tags == PERIODIC)
    key = np.sort(pmap[edges[sel]], axis=1)
    _, ids = np.unique(key, axis=0, return_inverse=True)
    owners[sel] = ids.ravel()
    return owners


def _finalise(points, tris, domain, spec, hole_index, rings, extra_edges):
    points = np.asarray(points, float)
    tris = np.asarray(tris, int)
    area = signed_areas(points, tris)
    neg = area < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    edges, tags, owners = [], [], []
    uniq, counts = _edge_census(tris)
    bnd = uniq[counts == 1]
    key = {tuple(e): i for i, e in enumerate(bnd)}
    used = np.zeros(len(bnd), bool)
    for (a, b), tag, own in extra_edges:
        k = key.get((min(a, b), max(a, b)))
        if k is None:
            raise MeshError(f"tagged edge {(a, b)} is not on the mesh boundary")
        used[k] = True
        edges.append((a, b)), tags.append(tag), owners.append(own)
    # remaining boundary edges lie on the box
    lo, hi = np.asarray(domain.lo), np.asarray(domain.hi)
    scale = 1e-12 * float((hi - lo).max())
    rest = bnd[~used]
    for a, b in rest:
        pa, pb = points[a], points[b]
        on_box = any(abs(pa[d] - v) <= scale and abs(pb[d] - v) <= scale
                     for d in range(2) for v in (lo[d], hi[d]))
        if not on_box:
            raise MeshError(f"untagged interior boundary edge near {0.5 * (pa + pb)}")
        edges.append((a, b)), tags.append(PERIODIC if domain.periodic else OUTER), owners.append(-1)
    edges = np.array(edges, dtype=int).reshape(-1, 2)
    tags = np.array(tags, dtype=int)
    owners = np.array(owners, dtype=int)
    pmap = _periodic_map(points, domain)
    if domain.periodic:
        owners = _pair_ids(points, edges, tags, owners, domain)
    order = np.lexsort((edges[:, 1], edges[:, 0], owners, tags))
    return Mesh(points, tris, edges[order], tags[order], owners[order], domain, pmap, spec,
                hole_index, rings)


def _tag_for(law) -> int:
    return HOLE_DIRICHLET if law.kind == "dirichlet" else HOLE_ROBIN


# --------------------------------------------------------------------------
# public


def predicted_rings(eps: float, eta: float, R3: float, growth: float, r_shape: float = 1.0) -> int:
    return int(math.ceil(math.log(R3 * eps / (eps * eta * r_shape)) / math.log(growth) - 1e-12))


def mesh_perforated(spec: PerforationSpec, policy: GradingPolicy = GradingPolicy()) -> Mesh:
    if spec.n != 2:
        raise MeshError("meshing is two-dimensional only")
    dom = spec.domain
    eps, eta, R = spec.eps, spec.eta, spec.radii
    r_out = eps * R.R4
    pts_all = []
    tris_all = []
    tagged = []
    rings = {}
    hole_index = []
    holes = []
    seg_pts, seg_idx = [], []
    offset = 0
    lo, hi = np.asarray(dom.lo), np.asarray(dom.hi)
    for k, cav in enumerate(spec.cavities):
        sh = cav.shape
        if sh.dimension != 2:
            raise MeshError(f"cavity {k}: shape {sh.kind} is not planar")
        c = np.asarray(cav.center)
        if np.any(c - r_out <= lo) or np.any(c + r_out >= hi):
            raise MeshError(f"cavity {k} support circle crosses the domain box; "
                            "use a cell-centred torus or move the cavity")
        n_rings = predicted_rings(eps, eta, R.R3, policy.growth, sh.max_radius)
        if n_rings > policy.max_rings:
            raise MeshError(f"cavity {k} needs {n_rings} rings > max_rings={policy.max_rings}; "
                            "increase eta or the growth factor")
        m = policy.segment_count(r_out)
        r_min = eps * eta * sh.min_radius
        if r_min < MIN_RELATIVE_RADIUS * float(np.abs(c).max()):
            raise MeshError(f"cavity {k}: hole radius {r_min:.3g} is below floating-point resolution "
                            f"at centre {c.tolist()}; place the cavity at the origin of a cell torus")
        layers = max(n_rings, int(math.ceil(math.log(r_out / r_min) / (2 * math.pi / m))))
        p, th = _cavity_rings(c, sh, eps * eta, r_out, m, layers)
        idx = offset + np.arange(p.shape[0] * m).reshape(p.shape[0], m)
        pts_all.append(p.reshape(-1, 2))
        tris_all.append(_ring_triangles(idx))
        hole_index.append(np.full(idx.size, k))
        tag = _tag_for(cav.law)
        for j in range(m):
            tagged.append(((idx[0, j], idx[0, (j + 1) % m]), tag, k))
        rings[k] = {"idx": idx, "theta": th, "rings": n_rings, "layers": layers, "segments": m}
        seg_pts.append(p[-1])
        seg_idx.append(idx[-1])
        holes.append(c)
        offset += idx.size

    # far field
    box = _box_boundary(dom, policy.h)
    vert = [box]
    segs = [np.column_stack([np.arange(len(box)), (np.arange(len(box)) + 1) % len(box)])]
    base = len(box)
    for ring in seg_pts:
        m = len(ring)
        vert.append(ring)
        segs.append(base + np.column_stack([np.arange(m), (np.arange(m) + 1) % m]))
        base += m
    V = np.concatenate(vert)
    S = np.concatenate(segs)
    data = {"vertices": V, "segments": S}
    if holes:
        data["holes"] = np.array(holes)
    max_area = math.sqrt(3) / 4 * policy.h**2
    out = tr.triangulate(data, f"pq30Ya{max_area:.17g}")
    TV, TT = out["vertices"], out["triangles"]
    if len(TV) < len(V) or np.max(np.abs(TV[:len(V)] - V)) > 0:
        raise MeshError("far-field mesher moved or dropped input vertices")
    # map Triangle vertices into the global numbering
    gmap = np.empty(len(TV), dtype=int)
    nb = len(box)
    gmap[:nb] = offset + np.arange(nb)
    pos = nb
    for ridx in seg_idx:
        gmap[pos:pos + len(ridx)] = ridx
        pos += len(ridx)
    n_new = len(TV) - len(V)
    gmap[len(V):] = offset + nb + np.arange(n_new)
    far_pts = np.concatenate([box, TV[len(V):]])
    points = np.concatenate(pts_all + [far_pts]) if pts_all else far_pts
    tris = np.concatenate(tris_all + [gmap[TT]]) if tris_all else gmap[TT]
    hidx = np.concatenate(hole_index + [np.full(len(far_pts), -1)]) if hole_index else np.full(len(far_pts), -1)
    mesh = _finalise(points, tris, dom, spec, hidx, rings, tagged)
    amin = mesh.min_angle()
    if amin < policy.min_angle:
        bad = int(np.argmin(mesh.angles().min(axis=1)))
        raise MeshError(f"minimum angle {amin:.2f} deg below floor {policy.min_angle} near "
                        f"{mesh.points[mesh.triangles[bad]].mean(axis=0)}")
    return mesh


def mesh_unperforated(domain: Domain, h: float) -> Mesh:
    """Structured criss-cross-free right-triangle grid of the box or torus."""
    if not h > 0:
        raise MeshError("h must be positive")
    L = domain.lengths
    if h > L.min():
        raise MeshError(f"h={h} exceeds the domain size {L.min()}")
    if domain.n != 2:
        raise MeshError("meshing is two-dimensional only")
    nx = int(math.ceil(L[0] / h - 1e-9))
    ny = int(math.ceil(L[1] / h - 1e-9))
    xs = domain.lo[0] + L[0] * np.arange(nx + 1) / nx
    ys = domain.lo[1] + L[1] * np.arange(ny + 1) / ny
    xs[-1], ys[-1] = domain.hi
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(pts.shape[0]).reshape(nx + 1, ny + 1)
    a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
    tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return _finalise(pts, tris, domain, None, np.full(len(pts), -1), {}, [])


def refine(mesh: Mesh, factor: int = 2) -> Mesh:
    """Uniform red refinement; hole-boundary midpoints go back onto the exact curve."""
    if factor not in (2, 4):
        raise MeshError("refinement factor must be 2 or 4")
    if factor == 4:
        return refine(refine(mesh, 2), 2)
    p, t = mesh.points, mesh.triangles
    all_e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(all_e, axis=0, return_inverse=True)
    inv = inv.ravel()
    mid = 0.5 * (p[uniq[:, 0]] + p[uniq[:, 1]])
    n0 = len(p)
    # project hole-edge midpoints
    hole_sel = (mesh.edge_tags == HOLE_DIRICHLET) | (mesh.edge_tags == HOLE_ROBIN)
    ekey = {tuple(e): i for i, e in enumerate(uniq)}
    if mesh.spec is not None:
        s = mesh.spec.eps * mesh.spec.eta
        for (a, b), k in zip(mesh.edges[hole_sel], mesh.edge_owner[hole_sel]):
            cav = mesh.spec.cavities[k]
            j = ekey[(min(a, b), max(a, b))]
            c = np.asarray(cav.center)
            d = mid[j] - c
            th = math.atan2(d[1], d[0])
            r = s * float(cav.shape.polar_radius(np.array([th]))[0])
            mid[j] = c + r * np.array([math.cos(th), math.sin(th)])
    pts = np.concatenate([p, mid])
    nt = len(t)
    m01, m12, m20 = (n0 + inv[:nt], n0 + inv[nt:2 * nt], n0 + inv[2 * nt:])
    v0, v1, v2 = t[:, 0], t[:, 1], t[:, 2]
    tris = np.concatenate([np.column_stack([v0, m01, m20]), np.column_stack([m01, v1, m12]),
                           np.column_stack([m20, m12, v2]), np.column_stack([m01, m12, m20])])
    tagged = []
    for (a, b), tag, own in zip(mesh.edges, mesh.edge_tags, mesh.edge_owner):
        if tag in (HOLE_DIRICHLET, HOLE_ROBIN):
            mj = n0 + ekey[(min(a, b), max(a, b))]
            tagged += [((a, mj), tag, own), ((mj, b), tag, own)]
    hidx = None
    if mesh.hole_index is not None:
        hm = np.where(mesh.hole_index[uniq[:, 0]] == mesh.hole_index[uniq[:, 1]], mesh.hole_index[uniq[:, 0]], -1)
        hidx = np.concatenate([mesh.hole_index, hm])
    return _finalise(pts, tris, mesh.domain, mesh.spec, hidx, {}, tagged)


# --------------------------------------------------------------------------
# checks


def check_mesh(mesh: Mesh, min_angle: float = 18.0) -> dict:
    """Invariant census: orientation, angles, loops, edge usage, periodic pairing."""
    area = mesh.areas()
    uniq, counts = _edge_census(mesh.triangles)
    tagged_keys, tag_counts = np.unique(np.sort(mesh.edges, axis=1), axis=0, return_counts=True)
    bnd = uniq[counts == 1]
    edge_ok = (np.all(counts <= 2) and len(bnd) == len(tagged_keys) and np.all(tag_counts == 1)
               and (len(bnd) == 0 or np.array_equal(bnd, tagged_keys)))
    loops = {}
    loops_ok = True
    for k, e in mesh.hole_loops().items():
        deg = np.bincount(e.ravel())
        closed = np.all(deg[np.unique(e)] == 2)
        loops[k] = len(e)
        loops_ok &= bool(closed and len(e) >= MIN_SEGMENTS)
    pair_ok = True
    if mesh.periodic:
        L = mesh.domain.lengths
        slaves = np.flatnonzero(mesh.period_map != np.arange(mesh.n_points))
        d = mesh.points[slaves] - mesh.points[mesh.period_map[slaves]]
        dd = np.abs(d - L * np.round(d / L))
        pair_ok = bool(np.all(dd <= 1e-12 * L.max()))
        ids, cnt = np.unique(mesh.edge_owner[mesh.edge_tags == PERIODIC], return_counts=True)
        pair_ok &= bool(np.all(cnt == 2))
    return {"inverted": int(np.sum(area <= 0)), "min_angle": mesh.min_angle(),
            "angle_ok": mesh.min_angle() >= min_angle, "edges_ok": bool(edge_ok), "loops": loops,
            "loops_ok": bool(loops_ok), "pairs_ok": pair_ok, "area": float(area.sum())}
