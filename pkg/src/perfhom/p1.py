"""Linear triangle primitives: quadrature, local gradients, sparse assembly."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from matplotlib.tri import Triangulation

# Degree-5 seven-point rule on the reference triangle (barycentric, weights sum to 1).
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
_w1, _w2 = 0.132394152788506, 0.125939180544827
QUAD_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
    [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
])
QUAD_W = np.array([0.225, _w1, _w1, _w1, _w2, _w2, _w2])
QUAD_DEGREE = 5

GAUSS_1D = (np.array([0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)]), np.array([0.5, 0.5]))


def gauss_1d(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1), 0.5 * w


def signed_areas(p, t):
    a, b, c = p[t[:, 0]], p[t[:, 1]], p[t[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def gradients(p, t):
    """Areas (N,) and constant basis gradients (N, 3, 2)."""
    a, b, c = p[t[:, 0]], p[t[:, 1]], p[t[:, 2]]
    area = signed_areas(p, t)
    # grad lambda_i = rot90(opposite edge) / (2 area)
    e = np.stack([c - b, a - c, b - a], axis=1)
    g = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2 * area)[:, None, None]
    return area, g


def quad_points(p, t):
    """Physical quadrature points (N, Q, 2) and weights (N, Q) including the area."""
    area = np.abs(signed_areas(p, t))
    verts = p[t]  # (N,3,2)
    x = np.einsum("qi,nid->nqd", QUAD_BARY, verts)
    return x, area[:, None] * QUAD_W[None, :]


def _coo(t, local, n):
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _eval(fun, x):
    """Evaluate a coefficient at points x (N, Q, 2); scalars pass through."""
    if callable(fun):
        val = np.asarray(fun(x.reshape(-1, 2)), dtype=float)
        return val.reshape(x.shape[:2] + val.shape[1:])
    return fun


def stiffness(p, t, A=None):
    """Matrix of int A grad u . grad v, with A None (identity), constant (2,2) or callable."""
    area, g = gradients(p, t)
    if A is None:
        K = np.einsum("nid,njd->nij", g, g)
    else:
        x, w = quad_points(p, t)
        if callable(A):
            Aq = _eval(A, x)  # (N,Q,2,2)
            Ae = np.einsum("nq,nqab->nab", w, Aq) / np.abs(area)[:, None, None]
        else:
            Ae = np.broadcast_to(np.asarray(A, float), (len(t), 2, 2))
        K = np.einsum("nia,nab,njb->nij", g, Ae, g)
    return _coo(t, K * np.abs(area)[:, None, None], len(p))


def mass(p, t, c=1.0):
    """Matrix of int c u v with quadrature (c scalar or callable)."""
    x, w = quad_points(p, t)
    cq = _eval(c, x)
    cq = np.broadcast_to(cq, w.shape) if np.ndim(cq) < 2 else cq
    M = np.einsum("nq,qi,qj->nij", w * cq, QUAD_BARY, QUAD_BARY)
    return _coo(t, M, len(p))


def convection(p, t, b):
    """Matrix of int (b . grad u) v; ``b`` callable returning (M, 2) or constant (2,)."""
    area, g = gradients(p, t)
    x, w = quad_points(p, t)
    bq = _eval(b, x) if callable(b) else np.broadcast_to(np.asarray(b, float), x.shape)
    # rows: test v (phi_i at q), cols: grad phi_j . b
    C = np.einsum("nq,qi,nqd,njd->nij", w, QUAD_BARY, bq, g)
    return _coo(t, C, len(p))


def load(p, t, f):
    x, w = quad_points(p, t)
    fq = _eval(f, x)
    fq = np.broadcast_to(fq, w.shape)
    vals = np.einsum("nq,qi->ni", w * fq, QUAD_BARY)
    return np.bincount(t.ravel(), vals.ravel(), minlength=len(p))


def edge_mass(p, edges, c=1.0, lengths=None):
    """Matrix of int_edges c u v ds (two-point Gauss), c scalar or per-edge array."""
    if len(edges) == 0:
        return sp.csr_matrix((len(p), len(p)))
    L = np.linalg.norm(p[edges[:, 1]] - p[edges[:, 0]], axis=1) if lengths is None else lengths
    c = np.broadcast_to(np.asarray(c, float), (len(edges),))
    loc = (L * c)[:, None, None] * np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])[None]
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    return sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(len(p), len(p)))


def edge_nonlinear(p, edges, u, phi, dphi, c, order=3):
    """Vector int_e c phi(u) v ds and Jacobian int_e c phi'(u) w v ds on boundary edges."""
    n = len(p)
    if len(edges) == 0:
        return np.zeros(n), sp.csr_matrix((n, n))
    s, w = gauss_1d(order)
    L = np.linalg.norm(p[edges[:, 1]] - p[edges[:, 0]], axis=1)
    c = np.broadcast_to(np.asarray(c, float), (len(edges),))
    N = np.stack([1 - s, s], axis=1)  # (Q,2)
    uq = u[edges] @ N.T  # (E,Q)
    wq = (L * c)[:, None] * w[None, :]
    r = np.einsum("eq,qi->ei", wq * phi(uq), N)
    J = np.einsum("eq,qi,qj->eij", wq * dphi(uq), N, N)
    vec = np.bincount(edges.ravel(), r.ravel(), minlength=n)
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    return vec, sp.csr_matrix((J.ravel(), (rows, cols)), shape=(n, n))


class PointLocator:
    """Locate points in a triangulation and interpolate P1 fields there.

    ``period`` (lengths) and ``origin`` wrap queries onto a torus box first.
    """

    def __init__(self, p, t, origin=None, period=None):
        self.p = np.asarray(p, float)
        self.t = np.asarray(t)
        self.origin = None if origin is None else np.asarray(origin, float)
        self.period = None if period is None else np.asarray(period, float)
        self._tri = Triangulation(self.p[:, 0], self.p[:, 1], self.t)
        self._finder = self._tri.get_trifinder()

    def _wrap(self, x):
        if self.period is None:
            return x
        q = self.origin + np.mod(x - self.origin, self.period)
        return np.where(q >= self.origin + self.period, q - self.period, q)

    def locate(self, x):
        """Triangle index (-1 if outside) and barycentric coordinates."""
        x = self._wrap(np.atleast_2d(np.asarray(x, float)))
        idx = np.asarray(self._finder(x[:, 0], x[:, 1]), dtype=int)
        bary = np.zeros((len(x), 3))
        ok = idx >= 0
        if ok.any():
            v = self.p[self.t[idx[ok]]]
            a, b, c = v[:, 0], v[:, 1], v[:, 2]
            det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
            d = x[ok] - a
            l1 = (d[:, 0] * (c[:, 1] - a[:, 1]) - d[:, 1] * (c[:, 0] - a[:, 0])) / det
            l2 = ((b[:, 0] - a[:, 0]) * d[:, 1] - (b[:, 1] - a[:, 1]) * d[:, 0]) / det
            bary[ok] = np.column_stack([1 - l1 - l2, l1, l2])
        return idx, bary

    def interpolate(self, values, x, grad=False):
        idx, bary = self.locate(x)
        ok = idx >= 0
        out = np.full(len(idx), np.nan)
        tri = self.t[idx[ok]]
        out[ok] = np.einsum("ni,ni->n", values[tri], bary[ok])
        if not grad:
            return out, ok
        g = np.full((len(idx), 2), np.nan)
        _, G = gradients(self.p, tri)
        g[ok] = np.einsum("ni,nid->nd", values[tri], G)
        return out, g, ok
