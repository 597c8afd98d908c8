"""Exact intersection measures of disks/balls with axis-aligned boxes."""

from __future__ import annotations

import numpy as np
from scipy import integrate


def _G(x, r):
    """Antiderivative of sqrt(r^2 - x^2) on [-r, r]."""
    x = np.clip(x, -r, r)
    return 0.5 * (x * np.sqrt(np.maximum(r * r - x * x, 0.0)) + r * r * np.arcsin(x / r))


def _overlap(lo, hi, a_lo, a_hi):
    return np.maximum(lo, a_lo), np.minimum(hi, a_hi)


def _quadrant(a, b, r):
    """Area of the disk |p| < r intersected with {x < a, y < b}. Vectorised."""
    a, b, r = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(r, float))
    hi = np.clip(a, -r, r)
    out = np.zeros(a.shape)
    full = b >= r
    xb = np.sqrt(np.maximum(r * r - b * b, 0.0))

    def seg_2s(lo, up):
        lo, up = _overlap(lo, up, -r, hi)
        return np.where(up > lo, 2 * (_G(up, r) - _G(lo, r)), 0.0)

    def seg_bs(lo, up):
        lo, up = _overlap(lo, up, -r, hi)
        return np.where(up > lo, b * (up - lo) + _G(up, r) - _G(lo, r), 0.0)

    mid = ~full & (b > -r)
    pos = mid & (b >= 0)
    out = np.where(full, seg_2s(-r, r), out)
    out = np.where(pos, seg_2s(-r, -xb) + seg_bs(-xb, xb) + seg_2s(xb, r), out)
    out = np.where(mid & ~pos, seg_bs(-xb, xb), out)
    return out


def disk_box_area(cx, cy, r, x0, x1, y0, y1):
    """Area of the disk B_r((cx, cy)) inside [x0, x1] x [y0, y1]. Vectorised."""
    X0, X1 = np.asarray(x0) - cx, np.asarray(x1) - cx
    Y0, Y1 = np.asarray(y0) - cy, np.asarray(y1) - cy
    area = _quadrant(X1, Y1, r) - _quadrant(X0, Y1, r) - _quadrant(X1, Y0, r) + _quadrant(X0, Y0, r)
    return np.maximum(area, 0.0)


def ball_box_volume(center, r, lo, hi, tol=1e-11):
    """Volume of a 3D ball inside a box by slicing in z over exact disk areas.

    Returns ``(volume, error_estimate)``.
    """
    c = np.asarray(center, float)
    z0, z1 = max(lo[2], c[2] - r), min(hi[2], c[2] + r)
    if z1 <= z0:
        return 0.0, 0.0

    def slice_area(z):
        rho = np.sqrt(max(r * r - (z - c[2]) ** 2, 0.0))
        if rho == 0:
            return 0.0
        return float(disk_box_area(c[0], c[1], rho, lo[0], hi[0], lo[1], hi[1]))

    # kinks where the slice circle starts touching a face
    pts = []
    for axis in (0, 1):
        for face in (lo[axis], hi[axis]):
            d = abs(face - c[axis])
            if d < r:
                h = np.sqrt(r * r - d * d)
                pts += [c[2] - h, c[2] + h]
    pts = sorted(p for p in pts if z0 < p < z1)
    val, err = integrate.quad(slice_area, z0, z1, points=pts or None, epsabs=tol * r**3,
                              epsrel=tol, limit=200)
    return val, err
