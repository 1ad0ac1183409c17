"""Exact polygon moments and centroids from closed boundary loops.

The boundary integral form only touches the points that actually define
the shape, which is what lets boundary-point covariance be pushed through
to the centroid later. Point order is normalized so the signed area is
positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEGENERATE_AREA = 1e-9


class DegenerateContourError(ValueError):
    """Polygon area is (numerically) zero; no centroid exists."""


@dataclass(frozen=True)
class Contour:
    """Closed polygon boundary: points[i] connects to points[i+1], and the
    last point connects back to the first. Detector-produced contours are
    additionally 8-connected."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("contour points must be an (n, 2) array")
        if pts.shape[0] < 3:
            raise ValueError(f"contour needs at least 3 points, got {pts.shape[0]}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PolygonMoments:
    m00: float
    m10: float
    m01: float


def _as_points(c) -> np.ndarray:
    pts = c.points if isinstance(c, Contour) else np.asarray(c, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError("expected an (n >= 3, 2) point array")
    return pts


def orient_positive(points: np.ndarray) -> np.ndarray:
    """Return the points ordered so the signed area is positive, reversing
    the loop if needed."""
    pts = _as_points(points)
    u, v = pts[:, 0], pts[:, 1]
    un, vn = np.roll(u, -1), np.roll(v, -1)
    if float(np.sum(un * v - u * vn)) < 0.0:
        return pts[::-1].copy()
    return pts


def polygon_moments(c: Contour | np.ndarray) -> PolygonMoments:
    """Signed area and first moments of a closed polygon.

    Accumulation shifts coordinates to the first vertex and uses exact
    (fsum) summation, so large pixel coordinates and long contours do not
    lose precision to cancellation. If the loop is wound the wrong way the
    result is flipped so m00 > 0.
    """
    pts = _as_points(c)
    u0, v0 = pts[0]
    u = pts[:, 0] - u0
    v = pts[:, 1] - v0
    un, vn = np.roll(u, -1), np.roll(v, -1)
    cross = un * v - u * vn
    m00 = 0.5 * math.fsum(cross)
    if abs(m00) < DEGENERATE_AREA:
        raise DegenerateContourError(f"degenerate polygon: |m00| = {abs(m00):.3g}")
    m10 = math.fsum(cross * (un + u)) / 6.0
    m01 = math.fsum(cross * (vn + v)) / 6.0
    if m00 < 0.0:
        m00, m10, m01 = -m00, -m10, -m01
    # Undo the shift: the centroid is equivariant, the area is invariant.
    return PolygonMoments(m00=m00, m10=m10 + u0 * m00, m01=m01 + v0 * m00)


def polygon_centroid(m: PolygonMoments) -> np.ndarray:
    if abs(m.m00) < DEGENERATE_AREA:
        raise DegenerateContourError("degenerate polygon moments")
    return np.array([m.m10 / m.m00, m.m01 / m.m00])


def centroid_of(points: Contour | np.ndarray) -> np.ndarray:
    return polygon_centroid(polygon_moments(points))


def batch_centroids(loops: np.ndarray) -> np.ndarray:
    """Centroids of a batch of closed polygons, shape (b, n, 2) -> (b, 2).

    Vectorized variant of polygon_moments/polygon_centroid used by the
    circle-projection sampler; coordinates are recentered per loop before
    accumulation to keep the shoelace sums well conditioned.
    """
    loops = np.asarray(loops, dtype=np.float64)
    ref = loops[:, :1, :]
    u = loops[:, :, 0] - ref[:, :, 0]
    v = loops[:, :, 1] - ref[:, :, 1]
    un, vn = np.roll(u, -1, axis=1), np.roll(v, -1, axis=1)
    cross = un * v - u * vn
    m00 = 0.5 * cross.sum(axis=1)
    if np.any(np.abs(m00) < DEGENERATE_AREA):
        raise DegenerateContourError("degenerate polygon in batch")
    m10 = (cross * (un + u)).sum(axis=1) / 6.0
    m01 = (cross * (vn + v)).sum(axis=1) / 6.0
    out = np.stack([m10 / m00, m01 / m00], axis=1)
    return out + ref[:, 0, :]
