"""Pinhole camera with polynomial radial distortion, planar-target
homographies, and the circle-centroid estimator.

Projecting the *center* of a target circle is biased once radial
distortion bends the projected ellipse; the estimator here instead maps a
dense ring of boundary samples through the full nonlinear projection and
takes the polygon centroid of the image, which converges to the true
centroid of the projected shape at O(1/M^2) in the sample count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .moments import batch_centroids

DEFAULT_ESTIMATOR_SAMPLES = 2000


class ProjectionError(ValueError):
    """Geometrically invalid projection (behind camera, folded distortion...)."""


def rotation_matrix(rvec: np.ndarray) -> np.ndarray:
    """Axis-angle (Rodrigues) to rotation matrix."""
    rvec = np.asarray(rvec, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(rvec))
    if angle < 1e-14:
        return np.eye(3)
    k = rvec / angle
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def rotation_vector(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to axis-angle with norm in [0, pi]."""
    cos_t = max(-1.0, min(1.0, (float(np.trace(r)) - 1.0) / 2.0))
    angle = math.acos(cos_t)
    if angle < 1e-12:
        return np.zeros(3)
    if math.pi - angle < 1e-6:
        # Near-pi: the antisymmetric part vanishes, recover the axis from
        # the dominant column of (R + I)/2 = axis axis^T (at exactly pi).
        m = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diagonal(m)))
        axis = m[:, i] / math.sqrt(max(m[i, i], 1e-30))
        axis /= np.linalg.norm(axis)
        return axis * angle
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return axis * (angle / (2.0 * math.sin(angle)))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    eta: float = 0.0

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.eta, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Distortion:
    """Radial polynomial: scale k(s) = 1 + d1 s + d2 s^2 + ... with
    s the squared normalized-plane radius. The constant term is implicit."""

    coeffs: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    @property
    def order(self) -> int:
        return len(self.coeffs)

    def factor(self, s: np.ndarray | float) -> np.ndarray | float:
        k = np.ones_like(np.asarray(s, dtype=np.float64))
        p = np.asarray(s, dtype=np.float64).copy()
        for c in self.coeffs:
            k = k + c * p
            p = p * np.asarray(s)
        return k if isinstance(s, np.ndarray) else float(k)

    def factor_derivative(self, s: np.ndarray | float):
        d = np.zeros_like(np.asarray(s, dtype=np.float64))
        p = np.ones_like(d)
        for i, c in enumerate(self.coeffs, start=1):
            d = d + i * c * p
            p = p * np.asarray(s)
        return d if isinstance(s, np.ndarray) else float(d)

    def positive_on(self, s_max: float, samples: int = 256) -> bool:
        """True when the distortion scale stays positive up to s_max; a
        non-positive scale means the model has folded over within the
        working field of view."""
        s = np.linspace(0.0, max(s_max, 0.0), samples)
        return bool(np.all(self.factor(s) > 0.0))


@dataclass(frozen=True)
class Pose:
    """Target-to-camera transform; rotation stored as axis-angle."""

    rvec: np.ndarray
    tvec: np.ndarray

    def __post_init__(self):
        rvec = np.asarray(self.rvec, dtype=np.float64).reshape(3).copy()
        tvec = np.asarray(self.tvec, dtype=np.float64).reshape(3).copy()
        angle = float(np.linalg.norm(rvec))
        if angle >= math.pi:
            # Re-wrap to the equivalent rotation with norm < pi.
            wrapped = math.fmod(angle, 2.0 * math.pi)
            if wrapped > math.pi:
                wrapped -= 2.0 * math.pi
            rvec = rvec * (wrapped / angle)
        rvec.setflags(write=False)
        tvec.setflags(write=False)
        object.__setattr__(self, "rvec", rvec)
        object.__setattr__(self, "tvec", tvec)

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rvec)


@dataclass(frozen=True)
class TargetSpec:
    """Planar grid of circles; circle (row, col) is centered at
    (col * spacing, row * spacing) in target-plane units."""

    rows: int
    cols: int
    spacing: float
    radius: float

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and column")
        if not (0.0 < self.radius < self.spacing / 2.0):
            raise ValueError("circle radius must lie in (0, spacing/2)")

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def centers(self) -> np.ndarray:
        """Row-major (rows*cols, 2) circle centers."""
        cc, rr = np.meshgrid(np.arange(self.cols), np.arange(self.rows))
        return np.stack([cc.ravel() * self.spacing, rr.ravel() * self.spacing], axis=1).astype(
            np.float64
        )


def _transform_plane(r: np.ndarray, t: np.ndarray, pw: np.ndarray) -> np.ndarray:
    """[r1 r2 t] applied to homogeneous plane points, shape (..., 3)."""
    return pw[..., 0, None] * r[:, 0] + pw[..., 1, None] * r[:, 1] + t


def project_points(
    k: Intrinsics, d: Distortion, r: np.ndarray, t: np.ndarray, pw: np.ndarray
) -> np.ndarray:
    """Project target-plane points (..., 2) to pixels (..., 2) given a
    rotation matrix and translation. Raises on non-positive depth or a
    folded (non-positive) distortion scale at any point."""
    pc = _transform_plane(r, t, np.asarray(pw, dtype=np.float64))
    z = pc[..., 2]
    if np.any(z <= 0.0):
        raise ProjectionError("point projects to non-positive depth")
    xn = pc[..., 0] / z
    yn = pc[..., 1] / z
    s = xn * xn + yn * yn
    scale = d.factor(s)
    if np.any(scale <= 0.0):
        raise ProjectionError("distortion scale is non-positive inside the field of view")
    xd = scale * xn
    yd = scale * yn
    u = k.fx * xd + k.eta * yd + k.cx
    v = k.fy * yd + k.cy
    return np.stack([u, v], axis=-1)


def project_point(k: Intrinsics, d: Distortion, e: Pose, pw) -> np.ndarray:
    """Pixel position of target-plane point(s) under pose e."""
    return project_points(k, d, e.matrix, e.tvec, np.asarray(pw, dtype=np.float64))


def homography(k: Intrinsics, e: Pose) -> np.ndarray:
    """Plane-to-image homography K [r1 r2 t], normalized to H[2,2] = 1."""
    r = e.matrix
    h = k.matrix @ np.column_stack([r[:, 0], r[:, 1], e.tvec])
    if abs(h[2, 2]) < 1e-12:
        raise ProjectionError("target plane passes through the camera center")
    return h / h[2, 2]


def fold_radius(d: Distortion, r_limit: float = 16.0) -> float:
    """Smallest radius where the forward radial map r -> r k(r^2) stops
    increasing (model fold-over), or inf if it is monotone up to r_limit."""
    if not d.coeffs or all(c == 0.0 for c in d.coeffs):
        return math.inf
    r = np.linspace(0.0, r_limit, 4096)
    s = r * r
    slope = d.factor(s) + 2.0 * s * d.factor_derivative(s)
    bad = np.nonzero(slope <= 0.0)[0]
    if bad.size == 0:
        return math.inf
    lo = float(r[bad[0] - 1]) if bad[0] > 0 else 0.0
    hi = float(r[bad[0]])
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        sm = mid * mid
        if d.factor(sm) + 2.0 * sm * d.factor_derivative(sm) > 0.0:
            lo = mid
        else:
            hi = mid
    return lo


def undistort_radius(d: Distortion, rd: np.ndarray, r_limit: float = 16.0) -> np.ndarray:
    """Solve r * k(r^2) = rd for r >= 0 on the monotone branch.

    Bisection on the bracketed monotone branch; distorted radii beyond the
    fold of the polynomial (unreachable by the forward map) are clamped to
    the fold radius.
    """
    rd = np.atleast_1d(np.asarray(rd, dtype=np.float64))
    r_hi = fold_radius(d, r_limit)
    if math.isinf(r_hi):
        r_hi = r_limit
        while r_hi * float(d.factor(r_hi * r_hi)) < rd.max() and r_hi < 1e6:
            r_hi *= 2.0
    rd_max = r_hi * float(d.factor(r_hi * r_hi))
    target = np.minimum(rd, rd_max)
    lo = np.zeros_like(target)
    hi = np.full_like(target, r_hi)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        f = mid * d.factor(mid * mid)
        below = f < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def unbiased_circle_centroid(
    k: Intrinsics,
    d: Distortion,
    e: Pose,
    center: np.ndarray,
    radius: float,
    samples: int = DEFAULT_ESTIMATOR_SAMPLES,
    phase: float = 0.0,
) -> np.ndarray:
    """Centroid of the full image of one target circle under the complete
    nonlinear projection (perspective + radial distortion)."""
    return unbiased_circle_centroids(
        k, d, e, np.asarray(center, dtype=np.float64).reshape(1, 2), radius, samples, phase
    )[0]


def unbiased_circle_centroids(
    k: Intrinsics,
    d: Distortion,
    e: Pose,
    centers: np.ndarray,
    radius: float,
    samples: int = DEFAULT_ESTIMATOR_SAMPLES,
    phase: float = 0.0,
) -> np.ndarray:
    """Batch form of unbiased_circle_centroid over (m, 2) circle centers.

    Each circle boundary is sampled at `samples` uniform angles (the phase
    is kept fixed so the result is a smooth function of the camera
    parameters), projected, and reduced with the polygon-centroid formula.
    """
    return ring_image_centroids(
        k, d, e.matrix, e.tvec, np.asarray(centers, dtype=np.float64), radius, samples, phase
    )


def ring_image_centroids(
    k: Intrinsics,
    d: Distortion,
    r: np.ndarray,
    t: np.ndarray,
    centers: np.ndarray,
    radius: float,
    samples: int = DEFAULT_ESTIMATOR_SAMPLES,
    phase: float = 0.0,
) -> np.ndarray:
    """unbiased_circle_centroids for a raw rotation matrix and translation
    (the form optimizer internals work with)."""
    ang = phase + np.arange(samples) * (2.0 * math.pi / samples)
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1) * radius
    pts = np.asarray(centers, dtype=np.float64)[:, None, :] + ring[None, :, :]
    img = project_points(k, d, r, t, pts)
    return batch_centroids(img)


def project_center(k: Intrinsics, d: Distortion, e: Pose, centers: np.ndarray) -> np.ndarray:
    """Center-point projection of circle centers: the biased alternative
    to the boundary-sampling estimator, kept for ablation."""
    return project_points(k, d, e.matrix, e.tvec, np.asarray(centers, dtype=np.float64))
