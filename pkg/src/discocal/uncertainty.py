"""Centroid uncertainty of a closed boundary.

Boundary points are modeled as a ring-structured Gaussian random field:
a circulant information (inverse-covariance) matrix couples each point to
its two neighbours, leaving rigid translation free (the prior is rank
deficient by exactly 2). Image gradients contribute rank-1 information at
each point along the gradient direction. The fused information matrix is
pushed through the centroid Jacobian of the polygon-moment formulas via a
Cholesky solve, giving a 2x2 centroid covariance and the scalar
uncertainty used for candidate selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded, solve_triangular

from .image import GradientField, GrayImage, local_intensity_range, range_images
from .moments import orient_positive, polygon_centroid, polygon_moments

# Normalization of the ring prior so one-neighbour conditionals have
# variance sigma^2 in the large-n limit.
Z_NORMALIZATION = 3.0 - math.sqrt(2.0)

# Below this gradient norm a boundary point contributes no information.
GRADIENT_FLOOR = 1e-3

DEFAULT_SIGMA = 1.0
DEFAULT_WINDOW = 5


class NotPositiveDefiniteError(ValueError):
    """No usable gradient information anywhere on the boundary."""


@dataclass(frozen=True)
class PriorInfo:
    """Ring-prior information matrix over interleaved (u1, v1, ..., un, vn)."""

    omega: np.ndarray
    n: int
    sigma: float
    z: float


@dataclass(frozen=True)
class CentroidMeasurement:
    """Centroid, its 2x2 covariance, and the scalar 2-sigma radius."""

    p: np.ndarray
    cov: np.ndarray
    epsilon: float


def prior_information(n: int, sigma: float = DEFAULT_SIGMA, z: float = Z_NORMALIZATION) -> PriorInfo:
    """Connectivity prior for n ring-ordered boundary points.

    Per coordinate the matrix is circulant with 2 on the diagonal and -1
    for both ring neighbours, scaled by 1/(z * sigma^2); x and y blocks are
    decoupled. Uniform x- and y-translations are exact null vectors.
    """
    if n < 3:
        raise ValueError(f"need at least 3 boundary points, got {n}")
    if sigma <= 0.0:
        raise ValueError(f"connectivity scale must be positive, got {sigma}")
    c = 1.0 / (z * sigma * sigma)
    omega = np.zeros((2 * n, 2 * n))
    idx = np.arange(2 * n)
    omega[idx, idx] = 2.0 * c
    nxt = (idx + 2) % (2 * n)
    omega[idx, nxt] = -c
    omega[nxt, idx] = -c
    return PriorInfo(omega=omega, n=n, sigma=float(sigma), z=float(z))


def gradient_information(
    img: GrayImage,
    grad: GradientField,
    pt: tuple[float, float],
    window: int = DEFAULT_WINDOW,
    gradient_floor: float = GRADIENT_FLOOR,
) -> np.ndarray:
    """Rank-1 information of one boundary point from the image gradient.

    The standard deviation across the edge is (Imax - Imin) / (4 |g|) with
    the intensity range taken from a local window, so the information is
    (4 |g| / (Imax - Imin))^2 along the unit gradient and zero across it.
    Degenerate points (flat gradient or no contrast) carry no information.
    """
    u = int(round(pt[0]))
    v = int(round(pt[1]))
    if not (0 <= u < img.width and 0 <= v < img.height):
        raise ValueError(f"point {pt} lies outside the image")
    g = np.array([grad.gx[v, u], grad.gy[v, u]])
    gnorm = float(np.hypot(g[0], g[1]))
    imin, imax = local_intensity_range(img, (u, v), window)
    if gnorm < gradient_floor or imax <= imin:
        return np.zeros((2, 2))
    ghat = g / gnorm
    lam = (4.0 * gnorm / (imax - imin)) ** 2
    return lam * np.outer(ghat, ghat)


def _point_infos(
    img: GrayImage,
    grad: GradientField,
    points: np.ndarray,
    window: int,
    gradient_floor: float,
    precomputed_range: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Vectorized gradient_information over all contour points, (n, 2, 2)."""
    u = np.rint(points[:, 0]).astype(int)
    v = np.rint(points[:, 1]).astype(int)
    if u.min() < 0 or v.min() < 0 or u.max() >= img.width or v.max() >= img.height:
        raise ValueError("contour leaves the image bounds")
    if precomputed_range is None:
        precomputed_range = range_images(img, window)
    imin, imax = precomputed_range
    g = np.stack([grad.gx[v, u], grad.gy[v, u]], axis=1)
    gnorm = np.hypot(g[:, 0], g[:, 1])
    contrast = imax[v, u] - imin[v, u]
    ok = (gnorm >= gradient_floor) & (contrast > 0.0)
    lam = np.zeros(len(points))
    ghat = np.zeros_like(g)
    lam[ok] = (4.0 * gnorm[ok] / contrast[ok]) ** 2
    ghat[ok] = g[ok] / gnorm[ok, None]
    return lam[:, None, None] * (ghat[:, :, None] * ghat[:, None, :])


def posterior_information(
    prior: PriorInfo, point_infos: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None]:
    """Fuse the prior with per-point information by block-diagonal addition.

    Returns the fused matrix together with its lower Cholesky factor, or
    None in place of the factor when the result is not positive definite
    (which happens exactly when the gradients pin down no rigid motion;
    callers should reject the blob).
    """
    point_infos = np.asarray(point_infos, dtype=np.float64)
    n = prior.n
    if point_infos.shape != (n, 2, 2):
        raise ValueError(f"expected {(n, 2, 2)} point informations, got {point_infos.shape}")
    omega = prior.omega.copy()
    view = omega.reshape(n, 2, n, 2)
    idx = np.arange(n)
    view[idx, :, idx, :] += point_infos
    chol = _try_cholesky(omega)
    return omega, chol


def _try_cholesky(omega: np.ndarray) -> np.ndarray | None:
    try:
        chol = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        return None
    # Guard against a numerically "successful" factorization of a
    # singular matrix: pivots must clear the roundoff floor.
    d = np.diagonal(chol)
    if (d * d).min() <= 1e-10 * omega.diagonal().max():
        return None
    return chol


def centroid_jacobian(points: np.ndarray) -> np.ndarray:
    """2 x 2n Jacobian of the polygon centroid w.r.t. the boundary points.

    Columns 2i, 2i+1 differentiate against (u_i, v_i); indexing is cyclic.
    Coordinates are recentered on the first vertex so the result (which is
    mathematically translation invariant) is computed from translation-
    invariant inputs.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    u = pts[:, 0] - pts[0, 0]
    v = pts[:, 1] - pts[0, 1]
    un, vn = np.roll(u, -1), np.roll(v, -1)
    up, vp = np.roll(u, 1), np.roll(v, 1)

    cross = un * v - u * vn
    m00 = 0.5 * math.fsum(cross)
    if abs(m00) < 1e-9:
        raise ValueError("degenerate contour: zero area")
    ubar = math.fsum(cross * (un + u)) / 6.0 / m00
    vbar = math.fsum(cross * (vn + v)) / 6.0 / m00

    dm00_du = 0.5 * (vp - vn)
    dm00_dv = 0.5 * (un - up)
    dm10_du = (-un * (vn - v) - 2.0 * u * (vn - vp) - up * (v - vp)) / 6.0
    dm10_dv = ((un + u + up) * (un - up)) / 6.0
    dm01_du = (-(vn + v + vp) * (vn - vp)) / 6.0
    dm01_dv = (vn * (un - u) + 2.0 * v * (un - up) + vp * (u - up)) / 6.0

    jac = np.empty((2, 2 * n))
    jac[0, 0::2] = (dm10_du - ubar * dm00_du) / m00
    jac[0, 1::2] = (dm10_dv - ubar * dm00_dv) / m00
    jac[1, 0::2] = (dm01_du - vbar * dm00_du) / m00
    jac[1, 1::2] = (dm01_dv - vbar * dm00_dv) / m00
    return jac


def centroid_covariance(
    jac: np.ndarray, omega: np.ndarray, chol: np.ndarray | None = None
) -> np.ndarray:
    """Propagate boundary information to the centroid: J Omega^-1 J^T,
    evaluated through a Cholesky solve instead of a full inverse."""
    if chol is None:
        chol = _try_cholesky(omega)
        if chol is None:
            raise NotPositiveDefiniteError("boundary information matrix is not positive definite")
    t = solve_triangular(chol, jac.T, lower=True, check_finite=False)
    return t.T @ t


def _covariance_banded(
    jac: np.ndarray, point_infos: np.ndarray, n: int, sigma: float, z: float
) -> np.ndarray | None:
    """Fast equivalent of prior + posterior + centroid_covariance.

    The fused information matrix is pentadiagonal except for the four
    ring-closure couplings, so it is split as Omega = B + U C U^T with B
    banded positive definite and C the rank-4 wrap block. B is factorized
    in banded form and the wrap is folded back in with the Woodbury
    identity; the result equals J Omega^-1 J^T to roundoff. Positive
    definiteness of Omega is certified through the inertia of the 4x4
    capacitance matrix (it must match the inertia of C^-1). Returns None
    when Omega is not positive definite.
    """
    c = 1.0 / (z * sigma * sigma)
    m = 2 * n
    bands = np.zeros((3, m))
    bands[0, 0::2] = 2.0 * c + point_infos[:, 0, 0]
    bands[0, 1::2] = 2.0 * c + point_infos[:, 1, 1]
    bands[1, 0::2] = point_infos[:, 0, 1]
    bands[2, : m - 2] = -c
    try:
        cb = cholesky_banded(bands, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None

    rhs = np.zeros((m, 6))
    rhs[:, :2] = jac.T
    for col, idx in enumerate((0, 1, m - 2, m - 1)):
        rhs[idx, 2 + col] = 1.0
    sol = cho_solve_banded((cb, True), rhs, check_finite=False)
    x = sol[:, :2]  # B^-1 J^T
    y = sol[:, 2:]  # B^-1 U
    uty = y[[0, 1, m - 2, m - 1], :]
    # C = -c * [[0, I2], [I2, 0]] couples (u1, v1) with (un, vn).
    cinv = np.zeros((4, 4))
    cinv[0, 2] = cinv[2, 0] = cinv[1, 3] = cinv[3, 1] = -1.0 / c
    cap = cinv + uty
    eig = np.linalg.eigvalsh(cap)
    tol = 1e-12 * max(abs(eig[0]), abs(eig[-1]), 1.0)
    if np.sum(eig > tol) != 2 or np.sum(eig < -tol) != 2:
        return None
    utx = x[[0, 1, m - 2, m - 1], :]
    jy = jac @ y
    return jac @ x - jy @ np.linalg.solve(cap, utx)


def scalar_uncertainty(cov: np.ndarray) -> float:
    """Averaged 2-sigma radius of a 2-D Gaussian: 2 sqrt(tr(cov)/2).

    The trace (eigenvalue sum) is used rather than the determinant so a
    single small eigenvalue cannot mask a large one.
    """
    return 2.0 * math.sqrt(float(np.trace(cov)) / 2.0)


def measure_centroid(
    img: GrayImage,
    grad: GradientField,
    contour_points: np.ndarray,
    sigma: float = DEFAULT_SIGMA,
    window: int = DEFAULT_WINDOW,
    gradient_floor: float = GRADIENT_FLOOR,
    precomputed_range: tuple[np.ndarray, np.ndarray] | None = None,
    method: str = "banded",
) -> CentroidMeasurement:
    """Full measurement of one blob: centroid, covariance, scalar radius.

    Composition: orient the contour, evaluate polygon moments and the
    centroid Jacobian, build the ring prior, fuse per-point gradient
    information, factorize, and propagate to the centroid. The default
    solver exploits the near-banded structure of the fused information
    matrix; method="dense" runs the plain dense Cholesky instead (both
    agree to roundoff).
    """
    pts = orient_positive(np.asarray(contour_points, dtype=np.float64))
    n = pts.shape[0]
    moments = polygon_moments(pts)
    p = polygon_centroid(moments)
    jac = centroid_jacobian(pts)
    infos = _point_infos(img, grad, pts, window, gradient_floor, precomputed_range)
    if method == "banded":
        cov = _covariance_banded(jac, infos, n, sigma, Z_NORMALIZATION)
        if cov is None:
            raise NotPositiveDefiniteError("no usable gradient information on the boundary")
    else:
        prior = prior_information(n, sigma)
        omega, chol = posterior_information(prior, infos)
        if chol is None:
            raise NotPositiveDefiniteError("no usable gradient information on the boundary")
        cov = centroid_covariance(jac, omega, chol)
    return CentroidMeasurement(p=p, cov=cov, epsilon=scalar_uncertainty(cov))
