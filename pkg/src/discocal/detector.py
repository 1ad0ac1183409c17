"""Circular-pattern detection with guaranteed boundary connectivity.

Blobs are segmented by thresholding (so boundaries are closed, 8-connected
pixel rings by construction), gated by a direct ellipse fit, and measured
with full centroid uncertainty. The same physical circle usually appears
under many threshold settings; the candidate with the lowest scalar
uncertainty wins. Survivors are ordered into the target's row-major grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .image import (
    AdaptiveThreshold,
    GlobalThreshold,
    GrayImage,
    ThresholdSpec,
    gradient,
    range_images,
    threshold,
)
from .moments import Contour, DegenerateContourError
from .projection import TargetSpec
from .uncertainty import CentroidMeasurement, NotPositiveDefiniteError, measure_centroid


class DetectionError(RuntimeError):
    """Wrong blob count or unresolvable grid ordering."""


class GridOrderError(DetectionError):
    """Centroids cannot be split into equal-size rows."""


@dataclass(frozen=True)
class DetectionParams:
    global_levels: tuple[float, ...] = tuple(float(t) for t in range(100, 201, 10))
    adaptive_blocks: tuple[int, ...] = (31, 63)
    adaptive_offsets: tuple[float, ...] = (5.0, 10.0)
    sigma: float = 1.0
    window: int = 5
    min_area: float = 30.0
    max_area: float = float("inf")
    ratio_max: float = 8.0
    fit_tol: float = 0.02
    dedupe_factor: float = 0.3
    closing: bool = True

    def threshold_specs(self) -> list[ThresholdSpec]:
        specs: list[ThresholdSpec] = [GlobalThreshold(t) for t in self.global_levels]
        for b in self.adaptive_blocks:
            for c in self.adaptive_offsets:
                specs.append(AdaptiveThreshold(b, c))
        return specs


@dataclass(frozen=True)
class BlobCandidate:
    contour: Contour
    measurement: CentroidMeasurement
    threshold_key: str


@dataclass(frozen=True)
class DetectedGrid:
    rows: int
    cols: int
    measurements: list[CentroidMeasurement]
    blobs: list[BlobCandidate] = field(default_factory=list)


def _close3(binary: np.ndarray) -> np.ndarray:
    """Morphological closing with a 3x3 box (one iteration), via the
    max/min filter pair, which is much faster than generic binary
    morphology on full frames."""
    dil = ndimage.maximum_filter(binary, size=3, mode="constant", cval=False)
    return ndimage.minimum_filter(dil, size=3, mode="constant", cval=True)


# Clockwise (on screen, v down) Moore neighbourhood starting at west.
_DIRS = np.array(
    [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)], dtype=int
)
_DIR_INDEX = {(int(du), int(dv)): i for i, (du, dv) in enumerate(_DIRS)}


def _moore_trace(mask: np.ndarray) -> np.ndarray:
    """Outer boundary of the single component in a padded boolean mask,
    as an ordered (n, 2) array of (u, v) pixel positions.

    Starts at the first foreground pixel in scan order and walks the
    boundary clockwise, stopping when the initial (pixel, direction) state
    repeats, so narrow spurs are traversed on both sides.
    """
    h, w = mask.shape
    flat = int(np.argmax(mask))
    sv, su = divmod(flat, w)
    cur_u, cur_v = su, sv
    backtrack = 0  # scan-start direction: west neighbour is background here
    contour: list[tuple[int, int]] = []
    first_state = None
    limit = 4 * int(mask.sum()) + 8
    for _ in range(limit):
        found = -1
        prev_dir = backtrack
        for step in range(1, 9):
            di = (backtrack + step) % 8
            du, dv = _DIRS[di]
            if mask[cur_v + dv, cur_u + du]:
                found = di
                break
            prev_dir = di
        if found < 0:
            return np.array([[cur_u, cur_v]], dtype=np.float64)
        state = (cur_u, cur_v, found)
        if first_state is None:
            first_state = state
        elif state == first_state:
            break
        contour.append((cur_u, cur_v))
        # The last background pixel scanned becomes the new backtrack.
        bu, bv = cur_u + _DIRS[prev_dir][0], cur_v + _DIRS[prev_dir][1]
        cur_u, cur_v = cur_u + _DIRS[found][0], cur_v + _DIRS[found][1]
        backtrack = _DIR_INDEX[(bu - cur_u, bv - cur_v)]
    return np.array(contour, dtype=np.float64)


def find_contours(
    binary: np.ndarray, min_pixels: int = 1, max_pixels: int | None = None
) -> list[np.ndarray]:
    """Ordered outer boundaries of all 8-connected foreground components.

    Consecutive contour points are 8-neighbours and the loop closes on
    itself; interior holes are ignored. Components are returned in
    scan-line order of their first pixel.
    """
    labels, count = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return []
    sizes = np.bincount(labels.ravel())
    slices = ndimage.find_objects(labels)
    contours = []
    for lab, slc in enumerate(slices, start=1):
        if slc is None or sizes[lab] < min_pixels:
            continue
        if max_pixels is not None and sizes[lab] > max_pixels:
            continue
        sub = labels[slc] == lab
        padded = np.pad(sub, 1)
        trace = _moore_trace(padded)
        trace[:, 0] += slc[1].start - 1
        trace[:, 1] += slc[0].start - 1
        contours.append(trace)
    return contours


@dataclass(frozen=True)
class EllipseFit:
    center: np.ndarray
    axes: tuple[float, float]  # major, minor
    angle: float
    conic: np.ndarray  # (A, B, C, D, E, F) with A x^2 + B xy + C y^2 + D x + E y + F = 0


def fit_ellipse(points: np.ndarray) -> EllipseFit | None:
    """Direct ellipse-specific least-squares conic fit.

    Solves the constrained algebraic problem on mean-centered coordinates
    (the constraint 4AC - B^2 = 1 admits only ellipses), then converts to
    geometric parameters. Returns None when no valid ellipse solution
    exists (degenerate or non-elliptical data).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 6:
        return None
    mean = pts.mean(axis=0)
    x = pts[:, 0] - mean[0]
    y = pts[:, 1] - mean[1]
    d1 = np.stack([x * x, x * y, y * y], axis=1)
    d2 = np.stack([x, y, np.ones_like(x)], axis=1)
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        return None
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    try:
        eigval, eigvec = np.linalg.eig(m)
    except np.linalg.LinAlgError:
        return None
    cond = 4.0 * eigvec[0] * eigvec[2] - eigvec[1] ** 2
    good = np.nonzero((cond > 0) & np.isreal(eigval))[0]
    if good.size == 0:
        return None
    a1 = np.real(eigvec[:, good[0]])
    conic_c = np.concatenate([a1, t @ a1])  # in centered coordinates
    return _conic_to_ellipse(conic_c, mean)


def _conic_to_ellipse(c: np.ndarray, mean: np.ndarray) -> EllipseFit | None:
    a, b, cc, d, e, f = c
    disc = 4.0 * a * cc - b * b
    if disc <= 0.0:
        return None
    x0 = (b * e - 2.0 * cc * d) / disc
    y0 = (b * d - 2.0 * a * e) / disc
    f0 = f + 0.5 * (d * x0 + e * y0)
    m2 = np.array([[a, b / 2.0], [b / 2.0, cc]])
    lam, vec = np.linalg.eigh(m2)
    if np.any(lam * (-f0) <= 0.0):
        return None
    axes = np.sqrt(-f0 / lam)
    order = np.argsort(axes)[::-1]
    major, minor = float(axes[order[0]]), float(axes[order[1]])
    vmaj = vec[:, order[0]]
    angle = float(np.arctan2(vmaj[1], vmaj[0]))
    center = np.array([x0 + mean[0], y0 + mean[1]])
    # Re-express the conic in the original frame for residual evaluation.
    a0, b0, c0 = a, b, cc
    d0 = d - 2.0 * a * mean[0] - b * mean[1]
    e0 = e - 2.0 * cc * mean[1] - b * mean[0]
    f_0 = (
        f
        + a * mean[0] ** 2
        + b * mean[0] * mean[1]
        + cc * mean[1] ** 2
        - d * mean[0]
        - e * mean[1]
    )
    conic = np.array([a0, b0, c0, d0, e0, f_0])
    return EllipseFit(center=center, axes=(major, minor), angle=angle, conic=conic)


def sampson_rms(points: np.ndarray, conic: np.ndarray) -> float:
    """RMS of the gradient-normalized algebraic conic residual, which
    approximates the geometric point-to-conic distance in pixels."""
    a, b, c, d, e, f = conic
    x = points[:, 0]
    y = points[:, 1]
    val = a * x * x + b * x * y + c * y * y + d * x + e * y + f
    gx = 2.0 * a * x + b * y + d
    gy = b * x + 2.0 * c * y + e
    g = np.hypot(gx, gy)
    g = np.where(g < 1e-12, 1e-12, g)
    return float(np.sqrt(np.mean((val / g) ** 2)))


def ellipse_test(contour: np.ndarray, params: DetectionParams) -> bool:
    """Gate a contour: enough points, elliptical fit, bounded residual,
    sane area, bounded axis ratio."""
    pts = np.asarray(contour, dtype=np.float64)
    if pts.shape[0] < 6:
        return False
    fit = fit_ellipse(pts)
    if fit is None:
        return False
    major, minor = fit.axes
    if minor <= 0.0 or major / minor >= params.ratio_max:
        return False
    area = np.pi * major * minor
    if not (params.min_area <= area <= params.max_area):
        return False
    mean_semiaxis = 0.5 * (major + minor)
    return sampson_rms(pts, fit.conic) < params.fit_tol * mean_semiaxis


def order_grid(centroids: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Permutation mapping row-major grid slots to centroid indices.

    The dominant grid axis comes from a PCA of the centroids; points are
    split into rows along the minor axis (the splits must produce equal
    row sizes) and sorted along the major axis within each row. Of the two
    labelings of a 180-degree-symmetric grid, the one whose first centroid
    is lexicographically smaller is returned.
    """
    pts = np.asarray(centroids, dtype=np.float64)
    n = pts.shape[0]
    if n != rows * cols:
        raise GridOrderError(f"expected {rows * cols} centroids, got {n}")
    center = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - center)
    e1 = vt[0]
    e2 = np.array([-e1[1], e1[0]])  # +90 deg in (u, v): keeps grid handedness

    best: np.ndarray | None = None
    best_key: tuple[float, float] | None = None
    for sign in (1.0, -1.0):
        perm = _order_with_axes(pts - center, sign * e1, sign * e2, rows, cols)
        if perm is None:
            continue
        key = (float(pts[perm[0], 0]), float(pts[perm[0], 1]))
        if best_key is None or key < best_key:
            best, best_key = perm, key
    if best is None:
        raise GridOrderError("row clustering produced unequal row sizes")
    return best


def _order_with_axes(pts, e1, e2, rows, cols) -> np.ndarray | None:
    s1 = pts @ e1
    s2 = pts @ e2
    order2 = np.argsort(s2, kind="stable")
    if rows > 1:
        gaps = np.diff(s2[order2])
        cut_positions = np.sort(np.argsort(gaps)[::-1][: rows - 1])
        groups = np.split(order2, cut_positions + 1)
    else:
        groups = [order2]
    if any(len(g) != cols for g in groups):
        return None
    perm = np.concatenate([g[np.argsort(s1[g], kind="stable")] for g in groups])
    return perm.astype(int)


def _estimate_spacing(
    candidates: list[BlobCandidate], fallback: float
) -> float:
    """Median nearest-neighbour distance among candidates that came from
    the same threshold, i.e. among physically distinct blobs."""
    by_key: dict[str, list[np.ndarray]] = {}
    for cand in candidates:
        by_key.setdefault(cand.threshold_key, []).append(cand.measurement.p)
    dists = []
    for pts in by_key.values():
        if len(pts) < 2:
            continue
        arr = np.array(pts)
        d2 = np.sum((arr[:, None, :] - arr[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        dists.extend(np.sqrt(d2.min(axis=1)).tolist())
    if not dists:
        return fallback
    return float(np.median(dists))


def detect(img: GrayImage, target: TargetSpec, params: DetectionParams) -> DetectedGrid:
    """Sweep thresholds, gate and measure blob candidates, keep the
    lowest-uncertainty candidate per physical blob, and order the result
    into the target grid. Raises DetectionError when the surviving count
    differs from rows*cols."""
    if target.count < 4:
        raise DetectionError("grid must contain at least 4 circles")
    grad = gradient(img)
    ranges = range_images(img, params.window)
    min_pixels = max(4, int(0.3 * params.min_area))
    max_pixels = None if np.isinf(params.max_area) else int(4.0 * params.max_area)

    candidates: list[BlobCandidate] = []
    seen: set[bytes] = set()
    for spec in params.threshold_specs():
        binary = threshold(img, spec)
        if params.closing:
            binary = _close3(binary)
        for contour in find_contours(binary, min_pixels=min_pixels, max_pixels=max_pixels):
            # Neighbouring thresholds often yield byte-identical contours;
            # re-measuring them cannot change the uncertainty minimum.
            key = contour.tobytes()
            if key in seen:
                continue
            seen.add(key)
            if not ellipse_test(contour, params):
                continue
            try:
                meas = measure_centroid(
                    img,
                    grad,
                    contour,
                    sigma=params.sigma,
                    window=params.window,
                    precomputed_range=ranges,
                )
            except (NotPositiveDefiniteError, DegenerateContourError, ValueError):
                continue
            candidates.append(
                BlobCandidate(
                    contour=Contour(contour), measurement=meas, threshold_key=spec.key()
                )
            )

    fallback = 2.0 * np.sqrt(img.width * img.height / max(target.count, 1)) * 0.25
    dedupe = params.dedupe_factor * _estimate_spacing(candidates, fallback)

    survivors: list[BlobCandidate] = []
    for cand in candidates:
        merged = False
        for i, kept in enumerate(survivors):
            if np.linalg.norm(cand.measurement.p - kept.measurement.p) < dedupe:
                if cand.measurement.epsilon < kept.measurement.epsilon:
                    survivors[i] = cand
                merged = True
                break
        if not merged:
            survivors.append(cand)

    if len(survivors) != target.count:
        raise DetectionError(
            f"detected {len(survivors)} blobs, expected {target.count}"
        )
    centroids = np.array([s.measurement.p for s in survivors])
    perm = order_grid(centroids, target.rows, target.cols)
    ordered = [survivors[i] for i in perm]
    return DetectedGrid(
        rows=target.rows,
        cols=target.cols,
        measurements=[b.measurement for b in ordered],
        blobs=ordered,
    )
