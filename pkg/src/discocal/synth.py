"""Synthetic target rendering and the Monte-Carlo calibration harness.

Rendering inverts the full nonlinear camera map per supersample, so the
centroid bias of distorted circle images is present in the data by
construction, and ground-truth centroids come from the boundary-sampling
estimator rather than any ellipse approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .calib import CalibrationError, CalibrationResult, calibrate_views
from .detector import DetectedGrid, DetectionError, DetectionParams, detect
from .image import GrayImage
from .projection import (
    Distortion,
    Intrinsics,
    Pose,
    ProjectionError,
    TargetSpec,
    fold_radius,
    homography,
    project_points,
    rotation_matrix,
    rotation_vector,
    unbiased_circle_centroids,
    undistort_radius,
)

GT_ESTIMATOR_SAMPLES = 4000
_MOTION_SUBFRAMES = 15
# Keep circle boundaries inside this fraction of the distortion fold so the
# forward map stays bijective over every rendered blob.
_FOLD_SAFETY = 0.8


@dataclass(frozen=True)
class BlurSpec:
    kind: str  # "gaussian" | "translation" | "rotation"
    amount: float  # sigma px | half-extent px | half-extent degrees
    direction: float = 0.0  # radians, translation only

    def __post_init__(self):
        if self.kind not in ("gaussian", "translation", "rotation"):
            raise ValueError(f"unknown blur kind {self.kind!r}")


@dataclass(frozen=True)
class ShadingSpec:
    """Linear illumination falloff across the frame: intensity is scaled
    by 1 at one side down to 1 - strength at the other."""

    strength: float
    direction: float  # radians

    def field(self, width: int, height: int) -> np.ndarray:
        uu, vv = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
        proj = uu * math.cos(self.direction) + vv * math.sin(self.direction)
        lo, hi = proj.min(), proj.max()
        ramp = (proj - lo) / max(hi - lo, 1.0)
        return 1.0 - self.strength * ramp


@dataclass(frozen=True)
class RenderSpec:
    intrinsics: Intrinsics
    distortion: Distortion
    pose: Pose
    target: TargetSpec
    width: int
    height: int
    supersampling: int = 8
    blur: BlurSpec | None = None
    shading: ShadingSpec | None = None
    noise_sigma: float = 0.0
    margin: float = 8.0

    def __post_init__(self):
        if self.supersampling < 4:
            raise ValueError("supersampling factor must be >= 4")


@dataclass(frozen=True)
class CircleGT:
    index: int
    center_target: np.ndarray
    centroid: np.ndarray  # true centroid of the projected shape
    center_projected: np.ndarray  # biased center-point projection
    contour: np.ndarray


@dataclass(frozen=True)
class RenderResult:
    image: GrayImage
    circles: list[CircleGT]


def circle_boundaries(
    k: Intrinsics, d: Distortion, e: Pose, target: TargetSpec, samples: int = 256
) -> np.ndarray:
    """Projected boundary rings of all target circles, (count, samples, 2)."""
    centers = target.centers()
    ang = np.linspace(0.0, 2.0 * math.pi, samples, endpoint=False)
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1) * target.radius
    pts = centers[:, None, :] + ring[None, :, :]
    return project_points(k, d, e.matrix, e.tvec, pts)


def _check_in_frame(boundaries: np.ndarray, spec: RenderSpec) -> None:
    m = spec.margin
    u = boundaries[..., 0]
    v = boundaries[..., 1]
    if u.min() < m or v.min() < m or u.max() > spec.width - 1 - m or v.max() > spec.height - 1 - m:
        raise ProjectionError("circle projects outside the image frame")


def _check_fold(spec: RenderSpec) -> None:
    rf = fold_radius(spec.distortion)
    if math.isinf(rf):
        return
    centers = spec.target.centers()
    ang = np.linspace(0.0, 2.0 * math.pi, 128, endpoint=False)
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1) * spec.target.radius
    pts = centers[:, None, :] + ring[None, :, :]
    pc = pts[..., 0, None] * spec.pose.matrix[:, 0] + pts[..., 1, None] * spec.pose.matrix[:, 1]
    pc = pc + spec.pose.tvec
    rn = np.hypot(pc[..., 0] / pc[..., 2], pc[..., 1] / pc[..., 2])
    if rn.max() > _FOLD_SAFETY * rf:
        raise ProjectionError("circle reaches the distortion fold radius")


def render(spec: RenderSpec, rng: np.random.Generator | None = None) -> RenderResult:
    """Rasterize one target view with supersampled coverage antialiasing.

    Each subsample is mapped back through the inverse camera model to the
    target plane and tested against the circle discs; pixel darkness is
    the covered fraction. Blur and optional additive noise are applied to
    the composited frame.
    """
    k, d, e, target = spec.intrinsics, spec.distortion, spec.pose, spec.target
    _check_fold(spec)
    boundaries = circle_boundaries(k, d, e, target, samples=256)
    _check_in_frame(boundaries, spec)

    centers = target.centers()
    centroids = unbiased_circle_centroids(k, d, e, centers, target.radius, GT_ESTIMATOR_SAMPLES)
    centers_proj = project_points(k, d, e.matrix, e.tvec, centers)
    gt = [
        CircleGT(
            index=i,
            center_target=centers[i],
            centroid=centroids[i],
            center_projected=centers_proj[i],
            contour=boundaries[i],
        )
        for i in range(target.count)
    ]

    img = np.full((spec.height, spec.width), 255.0)
    pinv = np.linalg.inv(
        np.column_stack([e.matrix[:, 0], e.matrix[:, 1], e.tvec])
    )
    lut_rd, lut_r = _undistort_lut(d, boundaries, k)
    ss = spec.supersampling
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    ou, ov = np.meshgrid(offs, offs)
    ou, ov = ou.ravel(), ov.ravel()

    pad = 3
    for i in range(target.count):
        b = boundaries[i]
        u0 = max(0, int(np.floor(b[:, 0].min())) - pad)
        u1 = min(spec.width, int(np.ceil(b[:, 0].max())) + pad + 1)
        v0 = max(0, int(np.floor(b[:, 1].min())) - pad)
        v1 = min(spec.height, int(np.ceil(b[:, 1].max())) + pad + 1)
        uu, vv = np.meshgrid(np.arange(u0, u1, dtype=np.float64), np.arange(v0, v1, dtype=np.float64))
        su = uu[..., None] + ou  # (h, w, ss^2)
        sv = vv[..., None] + ov
        yd = (sv - k.cy) / k.fy
        xd = (su - k.cx - k.eta * yd) / k.fx
        rd = np.hypot(xd, yd)
        rn = np.interp(rd, lut_rd, lut_r)
        scale = np.where(rd > 1e-12, rn / np.where(rd > 1e-12, rd, 1.0), 0.0)
        xn = xd * scale
        yn = yd * scale
        w = pinv[2, 0] * xn + pinv[2, 1] * yn + pinv[2, 2]
        xw = (pinv[0, 0] * xn + pinv[0, 1] * yn + pinv[0, 2]) / w
        yw = (pinv[1, 0] * xn + pinv[1, 1] * yn + pinv[1, 2]) / w
        inside = (xw - centers[i, 0]) ** 2 + (yw - centers[i, 1]) ** 2 <= target.radius**2
        coverage = inside.mean(axis=2)
        img[v0:v1, u0:u1] -= 255.0 * coverage

    if spec.shading is not None:
        img = img * spec.shading.field(spec.width, spec.height)
    img = _apply_blur(img, spec.blur)
    if spec.noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        img = img + rng.normal(scale=spec.noise_sigma, size=img.shape)
    return RenderResult(image=GrayImage(np.clip(img, 0.0, 255.0)), circles=gt)


def _undistort_lut(d: Distortion, boundaries: np.ndarray, k: Intrinsics, knots: int = 8192):
    """Distorted-radius -> undistorted-radius table covering the rendered
    region (plus slack for the bounding-box margins)."""
    yd = (boundaries[..., 1] - k.cy) / k.fy
    xd = (boundaries[..., 0] - k.cx - k.eta * yd) / k.fx
    rd_max = float(np.hypot(xd, yd).max()) * 1.25 + 0.05
    rf = fold_radius(d)
    if math.isfinite(rf):
        rd_max = min(rd_max, float(rf * d.factor(rf * rf)) * (1.0 - 1e-9))
    lut_rd = np.linspace(0.0, rd_max, knots)
    lut_r = undistort_radius(d, lut_rd)
    return lut_rd, lut_r


def _apply_blur(img: np.ndarray, blur: BlurSpec | None) -> np.ndarray:
    if blur is None:
        return img
    if blur.kind == "gaussian":
        return ndimage.gaussian_filter(img, sigma=blur.amount, mode="nearest")
    if blur.kind == "translation":
        deltas = np.linspace(-blur.amount, blur.amount, _MOTION_SUBFRAMES)
        du, dv = math.cos(blur.direction), math.sin(blur.direction)
        acc = np.zeros_like(img)
        for delta in deltas:
            acc += ndimage.shift(img, (delta * dv, delta * du), order=1, mode="nearest")
        return acc / len(deltas)
    angles = np.linspace(-blur.amount, blur.amount, _MOTION_SUBFRAMES)
    acc = np.zeros_like(img)
    for ang in angles:
        acc += ndimage.rotate(img, ang, reshape=False, order=1, mode="nearest")
    return acc / len(angles)


# ---------------------------------------------------------------------------
# Pose sampling: targets tangent to a camera-centered sphere, low rotations
# accepted at the near shell and high rotations at the far shell (poses that
# leave the frame or reach the distortion fold are re-drawn).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseSampler:
    """Draws target poses tangent to a camera-centered sphere: the ray to
    the grid center is parallel to the target normal. Small tilts are
    taken from the near shell and large tilts from the far shell, which is
    what keeps high-rotation views inside the frame."""

    target: TargetSpec
    shells: tuple[float, float] = (3.2, 4.6)
    near_rotation_deg: tuple[float, float] = (5.0, 30.0)
    far_rotation_deg: tuple[float, float] = (20.0, 45.0)

    def sample(self, rng: np.random.Generator, spec_proto: RenderSpec, near: bool) -> Pose:
        shell = self.shells[0] if near else self.shells[1]
        rot_lo, rot_hi = self.near_rotation_deg if near else self.far_rotation_deg
        grid_center = np.array(
            [
                (self.target.cols - 1) * self.target.spacing / 2.0,
                (self.target.rows - 1) * self.target.spacing / 2.0,
                0.0,
            ]
        )
        for _ in range(1000):
            psi = rng.uniform(0.0, 2.0 * math.pi)
            alpha = math.radians(rng.uniform(rot_lo, rot_hi))
            axis = np.array([math.cos(psi), math.sin(psi), 0.0])
            r_tilt = rotation_matrix(axis * alpha)
            roll = rng.uniform(0.0, 2.0 * math.pi)
            r = r_tilt @ rotation_matrix(np.array([0.0, 0.0, roll]))
            direction = r_tilt @ np.array([0.0, 0.0, 1.0])
            t = shell * direction - r @ grid_center
            pose = Pose(rotation_vector(r), t)
            candidate = replace(spec_proto, pose=pose)
            try:
                _check_fold(candidate)
                _check_in_frame(
                    circle_boundaries(
                        candidate.intrinsics, candidate.distortion, pose, self.target, 64
                    ),
                    candidate,
                )
            except ProjectionError:
                continue
            return pose
        raise ProjectionError("could not sample a valid pose; check shells and rotation range")


@dataclass(frozen=True)
class DatasetSpec:
    intrinsics: Intrinsics
    distortion: Distortion
    target: TargetSpec
    width: int = 1200
    height: int = 900
    n_images: int = 30
    supersampling: int = 8
    shells: tuple[float, float] = (3.2, 4.6)
    near_rotation_deg: tuple[float, float] = (5.0, 30.0)
    far_rotation_deg: tuple[float, float] = (20.0, 45.0)
    blur_kind: str = "none"  # "none" | "translation" | "gaussian" | "rotation"
    blur_min: float = 2.5
    blur_max: float = 5.0
    shading_min: float = 0.0
    shading_max: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 42


def render_dataset(spec: DatasetSpec) -> list[RenderResult]:
    """Seed-controlled dataset: half the views from the near shell, half
    from the far shell, each tangent to the camera sphere."""
    rng = np.random.default_rng(spec.seed)
    sampler = PoseSampler(
        spec.target, spec.shells, spec.near_rotation_deg, spec.far_rotation_deg
    )
    proto = RenderSpec(
        intrinsics=spec.intrinsics,
        distortion=spec.distortion,
        pose=Pose(np.zeros(3), np.array([0.0, 0.0, spec.shells[0]])),
        target=spec.target,
        width=spec.width,
        height=spec.height,
        supersampling=spec.supersampling,
    )
    results = []
    for i in range(spec.n_images):
        pose = sampler.sample(rng, proto, near=(i % 2 == 0))
        blur = None
        if spec.blur_kind != "none":
            blur = BlurSpec(
                kind=spec.blur_kind,
                amount=float(rng.uniform(spec.blur_min, spec.blur_max)),
                direction=float(rng.uniform(0.0, 2.0 * math.pi)),
            )
        shading = None
        if spec.shading_max > 0.0:
            shading = ShadingSpec(
                strength=float(rng.uniform(spec.shading_min, spec.shading_max)),
                direction=float(rng.uniform(0.0, 2.0 * math.pi)),
            )
        rspec = replace(
            proto, pose=pose, blur=blur, shading=shading, noise_sigma=spec.noise_sigma
        )
        results.append(render(rspec, rng=rng))
    return results


# ---------------------------------------------------------------------------
# Monte-Carlo harness
# ---------------------------------------------------------------------------

ARMS = ("naive", "unbiased", "weighted")


@dataclass(frozen=True)
class MonteCarloConfig:
    draws: int = 30
    draw_size: int = 6
    seed: int = 42
    arms: tuple[str, ...] = ARMS
    estimator_samples: int = 512
    nd: int = 1
    max_iterations: int = 200


@dataclass
class ArmSummary:
    name: str
    params: np.ndarray  # (draws, n_params) fx fy cx cy d1..
    mean: np.ndarray
    std: np.ndarray
    rms: np.ndarray
    n_failed_draws: int


@dataclass
class MonteCarloReport:
    arms: dict[str, ArmSummary]
    detection_failures: int
    n_images: int
    param_names: list[str]


def _arm_options(name: str, cfg: MonteCarloConfig) -> dict:
    if name == "naive":
        return dict(estimator="naive", weighted=False)
    if name == "unbiased":
        return dict(estimator="unbiased", weighted=False)
    if name == "weighted":
        return dict(estimator="unbiased", weighted=True)
    raise ValueError(f"unknown arm {name!r}")


def monte_carlo(
    grids: list[DetectedGrid | None],
    target: TargetSpec,
    cfg: MonteCarloConfig,
) -> MonteCarloReport:
    """Repeatedly calibrate on random draw_size-view subsets and summarize
    parameter means and standard deviations per ablation arm.

    `grids` holds one detection result per dataset image, None for images
    on which detection failed; draws sample only successful detections.
    Pipeline failures inside a draw are counted, not fatal.
    """
    ok = [i for i, g in enumerate(grids) if g is not None]
    if len(ok) < cfg.draw_size:
        raise CalibrationError(
            f"only {len(ok)} usable detections for draws of {cfg.draw_size}"
        )
    rng = np.random.default_rng(cfg.seed)
    subsets = [rng.choice(ok, size=cfg.draw_size, replace=False) for _ in range(cfg.draws)]

    names = ["fx", "fy", "cx", "cy"] + [f"d{i+1}" for i in range(cfg.nd)]
    summaries: dict[str, ArmSummary] = {}
    for arm in cfg.arms:
        rows = []
        rms = []
        failed = 0
        for subset in subsets:
            chosen = [grids[i] for i in subset]
            try:
                result = calibrate_views(
                    chosen,
                    target,
                    nd=cfg.nd,
                    estimator_samples=cfg.estimator_samples,
                    max_iterations=cfg.max_iterations,
                    **_arm_options(arm, cfg),
                )
            except (CalibrationError, ProjectionError, np.linalg.LinAlgError):
                failed += 1
                continue
            k, d = result.intrinsics, result.distortion
            rows.append([k.fx, k.fy, k.cx, k.cy, *d.coeffs])
            rms.append(result.rms_reproj)
        arr = np.array(rows) if rows else np.zeros((0, len(names)))
        summaries[arm] = ArmSummary(
            name=arm,
            params=arr,
            mean=arr.mean(axis=0) if len(arr) else np.full(len(names), np.nan),
            std=arr.std(axis=0, ddof=1) if len(arr) > 1 else np.full(len(names), np.nan),
            rms=np.array(rms),
            n_failed_draws=failed,
        )
    return MonteCarloReport(
        arms=summaries,
        detection_failures=sum(1 for g in grids if g is None),
        n_images=len(grids),
        param_names=names,
    )


def detect_dataset(
    renders: list[RenderResult], target: TargetSpec, params: DetectionParams
) -> list[DetectedGrid | None]:
    out: list[DetectedGrid | None] = []
    for r in renders:
        try:
            out.append(detect(r.image, target, params))
        except DetectionError:
            out.append(None)
    return out
