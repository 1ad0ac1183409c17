"""Intrinsic calibration from detected circle grids.

Closed-form initialization follows the planar-homography constraints on
the image of the absolute conic; refinement is a Levenberg-Marquardt
minimization of the (optionally covariance-weighted) difference between
measured centroids and the circle-centroid estimator. Parameter
covariance comes from the Gauss-Newton information matrix with the pose
blocks marginalized out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detector import DetectedGrid
from .projection import (
    Distortion,
    Intrinsics,
    Pose,
    ProjectionError,
    TargetSpec,
    project_points,
    ring_image_centroids,
    rotation_matrix,
    rotation_vector,
)

COV_EIGEN_FLOOR = 1e-6  # px^2, guards against near-singular measurement covariance


class CalibrationError(RuntimeError):
    pass


class DegenerateViewsError(CalibrationError):
    """View set does not constrain the intrinsics (e.g. repeated rotations)."""


class InfiniteUncertaintyError(CalibrationError):
    """Information matrix is singular; some parameter is unobservable."""


@dataclass(frozen=True)
class Observation:
    view: int
    circle: int
    p: np.ndarray
    cov: np.ndarray
    target_center: np.ndarray


@dataclass
class CalibrationResult:
    intrinsics: Intrinsics
    distortion: Distortion
    poses: list[Pose]
    param_cov: np.ndarray | None
    rms_reproj: float
    per_view_rms: list[float]
    cost_history: list[float]
    n_iterations: int
    converged: bool
    weighted: bool
    estimator: str


def observations_from_grids(
    grids: list[DetectedGrid], target: TargetSpec
) -> list[Observation]:
    centers = target.centers()
    obs = []
    for v, grid in enumerate(grids):
        if len(grid.measurements) != target.count:
            raise CalibrationError(
                f"view {v}: {len(grid.measurements)} measurements for {target.count} circles"
            )
        for k, m in enumerate(grid.measurements):
            obs.append(
                Observation(view=v, circle=k, p=m.p, cov=m.cov, target_center=centers[k])
            )
    return obs


# ---------------------------------------------------------------------------
# Closed-form initialization
# ---------------------------------------------------------------------------


def homography_dlt(plane_pts: np.ndarray, image_pts: np.ndarray) -> np.ndarray:
    """Normalized DLT plane-to-image homography, H[2,2] = 1."""
    xn, tx = _normalize_2d(plane_pts)
    un, tu = _normalize_2d(image_pts)
    n = xn.shape[0]
    a = np.zeros((2 * n, 9))
    a[0::2, 0] = -xn[:, 0]
    a[0::2, 1] = -xn[:, 1]
    a[0::2, 2] = -1.0
    a[0::2, 6] = un[:, 0] * xn[:, 0]
    a[0::2, 7] = un[:, 0] * xn[:, 1]
    a[0::2, 8] = un[:, 0]
    a[1::2, 3] = -xn[:, 0]
    a[1::2, 4] = -xn[:, 1]
    a[1::2, 5] = -1.0
    a[1::2, 6] = un[:, 1] * xn[:, 0]
    a[1::2, 7] = un[:, 1] * xn[:, 1]
    a[1::2, 8] = un[:, 1]
    _, _, vt = np.linalg.svd(a)
    h = np.linalg.inv(tu) @ vt[-1].reshape(3, 3) @ tx
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateViewsError("homography normalization failed")
    return h / h[2, 2]


def _normalize_2d(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(pts, dtype=np.float64)
    mean = pts.mean(axis=0)
    scale = math.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)), 1e-12)
    t = np.array(
        [[scale, 0.0, -scale * mean[0]], [0.0, scale, -scale * mean[1]], [0.0, 0.0, 1.0]]
    )
    out = (pts - mean) * scale
    return out, t


def _vij(h: np.ndarray, i: int, j: int) -> np.ndarray:
    return np.array(
        [
            h[0, i] * h[0, j],
            h[0, i] * h[1, j] + h[1, i] * h[0, j],
            h[1, i] * h[1, j],
            h[2, i] * h[0, j] + h[0, i] * h[2, j],
            h[2, i] * h[1, j] + h[1, i] * h[2, j],
            h[2, i] * h[2, j],
        ]
    )


def zhang_init(
    grids: list[DetectedGrid],
    target: TargetSpec,
    estimate_skew: bool = False,
) -> tuple[Intrinsics, list[Pose]]:
    """Closed-form intrinsics and per-view poses from homography
    constraints; distortion starts at zero. Needs >= 3 views, or >= 2 when
    skew is fixed at zero. Raises DegenerateViewsError for view sets whose
    constraints are rank deficient (e.g. two views sharing a rotation)."""
    min_views = 2 if not estimate_skew else 3
    if len(grids) < min_views:
        raise CalibrationError(f"need at least {min_views} views, got {len(grids)}")
    centers = target.centers()
    hs = []
    for grid in grids:
        pts = np.array([m.p for m in grid.measurements])
        hs.append(homography_dlt(centers, pts))

    rows = []
    for h in hs:
        rows.append(_vij(h, 0, 1))
        rows.append(_vij(h, 0, 0) - _vij(h, 1, 1))
    if not estimate_skew:
        rows.append(np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))
    v = np.array(rows)
    _, s, vt = np.linalg.svd(v)
    if s[-2] < 1e-9 * s[0]:
        raise DegenerateViewsError("intrinsic constraint system is rank deficient")
    b = vt[-1]
    if b[0] < 0:
        b = -b
    b11, b12, b22, b13, b23, b33 = b
    denom = b11 * b22 - b12 * b12
    if abs(denom) < 1e-30 or abs(b11) < 1e-30:
        raise DegenerateViewsError("conic constraints do not describe a camera")
    v0 = (b12 * b13 - b11 * b23) / denom
    lam = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11
    # Distortion that the homography model cannot express shows up as an
    # inconsistent conic here; take magnitudes and clamp to a sane range so
    # the nonlinear refinement still gets a usable starting point.
    alpha = math.sqrt(abs(lam / b11))
    beta = math.sqrt(abs(lam * b11 / denom))
    gamma = -b12 * alpha * alpha * beta / lam if lam != 0.0 else 0.0
    u0 = gamma * v0 / beta - b13 * alpha * alpha / lam if lam != 0.0 else 0.0
    if not estimate_skew:
        gamma = 0.0

    all_pts = np.concatenate([[m.p for m in g.measurements] for g in grids])
    lo, hi = all_pts.min(axis=0), all_pts.max(axis=0)
    span = float(np.linalg.norm(hi - lo))
    alpha = float(np.clip(alpha, 0.5 * span, 5.0 * span))
    beta = float(np.clip(beta, 0.5 * span, 5.0 * span))
    u0 = float(np.clip(u0, lo[0], hi[0]))
    v0 = float(np.clip(v0, lo[1], hi[1]))
    k = Intrinsics(fx=alpha, fy=beta, cx=u0, cy=v0, eta=gamma)
    poses = [_pose_from_homography(k, h) for h in hs]
    return k, poses


def _pose_from_homography(k: Intrinsics, h: np.ndarray) -> Pose:
    inv_k = np.linalg.inv(k.matrix)
    a = inv_k @ h
    scale = 2.0 / (np.linalg.norm(a[:, 0]) + np.linalg.norm(a[:, 1]))
    if (scale * a[2, 2]) < 0.0:
        scale = -scale
    r1 = scale * a[:, 0]
    r2 = scale * a[:, 1]
    r3 = np.cross(r1, r2)
    r = np.column_stack([r1, r2, r3])
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, 2] *= -1.0
        r = u @ vt
    return Pose(rotation_vector(r), scale * a[:, 2])


# ---------------------------------------------------------------------------
# Nonlinear refinement
# ---------------------------------------------------------------------------


def _whitening_roots(covs: np.ndarray, floor: float) -> np.ndarray:
    """Per-observation G with G^T G = cov^-1 after eigenvalue flooring."""
    lam, vec = np.linalg.eigh(covs)
    lam = np.maximum(lam, floor)
    return np.swapaxes(vec, 1, 2) / np.sqrt(lam)[:, :, None]


class _Problem:
    """Residuals and structured numeric Jacobian for joint refinement."""

    def __init__(
        self,
        observations: list[Observation],
        target: TargetSpec,
        n_views: int,
        nd: int,
        estimator: str,
        weighted: bool,
        estimate_skew: bool,
        estimator_samples: int,
        cov_floor: float = COV_EIGEN_FLOOR,
    ):
        if estimator not in ("unbiased", "naive"):
            raise ValueError(f"unknown estimator {estimator!r}")
        self.target = target
        self.nd = nd
        self.estimator = estimator
        self.weighted = weighted
        self.estimate_skew = estimate_skew
        self.samples = estimator_samples
        self.n_views = n_views
        self.n_global = 4 + (1 if estimate_skew else 0) + nd

        self.centers: list[np.ndarray] = []
        self.measured: list[np.ndarray] = []
        self.covs: list[np.ndarray] = []
        self.roots: list[np.ndarray] = []
        for v in range(n_views):
            ov = sorted((o for o in observations if o.view == v), key=lambda o: o.circle)
            if not ov:
                raise CalibrationError(f"view {v} has no observations")
            self.centers.append(np.array([o.target_center for o in ov]))
            self.measured.append(np.array([o.p for o in ov]))
            covs = np.array([o.cov for o in ov])
            self.covs.append(covs)
            if weighted:
                self.roots.append(_whitening_roots(covs, cov_floor))
            else:
                self.roots.append(np.broadcast_to(np.eye(2), covs.shape).copy())
        self.view_sizes = [len(c) for c in self.centers]
        self.view_offsets = np.concatenate([[0], np.cumsum([2 * s for s in self.view_sizes])])
        self.n_res = int(self.view_offsets[-1])

    # -- parameter packing ---------------------------------------------------

    def pack(self, k: Intrinsics, d: Distortion, poses: list[Pose]) -> np.ndarray:
        globs = [k.fx, k.fy, k.cx, k.cy]
        if self.estimate_skew:
            globs.append(k.eta)
        coeffs = list(d.coeffs) + [0.0] * (self.nd - d.order)
        globs.extend(coeffs[: self.nd])
        pose_part = np.concatenate([np.concatenate([p.rvec, p.tvec]) for p in poses])
        return np.concatenate([np.array(globs), pose_part])

    def unpack(self, p: np.ndarray) -> tuple[Intrinsics, Distortion, list[Pose]]:
        eta = p[4] if self.estimate_skew else 0.0
        k = Intrinsics(fx=p[0], fy=p[1], cx=p[2], cy=p[3], eta=float(eta))
        g0 = 5 if self.estimate_skew else 4
        d = Distortion(tuple(p[g0 : g0 + self.nd]))
        poses = []
        for v in range(self.n_views):
            base = self.n_global + 6 * v
            poses.append(Pose(p[base : base + 3], p[base + 3 : base + 6]))
        return k, d, poses

    # -- residuals -----------------------------------------------------------

    def _predict_view(self, p: np.ndarray, v: int) -> np.ndarray:
        if p[0] <= 0.0 or p[1] <= 0.0:
            raise ProjectionError("iterate left the valid parameter domain")
        eta = p[4] if self.estimate_skew else 0.0
        k = Intrinsics(fx=p[0], fy=p[1], cx=p[2], cy=p[3], eta=float(eta))
        g0 = 5 if self.estimate_skew else 4
        d = Distortion(tuple(p[g0 : g0 + self.nd]))
        base = self.n_global + 6 * v
        r = rotation_matrix(p[base : base + 3])
        t = p[base + 3 : base + 6]
        if self.estimator == "unbiased":
            return ring_image_centroids(
                k, d, r, t, self.centers[v], self.target.radius, self.samples
            )
        return project_points(k, d, r, t, self.centers[v])

    def view_residuals(self, p: np.ndarray, v: int, whiten: bool = True) -> np.ndarray:
        res = self.measured[v] - self._predict_view(p, v)
        if whiten:
            res = np.einsum("nij,nj->ni", self.roots[v], res)
        return res.ravel()

    def residuals(self, p: np.ndarray, whiten: bool = True) -> np.ndarray:
        return np.concatenate([self.view_residuals(p, v, whiten) for v in range(self.n_views)])

    def cost(self, p: np.ndarray) -> float:
        r = self.residuals(p)
        return float(r @ r)

    def jacobian(self, p: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
        """Central-difference Jacobian of the whitened residuals; pose
        columns only re-evaluate their own view."""
        jac = np.zeros((self.n_res, p.size))
        for j in range(self.n_global):
            h = rel_step * max(1.0, abs(float(p[j])))
            jac[:, j] = (self.residuals(_bump(p, j, h)) - self.residuals(_bump(p, j, -h))) / (
                2.0 * h
            )
        for v in range(self.n_views):
            lo, hi = self.view_offsets[v], self.view_offsets[v + 1]
            for l in range(6):
                j = self.n_global + 6 * v + l
                h = rel_step * max(1.0, abs(float(p[j])))
                rp = self.view_residuals(_bump(p, j, h), v)
                rm = self.view_residuals(_bump(p, j, -h), v)
                jac[lo:hi, j] = (rp - rm) / (2.0 * h)
        return jac


def _bump(p: np.ndarray, j: int, h: float) -> np.ndarray:
    q = p.copy()
    q[j] += h
    return q


def optimize(
    observations: list[Observation],
    target: TargetSpec,
    init_intrinsics: Intrinsics,
    init_poses: list[Pose],
    *,
    init_distortion: Distortion | None = None,
    nd: int = 2,
    estimator: str = "unbiased",
    weighted: bool = True,
    estimate_skew: bool = False,
    estimator_samples: int = 512,
    max_iterations: int = 200,
    cost_tol: float = 1e-10,
    step_tol: float = 1e-12,
    with_covariance: bool = False,
) -> CalibrationResult:
    """Levenberg-Marquardt refinement of intrinsics, distortion, and all
    poses. When `weighted`, residuals are whitened by the per-measurement
    inverse covariance; otherwise the plain squared pixel error is
    minimized. Iterates that push the distortion scale non-positive inside
    the observed field of view (or a target behind the camera) are
    rejected as invalid steps."""
    n_views = len(init_poses)
    problem = _Problem(
        observations,
        target,
        n_views,
        nd,
        estimator,
        weighted,
        estimate_skew,
        estimator_samples,
    )
    p = problem.pack(init_intrinsics, init_distortion or Distortion(), init_poses)
    try:
        cost = problem.cost(p)
    except ProjectionError as e:
        raise CalibrationError(f"initialization is not projectable: {e}") from e

    lam = 1e-3
    history = [cost]
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        jac = problem.jacobian(p)
        r = problem.residuals(p)
        grad = jac.T @ r
        hess = jac.T @ jac
        diag = np.maximum(np.diagonal(hess), 1e-12)
        accepted = False
        while lam < 1e15:
            try:
                step = np.linalg.solve(hess + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            if np.linalg.norm(step) < step_tol:
                converged = True
                break
            try:
                new_cost = problem.cost(p + step)
            except ProjectionError:
                lam *= 4.0
                continue
            if new_cost < cost:
                p = p + step
                drop = cost - new_cost
                cost = new_cost
                history.append(cost)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if drop <= cost_tol * max(cost, 1e-300):
                    converged = True
                break
            lam *= 4.0
        if converged or not accepted:
            converged = converged or not accepted  # damping exhausted = stationary
            break
    if not converged:
        raise CalibrationError(f"no convergence after {max_iterations} iterations")

    k, d, poses = problem.unpack(p)
    raw = problem.residuals(p, whiten=False).reshape(-1, 2)
    rms = float(np.sqrt(np.mean(np.sum(raw**2, axis=1))))
    per_view = []
    for v in range(n_views):
        rv = problem.view_residuals(p, v, whiten=False).reshape(-1, 2)
        per_view.append(float(np.sqrt(np.mean(np.sum(rv**2, axis=1)))))

    param_cov = None
    if with_covariance:
        param_cov = _covariance_from_problem(problem, p)
    return CalibrationResult(
        intrinsics=k,
        distortion=d,
        poses=poses,
        param_cov=param_cov,
        rms_reproj=rms,
        per_view_rms=per_view,
        cost_history=history,
        n_iterations=iterations,
        converged=True,
        weighted=weighted,
        estimator=estimator,
    )


def calibrate_views(
    grids: list[DetectedGrid],
    target: TargetSpec,
    *,
    nd: int = 2,
    estimator: str = "unbiased",
    weighted: bool = True,
    estimate_skew: bool = False,
    estimator_samples: int = 512,
    max_iterations: int = 200,
    with_covariance: bool = False,
) -> CalibrationResult:
    """Closed-form initialization followed by staged refinement.

    The homography-based init ignores distortion and can land far from the
    optimum on strongly distorted data, so a cheap center-projection stage
    pulls the parameters into the right basin before the requested
    estimator/weighting is optimized.
    """
    init_k, init_poses = zhang_init(grids, target, estimate_skew=estimate_skew)
    observations = observations_from_grids(grids, target)
    stage_a = optimize(
        observations,
        target,
        init_k,
        init_poses,
        nd=nd,
        estimator="naive",
        weighted=False,
        estimate_skew=estimate_skew,
        max_iterations=max_iterations,
    )
    if estimator == "naive" and not weighted:
        if with_covariance:
            stage_a.param_cov = parameter_covariance(
                stage_a, observations, target,
                estimate_skew=estimate_skew, estimator_samples=estimator_samples,
            )
        return stage_a
    return optimize(
        observations,
        target,
        stage_a.intrinsics,
        stage_a.poses,
        init_distortion=stage_a.distortion,
        nd=nd,
        estimator=estimator,
        weighted=weighted,
        estimate_skew=estimate_skew,
        estimator_samples=estimator_samples,
        max_iterations=max_iterations,
        with_covariance=with_covariance,
    )


# ---------------------------------------------------------------------------
# Parameter covariance
# ---------------------------------------------------------------------------


def parameter_information(
    intrinsics: Intrinsics,
    distortion: Distortion,
    poses: list[Pose],
    observations: list[Observation],
    target: TargetSpec,
    *,
    estimator: str = "unbiased",
    estimate_skew: bool = False,
    estimator_samples: int = 512,
) -> tuple[np.ndarray, int]:
    """Full Gauss-Newton information matrix J^T Sigma^-1 J over
    (intrinsics, distortion, poses); returns it with the global-block
    size. Measurement covariances are always applied here, regardless of
    how the solution was optimized."""
    problem = _Problem(
        observations,
        target,
        len(poses),
        distortion.order,
        estimator,
        True,
        estimate_skew,
        estimator_samples,
    )
    p = problem.pack(intrinsics, distortion, poses)
    jac = problem.jacobian(p)
    return jac.T @ jac, problem.n_global


def parameter_covariance(
    result: CalibrationResult,
    observations: list[Observation],
    target: TargetSpec,
    *,
    estimate_skew: bool = False,
    estimator_samples: int = 512,
) -> np.ndarray:
    """Covariance of (fx, fy, cx, cy[, eta], d1..dnd) at the solution,
    with pose uncertainty marginalized out by the Schur complement."""
    info, n_global = parameter_information(
        result.intrinsics,
        result.distortion,
        result.poses,
        observations,
        target,
        estimator=result.estimator,
        estimate_skew=estimate_skew,
        estimator_samples=estimator_samples,
    )
    return _schur_covariance(info, n_global)


def _covariance_from_problem(problem: _Problem, p: np.ndarray) -> np.ndarray:
    # The covariance always weights by the measurement covariances, even
    # when the refinement itself ran unweighted.
    if problem.weighted:
        weighted = problem
    else:
        obs = [
            Observation(
                view=v,
                circle=i,
                p=problem.measured[v][i],
                cov=problem.covs[v][i],
                target_center=problem.centers[v][i],
            )
            for v in range(problem.n_views)
            for i in range(problem.view_sizes[v])
        ]
        weighted = _Problem(
            obs,
            problem.target,
            problem.n_views,
            problem.nd,
            problem.estimator,
            True,
            problem.estimate_skew,
            problem.samples,
        )
    jac = weighted.jacobian(p)
    return _schur_covariance(jac.T @ jac, problem.n_global)


def _schur_covariance(info: np.ndarray, n_global: int) -> np.ndarray:
    g = info[:n_global, :n_global]
    b = info[:n_global, n_global:]
    pp = info[n_global:, n_global:]
    try:
        reduced = g - b @ np.linalg.solve(pp, b.T)
        cond = np.linalg.cond(reduced)
        if not np.isfinite(cond) or cond > 1e14:
            raise InfiniteUncertaintyError("information matrix is singular")
        cov = np.linalg.inv(reduced)
    except np.linalg.LinAlgError as e:
        raise InfiniteUncertaintyError("information matrix is singular") from e
    return 0.5 * (cov + cov.T)
