"""Planar-target calibration of every light-field view and of the view
poses relative to the reference view.

Per view: normalised-DLT homographies, closed-form intrinsics from the
absolute-conic constraints, then joint Levenberg-Marquardt over intrinsics,
radial distortion and per-frame target poses. Across views: PnP of every
frame in every view, per-frame relative poses averaged over frames, then a
joint LM over all relative poses and target placements with the reference
view pinned at the origin.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import (
    DegenerateConfiguration,
    DegenerateOrientations,
    FrameMismatch,
    InputError,
    InsufficientFrames,
    InsufficientPoints,
    NoConvergence,
)
from .geometry import (
    IntrinsicMatrix,
    RadialDistortion,
    ViewGrid,
    ViewPose,
    compose_projection,
    matrix_to_rodrigues,
    remove_distortion,
    rodrigues_batch,
)
from .lm import LMSettings, levenberg_marquardt


@dataclass(frozen=True)
class CheckerboardSpec:
    inner_cols: int
    inner_rows: int
    square_size: float

    def __post_init__(self):
        if self.inner_cols < 3 or self.inner_rows < 3:
            raise ValueError(f"checkerboard needs at least 3x3 inner corners, got {self.inner_cols}x{self.inner_rows}")
        if not self.square_size > 0:
            raise ValueError("square size must be positive")

    @property
    def n_corners(self) -> int:
        return self.inner_cols * self.inner_rows


@dataclass(frozen=True)
class PatternObservation:
    view_index: int
    frame_index: int
    corners: np.ndarray

    def __post_init__(self):
        c = np.array(self.corners, dtype=float).reshape(-1, 2)
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)


@dataclass(frozen=True)
class ViewCalibration:
    K: IntrinsicMatrix
    d: RadialDistortion
    rms_mono: float = 0.0
    cost_history: tuple = field(default=(), compare=False, repr=False)


@dataclass(frozen=True)
class LightFieldCalibration:
    grid: ViewGrid
    per_view: tuple
    poses_rel_reference: tuple
    rms_pnp: float = 0.0
    image_size: tuple = (0, 0)
    rms_pnp_per_view: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "per_view", tuple(self.per_view))
        object.__setattr__(self, "poses_rel_reference", tuple(self.poses_rel_reference))
        object.__setattr__(self, "rms_pnp_per_view", tuple(self.rms_pnp_per_view))
        n = self.grid.n_views
        if len(self.per_view) != n or len(self.poses_rel_reference) != n:
            raise ValueError(f"expected {n} per-view entries")
        if not self.poses_rel_reference[self.grid.reference_index].is_zero:
            raise ValueError("reference view pose must be exactly zero")

    @property
    def n_views(self) -> int:
        return self.grid.n_views

    @property
    def rms_mono(self) -> float:
        return float(np.mean([v.rms_mono for v in self.per_view]))

    def projection_matrices(self) -> np.ndarray:
        return np.stack([compose_projection(v.K, p) for v, p in zip(self.per_view, self.poses_rel_reference)])

    def with_views(self, per_view=None, poses=None) -> "LightFieldCalibration":
        return replace(
            self,
            per_view=tuple(per_view) if per_view is not None else self.per_view,
            poses_rel_reference=tuple(poses) if poses is not None else self.poses_rel_reference,
        )


# ---------------------------------------------------------------------------
# Target geometry and homographies
# ---------------------------------------------------------------------------


def pattern_world_points(spec: CheckerboardSpec) -> np.ndarray:
    """Inner corners on the Z=0 plane, row-major, first corner at the origin."""
    ys, xs = np.mgrid[0 : spec.inner_rows, 0 : spec.inner_cols]
    pts = np.zeros((spec.n_corners, 3))
    pts[:, 0] = xs.ravel() * spec.square_size
    pts[:, 1] = ys.ravel() * spec.square_size
    return pts


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - c, axis=1)), 1e-300)
    return np.array([[scale, 0.0, -scale * c[0]], [0.0, scale, -scale * c[1]], [0.0, 0.0, 1.0]])


def _to_h(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def _is_collinear(pts: np.ndarray) -> bool:
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return s[0] == 0 or s[1] <= 1e-9 * s[0]


def _apply_h(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = pts @ H[:, :2].T + H[:, 2]
    return q[:, :2] / q[:, 2:3]


def estimate_homography(world_xy, image, refine: bool = True) -> np.ndarray:
    """Plane-to-image homography with ``H[2, 2] = 1``.

    Normalised DLT, optionally polished by LM on the symmetric transfer error.
    """
    w = np.asarray(world_xy, dtype=float).reshape(-1, 2)
    m = np.asarray(image, dtype=float).reshape(-1, 2)
    if len(w) != len(m):
        raise InputError("correspondence lists differ in length")
    if len(w) < 4:
        raise DegenerateConfiguration(f"homography needs at least 4 correspondences, got {len(w)}")
    if _is_collinear(w) or _is_collinear(m):
        raise DegenerateConfiguration("correspondences are collinear")
    Tw, Tm = _normalizer(w), _normalizer(m)
    wn = _to_h(w) @ Tw.T
    mn = _to_h(m) @ Tm.T
    n = len(w)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = wn
    A[0::2, 6:9] = -mn[:, 0:1] * wn
    A[1::2, 3:6] = wn
    A[1::2, 6:9] = -mn[:, 1:2] * wn
    _, s, vt = np.linalg.svd(A)
    if s[-2] <= 1e-12 * s[0]:
        raise DegenerateConfiguration("homography DLT system is rank deficient")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.solve(Tm, Hn @ Tw)
    H = H / H[2, 2]
    if not refine:
        return H

    def residual(h):
        Hc = np.append(h, 1.0).reshape(3, 3)
        fwd = _apply_h(Hc, w) - m
        bwd = _apply_h(np.linalg.inv(Hc), m) - w
        return np.concatenate([fwd.ravel(), bwd.ravel()])

    sparsity = np.ones((4 * n, 8), dtype=bool)
    res = levenberg_marquardt(residual, H.ravel()[:8], sparsity, typical_scale=np.abs(H.ravel()[:8]) + 1e-12)
    return np.append(res.x, 1.0).reshape(3, 3)


def _conic_row(H: np.ndarray, i: int, j: int) -> np.ndarray:
    hi, hj = H[:, i], H[:, j]
    return np.array(
        [
            hi[0] * hj[0],
            hi[0] * hj[1] + hi[1] * hj[0],
            hi[1] * hj[1],
            hi[2] * hj[0] + hi[0] * hj[2],
            hi[2] * hj[1] + hi[1] * hj[2],
            hi[2] * hj[2],
        ]
    )


def intrinsics_from_homographies(homographies: Sequence[np.ndarray], image_size) -> IntrinsicMatrix:
    """Closed-form intrinsics from at least three plane homographies, zero skew."""
    if len(homographies) < 3:
        raise InsufficientFrames(f"need at least 3 target frames, got {len(homographies)}")
    w, h = image_size
    s = 2.0 / (w + h)
    N = np.array([[s, 0.0, -s * w / 2], [0.0, s, -s * h / 2], [0.0, 0.0, 1.0]])
    rows = []
    for H in homographies:
        Hn = N @ H
        Hn = Hn / np.linalg.norm(Hn)
        rows.append(_conic_row(Hn, 0, 1))
        rows.append(_conic_row(Hn, 0, 0) - _conic_row(Hn, 1, 1))
    rows.append([0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    V = np.asarray(rows)
    _, sv, vt = np.linalg.svd(V)
    if sv[-2] == 0 or sv[0] / sv[-2] > 1e10:
        raise DegenerateOrientations("target orientations do not constrain the intrinsics")
    b = vt[-1]
    B11, B12, B22, B13, B23, B33 = b
    if B11 < 0:
        B11, B12, B22, B13, B23, B33 = -b
    den = B11 * B22 - B12 * B12
    if B11 <= 0 or den <= 0:
        raise DegenerateOrientations("absolute conic estimate is not positive definite")
    v0 = (B12 * B13 - B11 * B23) / den
    lam = B33 - (B13 * B13 + v0 * (B12 * B13 - B11 * B23)) / B11
    if lam / B11 <= 0:
        raise DegenerateOrientations("absolute conic estimate is not positive definite")
    alpha = np.sqrt(lam / B11)
    beta = np.sqrt(lam * B11 / den)
    u0 = -B13 * alpha * alpha / lam
    Kn = np.array([[alpha, 0.0, u0], [0.0, beta, v0], [0.0, 0.0, 1.0]])
    return IntrinsicMatrix.from_matrix(np.linalg.solve(N, Kn))


def _orthonormalize(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def pose_from_homography(H: np.ndarray, K: IntrinsicMatrix) -> ViewPose:
    """Target pose for a Z=0 plane from its homography, target in front of the camera."""
    A = np.linalg.solve(K.matrix, H)
    lam = 2.0 / (np.linalg.norm(A[:, 0]) + np.linalg.norm(A[:, 1]))
    A = A * lam
    if A[2, 2] < 0:
        A = -A
    R = _orthonormalize(np.column_stack([A[:, 0], A[:, 1], np.cross(A[:, 0], A[:, 1])]))
    return ViewPose(matrix_to_rodrigues(R), A[:, 2])


# ---------------------------------------------------------------------------
# Vectorised projection used by the optimisers
# ---------------------------------------------------------------------------


def _project_intr(Xc: np.ndarray, fx, fy, cx, cy, k1, k2) -> np.ndarray:
    """Pinhole + radial projection of camera-frame points ``(..., 3)``; the
    distortion centre is the principal point. Parameters broadcast."""
    z = Xc[..., 2]
    qx = fx * Xc[..., 0] / z
    qy = fy * Xc[..., 1] / z
    r2 = qx * qx + qy * qy
    f = 1.0 + k1 * r2 + k2 * r2 * r2
    return np.stack([cx + qx * f, cy + qy * f], axis=-1)


def _project_view(Xc: np.ndarray, K: IntrinsicMatrix, d: RadialDistortion) -> np.ndarray:
    z = Xc[..., 2]
    px = K.fx * Xc[..., 0] / z + K.skew * Xc[..., 1] / z + K.cx
    py = K.fy * Xc[..., 1] / z + K.cy
    qx = px - d.center_x
    qy = py - d.center_y
    r2 = qx * qx + qy * qy
    f = 1.0 + d.k1 * r2 + d.k2 * r2 * r2
    return np.stack([d.center_x + qx * f, d.center_y + qy * f], axis=-1)


def _transform(rvecs: np.ndarray, tvecs: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Apply F poses to points: rvecs (F,3), X (n,3) or (F,n,3) -> (F,n,3)."""
    R = rodrigues_batch(rvecs)
    if X.ndim == 2:
        return np.einsum("fij,nj->fni", R, X) + tvecs[:, None, :]
    return np.einsum("fij,fnj->fni", R, X) + tvecs[:, None, :]


# ---------------------------------------------------------------------------
# Per-view calibration
# ---------------------------------------------------------------------------


def _check_corners(obs: PatternObservation, spec: CheckerboardSpec, image_size) -> None:
    if len(obs.corners) != spec.n_corners:
        raise InputError(
            f"view {obs.view_index} frame {obs.frame_index}: {len(obs.corners)} corners, expected {spec.n_corners}"
        )
    if not np.all(np.isfinite(obs.corners)):
        raise InputError(f"view {obs.view_index} frame {obs.frame_index}: non-finite corner coordinates")
    if image_size is not None:
        w, h = image_size
        c = obs.corners
        if np.any(c < -0.5) or np.any(c[:, 0] > w - 0.5) or np.any(c[:, 1] > h - 0.5):
            raise InputError(f"view {obs.view_index} frame {obs.frame_index}: corner outside the image")


def check_corner_order(corners: np.ndarray, spec: CheckerboardSpec) -> bool:
    """True when corners sweep the grid row-major with consistent step directions."""
    g = np.asarray(corners, dtype=float).reshape(spec.inner_rows, spec.inner_cols, 2)
    row_steps = np.diff(g, axis=1)
    col_steps = np.diff(g, axis=0)
    ref_row = row_steps.reshape(-1, 2).mean(axis=0)
    ref_col = col_steps.reshape(-1, 2).mean(axis=0)
    return bool(np.all(row_steps @ ref_row > 0) and np.all(col_steps @ ref_col > 0))


def calibrate_view(
    observations: Sequence[PatternObservation],
    spec: CheckerboardSpec,
    image_size,
    settings: LMSettings = LMSettings(),
) -> ViewCalibration:
    """Intrinsics and radial distortion of one view from target frames.

    The distortion centre is tied to the principal point and skew is held at
    zero. Returns the RMS reprojection error over all corners.
    """
    observations = sorted(observations, key=lambda o: o.frame_index)
    if len(observations) < 3:
        raise InsufficientFrames(f"need at least 3 frames, got {len(observations)}")
    for o in observations:
        _check_corners(o, spec, image_size)
    world = pattern_world_points(spec)
    image = np.stack([o.corners for o in observations])  # (F, n, 2)
    n_frames, n_pts = image.shape[:2]

    homs = [estimate_homography(world[:, :2], img, refine=False) for img in image]
    K0 = intrinsics_from_homographies(homs, image_size)
    poses0 = [pose_from_homography(H, K0) for H in homs]

    w, h = image_size
    rscale = 0.5 * float(np.hypot(w, h))
    x0 = np.concatenate(
        [[K0.fx, K0.fy, K0.cx, K0.cy, 0.0, 0.0]] + [np.concatenate([p.rvec, p.tvec]) for p in poses0]
    )

    def unpack(x):
        intr = x[:6]
        poses = x[6:].reshape(n_frames, 6)
        return intr, poses

    def residual(x):
        (fx, fy, cx, cy, k1n, k2n), poses = unpack(x)
        Xc = _transform(poses[:, :3], poses[:, 3:], world)
        proj = _project_intr(Xc, fx, fy, cx, cy, k1n / rscale**2, k2n / rscale**4)
        return (proj - image).ravel()

    m = n_frames * n_pts * 2
    S = sparse.lil_matrix((m, x0.size), dtype=bool)
    S[:, :6] = True
    rows_per_frame = n_pts * 2
    for f in range(n_frames):
        S[f * rows_per_frame : (f + 1) * rows_per_frame, 6 + 6 * f : 12 + 6 * f] = True
    res = levenberg_marquardt(residual, x0, S.tocsc(), settings)
    if not np.all(np.isfinite(res.x)):
        raise NoConvergence("view calibration diverged")
    fx, fy, cx, cy, k1n, k2n = res.x[:6]
    K = IntrinsicMatrix(fx, fy, cx, cy, 0.0)
    d = RadialDistortion(k1n / rscale**2, k2n / rscale**4, cx, cy)
    rms = float(np.sqrt(2.0 * res.cost / (n_frames * n_pts)))
    return ViewCalibration(K, d, rms, tuple(res.history))


# ---------------------------------------------------------------------------
# PnP
# ---------------------------------------------------------------------------


def _initial_pose_planar(world: np.ndarray, rays: np.ndarray) -> ViewPose:
    c = world.mean(axis=0)
    _, _, vt = np.linalg.svd(world - c)
    u1, u2 = vt[0], vt[1]
    B = np.column_stack([u1, u2, np.cross(u1, u2)])
    plane = (world - c) @ np.column_stack([u1, u2])
    H = estimate_homography(plane, rays, refine=False)
    lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    H = H * lam
    if H[2, 2] < 0:
        H = -H
    A = _orthonormalize(np.column_stack([H[:, 0], H[:, 1], np.cross(H[:, 0], H[:, 1])]))
    R = A @ B.T
    return ViewPose(matrix_to_rodrigues(R), H[:, 2] - R @ c)


def _initial_pose_dlt(world: np.ndarray, rays: np.ndarray) -> ViewPose:
    n = len(world)
    Xh = _to_h(world)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -rays[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -rays[:, 1:2] * Xh
    _, _, vt = np.linalg.svd(A)
    P = vt[-1].reshape(3, 4)
    M = P[:, :3]
    det = np.linalg.det(M)
    scale = np.cbrt(det)
    R = _orthonormalize(M / scale)
    t = P[:, 3] / scale
    return ViewPose(matrix_to_rodrigues(R), t)


def solve_pnp(
    world,
    image,
    K: IntrinsicMatrix,
    d: RadialDistortion | None = None,
    settings: LMSettings = LMSettings(),
) -> tuple[ViewPose, float]:
    """Pose of a view from known 3D points and their pixel observations.

    Observations are undistorted for the linear initialiser (homography
    decomposition for coplanar points, DLT otherwise); the LM refinement
    uses the full distortion model.

    Returns:
        ``(pose, rms)`` with ``rms`` the reprojection RMS in pixels.
    """
    W = np.asarray(world, dtype=float).reshape(-1, 3)
    m = np.asarray(image, dtype=float).reshape(-1, 2)
    if len(W) != len(m):
        raise InputError("world and image point counts differ")
    if len(W) < 6:
        raise InsufficientPoints(f"PnP needs at least 6 points, got {len(W)}")
    if d is None:
        d = RadialDistortion.at_principal_point(K)
    und = remove_distortion(m, d)
    rays = _to_h(und) @ np.linalg.inv(K.matrix).T
    rays = rays[:, :2] / rays[:, 2:3]
    s = np.linalg.svd(W - W.mean(axis=0), compute_uv=False)
    if s[2] <= 1e-9 * s[0]:
        pose0 = _initial_pose_planar(W, rays)
    else:
        pose0 = _initial_pose_dlt(W, rays)

    def residual(x):
        Xc = _transform(x[None, :3], x[None, 3:], W)[0]
        return (_project_view(Xc, K, d) - m).ravel()

    x0 = np.concatenate([pose0.rvec, pose0.tvec])
    res = levenberg_marquardt(residual, x0, np.ones((2 * len(W), 6), dtype=bool), settings)
    if not np.all(np.isfinite(res.x)):
        raise NoConvergence("PnP refinement diverged")
    rms = float(np.sqrt(2.0 * res.cost / len(W)))
    return ViewPose(res.x[:3], res.x[3:]), rms


# ---------------------------------------------------------------------------
# Whole light field
# ---------------------------------------------------------------------------


def _thread_count() -> int:
    env = os.environ.get("LFCAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def group_observations(observations: Iterable[PatternObservation], n_views: int) -> tuple[list[int], dict]:
    """Index observations by ``(view, frame)``; every frame must be seen by all views."""
    table: dict[tuple[int, int], PatternObservation] = {}
    for o in observations:
        if not 0 <= o.view_index < n_views:
            raise InputError(f"view index {o.view_index} out of range")
        key = (o.view_index, o.frame_index)
        if key in table:
            raise InputError(f"duplicate observation for view {o.view_index} frame {o.frame_index}")
        table[key] = o
    frames = sorted({f for _, f in table})
    for f in frames:
        missing = [v for v in range(n_views) if (v, f) not in table]
        if missing:
            raise FrameMismatch(f"frame {f} is missing views {missing}")
    return frames, table


def calibrate_lightfield(
    observations: Iterable[PatternObservation],
    spec: CheckerboardSpec,
    grid: ViewGrid,
    image_size,
    settings: LMSettings = LMSettings(),
) -> LightFieldCalibration:
    """Calibrate every view, then the poses of all views relative to the reference."""
    n = grid.n_views
    ref = grid.reference_index
    frames, table = group_observations(observations, n)
    if len(frames) < 3:
        raise InsufficientFrames(f"need at least 3 frames, got {len(frames)}")

    def calib(v):
        return calibrate_view([table[(v, f)] for f in frames], spec, image_size, settings)

    with ThreadPoolExecutor(max_workers=min(_thread_count(), n)) as pool:
        per_view = list(pool.map(calib, range(n)))

    world = pattern_world_points(spec)
    target_poses = [
        [solve_pnp(world, table[(v, f)].corners, per_view[v].K, per_view[v].d, settings)[0] for f in frames]
        for v in range(n)
    ]

    rel0 = np.zeros((n, 6))
    for v in range(n):
        if v == ref:
            continue
        rv, tv = [], []
        for k in range(len(frames)):
            Rv, Rr = target_poses[v][k].R, target_poses[ref][k].R
            Rrel = Rv @ Rr.T
            rv.append(matrix_to_rodrigues(Rrel))
            tv.append(target_poses[v][k].tvec - Rrel @ target_poses[ref][k].tvec)
        rel0[v, :3] = np.mean(rv, axis=0)
        rel0[v, 3:] = np.mean(tv, axis=0)
    frame0 = np.array([np.concatenate([p.rvec, p.tvec]) for p in target_poses[ref]])

    others = [v for v in range(n) if v != ref]
    image = np.stack([np.stack([table[(v, f)].corners for f in frames]) for v in range(n)])  # (N,F,n,2)
    n_frames, n_pts = len(frames), len(world)
    Ks = [c.K for c in per_view]
    ds = [c.d for c in per_view]

    def unpack(x):
        rel = np.zeros((n, 6))
        rel[others] = x[: 6 * len(others)].reshape(-1, 6)
        fr = x[6 * len(others) :].reshape(n_frames, 6)
        return rel, fr

    def project_all(x):
        rel, fr = unpack(x)
        Y = _transform(fr[:, :3], fr[:, 3:], world)  # (F, n, 3) in reference frame
        Rrel = rodrigues_batch(rel[:, :3])
        Z = np.einsum("vij,fnj->vfni", Rrel, Y) + rel[:, None, None, 3:]
        return np.stack([_project_view(Z[v], Ks[v], ds[v]) for v in range(n)])

    def residual(x):
        return (project_all(x) - image).ravel()

    x0 = np.concatenate([rel0[others].ravel(), frame0.ravel()])
    m = image.size
    rows = np.arange(m)
    view_of_row = rows // (n_frames * n_pts * 2)
    frame_of_row = (rows // (n_pts * 2)) % n_frames
    col_index = {v: k for k, v in enumerate(others)}
    ri, ci = [], []
    for r_view in range(n):
        sel = rows[view_of_row == r_view]
        if r_view in col_index:
            base = 6 * col_index[r_view]
            for j in range(6):
                ri.append(sel)
                ci.append(np.full(len(sel), base + j))
    fbase = 6 * len(others)
    for j in range(6):
        ri.append(rows)
        ci.append(fbase + 6 * frame_of_row + j)
    ri = np.concatenate(ri)
    ci = np.concatenate(ci)
    S = sparse.csc_matrix((np.ones(len(ri), dtype=bool), (ri, ci)), shape=(m, x0.size))
    res = levenberg_marquardt(residual, x0, S, settings)
    if not np.all(np.isfinite(res.x)):
        raise NoConvergence("relative pose refinement diverged")

    rel, _ = unpack(res.x)
    poses = [ViewPose.zero() if v == ref else ViewPose(rel[v, :3], rel[v, 3:]) for v in range(n)]
    err = project_all(res.x) - image
    per_view_rms = [float(np.sqrt(np.mean(np.sum(err[v] ** 2, axis=-1)))) for v in range(n)]
    rms = float(np.sqrt(np.mean(np.sum(err**2, axis=-1))))
    return LightFieldCalibration(grid, per_view, poses, rms, tuple(image_size), per_view_rms)
