"""Calibration refinement from arbitrary-scene tracks: triangulation filter,
staged bundle adjustment and the multi-frame driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import sparse

from .calibration import LightFieldCalibration, ViewCalibration
from .errors import AllTracksFiltered, GaugeDrift, InsufficientMatches, InsufficientTracks, NoConsensus, NoConvergence
from .geometry import (
    IntrinsicMatrix,
    ViewPose,
    apply_distortion,
    remove_distortion,
    rodrigues_batch,
    triangulate_tracks,
)
from .lm import LMSettings, levenberg_marquardt
from .matching import (
    DEDUP_THRESHOLD,
    FeatureSet,
    Track,
    chain_match,
    chain_order,
    dedup_feature_set,
    epipolar_filter,
)

log = logging.getLogger(__name__)

MIN_BA_TRACKS = 15
STAGES = ("points", "intrinsics", "all")


@dataclass
class FilterReport:
    input_count: int = 0
    after_dedup: int = 0
    after_chain: int = 0
    after_epipolar: int = 0
    after_triangulation: int = 0
    median_reproj: float = 0.0

    def counts(self) -> tuple[int, ...]:
        return (self.input_count, self.after_dedup, self.after_chain, self.after_epipolar, self.after_triangulation)

    def __add__(self, other: "FilterReport") -> "FilterReport":
        return FilterReport(
            *(a + b for a, b in zip(self.counts(), other.counts())),
            median_reproj=other.median_reproj,
        )

    def summary(self) -> str:
        return (
            f"input={self.input_count} dedup={self.after_dedup} chain={self.after_chain} "
            f"epipolar={self.after_epipolar} triangulation={self.after_triangulation} "
            f"median_reproj={self.median_reproj:.6g}"
        )


@dataclass
class RefinementResult:
    calibration: LightFieldCalibration
    points: np.ndarray
    rms_before: float
    rms_after: float
    stage_rms: tuple = ()
    report: FilterReport | None = None
    frames_used: int = 1
    history: list = field(default_factory=list)


def _undistorted_obs(obs: np.ndarray, calib: LightFieldCalibration) -> np.ndarray:
    return np.stack([remove_distortion(obs[:, v], calib.per_view[v].d) for v in range(calib.n_views)], axis=1)


def reference_distances(tracks: Sequence[Track], calib: LightFieldCalibration) -> tuple[np.ndarray, np.ndarray]:
    """Triangulate tracks with the given calibration and return
    ``(X, distance)`` with the reprojection distance in the reference view."""
    obs = np.stack([t.obs for t in tracks])
    Ps = calib.projection_matrices()
    X, valid = triangulate_tracks(_undistorted_obs(obs, calib), Ps)
    ref = calib.grid.reference_index
    dist = np.full(len(tracks), np.inf)
    if valid.any():
        Xv = X[valid]
        m = Xv @ Ps[ref][:, :3].T + Ps[ref][:, 3]
        front = np.abs(m[:, 2]) > 1e-12
        px = np.full((len(Xv), 2), np.nan)
        px[front] = apply_distortion(m[front, :2] / m[front, 2:3], calib.per_view[ref].d)
        d = np.linalg.norm(px - obs[valid, ref], axis=1)
        dist[valid] = np.where(np.isfinite(d), d, np.inf)
    return X, dist


def triangulation_filter(tracks: Sequence[Track], calib: LightFieldCalibration) -> tuple[list[Track], FilterReport]:
    """Keep tracks whose reference-view reprojection distance does not exceed
    the median distance; survivors carry their triangulated point."""
    tracks = list(tracks)
    n = len(tracks)
    if n < 2:
        raise InsufficientTracks(f"triangulation filter needs at least 2 tracks, got {n}")
    X, dist = reference_distances(tracks, calib)
    med = float(np.median(dist))
    # untriangulable tracks (infinite distance) never survive, even if the median is infinite
    kept = [replace(t, X=X[k]) for k, t in enumerate(tracks) if dist[k] <= med and np.isfinite(dist[k])]
    report = FilterReport(n, n, n, n, len(kept), med)
    return kept, report


# ---------------------------------------------------------------------------
# Bundle adjustment
# ---------------------------------------------------------------------------


class _Bundle:
    """Packs points, per-view pinhole intrinsics and non-reference poses.

    Layout: ``[X (M*3) | fx, fy, cx, cy per view (N*4) | rvec, tvec per
    non-reference view ((N-1)*6)]``. Skew and distortion stay fixed.
    """

    def __init__(self, calib: LightFieldCalibration, points: np.ndarray, obs: np.ndarray):
        self.calib = calib
        self.n = calib.n_views
        self.ref = calib.grid.reference_index
        self.others = [v for v in range(self.n) if v != self.ref]
        self.M = len(points)
        self.obs = obs  # (M, N, 2)
        self.obs_vm = np.transpose(obs, (1, 0, 2))  # (N, M, 2)
        pv = calib.per_view
        self.skew = np.array([c.K.skew for c in pv])
        self.k1 = np.array([c.d.k1 for c in pv])
        self.k2 = np.array([c.d.k2 for c in pv])
        self.dc = np.array([[c.d.center_x, c.d.center_y] for c in pv])
        intr = np.array([[c.K.fx, c.K.fy, c.K.cx, c.K.cy] for c in pv])
        extr = np.array(
            [np.concatenate([calib.poses_rel_reference[v].rvec, calib.poses_rel_reference[v].tvec]) for v in self.others]
        ).reshape(-1, 6)
        self.x0 = np.concatenate([np.asarray(points, float).ravel(), intr.ravel(), extr.ravel()])
        self.n_pts = 3 * self.M
        self.n_intr = 4 * self.n
        self.sl_pts = slice(0, self.n_pts)
        self.sl_intr = slice(self.n_pts, self.n_pts + self.n_intr)
        self.sl_extr = slice(self.n_pts + self.n_intr, len(self.x0))

    def unpack(self, x):
        X = x[self.sl_pts].reshape(self.M, 3)
        intr = x[self.sl_intr].reshape(self.n, 4)
        rv = np.zeros((self.n, 3))
        tv = np.zeros((self.n, 3))
        e = x[self.sl_extr].reshape(-1, 6)
        rv[self.others] = e[:, :3]
        tv[self.others] = e[:, 3:]
        return X, intr, rv, tv

    def project(self, x) -> np.ndarray:
        X, intr, rv, tv = self.unpack(x)
        R = rodrigues_batch(rv)
        Xc = np.einsum("vij,mj->vmi", R, X) + tv[:, None, :]
        z = Xc[..., 2]
        u = Xc[..., 0] / z
        w = Xc[..., 1] / z
        px = intr[:, 0:1] * u + self.skew[:, None] * w + intr[:, 2:3]
        py = intr[:, 1:2] * w + intr[:, 3:4]
        qx = px - self.dc[:, 0:1]
        qy = py - self.dc[:, 1:2]
        r2 = qx * qx + qy * qy
        f = 1.0 + self.k1[:, None] * r2 + self.k2[:, None] * r2 * r2
        return np.stack([self.dc[:, 0:1] + qx * f, self.dc[:, 1:2] + qy * f], axis=-1)  # (N, M, 2)

    def residual(self, x) -> np.ndarray:
        return (self.project(x) - self.obs_vm).ravel()

    def rms(self, x) -> float:
        r = self.residual(x)
        return float(np.sqrt(np.sum(r * r) / (self.n * self.M)))

    def sparsity(self, free: np.ndarray) -> sparse.csc_matrix:
        """Boolean Jacobian pattern for the free columns of the full vector."""
        rows_view = np.arange(self.n * self.M * 2).reshape(self.n, self.M, 2)
        ri, ci = [], []
        for k in range(3):
            # point coordinate k of point m touches rows (v, m, :)
            cols = 3 * np.arange(self.M) + k
            r = rows_view.transpose(1, 0, 2).reshape(self.M, -1)
            ri.append(r.ravel())
            ci.append(np.repeat(cols, r.shape[1]))
        for j in range(4):
            cols = self.n_pts + 4 * np.arange(self.n) + j
            r = rows_view.reshape(self.n, -1)
            ri.append(r.ravel())
            ci.append(np.repeat(cols, r.shape[1]))
        for k, v in enumerate(self.others):
            r = rows_view[v].ravel()
            for j in range(6):
                ri.append(r)
                ci.append(np.full(len(r), self.n_pts + self.n_intr + 6 * k + j))
        ri = np.concatenate(ri)
        ci = np.concatenate(ci)
        S = sparse.csc_matrix((np.ones(len(ri), dtype=bool), (ri, ci)), shape=(self.n * self.M * 2, len(self.x0)))
        return S[:, np.flatnonzero(free)]

    def free_mask(self, stage: str) -> np.ndarray:
        free = np.zeros(len(self.x0), dtype=bool)
        free[self.sl_pts] = True
        if stage in ("intrinsics", "all"):
            free[self.sl_intr] = True
        if stage == "all":
            free[self.sl_extr] = True
        return free

    def to_calibration(self, x) -> LightFieldCalibration:
        _, intr, rv, tv = self.unpack(x)
        per_view = []
        for v, c in enumerate(self.calib.per_view):
            fx, fy, cx, cy = intr[v]
            per_view.append(ViewCalibration(IntrinsicMatrix(fx, fy, cx, cy, c.K.skew), c.d, c.rms_mono))
        poses = [
            self.calib.poses_rel_reference[v] if v == self.ref else ViewPose(rv[v], tv[v]) for v in range(self.n)
        ]
        return self.calib.with_views(per_view, poses)


def bundle_adjust(
    tracks: Sequence[Track],
    initial: LightFieldCalibration,
    stages: Sequence[str] = STAGES,
    settings: LMSettings = LMSettings(),
    fix_scale: bool = True,
) -> RefinementResult:
    """Staged minimisation of the total squared reprojection error.

    Each stage widens the free set: points, then points and intrinsics, then
    points, intrinsics and non-reference poses. Distortion and the reference
    pose never move. With ``fix_scale`` the unobservable global scale of
    points and translations is held at its initial value.
    """
    tracks = list(tracks)
    if len(tracks) < MIN_BA_TRACKS:
        raise InsufficientTracks(f"bundle adjustment needs at least {MIN_BA_TRACKS} tracks, got {len(tracks)}")
    obs = np.stack([t.obs for t in tracks])
    if any(t.X is None for t in tracks):
        X0, valid = triangulate_tracks(_undistorted_obs(obs, initial), initial.projection_matrices())
        if not valid.all():
            raise InsufficientTracks("some tracks cannot be triangulated")
    else:
        X0 = np.stack([t.X for t in tracks])
    b = _Bundle(initial, X0, obs)
    x = b.x0.copy()
    rms_before = b.rms(x)
    if not np.isfinite(rms_before):
        raise NoConvergence("initial reprojection error is not finite")

    ext = b.sl_extr
    t_idx = np.arange(ext.start, ext.stop).reshape(-1, 6)[:, 3:].ravel()
    scale0 = float(np.linalg.norm(x[t_idx]))

    stage_rms = []
    history = []
    for stage in stages:
        free = b.free_mask(stage)
        cols = np.flatnonzero(free)
        base = x.copy()

        def fun(z, base=base, cols=cols):
            full = base.copy()
            full[cols] = z
            return b.residual(full)

        post = None
        if fix_scale and stage == "all" and scale0 > 0:
            pos_t = np.searchsorted(cols, t_idx)
            pos_p = np.searchsorted(cols, np.arange(b.n_pts))

            def post(z, pos_t=pos_t, pos_p=pos_p):
                s = scale0 / np.linalg.norm(z[pos_t])
                z = z.copy()
                z[pos_t] *= s
                z[pos_p] *= s
                return z

        res = levenberg_marquardt(fun, x[cols], b.sparsity(free), settings, post_step=post)
        if not np.all(np.isfinite(res.x)):
            raise NoConvergence(f"bundle adjustment stage '{stage}' diverged")
        x[cols] = res.x
        history.append(res.history)
        stage_rms.append(b.rms(x))

    calib = b.to_calibration(x)
    ref = initial.grid.reference_index
    if calib.poses_rel_reference[ref] != initial.poses_rel_reference[ref]:
        raise GaugeDrift("reference pose moved during bundle adjustment")
    points = x[b.sl_pts].reshape(-1, 3)
    return RefinementResult(calib, points, rms_before, stage_rms[-1] if stage_rms else rms_before, tuple(stage_rms), history=history)


# ---------------------------------------------------------------------------
# Multi-frame driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefineConfig:
    dedup_threshold: float = DEDUP_THRESHOLD
    epipolar_threshold: float = 2.0
    max_frames: int = 10
    rms_threshold: float = 0.5
    use_epipolar_filter: bool = True
    use_triangulation_filter: bool = True
    stages: tuple = STAGES
    ransac_seed: int = 0
    lm: LMSettings = LMSettings()


def filter_frame(fs: FeatureSet, calib: LightFieldCalibration, config: RefineConfig = RefineConfig()) -> tuple[list[Track], FilterReport]:
    """Dedup, chain matching, epipolar and triangulation filters for one frame."""
    grid = calib.grid
    root = chain_order(grid)[0]
    report = FilterReport(input_count=len(fs.features[root]))
    fs = dedup_feature_set(fs, config.dedup_threshold)
    report.after_dedup = len(fs.features[root])
    tracks = chain_match(fs, grid)
    report.after_chain = len(tracks)
    if config.use_epipolar_filter and tracks:
        try:
            tracks = epipolar_filter(
                tracks, grid, config.epipolar_threshold, [c.d for c in calib.per_view], seed=config.ransac_seed
            )
        except (NoConsensus, InsufficientMatches) as exc:
            raise AllTracksFiltered(f"epipolar filter left no usable tracks: {exc}") from exc
    report.after_epipolar = len(tracks)
    if config.use_triangulation_filter and len(tracks) >= 2:
        tracks, tri = triangulation_filter(tracks, calib)
        report.median_reproj = tri.median_reproj
    report.after_triangulation = len(tracks)
    if not tracks:
        raise AllTracksFiltered("no tracks survived filtering")
    return tracks, report


def refine(frames: Sequence[FeatureSet], calib: LightFieldCalibration, config: RefineConfig = RefineConfig()) -> RefinementResult:
    """Run filtering and staged bundle adjustment frame by frame until
    ``max_frames`` frames are used or the RMS drops below ``rms_threshold``."""
    if not frames:
        raise InsufficientTracks("no frames given")
    current = calib
    total = None
    first_rms = None
    result = None
    used = 0
    for fs in frames[: config.max_frames]:
        tracks, report = filter_frame(fs, current, config)
        total = report if total is None else total + report
        result = bundle_adjust(tracks, current, config.stages, config.lm)
        used += 1
        if first_rms is None:
            first_rms = result.rms_before
        log.info("frame %d: %s rms %.4g -> %.4g", used, report.summary(), result.rms_before, result.rms_after)
        current = result.calibration
        if result.rms_after < config.rms_threshold:
            break
    result.rms_before = first_rms
    result.report = total
    result.frames_used = used
    return result
