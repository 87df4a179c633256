"""Synthetic light-field rigs, target observations and scene tracks with
known ground truth."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .calibration import (
    CheckerboardSpec,
    LightFieldCalibration,
    PatternObservation,
    ViewCalibration,
    pattern_world_points,
)
from .errors import EmptyFrustum, PatternNotVisible
from .geometry import (
    IntrinsicMatrix,
    RadialDistortion,
    ViewGrid,
    ViewPose,
    apply_distortion,
    matrix_to_rodrigues,
    rodrigues_to_matrix,
)
from .matching import FeatureSet, Track, chain_pairs


@dataclass(frozen=True)
class SyntheticRig:
    grid: ViewGrid
    K_true: tuple
    d_true: tuple
    poses_true: tuple
    baseline: float
    image_size: tuple

    def calibration(self) -> LightFieldCalibration:
        per_view = [ViewCalibration(K, d, 0.0) for K, d in zip(self.K_true, self.d_true)]
        return LightFieldCalibration(self.grid, per_view, self.poses_true, 0.0, tuple(self.image_size))

    def rectified(self) -> "SyntheticRig":
        """The ideal rig: zero rotations and exactly grid-proportional translations."""
        return replace(self, poses_true=tuple(_grid_pose(self.grid, i, self.baseline) for i in range(self.grid.n_views)))

    def project(self, view: int, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distorted pixels of reference-frame points and their view-frame depth."""
        pose = self.poses_true[view]
        Xc = np.asarray(X, float) @ pose.R.T + pose.tvec
        z = Xc[:, 2]
        K = self.K_true[view]
        safe = np.where(np.abs(z) > 1e-12, z, np.nan)
        px = np.column_stack(
            [K.fx * Xc[:, 0] / safe + K.skew * Xc[:, 1] / safe + K.cx, K.fy * Xc[:, 1] / safe + K.cy]
        )
        return apply_distortion(px, self.d_true[view]), z

    def inside(self, px: np.ndarray, margin: float = 0.0) -> np.ndarray:
        w, h = self.image_size
        return (
            np.isfinite(px).all(axis=1)
            & (px[:, 0] >= margin)
            & (px[:, 1] >= margin)
            & (px[:, 0] <= w - 1 - margin)
            & (px[:, 1] <= h - 1 - margin)
        )


@dataclass(frozen=True)
class NoiseSpec:
    rot_z_sigma: float = 0.0
    trans_sigma: float = 0.0
    pixel_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.rot_z_sigma, self.trans_sigma, self.pixel_sigma) < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier fraction must lie in [0, 1]")


def _grid_pose(grid: ViewGrid, i: int, baseline: float) -> ViewPose:
    da, db = grid.offset(i)
    return ViewPose(np.zeros(3), np.array([db * baseline, da * baseline, 0.0]))


def make_rig(grid: ViewGrid, image_size, focal: float, baseline: float) -> SyntheticRig:
    """Ideal rig: identical intrinsics with the principal point at the image
    centre, no distortion, no rotation, grid-proportional translations."""
    w, h = image_size
    if w <= 0 or h <= 0 or focal <= 0 or baseline <= 0:
        raise ValueError("image size, focal length and baseline must be positive")
    K = IntrinsicMatrix(focal, focal, w / 2.0, h / 2.0)
    d = RadialDistortion.at_principal_point(K)
    n = grid.n_views
    return SyntheticRig(
        grid,
        tuple([K] * n),
        tuple([d] * n),
        tuple(_grid_pose(grid, i, baseline) for i in range(n)),
        baseline,
        (int(w), int(h)),
    )


def perturb_rig(rig: SyntheticRig, noise: NoiseSpec, lens_shift_ppu: float | None = None) -> SyntheticRig:
    """Gaussian Z-axis rotation and x/y translation drift of every non-reference view.

    With ``lens_shift_ppu`` (sensor pixels per world unit) the translation is
    treated as a lens sliding over a shared sensor: the view's principal
    point and distortion centre move with the optical centre.
    """
    rng = np.random.default_rng([noise.seed, 1])
    ref = rig.grid.reference_index
    poses, Ks, ds = [], list(rig.K_true), list(rig.d_true)
    for i, p in enumerate(rig.poses_true):
        dz = rng.normal(0.0, noise.rot_z_sigma)
        dt = rng.normal(0.0, noise.trans_sigma, size=2)
        if i == ref:
            poses.append(p)
            continue
        if noise.rot_z_sigma > 0:
            R = rodrigues_to_matrix([0.0, 0.0, dz]) @ p.R
            rvec = matrix_to_rodrigues(R)
        else:
            rvec = p.rvec
        tvec = p.tvec + np.array([dt[0], dt[1], 0.0]) if noise.trans_sigma > 0 else p.tvec
        poses.append(ViewPose(rvec, tvec))
        if lens_shift_ppu and noise.trans_sigma > 0:
            # t = -C, so the optical centre and its footprint on the sensor move by -dt
            K, d = Ks[i], ds[i]
            shift = -dt * lens_shift_ppu
            Ks[i] = IntrinsicMatrix(K.fx, K.fy, K.cx + shift[0], K.cy + shift[1], K.skew)
            ds[i] = RadialDistortion(d.k1, d.k2, d.center_x + shift[0], d.center_y + shift[1])
    return replace(rig, poses_true=tuple(poses), K_true=tuple(Ks), d_true=tuple(ds))


def jitter_intrinsics(
    rig: SyntheticRig,
    focal_sigma: float = 0.0,
    center_sigma: float = 0.0,
    k1: float = 0.0,
    k2: float = 0.0,
    seed: int = 0,
) -> SyntheticRig:
    """Per-view variation of focal length and principal point, plus a common
    radial distortion centred on each principal point.

    ``k1``/``k2`` are given for radii normalised by the image half-diagonal.
    """
    rng = np.random.default_rng([seed, 2])
    s = 0.5 * float(np.hypot(*rig.image_size))
    Ks, ds = [], []
    for K in rig.K_true:
        df = rng.normal(0.0, focal_sigma, size=2)
        dc = rng.normal(0.0, center_sigma, size=2)
        K2 = IntrinsicMatrix(K.fx + df[0], K.fy + df[1], K.cx + dc[0], K.cy + dc[1], K.skew)
        Ks.append(K2)
        ds.append(RadialDistortion.at_principal_point(K2, k1 / s**2, k2 / s**4))
    return replace(rig, K_true=tuple(Ks), d_true=tuple(ds))


# ---------------------------------------------------------------------------
# Calibration target
# ---------------------------------------------------------------------------


def _default_depth_range(rig: SyntheticRig, spec: CheckerboardSpec) -> tuple[float, float]:
    """Depths at which the target spans roughly 45% of the image width, pushed
    back far enough that the whole rig's parallax still fits in the frame."""
    width = (spec.inner_cols - 1) * spec.square_size
    f = float(np.mean([K.fx for K in rig.K_true]))
    w = rig.image_size[0]
    centres = np.array([-(p.R.T @ p.tvec) for p in rig.poses_true])
    span = float(np.ptp(centres[:, 0])) if len(centres) > 1 else 0.0
    z = max(width * f / (0.45 * w), (width + span) * f / (0.8 * w))
    return 0.75 * z, 1.35 * z


def pattern_visible(rig: SyntheticRig, spec: CheckerboardSpec, placement: ViewPose, margin: float = 1.0) -> bool:
    W = pattern_world_points(spec) @ placement.R.T + placement.tvec
    for v in range(rig.grid.n_views):
        px, z = rig.project(v, W)
        if np.any(z <= 0) or not rig.inside(px, margin).all():
            return False
    return True


def sample_pattern_placements(
    rig: SyntheticRig,
    spec: CheckerboardSpec,
    n: int = 30,
    seed: int = 0,
    depth_range: tuple[float, float] | None = None,
    max_tilt: float = np.radians(35.0),
    max_roll: float = np.radians(20.0),
    max_tries: int = 100_000,
) -> list[ViewPose]:
    """Random target placements visible in every view.

    Target centres are spread over the central 60% of the reference image on
    a jittered stratified grid, so the placements cover the field of view.
    """
    rng = np.random.default_rng([seed, 3])
    if depth_range is None:
        depth_range = _default_depth_range(rig, spec)
    ref = rig.grid.reference_index
    K = rig.K_true[ref]
    w, h = rig.image_size
    centre_local = np.array([(spec.inner_cols - 1) * spec.square_size / 2, (spec.inner_rows - 1) * spec.square_size / 2, 0.0])
    cells = int(np.ceil(np.sqrt(n)))
    placements: list[ViewPose] = []
    tries = 0
    while len(placements) < n:
        tries += 1
        if tries > max_tries:
            raise EmptyFrustum(f"only {len(placements)} of {n} target placements fit in every view")
        cell = (tries * 7) % (cells * cells)
        cu = (cell % cells + rng.uniform()) / cells
        cv = (cell // cells + rng.uniform()) / cells
        u, v = (0.2 + 0.6 * cu) * w, (0.2 + 0.6 * cv) * h
        z = rng.uniform(*depth_range)
        ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        C = ray * z
        tilt = rng.uniform(-max_tilt, max_tilt, size=2)
        roll = rng.uniform(-max_roll, max_roll)
        R = rodrigues_to_matrix([0.0, 0.0, roll]) @ rodrigues_to_matrix([tilt[0], 0.0, 0.0]) @ rodrigues_to_matrix([0.0, tilt[1], 0.0])
        placement = ViewPose(matrix_to_rodrigues(R), C - R @ centre_local)
        if pattern_visible(rig, spec, placement):
            placements.append(placement)
    return placements


def render_pattern_frames(
    rig: SyntheticRig,
    spec: CheckerboardSpec,
    placements: Sequence[ViewPose],
    pixel_sigma: float = 0.0,
    seed: int = 0,
) -> list[PatternObservation]:
    """Distorted corner observations of every placement in every view."""
    rng = np.random.default_rng([seed, 4])
    world = pattern_world_points(spec)
    out = []
    for f, placement in enumerate(placements):
        W = world @ placement.R.T + placement.tvec
        for v in range(rig.grid.n_views):
            px, z = rig.project(v, W)
            if np.any(z <= 0) or not rig.inside(px).all():
                raise PatternNotVisible(f, f"placement {f} is not fully visible in view {v}")
            if pixel_sigma > 0:
                px = px + rng.normal(0.0, pixel_sigma, size=px.shape)
            out.append(PatternObservation(v, f, px))
    return out


def pattern_coverage(observations: Sequence[PatternObservation], image_size, cells: int = 10) -> dict[int, float]:
    """Per-view fraction of image cells touched by the target's corners."""
    w, h = image_size
    covered: dict[int, np.ndarray] = {}
    for o in observations:
        grid = covered.setdefault(o.view_index, np.zeros((cells, cells), dtype=bool))
        cx = np.clip((o.corners[:, 0] / w * cells).astype(int), 0, cells - 1)
        cy = np.clip((o.corners[:, 1] / h * cells).astype(int), 0, cells - 1)
        grid[cy, cx] = True
    return {v: float(g.mean()) for v, g in sorted(covered.items())}


# ---------------------------------------------------------------------------
# Scene tracks
# ---------------------------------------------------------------------------


@dataclass
class SceneData:
    tracks: list
    features: FeatureSet
    points: np.ndarray
    outlier: np.ndarray
    clean_obs: np.ndarray
    feature_point: list = field(default_factory=list)


def sample_scene_points(rig: SyntheticRig, n_points: int, depth_range, rng, margin: float = 2.0, max_tries: int = 200) -> np.ndarray:
    ref = rig.grid.reference_index
    K = rig.K_true[ref]
    w, h = rig.image_size
    pts = np.zeros((0, 3))
    for _ in range(max_tries):
        need = n_points - len(pts)
        if need <= 0:
            break
        batch = max(4 * need, 64)
        u = rng.uniform(0, w - 1, batch)
        v = rng.uniform(0, h - 1, batch)
        z = rng.uniform(depth_range[0], depth_range[1], batch)
        X = np.column_stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
        X = (X - rig.poses_true[ref].tvec) @ rig.poses_true[ref].R
        ok = np.ones(batch, dtype=bool)
        for view in range(rig.grid.n_views):
            px, zc = rig.project(view, X)
            ok &= (zc > 0) & rig.inside(px, margin)
        pts = np.vstack([pts, X[ok][:need]])
    if len(pts) < n_points:
        raise EmptyFrustum(f"only {len(pts)} of {n_points} scene points are visible in every view")
    return pts


def render_scene_tracks(
    rig: SyntheticRig,
    n_points: int,
    depth_range=(0.5, 2.0),
    noise: NoiseSpec = NoiseSpec(),
    min_outlier_offset: float = 20.0,
    match_drop_rate: float = 0.0,
    spurious_fraction: float = 0.0,
    duplicate_fraction: float = 0.0,
) -> SceneData:
    """Random points in the common frustum observed by all views.

    Outlier tracks have one view's observation replaced by a uniform random
    pixel at least ``min_outlier_offset`` away from the true projection.
    The returned feature set shuffles features per view, drops pairwise
    matches at ``match_drop_rate``, adds ``spurious_fraction`` random extra
    matches per chain pair and near-duplicate features at ``duplicate_fraction``.
    """
    if n_points < 1:
        raise ValueError("n_points must be positive")
    if not 0 < depth_range[0] < depth_range[1]:
        raise ValueError("depth range must be positive and increasing")
    rng = np.random.default_rng([noise.seed, 5])
    n = rig.grid.n_views
    w, h = rig.image_size
    X = sample_scene_points(rig, n_points, depth_range, rng)
    clean = np.stack([rig.project(v, X)[0] for v in range(n)], axis=1)  # (M, N, 2)
    obs = clean.copy()
    if noise.pixel_sigma > 0:
        obs = obs + rng.normal(0.0, noise.pixel_sigma, size=obs.shape)
    n_out = int(round(noise.outlier_fraction * n_points))
    outlier = np.zeros(n_points, dtype=bool)
    if n_out:
        outlier[rng.choice(n_points, n_out, replace=False)] = True
        for m in np.flatnonzero(outlier):
            v = rng.integers(n)
            while True:
                p = rng.uniform([0, 0], [w - 1, h - 1])
                if np.linalg.norm(p - clean[m, v]) >= min_outlier_offset:
                    break
            obs[m, v] = p
    tracks = [Track(m, obs[m]) for m in range(n_points)]

    feats, owner, pos = [], [], []
    for v in range(n):
        order = rng.permutation(n_points)
        f = list(obs[order, v])
        own = list(order)
        n_dup = int(round(duplicate_fraction * n_points))
        for m in rng.choice(n_points, n_dup, replace=False) if n_dup else []:
            off = rng.uniform(-0.5, 0.5, size=2)
            f.append(obs[m, v] + off)
            own.append(-1)
        feats.append(np.array(f))
        owner.append(np.array(own))
        p = np.empty(n_points, dtype=int)
        p[order] = np.arange(n_points)
        pos.append(p)
    matches = {}
    for u, v in chain_pairs(rig.grid):
        keep = rng.uniform(size=n_points) >= match_drop_rate
        pairs = np.column_stack([pos[u][keep], pos[v][keep]])
        n_sp = int(round(spurious_fraction * n_points))
        if n_sp:
            extra = np.column_stack([rng.integers(len(feats[u]), size=n_sp), rng.integers(len(feats[v]), size=n_sp)])
            pairs = np.vstack([pairs, extra])
        matches[(u, v)] = pairs
    return SceneData(tracks, FeatureSet(feats, matches), X, outlier, clean, owner)


# ---------------------------------------------------------------------------
# Noise sweeps
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("noise_kind", "level", "trial", "rms_before", "rms_after")


def noise_sweep(
    rig: SyntheticRig,
    levels: dict,
    trials: int = 10,
    seed: int = 0,
    n_points: int = 300,
    depth_range=(2.0, 6.0),
    pixel_sigma: float = 0.0,
    frames: int = 1,
    config=None,
    lens_shift_ppu: float | None = None,
) -> list[dict]:
    """Perturb the rig, render scene tracks from the drifted rig and refine
    the nominal calibration against them.

    ``levels`` maps ``"trans"`` / ``"rotz"`` to lists of sigmas. Every
    ``(kind, level, trial)`` owns an RNG stream derived from those indices.
    """
    from .refinement import RefineConfig, refine

    config = config or RefineConfig()
    nominal = rig.calibration()
    rows = []
    for kind, values in levels.items():
        for li, level in enumerate(values):
            for trial in range(trials):
                s = int(np.random.SeedSequence([seed, li, trial, 0 if kind == "trans" else 1]).generate_state(1)[0])
                if kind == "trans":
                    ns = NoiseSpec(trans_sigma=level, pixel_sigma=pixel_sigma, seed=s)
                elif kind == "rotz":
                    ns = NoiseSpec(rot_z_sigma=level, pixel_sigma=pixel_sigma, seed=s)
                else:
                    raise ValueError(f"unknown noise kind {kind!r}")
                drifted = perturb_rig(rig, ns, lens_shift_ppu)
                scenes = [
                    render_scene_tracks(drifted, n_points, depth_range, replace(ns, seed=s + k)).features
                    for k in range(frames)
                ]
                res = refine(scenes, nominal, config)
                rows.append(
                    {"noise_kind": kind, "level": level, "trial": trial, "rms_before": res.rms_before, "rms_after": res.rms_after}
                )
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(float(r[k])) if k in ("level", "rms_before", "rms_after") else r[k]) for k in SWEEP_COLUMNS})
    return buf.getvalue()
