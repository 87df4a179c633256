"""Correspondence handling for calibration refinement: duplicate removal,
chain matching across the view grid and epipolar (RANSAC) filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyChain, InputError, InsufficientMatches, NoConsensus
from .geometry import ViewGrid, remove_distortion

DEDUP_THRESHOLD = math.sqrt(2.0)


@dataclass
class Track:
    """One scene point observed in every view; ``obs`` is ``(N, 2)`` in view order."""

    id: int
    obs: np.ndarray
    X: np.ndarray | None = None

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=float).reshape(-1, 2)
        if self.X is not None:
            self.X = np.asarray(self.X, dtype=float).reshape(3)


@dataclass
class FeatureSet:
    """Per-view feature locations plus pairwise index matches between views.

    ``matches[(u, v)]`` is an ``(m, 2)`` integer array of
    ``(feature index in u, feature index in v)`` pairs.
    """

    features: list
    matches: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = [np.asarray(f, dtype=float).reshape(-1, 2) for f in self.features]
        self.matches = {k: np.asarray(v, dtype=int).reshape(-1, 2) for k, v in self.matches.items()}

    def pair(self, u: int, v: int) -> np.ndarray | None:
        if (u, v) in self.matches:
            return self.matches[(u, v)]
        if (v, u) in self.matches:
            return self.matches[(v, u)][:, ::-1]
        return None


def chain_order(grid: ViewGrid) -> list[int]:
    """Boustrophedon path over the grid, starting at the corner nearest the
    reference view (the reference itself when it is a corner).

    Rows are traversed away from the starting corner; at the end of a row
    the chain steps to the neighbouring row and reverses direction.
    """
    a, b = grid.rows_a, grid.cols_b
    row0 = 0 if grid.ref_a <= (a - 1) / 2 else a - 1
    col0 = 0 if grid.ref_b <= (b - 1) / 2 else b - 1
    rows = range(a) if row0 == 0 else range(a - 1, -1, -1)
    order = []
    forward = col0 == 0
    for r in rows:
        cols = range(b) if forward else range(b - 1, -1, -1)
        order.extend(grid.index(r, c) for c in cols)
        forward = not forward
    return order


def chain_pairs(grid: ViewGrid) -> list[tuple[int, int]]:
    order = chain_order(grid)
    return list(zip(order[:-1], order[1:]))


def dedup_indices(points, threshold: float = DEDUP_THRESHOLD) -> np.ndarray:
    """Indices of points kept by greedy duplicate removal in list order.

    A point is dropped when an earlier kept point lies strictly closer than
    ``threshold``.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(0, dtype=int)
    tree = cKDTree(pts)
    removed = np.zeros(len(pts), dtype=bool)
    for i in range(len(pts)):
        if removed[i]:
            continue
        for j in tree.query_ball_point(pts[i], threshold):
            if j > i and np.linalg.norm(pts[j] - pts[i]) < threshold:
                removed[j] = True
    return np.flatnonzero(~removed)


def deduplicate_features(points, threshold: float = DEDUP_THRESHOLD) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return pts[dedup_indices(pts, threshold)]


def dedup_feature_set(fs: FeatureSet, threshold: float = DEDUP_THRESHOLD) -> FeatureSet:
    """Remove duplicate features in every view and drop matches that used them."""
    keep = [dedup_indices(f, threshold) for f in fs.features]
    remap = []
    for f, k in zip(fs.features, keep):
        m = np.full(len(f), -1, dtype=int)
        m[k] = np.arange(len(k))
        remap.append(m)
    matches = {}
    for (u, v), pairs in fs.matches.items():
        if len(pairs) == 0:
            matches[(u, v)] = pairs
            continue
        iu = remap[u][pairs[:, 0]]
        iv = remap[v][pairs[:, 1]]
        ok = (iu >= 0) & (iv >= 0)
        matches[(u, v)] = np.column_stack([iu[ok], iv[ok]])
    return FeatureSet([f[k] for f, k in zip(fs.features, keep)], matches)


def _unique_pairs(pairs: np.ndarray) -> np.ndarray:
    # a feature matched more than once on either side is ambiguous
    if len(pairs) == 0:
        return pairs
    _, inv_u, cnt_u = np.unique(pairs[:, 0], return_inverse=True, return_counts=True)
    _, inv_v, cnt_v = np.unique(pairs[:, 1], return_inverse=True, return_counts=True)
    return pairs[(cnt_u[inv_u] == 1) & (cnt_v[inv_v] == 1)]


def chain_match(fs: FeatureSet, grid: ViewGrid) -> list[Track]:
    """Follow pairwise matches along :func:`chain_order`; only features that
    reach every view become tracks. Track ids are feature indices in the
    first chain view."""
    if len(fs.features) != grid.n_views:
        raise InputError(f"feature set has {len(fs.features)} views, grid has {grid.n_views}")
    order = chain_order(grid)
    first = order[0]
    idx = {first: np.arange(len(fs.features[first]))}
    cur = idx[first]
    for u, v in zip(order[:-1], order[1:]):
        pairs = fs.pair(u, v)
        if pairs is None or len(pairs) == 0:
            raise EmptyChain(f"no matches between views {u} and {v}")
        pairs = _unique_pairs(pairs)
        lut = np.full(len(fs.features[u]), -1, dtype=int)
        lut[pairs[:, 0]] = pairs[:, 1]
        nxt = lut[cur]
        ok = nxt >= 0
        for k in idx:
            idx[k] = idx[k][ok]
        idx[v] = nxt[ok]
        cur = idx[v]
    n = grid.n_views
    tracks = []
    for t in range(len(cur)):
        obs = np.stack([fs.features[v][idx[v][t]] for v in range(n)])
        tracks.append(Track(int(idx[first][t]), obs))
    return tracks


def tracks_to_feature_set(candidates: dict, grid: ViewGrid) -> FeatureSet:
    """Turn candidate tracks ``{track_id: {view: (x, y)}}`` (possibly partial)
    into per-view features with matches along the chain."""
    n = grid.n_views
    feats: list[list] = [[] for _ in range(n)]
    where: dict = {}
    for tid in sorted(candidates):
        for v, xy in sorted(candidates[tid].items()):
            if not 0 <= v < n:
                raise InputError(f"track {tid}: view index {v} out of range")
            where[(tid, v)] = len(feats[v])
            feats[v].append(xy)
    matches = {}
    for u, v in chain_pairs(grid):
        pairs = [(where[(t, u)], where[(t, v)]) for t in sorted(candidates) if (t, u) in where and (t, v) in where]
        matches[(u, v)] = np.array(pairs, dtype=int).reshape(-1, 2)
    return FeatureSet([np.array(f, dtype=float).reshape(-1, 2) for f in feats], matches)


# ---------------------------------------------------------------------------
# Fundamental matrix
# ---------------------------------------------------------------------------


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    scale = math.sqrt(2.0) / max(float(np.mean(np.linalg.norm(pts - c, axis=1))), 1e-300)
    return np.array([[scale, 0.0, -scale * c[0]], [0.0, scale, -scale * c[1]], [0.0, 0.0, 1.0]])


def eight_point(x1, x2) -> np.ndarray:
    """Normalised eight-point fundamental matrix with rank 2, ``|F|_F = 1``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    T1, T2 = _normalizer(x1), _normalizer(x2)
    p1 = np.column_stack([x1, np.ones(len(x1))]) @ T1.T
    p2 = np.column_stack([x2, np.ones(len(x2))]) @ T2.T
    A = np.einsum("ni,nj->nij", p2, p1).reshape(-1, 9)
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    U, s, Vt = np.linalg.svd(F)
    F = U @ np.diag([s[0], s[1], 0.0]) @ Vt
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def sampson_distance(F: np.ndarray, x1, x2) -> np.ndarray:
    """First-order geometric distance (pixels) of each match to the epipolar geometry."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    num = np.abs(np.sum(h2 * Fx1, axis=1))
    den = np.sqrt(Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2)
    return num / np.maximum(den, 1e-300)


def estimate_fundamental_ransac(
    x1,
    x2,
    threshold: float = 2.0,
    max_iterations: int = 2000,
    confidence: float = 0.99,
    seed: int = 0,
    min_inlier_ratio: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC over eight-point samples, final fit on all inliers.

    Returns:
        ``(F, inlier_mask)``; inliers have Sampson distance below ``threshold``
        under the final ``F``.
    """
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    n = len(x1)
    if n != len(x2):
        raise InputError("match lists differ in length")
    if n < 8:
        raise InsufficientMatches(f"fundamental matrix needs at least 8 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        sample = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(x1[sample], x2[sample])
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(F)):
            continue
        mask = sampson_distance(F, x1, x2) < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            w = count / n
            if w >= 1.0:
                needed = 0
            else:
                needed = int(math.ceil(math.log(1.0 - confidence) / math.log(1.0 - w**8))) if w > 0 else max_iterations
    if best_mask is None or best_count / n < min_inlier_ratio or best_count < 8:
        raise NoConsensus(f"best inlier ratio {best_count / n:.2f} is below {min_inlier_ratio}")
    F = eight_point(x1[best_mask], x2[best_mask])
    mask = sampson_distance(F, x1, x2) < threshold
    return F, mask


def epipolar_filter(
    tracks: Sequence[Track],
    grid: ViewGrid,
    threshold: float = 2.0,
    distortion: Sequence | None = None,
    seed: int = 0,
) -> list[Track]:
    """Keep tracks consistent with the estimated epipolar geometry of every
    consecutive view pair along the chain.

    When ``distortion`` (one ``RadialDistortion`` per view) is given, the
    observations are undistorted before estimating ``F``.
    """
    tracks = list(tracks)
    if len(tracks) < 8:
        raise InsufficientMatches(f"epipolar filtering needs at least 8 tracks, got {len(tracks)}")
    obs = np.stack([t.obs for t in tracks])  # (M, N, 2)
    if distortion is not None:
        obs = np.stack([remove_distortion(obs[:, v], distortion[v]) for v in range(obs.shape[1])], axis=1)
    keep = np.ones(len(tracks), dtype=bool)
    for k, (u, v) in enumerate(chain_pairs(grid)):
        _, mask = estimate_fundamental_ransac(obs[:, u], obs[:, v], threshold, seed=seed + k)
        keep &= mask
    return [t for t, k in zip(tracks, keep) if k]
