import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfcal.errors import EmptyChain, InsufficientMatches, NoConsensus
from lfcal.geometry import ViewGrid
from lfcal.matching import (
    FeatureSet,
    Track,
    chain_match,
    chain_order,
    chain_pairs,
    deduplicate_features,
    dedup_indices,
    eight_point,
    epipolar_filter,
    estimate_fundamental_ransac,
    sampson_distance,
    tracks_to_feature_set,
)
from lfcal.synthetic import NoiseSpec, make_rig, perturb_rig, render_scene_tracks


@pytest.fixture(scope="module")
def scene():
    rig = perturb_rig(make_rig(ViewGrid(3, 3, 1, 1), (640, 480), 600.0, 0.05), NoiseSpec(0.01, 0.002, seed=2))
    return rig, render_scene_tracks(rig, 150, (1.0, 4.0), NoiseSpec(seed=3))


def true_fundamental(rig, u, v):
    """F for views u -> v from the ground-truth cameras."""
    Ku, Kv = rig.K_true[u].matrix, rig.K_true[v].matrix
    pu, pv = rig.poses_true[u], rig.poses_true[v]
    R = pv.R @ pu.R.T
    t = pv.tvec - R @ pu.tvec
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    F = np.linalg.inv(Kv).T @ tx @ R @ np.linalg.inv(Ku)
    return F / np.linalg.norm(F)


# ----- Chain order ---------------------------------------------------------


def test_chain_order_is_boustrophedon_from_reference_corner():
    assert chain_order(ViewGrid(3, 3, 0, 0)) == [0, 1, 2, 5, 4, 3, 6, 7, 8]
    assert chain_order(ViewGrid(2, 3, 1, 2)) == [5, 4, 3, 0, 1, 2]
    assert chain_order(ViewGrid(1, 4, 0, 3)) == [3, 2, 1, 0]


@given(st.integers(1, 6), st.integers(1, 6), st.data())
@settings(max_examples=60, deadline=None)
def test_chain_visits_every_view_through_neighbours(a, b, data):
    g = ViewGrid(a, b, data.draw(st.integers(0, a - 1)), data.draw(st.integers(0, b - 1)))
    order = chain_order(g)
    assert sorted(order) == list(range(g.n_views))
    for u, v in chain_pairs(g):
        (au, bu), (av, bv) = g.position(u), g.position(v)
        assert abs(au - av) + abs(bu - bv) == 1


# ----- Dedup ---------------------------------------------------------------


def test_dedup_threshold_examples():
    assert np.array_equal(deduplicate_features([[10, 10], [10.5, 10.5]]), [[10, 10]])
    assert len(deduplicate_features([[10, 10], [12, 12]])) == 2


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_dedup_output_is_separated_and_greedy(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 20, size=(150, 2))
    keep = dedup_indices(pts)
    kept = pts[keep]
    d = np.linalg.norm(kept[:, None] - kept[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= np.sqrt(2)
    # brute-force greedy oracle
    oracle = []
    for i, p in enumerate(pts):
        if all(np.linalg.norm(p - pts[j]) >= np.sqrt(2) for j in oracle):
            oracle.append(i)
    assert list(keep) == oracle


# ----- Chain matching ------------------------------------------------------


def test_chain_match_exact_matches_keep_everything(scene):
    rig, sc = scene
    tracks = chain_match(sc.features, rig.grid)
    assert len(tracks) == 150
    for t in tracks:
        owner = sc.feature_point[chain_order(rig.grid)[0]][t.id]
        assert np.allclose(t.obs, sc.tracks[owner].obs)


def test_chain_match_drops_track_with_missing_link(scene):
    rig, sc = scene
    fs = sc.features
    u, v = chain_pairs(rig.grid)[3]
    m = dict(fs.matches)
    m[(u, v)] = m[(u, v)][1:]
    tracks = chain_match(FeatureSet(fs.features, m), rig.grid)
    assert len(tracks) == 149


def test_chain_match_with_spurious_matches_equals_ground_truth(scene):
    rig, _ = scene
    sc = render_scene_tracks(rig, 150, (1.0, 4.0), NoiseSpec(seed=4), spurious_fraction=0.1)
    tracks = chain_match(sc.features, rig.grid)
    first = chain_order(rig.grid)[0]
    for t in tracks:
        owner = sc.feature_point[first][t.id]
        assert np.array_equal(t.obs, sc.tracks[owner].obs)
    # ground-truth consistent set: every true match along the chain is unambiguous
    good = set()
    for ti in range(150):
        ok = True
        for u, v in chain_pairs(rig.grid):
            pu = np.flatnonzero(sc.feature_point[u] == ti)[0]
            pairs = sc.features.pair(u, v)
            hits_u = np.sum(pairs[:, 0] == pu)
            pv = np.flatnonzero(sc.feature_point[v] == ti)[0]
            hits_v = np.sum(pairs[:, 1] == pv)
            ok &= hits_u == 1 and hits_v == 1
        if ok:
            good.add(ti)
    assert {int(sc.feature_point[first][t.id]) for t in tracks} == good


def test_chain_match_empty_pair_raises(scene):
    rig, sc = scene
    m = dict(sc.features.matches)
    m[chain_pairs(rig.grid)[0]] = np.zeros((0, 2), dtype=int)
    with pytest.raises(EmptyChain):
        chain_match(FeatureSet(sc.features.features, m), rig.grid)


def test_tracks_to_feature_set_round_trip():
    g = ViewGrid(1, 3)
    cand = {7: {0: (1.0, 2.0), 1: (3.0, 4.0), 2: (5.0, 6.0)}, 9: {0: (8.0, 8.0), 2: (9.0, 9.0)}}
    tracks = chain_match(tracks_to_feature_set(cand, g), g)
    assert len(tracks) == 1
    assert np.array_equal(tracks[0].obs, [[1, 2], [3, 4], [5, 6]])


# ----- Fundamental matrix --------------------------------------------------


def test_eight_point_is_rank_two_and_unit_norm(scene):
    rig, sc = scene
    F = eight_point(sc.clean_obs[:, 0], sc.clean_obs[:, 1])
    assert np.isclose(np.linalg.norm(F), 1.0)
    assert np.linalg.svd(F, compute_uv=False)[2] < 1e-12


def test_ransac_noiseless_all_inliers_and_algebraic_residual(scene):
    rig, sc = scene
    x1, x2 = sc.clean_obs[:, 0], sc.clean_obs[:, 1]
    F, mask = estimate_fundamental_ransac(x1, x2)
    assert mask.all()
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    assert np.max(np.abs(np.einsum("ij,jk,ik->i", h2, F, h1))) < 1e-9
    Ft = true_fundamental(rig, 0, 1)
    assert min(np.abs(F - Ft).max(), np.abs(F + Ft).max()) < 1e-8


def test_ransac_recovers_clean_subset_exactly(scene):
    rig, sc = scene
    rng = np.random.default_rng(8)
    x1, x2 = sc.clean_obs[:, 0].copy(), sc.clean_obs[:, 1].copy()
    Ft = true_fundamental(rig, 0, 1)
    bad = rng.choice(len(x1), int(0.3 * len(x1)), replace=False)
    for i in bad:
        while True:
            cand = rng.uniform([0, 0], [639, 479])
            if sampson_distance(Ft, x1[i : i + 1], cand[None])[0] > 20.0:
                x2[i] = cand
                break
    _, mask = estimate_fundamental_ransac(x1, x2, seed=1)
    truth = np.ones(len(x1), dtype=bool)
    truth[bad] = False
    assert np.array_equal(mask, truth)


def test_ransac_too_few_and_no_consensus():
    rng = np.random.default_rng(0)
    with pytest.raises(InsufficientMatches):
        estimate_fundamental_ransac(rng.uniform(size=(7, 2)), rng.uniform(size=(7, 2)))
    with pytest.raises(NoConsensus):
        estimate_fundamental_ransac(rng.uniform(0, 500, (200, 2)), rng.uniform(0, 500, (200, 2)), threshold=0.01, max_iterations=200)


def test_ransac_is_deterministic_under_seed(scene):
    _, sc = scene
    x1 = sc.clean_obs[:, 0] + np.random.default_rng(1).normal(0, 0.5, (150, 2))
    a = estimate_fundamental_ransac(x1, sc.clean_obs[:, 2], seed=5)
    b = estimate_fundamental_ransac(x1, sc.clean_obs[:, 2], seed=5)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# ----- Epipolar filter -----------------------------------------------------


def test_epipolar_filter_keeps_clean_and_small_noise(scene):
    rig, sc = scene
    assert len(epipolar_filter(sc.tracks, rig.grid)) == 150
    noisy = render_scene_tracks(rig, 150, (1.0, 4.0), NoiseSpec(pixel_sigma=0.1, seed=3))
    assert len(epipolar_filter(noisy.tracks, rig.grid)) == 150


def test_epipolar_filter_removes_off_line_observation(scene):
    rig, sc = scene
    tracks = [Track(t.id, t.obs.copy()) for t in sc.tracks]
    u, v = chain_pairs(rig.grid)[2]
    F = true_fundamental(rig, u, v)
    x1 = tracks[5].obs[u]
    line = F @ np.append(x1, 1.0)
    normal = line[:2] / np.linalg.norm(line[:2])
    tracks[5].obs[v] = tracks[5].obs[v] + 20.0 * normal
    kept = epipolar_filter(tracks, rig.grid)
    assert len(kept) == 149 and tracks[5].id not in {t.id for t in kept}


def test_epipolar_filter_needs_eight_tracks(scene):
    rig, sc = scene
    with pytest.raises(InsufficientMatches):
        epipolar_filter(sc.tracks[:7], rig.grid)
