import csv
import io

import numpy as np
import pytest

from lfcal.calibration import calibrate_lightfield
from lfcal.errors import EmptyFrustum, PatternNotVisible
from lfcal.geometry import ViewGrid, ViewPose
from lfcal.refinement import triangulation_filter
from lfcal.matching import epipolar_filter
from lfcal.synthetic import (
    SWEEP_COLUMNS,
    NoiseSpec,
    make_rig,
    noise_sweep,
    pattern_coverage,
    perturb_rig,
    render_pattern_frames,
    render_scene_tracks,
    sample_pattern_placements,
    sample_scene_points,
    sweep_csv,
)

from conftest import SPEC


def test_make_rig_configurations():
    real = make_rig(ViewGrid(4, 4, 0, 0), (960, 960), 850.0, 0.018)
    assert real.K_true[5].fx == 850.0 and real.K_true[5].cx == 480.0
    assert np.allclose(real.poses_true[real.grid.index(1, 2)].tvec, [-0.036, -0.018, 0])
    bench = make_rig(ViewGrid(5, 5, 2, 2), (512, 512), 512.0, 0.1)
    assert bench.grid.n_views == 25 and bench.poses_true[12].is_zero
    stereo = make_rig(ViewGrid(1, 2, 0, 0), (64, 48), 50.0, 0.1)
    assert np.array_equal(stereo.poses_true[1].tvec, [-0.1, 0, 0])
    for p in bench.poses_true:
        assert np.array_equal(p.rvec, np.zeros(3))
    assert bench.rectified() == bench
    with pytest.raises(ValueError):
        make_rig(ViewGrid(1, 2), (64, 48), 0.0, 0.1)


def test_perturb_zero_noise_and_determinism():
    rig = make_rig(ViewGrid(3, 3, 1, 1), (320, 240), 300.0, 0.05)
    assert perturb_rig(rig, NoiseSpec()) == rig
    a = perturb_rig(rig, NoiseSpec(0.01, 0.001, seed=3))
    b = perturb_rig(rig, NoiseSpec(0.01, 0.001, seed=3))
    assert a == b
    assert a.poses_true[4] == rig.poses_true[4]
    for pa, p in zip(a.poses_true, rig.poses_true):
        assert pa.rvec[0] == 0 and pa.rvec[1] == 0
        assert pa.tvec[2] == p.tvec[2]
    with pytest.raises(ValueError):
        NoiseSpec(rot_z_sigma=-1)
    with pytest.raises(ValueError):
        NoiseSpec(outlier_fraction=1.5)


def test_perturb_rotation_statistics():
    rig = make_rig(ViewGrid(1, 2, 0, 0), (64, 48), 50.0, 0.1)
    z = [perturb_rig(rig, NoiseSpec(rot_z_sigma=0.01, seed=s)).poses_true[1].rvec[2] for s in range(1000)]
    assert abs(np.std(z) - 0.01) < 0.001
    assert abs(np.mean(z)) < 0.001


def test_lens_shift_moves_principal_point():
    rig = make_rig(ViewGrid(1, 2, 0, 0), (64, 48), 50.0, 0.1)
    a = perturb_rig(rig, NoiseSpec(trans_sigma=1e-3, seed=1))
    b = perturb_rig(rig, NoiseSpec(trans_sigma=1e-3, seed=1), lens_shift_ppu=1000.0)
    dt = a.poses_true[1].tvec - rig.poses_true[1].tvec
    assert np.allclose([b.K_true[1].cx - 32, b.K_true[1].cy - 24], -1000.0 * dt[:2])
    assert (b.d_true[1].center_x, b.d_true[1].center_y) == (b.K_true[1].cx, b.K_true[1].cy)
    assert b.K_true[0] == rig.K_true[0]


def test_pattern_rendering_round_trips_through_calibration(small_dataset):
    rig, placements, obs = small_dataset
    assert len(obs) == len(placements) * rig.grid.n_views
    cal = calibrate_lightfield(obs, SPEC, rig.grid, rig.image_size)
    for est, true in zip(cal.poses_rel_reference, rig.poses_true):
        assert np.max(np.abs(est.tvec - true.tvec)) < 1e-6
    with pytest.raises(PatternNotVisible, match="placement 1"):
        render_pattern_frames(rig, SPEC, [placements[0], ViewPose([0, 0, 0], [0, 0, -1.0])])


def test_thirty_placements_cover_the_image(small_dataset):
    rig = small_dataset[0]
    placements = sample_pattern_placements(rig, SPEC, 30, seed=9)
    obs = render_pattern_frames(rig, SPEC, placements)
    cov = pattern_coverage(obs, rig.image_size)
    assert min(cov.values()) >= 0.8


def test_placement_sampling_is_deterministic(small_dataset):
    rig = small_dataset[0]
    assert sample_pattern_placements(rig, SPEC, 5, seed=1) == sample_pattern_placements(rig, SPEC, 5, seed=1)


def test_scene_tracks_clean_pass_filters():
    rig = make_rig(ViewGrid(3, 3, 1, 1), (640, 480), 600.0, 0.03)
    sc = render_scene_tracks(rig, 100, (0.5, 2.0))
    assert len(sc.tracks) == 100 and not sc.outlier.any()
    assert len(epipolar_filter(sc.tracks, rig.grid)) == 100
    assert np.all(sc.points[:, 2] >= 0.5) and np.all(sc.points[:, 2] <= 2.0)
    for v in range(9):
        assert rig.inside(sc.clean_obs[:, v]).all()
    a = render_scene_tracks(rig, 50, noise=NoiseSpec(pixel_sigma=0.3, outlier_fraction=0.1, seed=4))
    b = render_scene_tracks(rig, 50, noise=NoiseSpec(pixel_sigma=0.3, outlier_fraction=0.1, seed=4))
    assert np.array_equal(a.clean_obs, b.clean_obs)
    assert all(np.array_equal(x.obs, y.obs) for x, y in zip(a.tracks, b.tracks))
    assert a.outlier.sum() == 5
    for m in np.flatnonzero(a.outlier):
        assert np.max(np.linalg.norm(a.tracks[m].obs - a.clean_obs[m], axis=1)) >= 20.0


def test_outlier_labels_allow_filter_scoring():
    rig = make_rig(ViewGrid(3, 3, 1, 1), (640, 480), 600.0, 0.03)
    sc = render_scene_tracks(rig, 200, noise=NoiseSpec(pixel_sigma=0.1, outlier_fraction=0.1, seed=5))
    kept, _ = triangulation_filter(sc.tracks, rig.calibration())
    kept_ids = {t.id for t in kept}
    removed = [m for m in np.flatnonzero(sc.outlier) if m not in kept_ids]
    assert len(removed) / sc.outlier.sum() >= 0.95


def test_empty_frustum():
    rig = make_rig(ViewGrid(1, 2, 0, 0), (64, 48), 50.0, 10.0)
    with pytest.raises(EmptyFrustum):
        sample_scene_points(rig, 10, (0.1, 0.2), np.random.default_rng(0), max_tries=5)


def test_sweep_zero_noise_and_csv_columns():
    rig = make_rig(ViewGrid(2, 2, 0, 0), (320, 240), 300.0, 0.05)
    rows = noise_sweep(rig, {"trans": [0.0], "rotz": [0.0]}, trials=2, n_points=60)
    assert len(rows) == 4
    assert all(r["rms_before"] < 1e-9 and r["rms_after"] < 1e-9 for r in rows)
    text = sweep_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert tuple(parsed[0].keys()) == SWEEP_COLUMNS
    assert float(parsed[0]["rms_after"]) == rows[0]["rms_after"]
    assert text == sweep_csv(noise_sweep(rig, {"trans": [0.0], "rotz": [0.0]}, trials=2, n_points=60))
