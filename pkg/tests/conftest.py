import numpy as np
import pytest

from lfcal.calibration import CheckerboardSpec
from lfcal.geometry import ViewGrid
from lfcal.synthetic import (
    NoiseSpec,
    jitter_intrinsics,
    make_rig,
    perturb_rig,
    render_pattern_frames,
    sample_pattern_placements,
)

SPEC = CheckerboardSpec(9, 6, 0.025)


def distorted_rig(rows=2, cols=2, ref=(0, 0), size=(640, 480), focal=600.0, baseline=0.02, seed=1):
    rig = make_rig(ViewGrid(rows, cols, *ref), size, focal, baseline)
    rig = jitter_intrinsics(rig, 5.0, 3.0, k1=-0.05, k2=0.01, seed=seed)
    return perturb_rig(rig, NoiseSpec(rot_z_sigma=0.01, trans_sigma=0.001, seed=seed + 1))


@pytest.fixture(scope="session")
def small_dataset():
    """2x2 distorted rig observing 12 target placements without noise."""
    rig = distorted_rig()
    placements = sample_pattern_placements(rig, SPEC, 12, seed=5)
    obs = render_pattern_frames(rig, SPEC, placements)
    return rig, placements, obs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rectified_positions(rig, luts, X):
    """Destination pixels of reference-frame points in every remapped view.

    Points are projected through the true (distorted) cameras and then located
    in each table by inverting it; shape is (views, points, 2).
    """
    from lfcal.rectification import invert_lut

    out = []
    for i, lut in enumerate(luts):
        src, _ = rig.project(i, X)
        out.append(invert_lut(lut, src))
    return np.stack(out)


def predicted_rectified(rect, rig, X):
    """Closed-form rectified pixels: K_r (R_r X + R_bar_i t_i) per view."""
    out = []
    for i, pose in enumerate(rig.poses_true):
        q = (np.asarray(X) @ rect.R_r.T + rect.per_view_R_bar[i] @ pose.tvec) @ rect.K_r.matrix.T
        out.append(q[:, :2] / q[:, 2:])
    return np.stack(out)


# ----- Acceptance reporting ------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or (rep.when != "call" and not rep.failed):
        return
    n, title = m.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    prev = _CRITERIA.get(n)
    ok = rep.passed and (prev is None or prev[1])
    _CRITERIA[n] = (title, ok, detail or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
