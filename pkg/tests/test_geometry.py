import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from lfcal.errors import (
    DegenerateDepth,
    DegenerateGeometry,
    DimensionMismatch,
    EmptyInput,
    InsufficientPoints,
    NoConvergence,
    NotARotation,
)
from lfcal.geometry import (
    IntrinsicMatrix,
    RadialDistortion,
    ViewGrid,
    ViewPose,
    apply_distortion,
    compose_projection,
    decompose_projection,
    matrix_to_rodrigues,
    project,
    project_points,
    remove_distortion,
    reprojection_error_rms,
    rodrigues_batch,
    rodrigues_to_matrix,
    triangulate_track,
    triangulate_tracks,
)

K0 = IntrinsicMatrix(800.0, 780.0, 320.0, 240.0)


def random_rvecs(rng, n):
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return axes * rng.uniform(0, np.pi, size=(n, 1))


# ----- Rodrigues -----------------------------------------------------------


def test_rodrigues_zero_is_identity():
    assert np.array_equal(rodrigues_to_matrix([0, 0, 0]), np.eye(3))
    assert np.array_equal(matrix_to_rodrigues(np.eye(3)), np.zeros(3))


def test_rodrigues_quarter_turn_about_z():
    R = rodrigues_to_matrix([0, 0, np.pi / 2])
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rodrigues_matches_quaternion_oracle():
    rng = np.random.default_rng(0)
    r = random_rvecs(rng, 2000)
    ours = rodrigues_batch(r)
    oracle = Rotation.from_rotvec(r).as_matrix()
    assert np.max(np.abs(ours - oracle)) < 1e-12


def test_rodrigues_round_trip_ten_thousand_cases():
    rng = np.random.default_rng(1)
    r = random_rvecs(rng, 10_000)
    # include the hard regions explicitly
    r[:100] *= 1e-9
    r[100:200] = r[100:200] / np.linalg.norm(r[100:200], axis=1, keepdims=True) * (np.pi - 1e-7)
    Rs = rodrigues_batch(r)
    err = 0.0
    for R in Rs:
        back = rodrigues_to_matrix(matrix_to_rodrigues(R))
        err = max(err, np.max(np.abs(back - R)))
    assert err < 1e-9


def test_rodrigues_inverse_agrees_with_oracle_near_pi():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    for theta in (np.pi - 1e-3, np.pi - 1e-8, np.pi):
        R = Rotation.from_rotvec(theta * axis).as_matrix()
        r = matrix_to_rodrigues(R)
        assert np.isclose(np.linalg.norm(r), theta, atol=1e-7)
        assert np.allclose(rodrigues_to_matrix(r), R, atol=1e-12)


@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
@settings(max_examples=200, deadline=None)
def test_rodrigues_is_orthonormal(v):
    R = rodrigues_to_matrix(v)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_matrix_to_rodrigues_rejects_non_rotations():
    with pytest.raises(NotARotation):
        matrix_to_rodrigues(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(NotARotation):
        matrix_to_rodrigues(2 * np.eye(3))
    with pytest.raises(NotARotation):
        matrix_to_rodrigues(np.eye(2))


# ----- Distortion ----------------------------------------------------------


def test_identity_distortion_is_noop():
    p = np.array([[10.0, 20.0], [300.0, 40.0]])
    d = RadialDistortion.identity(320, 240)
    assert np.array_equal(apply_distortion(p, d), p)
    assert np.array_equal(remove_distortion(p, d), p)


def test_distortion_closed_form():
    d = RadialDistortion(1e-6, 1e-12, 100.0, 50.0)
    p = np.array([110.0, 70.0])
    r2 = 10.0**2 + 20.0**2
    expected = np.array([100.0, 50.0]) + np.array([10.0, 20.0]) * (1 + 1e-6 * r2 + 1e-12 * r2**2)
    assert np.allclose(apply_distortion(p, d), expected, rtol=0, atol=1e-12)


def test_centre_is_fixed_point():
    d = RadialDistortion(-3e-7, 2e-13, 321.5, 237.25)
    assert np.array_equal(apply_distortion(d.center, d), d.center)
    assert np.array_equal(remove_distortion(d.center, d), d.center)


@given(
    st.floats(-0.25, 0.25),
    st.floats(-0.05, 0.05),
    st.floats(0, 639),
    st.floats(0, 479),
)
@settings(max_examples=300, deadline=None)
def test_distortion_round_trip(k1n, k2n, x, y):
    s = 0.5 * np.hypot(640, 480)
    d = RadialDistortion(k1n / s**2, k2n / s**4, 320.0, 240.0)
    p = np.array([[x, y]])
    try:
        q = apply_distortion(p, d)
        back = remove_distortion(q, d)
    except NoConvergence:
        # only legitimate where the forward map folds over
        r2 = np.sum((p - d.center) ** 2)
        assert 1 + 3 * d.k1 * r2 + 5 * d.k2 * r2 * r2 <= 0.2
        return
    assert np.max(np.abs(back - p)) < 1e-6


def test_undistortion_reports_fold_over():
    d = RadialDistortion(-1e-5, 0.0, 0.0, 0.0)
    with pytest.raises(NoConvergence):
        remove_distortion(np.array([[400.0, 0.0]]), d)


# ----- Projection ----------------------------------------------------------


def test_compose_decompose_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(50):
        K = IntrinsicMatrix(*rng.uniform([300, 300, 100, 100, -2], [1200, 1200, 600, 500, 2]))
        pose = ViewPose(random_rvecs(rng, 1)[0], rng.normal(size=3))
        P = compose_projection(K, pose)
        K2, R2, t2 = decompose_projection(P * rng.uniform(-5, 5))
        assert np.allclose(K2.matrix, K.matrix, rtol=1e-10, atol=1e-8)
        assert np.allclose(R2, pose.R, atol=1e-10)
        assert np.allclose(t2, pose.tvec, atol=1e-9)


def test_identity_pose_projection():
    X = np.array([0.1, -0.2, 2.0])
    px = project(X, K0, None, ViewPose.zero())
    assert np.allclose(px, [320 + 800 * 0.05, 240 - 780 * 0.1])


def test_project_points_depth_zero_raises():
    with pytest.raises(DegenerateDepth):
        project_points(compose_projection(K0, ViewPose.zero()), [1.0, 1.0, 0.0])


def test_projection_applies_distortion():
    d = RadialDistortion.at_principal_point(K0, 1e-7)
    X = np.array([[0.3, 0.2, 1.5]])
    P = compose_projection(K0, ViewPose.zero())
    assert np.allclose(project_points(P, X, d), apply_distortion(project_points(P, X), d))


def test_reprojection_error_rms_errors_and_value():
    X = np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0]])
    m = project(X, K0, None, ViewPose.zero()) + [[3.0, 4.0], [0.0, 0.0]]
    assert np.isclose(reprojection_error_rms(m, X, K0, None, ViewPose.zero()), np.sqrt(25 / 2))
    with pytest.raises(EmptyInput):
        reprojection_error_rms(np.zeros((0, 2)), np.zeros((0, 3)), K0, None, ViewPose.zero())
    with pytest.raises(DimensionMismatch):
        reprojection_error_rms(m, X[:1], K0, None, ViewPose.zero())


# ----- Triangulation -------------------------------------------------------


def test_two_view_triangulation_matches_disparity_formula():
    f, b = 800.0, 0.05
    K = IntrinsicMatrix(f, f, 320.0, 240.0)
    P0 = compose_projection(K, ViewPose.zero())
    P1 = compose_projection(K, ViewPose(np.zeros(3), [-b, 0, 0]))
    rng = np.random.default_rng(3)
    for _ in range(100):
        X = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), rng.uniform(0.5, 5.0)])
        x0, x1 = project_points(P0, X), project_points(P1, X)
        disparity = x0[0] - x1[0]
        Z = f * b / disparity
        closed = np.array([(x0[0] - 320) * Z / f, (x0[1] - 240) * Z / f, Z])
        est = triangulate_track([x0, x1], [P0, P1])
        assert np.max(np.abs(est - closed)) < 1e-9


def test_batched_triangulation_agrees_with_single():
    rng = np.random.default_rng(4)
    Ps = np.stack([compose_projection(K0, ViewPose(rng.normal(0, 0.02, 3), [0.05 * i, 0.01 * i, 0])) for i in range(5)])
    X = rng.uniform([-0.5, -0.5, 1], [0.5, 0.5, 4], size=(20, 3))
    obs = np.stack([project_points(P, X) for P in Ps], axis=1)
    Xb, valid = triangulate_tracks(obs, Ps)
    assert valid.all()
    for m in range(20):
        assert np.allclose(Xb[m], triangulate_track(obs[m], Ps), atol=1e-12)
    assert np.max(np.abs(Xb - X)) < 1e-9


def test_triangulation_errors():
    P = compose_projection(K0, ViewPose.zero())
    with pytest.raises(InsufficientPoints):
        triangulate_track([[1.0, 2.0]], [P])
    with pytest.raises(DegenerateGeometry):
        triangulate_track([[330.0, 250.0], [330.0, 250.0]], [P, P])
    _, valid = triangulate_tracks(np.array([[[330.0, 250.0], [330.0, 250.0]]]), np.stack([P, P]))
    assert not valid[0]


# ----- Types ---------------------------------------------------------------


def test_grid_positions_are_row_major():
    g = ViewGrid(3, 4, 1, 2)
    assert g.n_views == 12
    assert g.reference_index == 6
    assert g.position(7) == (1, 3)
    assert g.index(*g.position(11)) == 11
    assert g.offset(g.reference_index) == (0, 0)
    assert g.offset(0) == (1, 2)
    with pytest.raises(ValueError):
        ViewGrid(2, 2, 2, 0)
    with pytest.raises(IndexError):
        g.position(12)


def test_view_pose_value_semantics():
    a = ViewPose([0.1, 0, 0], [1, 2, 3])
    b = ViewPose(np.array([0.1, 0, 0]), (1, 2, 3))
    assert a == b and hash(a) == hash(b)
    assert a != ViewPose.zero()
    assert ViewPose.zero().is_zero
    with pytest.raises(ValueError):
        a.rvec[0] = 2.0


def test_intrinsics_reject_non_positive_focal():
    with pytest.raises(ValueError):
        IntrinsicMatrix(0.0, 1.0, 0.0, 0.0)
    assert IntrinsicMatrix.from_matrix(3 * K0.matrix) == K0
