"""Pinhole + radial distortion camera model, Rodrigues conversions, projection
and SVD triangulation.

Conventions used throughout the package:

* A pose maps world (or reference-view) coordinates into the view frame,
  ``X_view = R @ X + t`` where ``R = rodrigues_to_matrix(rvec)``.
* Pixel coordinates place pixel centres on integer positions.
* Distortion is applied in pixel space around an explicit centre, which
  defaults to the principal point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    DegenerateDepth,
    DegenerateGeometry,
    DimensionMismatch,
    EmptyInput,
    InsufficientPoints,
    NoConvergence,
    NotARotation,
)

# |w| at or below this is treated as a point on the principal plane / at infinity.
DEPTH_EPS = 1e-12

UNDISTORT_MAX_ITER = 50
UNDISTORT_TOL = 1e-9


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class IntrinsicMatrix:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.all(np.isfinite([self.cx, self.cy, self.skew])):
            raise ValueError("principal point and skew must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_matrix(cls, K: np.ndarray) -> "IntrinsicMatrix":
        K = np.asarray(K, dtype=float)
        K = K / K[2, 2]
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), float(K[0, 1]))


@dataclass(frozen=True)
class RadialDistortion:
    """Two-coefficient radial model, ``p_d = c + (p - c) * (1 + k1 r^2 + k2 r^4)``.

    Coefficients are in pixel units (``k1`` in px^-2, ``k2`` in px^-4).
    """

    k1: float
    k2: float
    center_x: float
    center_y: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.k1, self.k2, self.center_x, self.center_y])):
            raise ValueError("distortion parameters must be finite")

    @classmethod
    def identity(cls, center_x: float = 0.0, center_y: float = 0.0) -> "RadialDistortion":
        return cls(0.0, 0.0, center_x, center_y)

    @classmethod
    def at_principal_point(cls, K: IntrinsicMatrix, k1: float = 0.0, k2: float = 0.0) -> "RadialDistortion":
        return cls(k1, k2, K.cx, K.cy)

    @property
    def is_identity(self) -> bool:
        return self.k1 == 0.0 and self.k2 == 0.0

    @property
    def center(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y])


@dataclass(frozen=True)
class ViewPose:
    rvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tvec: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rvec", _readonly(self.rvec).reshape(3))
        object.__setattr__(self, "tvec", _readonly(self.tvec).reshape(3))

    @classmethod
    def zero(cls) -> "ViewPose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "ViewPose":
        return cls(matrix_to_rodrigues(R), t)

    @property
    def R(self) -> np.ndarray:
        return rodrigues_to_matrix(self.rvec)

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.rvec) or np.any(self.tvec))

    def __eq__(self, other):
        if not isinstance(other, ViewPose):
            return NotImplemented
        return np.array_equal(self.rvec, other.rvec) and np.array_equal(self.tvec, other.tvec)

    def __hash__(self):
        return hash((self.rvec.tobytes(), self.tvec.tobytes()))


@dataclass(frozen=True)
class ViewGrid:
    """Row-major layout of the light-field views; view ``i`` sits at
    row ``i // cols_b`` and column ``i % cols_b``."""

    rows_a: int
    cols_b: int
    ref_a: int = 0
    ref_b: int = 0

    def __post_init__(self):
        if self.rows_a < 1 or self.cols_b < 1:
            raise ValueError("grid dimensions must be positive")
        if not (0 <= self.ref_a < self.rows_a and 0 <= self.ref_b < self.cols_b):
            raise ValueError(f"reference ({self.ref_a},{self.ref_b}) outside {self.rows_a}x{self.cols_b} grid")

    @property
    def n_views(self) -> int:
        return self.rows_a * self.cols_b

    @property
    def reference_index(self) -> int:
        return self.ref_a * self.cols_b + self.ref_b

    def position(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.n_views:
            raise IndexError(f"view index {i} out of range for {self.n_views} views")
        return i // self.cols_b, i % self.cols_b

    def index(self, a: int, b: int) -> int:
        return a * self.cols_b + b

    def offset(self, i: int) -> tuple[int, int]:
        """Grid offset of the reference relative to view ``i``: ``(â - ā, b̂ - b̄)``."""
        a, b = self.position(i)
        return self.ref_a - a, self.ref_b - b


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rodrigues_batch(rvecs: np.ndarray) -> np.ndarray:
    """Vectorised axis-angle -> rotation matrix, ``(n, 3) -> (n, 3, 3)``."""
    r = np.asarray(rvecs, dtype=float).reshape(-1, 3)
    theta2 = np.einsum("ij,ij->i", r, r)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0 + theta2**2 / 120.0, np.sin(safe) / safe)
    half = np.sin(0.5 * safe)
    b = np.where(small, 0.5 - theta2 / 24.0 + theta2**2 / 720.0, 2.0 * half * half / (safe * safe))
    K = np.zeros((len(r), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -r[:, 2], r[:, 1]
    K[:, 1, 0], K[:, 1, 2] = r[:, 2], -r[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -r[:, 1], r[:, 0]
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def rodrigues_to_matrix(rvec) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (direction = axis, norm = angle)."""
    return rodrigues_batch(np.asarray(rvec, dtype=float).reshape(1, 3))[0]


def matrix_to_rodrigues(R) -> np.ndarray:
    """Axis-angle vector with angle in ``[0, pi]`` for a rotation matrix.

    Uses the antisymmetric part away from ``pi`` and the symmetric part near
    it, where the antisymmetric part vanishes.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NotARotation("expected a finite 3x3 matrix")
    if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6 or np.linalg.det(R) <= 0:
        raise NotARotation("matrix is not orthonormal with positive determinant")

    c = 0.5 * (np.trace(R) - 1.0)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(v)
    theta = np.arctan2(s, c)
    if c > -0.9:
        if theta < 1e-6:
            return v * (1.0 + theta * theta / 6.0)
        return v * (theta / s)
    S = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.linalg.norm(S[:, k])
    if axis @ v < 0:
        axis = -axis
    return theta * axis


# ---------------------------------------------------------------------------
# Distortion
# ---------------------------------------------------------------------------


def apply_distortion(points, d: RadialDistortion) -> np.ndarray:
    """Map ideal pixel coordinates to distorted ones. Accepts ``(2,)`` or ``(n, 2)``."""
    p = np.asarray(points, dtype=float)
    if d.is_identity:
        return p.copy()
    c = d.center
    q = p - c
    r2 = np.sum(q * q, axis=-1, keepdims=True)
    return c + q * (1.0 + d.k1 * r2 + d.k2 * r2 * r2)


def remove_distortion(points, d: RadialDistortion) -> np.ndarray:
    """Invert :func:`apply_distortion` by Newton iteration on the radius.

    Raises:
        NoConvergence: the radial map is not invertible at some point or the
            iteration did not settle within ``UNDISTORT_MAX_ITER`` steps.
    """
    p = np.asarray(points, dtype=float)
    if d.is_identity:
        return p.copy()
    c = d.center
    q = p - c
    rd = np.sqrt(np.sum(q * q, axis=-1))
    ru = rd.copy()
    for _ in range(UNDISTORT_MAX_ITER):
        ru2 = ru * ru
        f = ru * (1.0 + d.k1 * ru2 + d.k2 * ru2 * ru2) - rd
        df = 1.0 + 3.0 * d.k1 * ru2 + 5.0 * d.k2 * ru2 * ru2
        if np.any(df <= 0):
            raise NoConvergence("radial distortion is not invertible in this domain")
        step = f / df
        ru = ru - step
        if np.all(np.abs(step) < UNDISTORT_TOL):
            break
    else:
        raise NoConvergence(f"undistortion did not converge in {UNDISTORT_MAX_ITER} iterations")
    scale = np.divide(ru, rd, out=np.ones_like(rd), where=rd > 0)
    return c + q * scale[..., None]


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def compose_projection(K: IntrinsicMatrix, pose: ViewPose) -> np.ndarray:
    """``P = K [R | t]`` as a 3x4 array."""
    return K.matrix @ np.hstack([pose.R, pose.tvec.reshape(3, 1)])


def decompose_projection(P: np.ndarray) -> tuple[IntrinsicMatrix, np.ndarray, np.ndarray]:
    """RQ-decompose a finite projection matrix into ``(K, R, t)`` with
    positive focal lengths and ``det(R) = +1``."""
    P = np.asarray(P, dtype=float)
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    K, R = linalg.rq(M)
    signs = np.sign(np.diag(K))
    signs[signs == 0] = 1.0
    K = K * signs
    R = signs[:, None] * R
    t = np.linalg.solve(K, P[:, 3])
    return IntrinsicMatrix.from_matrix(K), R, t


def project_points(P: np.ndarray, X, d: RadialDistortion | None = None) -> np.ndarray:
    """Project world points ``(3,)`` or ``(n, 3)`` through ``P`` and apply distortion.

    Raises:
        DegenerateDepth: a point lies on the principal plane of the camera.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    Xn = X.reshape(-1, 3)
    m = Xn @ P[:, :3].T + P[:, 3]
    w = m[:, 2]
    if np.any(np.abs(w) <= DEPTH_EPS):
        raise DegenerateDepth("point lies on the camera principal plane")
    px = m[:, :2] / w[:, None]
    if d is not None:
        px = apply_distortion(px, d)
    return px[0] if single else px


project_point = project_points


def project(X, K: IntrinsicMatrix, d: RadialDistortion | None, pose: ViewPose) -> np.ndarray:
    return project_points(compose_projection(K, pose), X, d)


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


def _dlt_system(points: np.ndarray, Ps: np.ndarray) -> np.ndarray:
    # points (..., N, 2), Ps (N, 3, 4) -> A (..., 2N, 4) with unit rows
    x = points[..., 0:1]
    y = points[..., 1:2]
    rows_x = x * Ps[:, 2, :] - Ps[:, 0, :]
    rows_y = y * Ps[:, 2, :] - Ps[:, 1, :]
    A = np.stack([rows_x, rows_y], axis=-2)  # (..., N, 2, 4)
    A = A.reshape(*A.shape[:-3], -1, 4)
    return A / np.linalg.norm(A, axis=-1, keepdims=True)


def triangulate_track(points, projections) -> np.ndarray:
    """Linear multi-view triangulation of one track.

    Args:
        points: ``(N, 2)`` pinhole pixel observations, one per view.
        projections: ``(N, 3, 4)`` projection matrices.

    Returns:
        The 3D point minimising ``|A X|`` with ``|X| = 1``, dehomogenised.
    """
    pts = np.asarray(points, dtype=float)
    Ps = np.asarray(projections, dtype=float)
    if len(pts) < 2:
        raise InsufficientPoints("triangulation needs at least two observations")
    if len(pts) != len(Ps):
        raise DimensionMismatch("one projection matrix per observation is required")
    A = _dlt_system(pts, Ps)
    _, s, vt = np.linalg.svd(A)
    if s[-2] - s[-1] <= 1e-12 * s[0]:
        raise DegenerateGeometry("triangulation is ambiguous (no parallax)")
    X = vt[-1]
    if abs(X[3]) <= DEPTH_EPS:
        raise DegenerateGeometry("triangulated point is at infinity")
    return X[:3] / X[3]


def triangulate_tracks(points, projections) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`triangulate_track` for ``(M, N, 2)`` observations.

    Returns ``(X, valid)``; degenerate tracks get NaN coordinates and
    ``valid = False`` instead of raising.
    """
    pts = np.asarray(points, dtype=float)
    Ps = np.asarray(projections, dtype=float)
    A = _dlt_system(pts, Ps)
    _, s, vt = np.linalg.svd(A)
    Xh = vt[:, -1, :]
    valid = (s[:, -2] - s[:, -1] > 1e-12 * s[:, 0]) & (np.abs(Xh[:, 3]) > DEPTH_EPS)
    w = np.where(valid, Xh[:, 3], 1.0)
    X = Xh[:, :3] / w[:, None]
    X[~valid] = np.nan
    return X, valid


def reprojection_error_rms(points_2d, points_3d, K: IntrinsicMatrix, d: RadialDistortion | None, pose: ViewPose) -> float:
    """Root mean square of point-wise Euclidean reprojection distances."""
    m = np.asarray(points_2d, dtype=float).reshape(-1, 2)
    X = np.asarray(points_3d, dtype=float).reshape(-1, 3)
    if len(m) == 0:
        raise EmptyInput("no points given")
    if len(m) != len(X):
        raise DimensionMismatch(f"{len(m)} image points vs {len(X)} world points")
    proj = project(X, K, d, pose)
    return float(np.sqrt(np.mean(np.sum((proj - m) ** 2, axis=1))))
