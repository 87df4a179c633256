"""Common rectified camera, per-view rectifying rotations and remap tables."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .calibration import LightFieldCalibration, ViewCalibration
from .errors import DegenerateGrid, DimensionMismatch, EmptyInput
from .geometry import IntrinsicMatrix, ViewGrid, apply_distortion, rodrigues_to_matrix

SENTINEL = -1.0
ROTATION_SPREAD_WARN = 0.1  # rad
LUT_ROW_CHUNK = 256


class RotationSpreadWarning(UserWarning):
    """View rotations are too divergent for a plain average to be meaningful."""


@dataclass(frozen=True)
class RectificationResult:
    K_r: IntrinsicMatrix
    R_r: np.ndarray
    t_r: tuple
    per_view_P: tuple
    per_view_R_bar: tuple
    per_view_t_bar: tuple
    per_view_t_p: tuple
    r_r: np.ndarray


@dataclass(frozen=True, eq=False)
class LookupTable:
    """Destination-to-source map: ``map[y, x]`` is the source ``(x, y)``."""

    width: int
    height: int
    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map, dtype=float)
        if m.shape != (self.height, self.width, 2):
            raise DimensionMismatch(f"LUT map has shape {m.shape}, expected {(self.height, self.width, 2)}")
        object.__setattr__(self, "map", m)

    @classmethod
    def identity(cls, width: int, height: int) -> "LookupTable":
        ys, xs = np.mgrid[0:height, 0:width].astype(float)
        return cls(width, height, np.stack([xs, ys], axis=-1))

    @property
    def valid(self) -> np.ndarray:
        return ~np.all(self.map == SENTINEL, axis=-1)

    def retained_fraction(self) -> float:
        return float(self.valid.mean())

    def __eq__(self, other):
        if not isinstance(other, LookupTable):
            return NotImplemented
        return self.width == other.width and self.height == other.height and np.array_equal(self.map, other.map)


# ---------------------------------------------------------------------------
# Common camera
# ---------------------------------------------------------------------------


def common_intrinsics(per_view, w: float, h: float) -> IntrinsicMatrix:
    per_view = list(per_view)
    if not per_view:
        raise EmptyInput("no intrinsics to average")
    fx = float(np.mean([K.fx for K in per_view]))
    fy = float(np.mean([K.fy for K in per_view]))
    return IntrinsicMatrix(fx, fy, w / 2.0, h / 2.0)


def mean_rotation_vector(rvecs, denominator: int | None = None) -> np.ndarray:
    """Sum of all rotation vectors over ``N - 1`` (or ``denominator``)."""
    r = np.asarray(rvecs, dtype=float).reshape(-1, 3)
    if len(r) == 0:
        raise EmptyInput("no rotation vectors to average")
    denom = len(r) - 1 if denominator is None else denominator
    if denom <= 0:
        raise EmptyInput("rotation averaging needs at least two views")
    return r.sum(axis=0) / denom


def rotation_spread(rvecs, r_mean: np.ndarray) -> float:
    r = np.asarray(rvecs, dtype=float).reshape(-1, 3)
    nonzero = np.any(r != 0, axis=1)
    if not nonzero.any():
        return 0.0
    return float(np.max(np.linalg.norm(r[nonzero] - r_mean, axis=1)))


def _checked_mean_rotation(rvecs, denominator: int | None) -> np.ndarray:
    r_r = mean_rotation_vector(rvecs, denominator)
    spread = rotation_spread(rvecs, r_r)
    if spread > ROTATION_SPREAD_WARN:
        warnings.warn(
            f"rotation vectors spread {spread:.3f} rad around their mean; averaging may be unreliable",
            RotationSpreadWarning,
            stacklevel=3,
        )
    return r_r


def common_rotation(rvecs, denominator: int | None = None) -> np.ndarray:
    return rodrigues_to_matrix(_checked_mean_rotation(rvecs, denominator))


# ---------------------------------------------------------------------------
# Grid-proportional translations
# ---------------------------------------------------------------------------


def per_view_relative_translation(t_O, i: int, grid: ViewGrid) -> np.ndarray:
    """Per-unit-offset translation of view ``i``; zero along axes shared with the reference."""
    t = np.asarray(t_O, dtype=float)
    da, db = grid.offset(i)
    tx = t[0] / db if db != 0 else 0.0
    ty = t[1] / da if da != 0 else 0.0
    return np.array([tx, ty, 0.0])


def common_translation(t_V) -> tuple[float, float]:
    t = np.asarray(t_V, dtype=float).reshape(-1, 3)
    sx = int(np.count_nonzero(t[:, 0]))
    sy = int(np.count_nonzero(t[:, 1]))
    if sx == 0 or sy == 0:
        axis = "x" if sx == 0 else "y"
        raise DegenerateGrid(f"no view carries a nonzero {axis} translation component")
    return float(t[:, 0].sum() / sx), float(t[:, 1].sum() / sy)


def per_view_target_translation(t_r, i: int, grid: ViewGrid) -> np.ndarray:
    da, db = grid.offset(i)
    return np.array([t_r[0] * db, t_r[1] * da, 0.0])


def assemble_rectification(calib: LightFieldCalibration, K_r: IntrinsicMatrix, r_r, t_r) -> RectificationResult:
    """Per-view rectifying rotations and projection matrices for a given common camera."""
    grid = calib.grid
    r_r = np.array(r_r, dtype=float)
    R_r = rodrigues_to_matrix(r_r)
    Ps, Rb, tb, tp = [], [], [], []
    for i, pose in enumerate(calib.poses_rel_reference):
        t_p = per_view_target_translation(t_r, i, grid)
        R_bar = R_r.copy() if i == grid.reference_index else R_r @ pose.R.T
        t_bar = R_bar @ t_p
        Ps.append(K_r.matrix @ np.hstack([R_bar, t_bar[:, None]]))
        Rb.append(R_bar)
        tb.append(t_bar)
        tp.append(t_p)
    return RectificationResult(K_r, R_r, (float(t_r[0]), float(t_r[1])), tuple(Ps), tuple(Rb), tuple(tb), tuple(tp), r_r)


def rectified_projections(
    calib: LightFieldCalibration,
    w: float | None = None,
    h: float | None = None,
    rotation_denominator: int | None = None,
) -> RectificationResult:
    if w is None or h is None:
        w, h = calib.image_size
    K_r = common_intrinsics([v.K for v in calib.per_view], w, h)
    r_r = _checked_mean_rotation([p.rvec for p in calib.poses_rel_reference], rotation_denominator)
    t_V = [per_view_relative_translation(p.tvec, i, calib.grid) for i, p in enumerate(calib.poses_rel_reference)]
    t_r = common_translation(t_V)
    return assemble_rectification(calib, K_r, r_r, t_r)


# ---------------------------------------------------------------------------
# Look-up tables
# ---------------------------------------------------------------------------


def build_lut(view: ViewCalibration, R_bar: np.ndarray, K_r: IntrinsicMatrix, size) -> LookupTable:
    """Inverse warp of one view: rectified pixel -> distorted source pixel.

    Each destination pixel is back-projected through ``K_r``, rotated by
    ``R_bar^T``, projected with the view's own intrinsics and pushed through
    its forward distortion.
    """
    w, h = int(size[0]), int(size[1])
    H = view.K.matrix @ np.asarray(R_bar, float).T @ np.linalg.inv(K_r.matrix)
    out = np.empty((h, w, 2))
    xs = np.arange(w, dtype=float)
    for y0 in range(0, h, LUT_ROW_CHUNK):
        ys = np.arange(y0, min(y0 + LUT_ROW_CHUNK, h), dtype=float)
        gx, gy = np.meshgrid(xs, ys)
        p = np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)])
        q = H @ p
        with np.errstate(divide="ignore", invalid="ignore"):
            src = (q[:2] / q[2]).T
        src[q[2] <= 0] = np.nan
        src = apply_distortion(src, view.d)
        bad = ~np.isfinite(src).all(axis=1)
        bad |= (src[:, 0] < 0) | (src[:, 0] > w - 1) | (src[:, 1] < 0) | (src[:, 1] > h - 1)
        src[bad] = SENTINEL
        out[y0 : y0 + len(ys)] = src.reshape(len(ys), w, 2)
    return LookupTable(w, h, out)


def build_luts(calib: LightFieldCalibration, rect: RectificationResult) -> list[LookupTable]:
    return [build_lut(v, Rb, rect.K_r, calib.image_size) for v, Rb in zip(calib.per_view, rect.per_view_R_bar)]


def remap_image(image, lut: LookupTable) -> np.ndarray:
    """Bilinear resampling of ``image`` (H x W or H x W x C) through ``lut``."""
    img = np.asarray(image)
    if img.shape[:2] != (lut.height, lut.width):
        raise DimensionMismatch(f"image is {img.shape[1]}x{img.shape[0]}, LUT is {lut.width}x{lut.height}")
    valid = lut.valid
    coords = np.stack([lut.map[..., 1], lut.map[..., 0]])
    coords[:, ~valid] = 0.0
    planes = img[..., None] if img.ndim == 2 else img
    out = np.empty(planes.shape, dtype=float)
    for c in range(planes.shape[2]):
        out[..., c] = ndimage.map_coordinates(planes[..., c].astype(float), coords, order=1, mode="nearest")
    out[~valid] = 0.0
    return out[..., 0] if img.ndim == 2 else out


def lut_sample(lut: LookupTable, points) -> np.ndarray:
    """Bilinear interpolation of the table at destination ``(x, y)`` points."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    coords = np.stack([p[:, 1], p[:, 0]])
    return np.column_stack(
        [ndimage.map_coordinates(lut.map[..., k], coords, order=1, mode="nearest") for k in range(2)]
    )


def invert_lut(lut: LookupTable, source_points, iterations: int = 20, tol: float = 1e-9) -> np.ndarray:
    """Destination pixels whose table entry equals each source point.

    Starts from the nearest valid table entry and refines with Newton steps
    on the bilinear interpolant. Points that never settle come back as NaN.
    """
    q = np.asarray(source_points, dtype=float).reshape(-1, 2)
    valid = lut.valid
    ys, xs = np.nonzero(valid)
    tree = cKDTree(lut.map[valid])
    _, idx = tree.query(q)
    p = np.column_stack([xs[idx], ys[idx]]).astype(float)
    hstep = 0.25
    done = np.zeros(len(q), dtype=bool)
    for _ in range(iterations):
        r = lut_sample(lut, p) - q
        done = np.linalg.norm(r, axis=1) < tol
        if done.all():
            break
        jx = (lut_sample(lut, p + [hstep, 0]) - lut_sample(lut, p - [hstep, 0])) / (2 * hstep)
        jy = (lut_sample(lut, p + [0, hstep]) - lut_sample(lut, p - [0, hstep])) / (2 * hstep)
        J = np.stack([jx, jy], axis=-1)
        det = np.linalg.det(J)
        # stencils that touch sentinel cells give garbage slopes; give up on those
        stuck = ~(np.abs(det) > 1e-6) | done
        J[stuck] = np.eye(2)
        step = np.linalg.solve(J, r[..., None])[..., 0]
        step[stuck] = 0.0
        p = np.clip(p - step, 0.0, [lut.width - 1, lut.height - 1])
    r = lut_sample(lut, p) - q
    p[np.linalg.norm(r, axis=1) > 1e-6] = np.nan
    return p
