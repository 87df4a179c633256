"""Depth uncertainty caused by a disparity error of ``E`` pixels."""

from __future__ import annotations

import numpy as np

from .errors import InputError

VARIANTS = ("one-sided", "symmetric", "sum")


def disparity(Z, focal: float, baseline: float):
    return focal * baseline / np.asarray(Z, dtype=float)


def depth_error(Z, focal: float, baseline: float, reproj_error: float, variant: str = "one-sided"):
    """Depth error at depth ``Z`` for a disparity error ``reproj_error``.

    ``one-sided``  fb/d - fb/(d+E), the depth shift from a disparity
                   overestimate (default);
    ``symmetric``  half the spread between fb/(d-E) and fb/(d+E);
    ``sum``        fb/(d-E) + fb/(d+E) taken literally, which is close to 2Z
                   rather than an error.
    """
    if focal <= 0 or baseline <= 0 or reproj_error < 0:
        raise InputError("focal length and baseline must be positive and the error non-negative")
    Z = np.asarray(Z, dtype=float)
    if np.any(Z <= 0):
        raise InputError("depths must be positive")
    fb = focal * baseline
    d = fb / Z
    E = reproj_error
    if variant == "one-sided":
        return fb / d - fb / (d + E)
    if variant in ("symmetric", "sum") and np.any(d <= E):
        raise InputError("disparity does not exceed the error at the far end of the range")
    if variant == "symmetric":
        return 0.5 * (fb / (d - E) - fb / (d + E))
    if variant == "sum":
        return fb / (d - E) + fb / (d + E)
    raise InputError(f"unknown depth-error variant {variant!r}; choose from {', '.join(VARIANTS)}")


def parse_range(text: str) -> np.ndarray:
    """``ZMIN:ZMAX:STEPS`` -> evenly spaced depths, inclusive."""
    try:
        zmin, zmax, steps = text.split(":")
        zmin, zmax, steps = float(zmin), float(zmax), int(steps)
    except ValueError as exc:
        raise InputError(f"range must look like ZMIN:ZMAX:STEPS, got {text!r}") from exc
    if not (np.isfinite(zmin) and np.isfinite(zmax)) or zmin <= 0 or zmax < zmin or steps < 1:
        raise InputError(f"invalid depth range {text!r}")
    if steps == 1 and zmax != zmin:
        raise InputError("a single step needs ZMIN == ZMAX")
    return np.linspace(zmin, zmax, steps)


def depth_error_table(Z, focal: float, baseline: float, reproj_error: float, variant: str = "one-sided") -> np.ndarray:
    """Rows of ``(Z, d, delta_z)``."""
    Z = np.asarray(Z, dtype=float)
    return np.column_stack([Z, disparity(Z, focal, baseline), depth_error(Z, focal, baseline, reproj_error, variant)])
