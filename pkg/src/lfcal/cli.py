"""``lfcal`` command-line frontend.

Exit codes: 0 success, 2 bad input, 3 algorithmic failure.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .calibration import CheckerboardSpec, calibrate_lightfield
from .depth import VARIANTS, depth_error_table, parse_range
from .errors import AlgorithmError, DegenerateGrid, InputError, LfcalError
from .geometry import ViewGrid
from .matching import tracks_to_feature_set
from .rectification import build_lut, rectified_projections, remap_image

EXIT_OK, EXIT_INPUT, EXIT_ALGORITHM = 0, 2, 3

IMAGE_NAME = re.compile(r"^view_?(\d+)\.(pgm|ppm)$", re.IGNORECASE)

log = logging.getLogger("lfcal")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


# ---------------------------------------------------------------------------
# Argument parsing helpers
# ---------------------------------------------------------------------------


def _ints(text: str, sep: str, count: int, what: str) -> list[int]:
    parts = text.lower().split(sep)
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        vals = []
    if len(vals) != count:
        raise InputError(f"bad {what} {text!r}")
    return vals


def parse_pattern(text: str) -> CheckerboardSpec:
    """``COLSxROWS:SIZE``"""
    try:
        dims, size = text.split(":")
        cols, rows = _ints(dims, "x", 2, "pattern")
        return CheckerboardSpec(cols, rows, float(size))
    except (ValueError, TypeError) as exc:
        raise InputError(f"bad pattern {text!r}: expected COLSxROWS:SIZE") from exc


def parse_grid(text: str, default_center: bool = False) -> ViewGrid:
    """``AxB`` or ``AxB:REF_A,REF_B``"""
    dims, _, ref = text.partition(":")
    a, b = _ints(dims, "x", 2, "grid")
    if ref:
        ra, rb = _ints(ref, ",", 2, "reference")
    elif default_center:
        ra, rb = a // 2, b // 2
    else:
        ra = rb = 0
    try:
        return ViewGrid(a, b, ra, rb)
    except ValueError as exc:
        raise InputError(f"bad grid {text!r}: {exc}") from exc


def parse_size(text: str) -> tuple[int, int]:
    w, h = _ints(text, "x", 2, "image size")
    if w <= 0 or h <= 0:
        raise InputError(f"bad image size {text!r}")
    return w, h


def parse_noise(text: str) -> dict:
    """``rotz:SIGMA,trans:SIGMA,px:SIGMA`` (any subset)."""
    out = {"rotz": 0.0, "trans": 0.0, "px": 0.0}
    if not text:
        return out
    for item in text.split(","):
        key, _, val = item.partition(":")
        if key not in out:
            raise InputError(f"unknown noise kind {key!r}")
        try:
            out[key] = float(val)
        except ValueError as exc:
            raise InputError(f"bad noise level in {item!r}") from exc
        if not np.isfinite(out[key]) or out[key] < 0:
            raise InputError(f"noise level must be a non-negative number: {item!r}")
    return out


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise InputError(f"bad level list {text!r}") from exc
    if any(v < 0 or not np.isfinite(v) for v in vals):
        raise InputError(f"levels must be non-negative: {text!r}")
    return vals


def _positive(name: str, value: float) -> float:
    if not np.isfinite(value) or value <= 0:
        raise InputError(f"--{name} must be positive")
    return value


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _rectification_or_none(calib, denominator=None):
    try:
        return rectified_projections(calib, rotation_denominator=denominator)
    except DegenerateGrid as exc:
        print(f"warning: no rectification block written: {exc}", file=sys.stderr)
        return None


def cmd_calibrate(args) -> int:
    spec = parse_pattern(args.pattern)
    grid = parse_grid(args.grid)
    size = parse_size(args.image_size)
    obs = io.read_observations(args.observations, spec.n_corners, grid.n_views)
    calib = calibrate_lightfield(obs, spec, grid, size)
    rect = _rectification_or_none(calib, args.rotation_denominator)
    io.write_calibration(args.out, calib, rect)
    print("view  E_mono  E_PnP")
    for i, v in enumerate(calib.per_view):
        e = calib.rms_pnp_per_view[i] if calib.rms_pnp_per_view else float("nan")
        print(f"{i:4d}  {v.rms_mono:.6g}  {e:.6g}")
    print(f"E_mono={calib.rms_mono:.6g} E_PnP={calib.rms_pnp:.6g}")
    return EXIT_OK


def _view_images(directory: Path, n: int) -> dict[int, Path]:
    if not directory.is_dir():
        raise InputError(f"{directory}: not a directory")
    found: dict[int, Path] = {}
    for p in sorted(directory.iterdir()):
        m = IMAGE_NAME.match(p.name)
        if m:
            i = int(m.group(1))
            if i in found:
                raise InputError(f"two images for view {i}: {found[i].name}, {p.name}")
            found[i] = p
    missing = [i for i in range(n) if i not in found]
    if missing:
        raise InputError(f"{directory}: no image for view(s) {missing}")
    extra = sorted(set(found) - set(range(n)))
    if extra:
        raise InputError(f"{directory}: images for views {extra} outside the grid")
    return found


def cmd_rectify(args) -> int:
    doc = io.read_calibration(args.calibration)
    if doc.rectification is None:
        raise InputError(f"{args.calibration}: no rectification block")
    calib, rect = doc.calibration, doc.rectification
    images = _view_images(Path(args.images), calib.n_views)
    out = Path(args.out)
    print("view  retained_fov")
    for i in range(calib.n_views):
        img = io.read_image(images[i])
        if img.shape[1] != calib.image_size[0] or img.shape[0] != calib.image_size[1]:
            raise InputError(f"{images[i]}: image is {img.shape[1]}x{img.shape[0]}, calibration expects {calib.image_size[0]}x{calib.image_size[1]}")
        lut = build_lut(calib.per_view[i], rect.per_view_R_bar[i], rect.K_r, calib.image_size)
        warped = remap_image(img, lut)
        info = np.iinfo(img.dtype)
        io.write_image(out / images[i].name, np.clip(np.rint(warped), info.min, info.max).astype(img.dtype))
        if args.emit_luts:
            io.write_lut(Path(args.emit_luts) / f"view_{i:03d}.lut", lut)
        print(f"{i:4d}  {lut.retained_fraction():.4f}")
    return EXIT_OK


def cmd_refine(args) -> int:
    from .refinement import RefineConfig, refine

    doc = io.read_calibration(args.calibration)
    calib = doc.calibration
    frames = [tracks_to_feature_set(io.read_tracks(p, calib.n_views), calib.grid) for p in args.tracks]
    config = RefineConfig(
        epipolar_threshold=_positive("epipolar-thresh", args.epipolar_thresh),
        max_frames=args.max_frames,
        rms_threshold=args.rms_thresh,
        use_epipolar_filter=not args.no_epipolar,
        use_triangulation_filter=not args.no_triangulation,
        ransac_seed=args.seed,
    )
    if config.max_frames < 1:
        raise InputError("--max-frames must be at least 1")
    res = refine(frames, calib, config)
    rect = _rectification_or_none(res.calibration) if doc.rectification is not None else None
    io.write_calibration(args.out, res.calibration, rect)
    print(res.report.summary())
    print("stage            rms")
    print(f"{'initial':<15} {res.rms_before:.6g}")
    for name, rms in zip(config.stages, res.stage_rms):
        print(f"{name:<15} {rms:.6g}")
    print(f"frames_used={res.frames_used} rms_before={res.rms_before:.6g} rms_after={res.rms_after:.6g}")
    return EXIT_OK


def cmd_depth_error(args) -> int:
    Z = parse_range(args.range)
    table = depth_error_table(
        Z, _positive("focal", args.focal), _positive("baseline", args.baseline), args.reproj_error, args.variant
    )
    lines = ["Z,d,delta_z"] + [",".join(format(v, ".17g") for v in row) for row in table]
    io.atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"variant={args.variant} delta_z: {table[0, 2]:.6g} m at Z={table[0, 0]:.6g} m .. {table[-1, 2]:.6g} m at Z={table[-1, 0]:.6g} m")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from . import synthetic as syn

    grid = parse_grid(args.grid, default_center=True)
    size = parse_size(args.image_size)
    noise = parse_noise(args.noise)
    focal = _positive("focal", args.focal)
    baseline = _positive("baseline", args.baseline)
    out = Path(args.out)
    rig = syn.make_rig(grid, size, focal, baseline)

    if args.sweep:
        levels = {}
        if args.trans_levels:
            levels["trans"] = _floats(args.trans_levels)
        if args.rotz_levels:
            levels["rotz"] = _floats(args.rotz_levels)
        if not levels:
            raise InputError("--sweep needs --trans-levels and/or --rotz-levels")
        if args.k1 or args.k2:
            rig = syn.jitter_intrinsics(rig, k1=args.k1, k2=args.k2)
        rows = syn.noise_sweep(
            rig, levels, args.trials, args.seed, args.points, pixel_sigma=noise["px"],
            lens_shift_ppu=args.lens_shift_ppu or None, depth_range=(args.depth_min, args.depth_max),
        )
        io.atomic_write(out / "sweep.csv", syn.sweep_csv(rows))
        print(f"wrote {len(rows)} sweep rows to {out / 'sweep.csv'}")
        return EXIT_OK

    if args.k1 or args.k2 or args.focal_sigma or args.center_sigma:
        rig = syn.jitter_intrinsics(rig, args.focal_sigma, args.center_sigma, args.k1, args.k2, seed=args.seed)
    spec = parse_pattern(args.pattern)
    ns = syn.NoiseSpec(noise["rotz"], noise["trans"], noise["px"], args.outliers, args.seed)
    drifted = syn.perturb_rig(rig, ns, args.lens_shift_ppu or None)

    # The pattern is observed by the undrifted rig; scene tracks by the drifted one.
    placements = syn.sample_pattern_placements(rig, spec, args.frames, seed=args.seed)
    obs = syn.render_pattern_frames(rig, spec, placements, noise["px"], seed=args.seed)
    io.write_observations(out / "observations.txt", obs)
    nominal = rig.calibration()
    io.write_calibration(out / "ground_truth.cal", nominal, _rectification_or_none(nominal))
    io.write_calibration(out / "drifted_truth.cal", drifted.calibration(), _rectification_or_none(drifted.calibration()))
    outliers = {}
    for k in range(args.track_frames):
        scene = syn.render_scene_tracks(drifted, args.points, (args.depth_min, args.depth_max), syn.NoiseSpec(0, 0, noise["px"], args.outliers, args.seed + 1000 + k))
        tracks = {m: {v: tuple(scene.tracks[m].obs[v]) for v in range(grid.n_views)} for m in range(args.points)}
        io.write_tracks(out / f"tracks_{k:03d}.txt", tracks)
        outliers[f"tracks_{k:03d}.txt"] = [int(m) for m in np.flatnonzero(scene.outlier)]
    io.write_json(
        out / "ground_truth.json",
        {
            "grid": [grid.rows_a, grid.cols_b, grid.ref_a, grid.ref_b],
            "image_size": list(size),
            "focal": focal,
            "baseline": baseline,
            "pattern": args.pattern,
            "noise": noise,
            "outlier_fraction": args.outliers,
            "seed": args.seed,
            "outlier_tracks": outliers,
        },
    )
    print(f"wrote {len(obs)} pattern observations and {args.track_frames} track file(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lfcal", description="Light-field camera-array calibration, rectification and refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="pattern-based calibration from corner observations")
    c.add_argument("--observations", required=True)
    c.add_argument("--pattern", required=True, help="COLSxROWS:SIZE, inner corners and square size")
    c.add_argument("--grid", required=True, help="AxB:REF_A,REF_B")
    c.add_argument("--image-size", required=True, help="WxH")
    c.add_argument("--out", required=True)
    c.add_argument("--rotation-denominator", type=int, default=None, help="override N-1 in the rotation average")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("rectify", help="remap view images onto the rectified plane")
    r.add_argument("--calibration", required=True)
    r.add_argument("--images", required=True, help="directory holding view_<i>.pgm / .ppm")
    r.add_argument("--out", required=True)
    r.add_argument("--emit-luts", default=None, metavar="DIR")
    r.set_defaults(func=cmd_rectify)

    f = sub.add_parser("refine", help="refine a drifted calibration from scene tracks")
    f.add_argument("--calibration", required=True)
    f.add_argument("--tracks", required=True, nargs="+", help="one track file per frame")
    f.add_argument("--epipolar-thresh", type=float, default=2.0)
    f.add_argument("--max-frames", type=int, default=10)
    f.add_argument("--rms-thresh", type=float, default=0.5)
    f.add_argument("--no-epipolar", action="store_true")
    f.add_argument("--no-triangulation", action="store_true")
    f.add_argument("--seed", type=int, default=0, help="RANSAC seed")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_refine)

    d = sub.add_parser(
        "depth-error",
        help="depth error caused by a reprojection error",
        description=(
            "Depth error for a disparity error E. The default one-sided form is "
            "fb/d - fb/(d+E). 'symmetric' is (fb/(d-E) - fb/(d+E))/2. 'sum' is the "
            "printed fb/(d-E) + fb/(d+E), which evaluates to about 2Z and is kept "
            "only for comparison."
        ),
    )
    d.add_argument("--focal", type=float, required=True)
    d.add_argument("--baseline", type=float, required=True)
    d.add_argument("--reproj-error", type=float, required=True)
    d.add_argument("--range", required=True, help="ZMIN:ZMAX:STEPS")
    d.add_argument("--variant", choices=VARIANTS, default="one-sided")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_depth_error)

    s = sub.add_parser("simulate", help="synthetic rig, pattern observations and scene tracks")
    s.add_argument("--grid", default="5x5", help="AxB[:REF_A,REF_B], reference defaults to the centre")
    s.add_argument("--image-size", default="512x512")
    s.add_argument("--focal", type=float, default=512.0)
    s.add_argument("--baseline", type=float, default=0.1)
    s.add_argument("--noise", default="", help="rotz:SIGMA,trans:SIGMA,px:SIGMA")
    s.add_argument("--pattern", default="9x6:0.025")
    s.add_argument("--frames", type=int, default=30, help="pattern placements")
    s.add_argument("--track-frames", type=int, default=1)
    s.add_argument("--points", type=int, default=500)
    s.add_argument("--outliers", type=float, default=0.0, help="fraction of tracks with a gross outlier")
    s.add_argument("--depth-min", type=float, default=4.0)
    s.add_argument("--depth-max", type=float, default=12.0)
    s.add_argument("--k1", type=float, default=0.0, help="radial k1 at the normalised half-diagonal")
    s.add_argument("--k2", type=float, default=0.0)
    s.add_argument("--focal-sigma", type=float, default=0.0)
    s.add_argument("--center-sigma", type=float, default=0.0)
    s.add_argument("--lens-shift-ppu", type=float, default=0.0, help="sensor pixels per world unit of lens shift")
    s.add_argument("--sweep", action="store_true", help="write a noise-sweep CSV instead of a dataset")
    s.add_argument("--trans-levels", default="")
    s.add_argument("--rotz-levels", default="")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except InputError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AlgorithmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ALGORITHM
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LfcalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ALGORITHM


if __name__ == "__main__":
    sys.exit(main())
