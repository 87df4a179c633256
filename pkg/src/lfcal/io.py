"""Readers and writers for calibration, observation, track, LUT and image files.

Every writer goes through :func:`atomic_write` (temporary file in the target
directory, then ``os.replace``), so readers never see partial files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import LightFieldCalibration, PatternObservation, ViewCalibration
from .errors import DimensionMismatch, EmptyInput, InputError, ParseError
from .geometry import IntrinsicMatrix, RadialDistortion, ViewGrid, ViewPose
from .rectification import LookupTable, RectificationResult, assemble_rectification

FORMAT_VERSION = 1
LUT_MAGIC = b"LFLUT1"
LUT_HEADER = struct.Struct("<6sII")

# mkstemp creates 0600 files; give outputs the usual umask-derived mode instead
_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else bytes(data)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            os.fchmod(fh.fileno(), 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise InputError(f"{path}: no such file") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text file") from exc


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _fmts(values) -> str:
    return " ".join(_fmt(v) for v in values)


# ---------------------------------------------------------------------------
# Calibration files
# ---------------------------------------------------------------------------


@dataclass
class CalibrationDocument:
    calibration: LightFieldCalibration
    rectification: RectificationResult | None = None


def format_calibration(calib: LightFieldCalibration, rect: RectificationResult | None = None) -> str:
    g = calib.grid
    w, h = calib.image_size
    lines = [
        "# lfcal calibration",
        f"format_version {FORMAT_VERSION}",
        f"n_views {g.n_views}",
        f"grid {g.rows_a} {g.cols_b}",
        f"reference {g.ref_a} {g.ref_b}",
        f"image_size {int(w)} {int(h)}",
        f"rms_pnp {_fmt(calib.rms_pnp)}",
    ]
    per_pnp = calib.rms_pnp_per_view or (None,) * g.n_views
    for i, (v, p, e) in enumerate(zip(calib.per_view, calib.poses_rel_reference, per_pnp)):
        K, d = v.K, v.d
        lines += [
            f"view {i}",
            f"fx {_fmt(K.fx)}",
            f"fy {_fmt(K.fy)}",
            f"cx {_fmt(K.cx)}",
            f"cy {_fmt(K.cy)}",
            f"skew {_fmt(K.skew)}",
            f"k1 {_fmt(d.k1)}",
            f"k2 {_fmt(d.k2)}",
            f"center_x {_fmt(d.center_x)}",
            f"center_y {_fmt(d.center_y)}",
            f"rvec {_fmts(p.rvec)}",
            f"tvec {_fmts(p.tvec)}",
            f"rms_mono {_fmt(v.rms_mono)}",
        ]
        if e is not None:
            lines.append(f"rms_pnp {_fmt(e)}")
        lines.append("end_view")
    if rect is not None:
        K = rect.K_r
        lines += [
            "rectification",
            f"K_r {_fmts([K.fx, K.fy, K.cx, K.cy, K.skew])}",
            f"r_r {_fmts(rect.r_r)}",
            f"t_r {_fmts(rect.t_r)}",
        ]
        lines += [f"t_p {i} {_fmts(t)}" for i, t in enumerate(rect.per_view_t_p)]
        lines.append("end_rectification")
    return "\n".join(lines) + "\n"


class _Lines:
    def __init__(self, text: str, source: str):
        self.items = []
        for n, raw in enumerate(text.splitlines(), 1):
            s = raw.strip()
            if s and not s.startswith("#"):
                self.items.append((n, s.split()))
        self.pos = 0
        self.source = source

    def error(self, n, msg) -> ParseError:
        return ParseError(f"{self.source}:{n}: {msg}")

    def next(self, key: str, count: int | None = None, kind=float):
        if self.pos >= len(self.items):
            raise ParseError(f"{self.source}: unexpected end of file, expected '{key}'")
        n, tok = self.items[self.pos]
        if tok[0] != key:
            raise self.error(n, f"expected '{key}', found '{tok[0]}'")
        vals = tok[1:]
        if count is not None and len(vals) != count:
            raise self.error(n, f"'{key}' takes {count} values, got {len(vals)}")
        try:
            out = [kind(v) for v in vals]
        except ValueError as exc:
            raise self.error(n, f"bad value for '{key}': {exc}") from exc
        if kind is float and not all(np.isfinite(out)):
            raise self.error(n, f"non-finite value for '{key}'")
        self.pos += 1
        return out

    def peek(self) -> str | None:
        return self.items[self.pos][1][0] if self.pos < len(self.items) else None

    @property
    def line(self) -> int:
        return self.items[min(self.pos, len(self.items) - 1)][0] if self.items else 0


def parse_calibration(text: str, source: str = "<calibration>") -> CalibrationDocument:
    L = _Lines(text, source)
    (version,) = L.next("format_version", 1, int)
    if version != FORMAT_VERSION:
        raise L.error(L.line, f"unsupported format version {version}")
    (n,) = L.next("n_views", 1, int)
    rows, cols = L.next("grid", 2, int)
    ref_a, ref_b = L.next("reference", 2, int)
    w, h = L.next("image_size", 2, int)
    (rms_pnp,) = L.next("rms_pnp", 1)
    try:
        grid = ViewGrid(rows, cols, ref_a, ref_b)
    except ValueError as exc:
        raise ParseError(f"{source}: {exc}") from exc
    if grid.n_views != n:
        raise ParseError(f"{source}: grid {rows}x{cols} does not hold {n} views")
    views, poses, pnp = [], [], []
    for i in range(n):
        (idx,) = L.next("view", 1, int)
        if idx != i:
            raise L.error(L.line, f"expected view {i}, found view {idx}")
        vals = {k: L.next(k, 1)[0] for k in ("fx", "fy", "cx", "cy", "skew", "k1", "k2", "center_x", "center_y")}
        rvec = L.next("rvec", 3)
        tvec = L.next("tvec", 3)
        (rms_mono,) = L.next("rms_mono", 1)
        if L.peek() == "rms_pnp":
            pnp.append(L.next("rms_pnp", 1)[0])
        L.next("end_view", 0)
        try:
            K = IntrinsicMatrix(vals["fx"], vals["fy"], vals["cx"], vals["cy"], vals["skew"])
        except ValueError as exc:
            raise ParseError(f"{source}: view {i}: {exc}") from exc
        d = RadialDistortion(vals["k1"], vals["k2"], vals["center_x"], vals["center_y"])
        views.append(ViewCalibration(K, d, rms_mono))
        poses.append(ViewPose(rvec, tvec))
    if pnp and len(pnp) != n:
        raise ParseError(f"{source}: per-view rms_pnp given for only some views")
    try:
        calib = LightFieldCalibration(grid, views, poses, rms_pnp, (w, h), tuple(pnp))
    except ValueError as exc:
        raise ParseError(f"{source}: {exc}") from exc
    rect = None
    if L.peek() == "rectification":
        L.next("rectification", 0)
        fx, fy, cx, cy, skew = L.next("K_r", 5)
        r_r = L.next("r_r", 3)
        t_r = L.next("t_r", 2)
        t_p = []
        for i in range(n):
            vals = L.next("t_p", 4)
            if int(vals[0]) != i:
                raise L.error(L.line, f"expected t_p for view {i}")
            t_p.append(vals[1:])
        L.next("end_rectification", 0)
        rect = assemble_rectification(calib, IntrinsicMatrix(fx, fy, cx, cy, skew), r_r, t_r)
        if not np.allclose(np.array(rect.per_view_t_p), np.array(t_p), rtol=1e-12, atol=1e-15):
            raise ParseError(f"{source}: per-view t_p disagrees with t_r and the grid")
    if L.peek() is not None:
        raise L.error(L.line, f"unexpected '{L.peek()}' after calibration")
    return CalibrationDocument(calib, rect)


def write_calibration(path, calib: LightFieldCalibration, rect: RectificationResult | None = None) -> None:
    atomic_write(path, format_calibration(calib, rect))


def read_calibration(path) -> CalibrationDocument:
    return parse_calibration(_read_text(path), str(path))


# ---------------------------------------------------------------------------
# Observation and track files
# ---------------------------------------------------------------------------


def format_observations(observations) -> str:
    lines = ["# frame view corner_index x y"]
    for o in sorted(observations, key=lambda o: (o.frame_index, o.view_index)):
        for k, (x, y) in enumerate(o.corners):
            lines.append(f"{o.frame_index} {o.view_index} {k} {_fmt(x)} {_fmt(y)}")
    return "\n".join(lines) + "\n"


def _data_lines(text: str):
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s and not s.startswith("#"):
            yield n, s.split()


def parse_observations(text: str, n_corners: int | None = None, n_views: int | None = None, source: str = "<observations>"):
    groups: dict = defaultdict(dict)
    for n, tok in _data_lines(text):
        if len(tok) != 5:
            raise ParseError(f"{source}:{n}: expected 'frame view corner_index x y'")
        try:
            f, v, k = int(tok[0]), int(tok[1]), int(tok[2])
            x, y = float(tok[3]), float(tok[4])
        except ValueError as exc:
            raise ParseError(f"{source}:{n}: {exc}") from exc
        if min(f, v, k) < 0 or (n_views is not None and v >= n_views) or (n_corners is not None and k >= n_corners):
            raise ParseError(f"{source}:{n}: index out of range (frame {f}, view {v}, corner {k})")
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ParseError(f"{source}:{n}: non-finite coordinate")
        if k in groups[(f, v)]:
            raise ParseError(f"{source}:{n}: duplicate corner {k} for frame {f}, view {v}")
        groups[(f, v)][k] = (x, y)
    if not groups:
        raise EmptyInput(f"{source}: no observations")
    out = []
    for (f, v), corners in sorted(groups.items()):
        expected = n_corners if n_corners is not None else len(corners)
        if sorted(corners) != list(range(expected)):
            raise ParseError(f"{source}: frame {f}, view {v} has {len(corners)} of {expected} corners")
        out.append(PatternObservation(v, f, np.array([corners[k] for k in range(expected)])))
    return out


def write_observations(path, observations) -> None:
    atomic_write(path, format_observations(observations))


def read_observations(path, n_corners: int | None = None, n_views: int | None = None):
    return parse_observations(_read_text(path), n_corners, n_views, str(path))


def format_tracks(tracks) -> str:
    """``tracks`` maps track id to ``{view: (x, y)}``."""
    lines = ["# track_id view_index x y"]
    for tid in sorted(tracks):
        for v, (x, y) in sorted(tracks[tid].items()):
            lines.append(f"{tid} {v} {_fmt(x)} {_fmt(y)}")
    return "\n".join(lines) + "\n"


def parse_tracks(text: str, n_views: int | None = None, source: str = "<tracks>") -> dict:
    tracks: dict = defaultdict(dict)
    for n, tok in _data_lines(text):
        if len(tok) != 4:
            raise ParseError(f"{source}:{n}: expected 'track_id view_index x y'")
        try:
            t, v = int(tok[0]), int(tok[1])
            x, y = float(tok[2]), float(tok[3])
        except ValueError as exc:
            raise ParseError(f"{source}:{n}: {exc}") from exc
        if t < 0 or v < 0 or (n_views is not None and v >= n_views):
            raise ParseError(f"{source}:{n}: index out of range (track {t}, view {v})")
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ParseError(f"{source}:{n}: non-finite coordinate")
        if v in tracks[t]:
            raise ParseError(f"{source}:{n}: duplicate observation of track {t} in view {v}")
        tracks[t][v] = (x, y)
    if not tracks:
        raise EmptyInput(f"{source}: no tracks")
    return dict(tracks)


def write_tracks(path, tracks) -> None:
    atomic_write(path, format_tracks(tracks))


def read_tracks(path, n_views: int | None = None) -> dict:
    return parse_tracks(_read_text(path), n_views, str(path))


# ---------------------------------------------------------------------------
# Look-up tables
# ---------------------------------------------------------------------------


def lut_bytes(lut: LookupTable) -> bytes:
    return LUT_HEADER.pack(LUT_MAGIC, lut.width, lut.height) + lut.map.astype("<f4").tobytes()


def lut_from_bytes(data: bytes, source: str = "<lut>") -> LookupTable:
    if len(data) < LUT_HEADER.size:
        raise ParseError(f"{source}: truncated LUT header")
    magic, w, h = LUT_HEADER.unpack_from(data)
    if magic != LUT_MAGIC:
        raise ParseError(f"{source}: bad LUT magic {magic!r}")
    expected = LUT_HEADER.size + 8 * w * h
    if len(data) != expected:
        raise ParseError(f"{source}: LUT is {len(data)} bytes, expected {expected}")
    m = np.frombuffer(data, dtype="<f4", offset=LUT_HEADER.size).reshape(h, w, 2)
    return LookupTable(w, h, m.astype(float))


def write_lut(path, lut: LookupTable) -> None:
    atomic_write(path, lut_bytes(lut))


def read_lut(path) -> LookupTable:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise InputError(f"{path}: no such file") from exc
    return lut_from_bytes(data, str(path))


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _pnm_tokens(data: bytes, count: int, source: str):
    """First ``count`` header tokens and the offset just past the single
    whitespace byte that ends the header."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise ParseError(f"{source}: truncated image header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1


def image_from_bytes(data: bytes, source: str = "<image>") -> np.ndarray:
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in b"2356":
        raise ParseError(f"{source}: not a PGM/PPM image")
    kind = data[1:2]
    try:
        toks, off = _pnm_tokens(data, 4, source)
        w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    except ValueError as exc:
        raise ParseError(f"{source}: bad image header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ParseError(f"{source}: bad image dimensions or depth")
    channels = 3 if kind in b"36" else 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h * channels
    if kind in b"56":
        body = data[off:]
        size = count * np.dtype(dtype).itemsize
        if len(body) < size:
            raise ParseError(f"{source}: truncated pixel data")
        arr = np.frombuffer(body[:size], dtype=dtype).astype(np.uint8 if maxval < 256 else np.uint16)
    else:
        try:
            arr = np.array(data[off - 1 :].split()[:count], dtype=np.int64)
        except ValueError as exc:
            raise ParseError(f"{source}: bad pixel value") from exc
        if arr.size < count:
            raise ParseError(f"{source}: truncated pixel data")
        arr = arr.astype(np.uint8 if maxval < 256 else np.uint16)
    if arr.max(initial=0) > maxval:
        raise ParseError(f"{source}: pixel value exceeds maxval {maxval}")
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def image_bytes(image) -> bytes:
    a = np.asarray(image)
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise DimensionMismatch(f"cannot store an array of shape {a.shape} as PGM/PPM")
    if a.dtype.kind == "f":
        a = np.clip(np.rint(a), 0, 65535)
        a = a.astype(np.uint8 if a.max(initial=0) <= 255 else np.uint16)
    elif a.dtype not in (np.uint8, np.uint16):
        a = np.clip(a, 0, 65535).astype(np.uint8 if a.max(initial=0) <= 255 else np.uint16)
    maxval = 255 if a.dtype == np.uint8 else 65535
    magic = "P5" if a.ndim == 2 else "P6"
    h, w = a.shape[:2]
    body = a.astype(">u2").tobytes() if maxval > 255 else a.tobytes()
    return f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii") + body


def read_image(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise InputError(f"{path}: no such file") from exc
    return image_from_bytes(data, str(path))


def write_image(path, image) -> None:
    atomic_write(path, image_bytes(image))


# ---------------------------------------------------------------------------
# JSON sidecars
# ---------------------------------------------------------------------------


def write_json(path, payload) -> None:
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
