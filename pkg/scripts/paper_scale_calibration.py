"""Simulate and calibrate a 4x4 rig at the real camera's scale.

960x960 views, f = 850 px, 18 mm baseline, 40 pattern frames with corner
noise, then the full calibrate and refine commands through the CLI.
"""

import argparse
import tempfile
import time
from pathlib import Path

from lfcal.cli import main as lfcal


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--pixel-sigma", type=float, default=0.1)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=None, help="keep the dataset here instead of a temporary directory")
    a = p.parse_args()

    out = Path(a.out) if a.out else Path(tempfile.mkdtemp(prefix="lfcal-"))
    common = ["--grid", "4x4:0,0", "--image-size", "960x960"]
    t0 = time.perf_counter()
    steps = [
        ["simulate", *common, "--focal", "850", "--baseline", "0.018", "--frames", str(a.frames),
         "--k1", "-0.05", "--k2", "0.01", "--focal-sigma", "4", "--center-sigma", "3",
         "--noise", f"rotz:0.005,trans:0.0005,px:{a.pixel_sigma}", "--depth-min", "0.5", "--depth-max", "2.0",
         "--points", "500", "--seed", str(a.seed), "--out", str(out)],
        ["calibrate", "--observations", str(out / "observations.txt"), "--pattern", "9x6:0.025", *common,
         "--out", str(out / "calibrated.cal")],
        ["refine", "--calibration", str(out / "calibrated.cal"), "--tracks", str(out / "tracks_000.txt"),
         "--out", str(out / "refined.cal")],
    ]
    for argv in steps:
        print(f"$ lfcal {argv[0]} ...")
        code = lfcal(argv)
        if code:
            raise SystemExit(code)
    print(f"done in {time.perf_counter() - t0:.1f} s, outputs in {out}")


if __name__ == "__main__":
    main()
