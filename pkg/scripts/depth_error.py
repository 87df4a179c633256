"""Depth error across the working range for a given reprojection error.

Prints the one-sided, symmetric and literal-sum variants side by side so
the difference between them is visible.
"""

import argparse

from lfcal.depth import VARIANTS, depth_error, disparity, parse_range


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--focal", type=float, default=850.0)
    p.add_argument("--baseline", type=float, default=0.018)
    p.add_argument("--reproj-error", type=float, default=0.246)
    p.add_argument("--range", default="0.5:2.0:7")
    a = p.parse_args()

    Z = parse_range(a.range)
    print("Z[m]   d[px]    " + "  ".join(f"{v:>10}" for v in VARIANTS))
    for z in Z:
        vals = [depth_error(z, a.focal, a.baseline, a.reproj_error, v) for v in VARIANTS]
        print(f"{z:<6.3g} {disparity(z, a.focal, a.baseline):<8.3f} " + "  ".join(f"{v:10.5f}" for v in vals))


if __name__ == "__main__":
    main()
