"""Test MAE of joint grids and the baselines as the number of grids K varies.

Uniform grids are swept through their cell width, so their K is whatever
number of non-empty cells that width produces.

Example:
    python3 scripts/grid_sweep.py --ks 4 8 16 --widths 150 106 75 --seeds 0 1 2
"""
import argparse

from mrlscm.evaluation import median_by, run_sweep, write_sweep_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ks", type=int, nargs="+", default=[4, 8, 16, 32])
    ap.add_argument("--widths", type=float, nargs="+", default=[150.0, 106.0, 75.0, 53.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--shadowing", type=float, default=2.0)
    ap.add_argument("--predicted", action="store_true",
                    help="use HGNN-predicted locations instead of the true ones")
    ap.add_argument("--out", default="grid_sweep.csv")
    args = ap.parse_args()

    base = {"shadowing_db": args.shadowing, "true_locations": not args.predicted}
    rows = run_sweep({"base": base, "vary": {"method": ["joint", "kmeans_location", "kmeans_rsrp"],
                                             "k": args.ks, "seed": args.seeds}})
    rows += run_sweep({"base": dict(base, method="uniform"),
                       "vary": {"width": args.widths, "seed": args.seeds}})
    write_sweep_csv(rows, args.out)

    fitted = [r for r in rows if r["method"] != "uniform"]
    uniform = [r for r in rows if r["method"] == "uniform"]
    print(f"{'method':>16} {'K':>5} {'Test MAE [dB]':>14}")
    for (method, k), mae in median_by(fitted, ("method", "k")).items():
        print(f"{method:>16} {k:>5} {mae:>14.2f}")
    ks = median_by(uniform, ("width",), "k")
    for (width,), mae in median_by(uniform, ("width",)).items():
        print(f"{'uniform':>16} {ks[(width,)]:>5.0f} {mae:>14.2f}   (width {width:g} m)")


if __name__ == "__main__":
    main()
