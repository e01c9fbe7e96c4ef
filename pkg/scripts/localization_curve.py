"""Mean distance error of HGNN-Loc and the KNN baseline against the label fraction.

Example:
    python3 scripts/localization_curve.py --seeds 0 1 2 --out loc_curve.csv
"""
import argparse

from mrlscm.evaluation import median_by, run_sweep, write_sweep_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.05, 0.1, 0.2, 0.5])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--shadowing", type=float, default=4.0)
    ap.add_argument("--out", default="localization_curve.csv")
    args = ap.parse_args()

    # the grid stage is cheap with a uniform grid; only the localization numbers matter here
    spec = {"base": {"shadowing_db": args.shadowing, "method": "uniform", "width": 106.0},
            "vary": {"label_fraction": args.fractions, "seed": args.seeds}}
    rows = run_sweep(spec)
    write_sweep_csv(rows, args.out)

    hgnn = median_by(rows, ("label_fraction",), "mean_distance_error_m")
    knn = median_by(rows, ("label_fraction",), "knn_distance_error_m")
    print(f"{'labels':>8} {'HGNN-Loc [m]':>13} {'KNN [m]':>9}")
    for (frac,), err in hgnn.items():
        k = knn.get((frac,))
        print(f"{frac:>8.0%} {err:>13.1f} {'-' if k is None else f'{k:.1f}':>9}")


if __name__ == "__main__":
    main()
