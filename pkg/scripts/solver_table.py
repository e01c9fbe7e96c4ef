"""Train and Test MAE of the three APS solvers on uniform grids with true locations.

Example:
    python3 scripts/solver_table.py --seeds 0 1 2 3 4 --shadowing 2
"""
import argparse

from mrlscm.evaluation import median_by, run_sweep, write_sweep_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--shadowing", type=float, default=2.0)
    ap.add_argument("--width", type=float, default=106.0)
    ap.add_argument("--out", default="solver_table.csv")
    args = ap.parse_args()

    spec = {"base": {"shadowing_db": args.shadowing, "method": "uniform", "width": args.width,
                     "true_locations": True},
            "vary": {"solver": ["gm", "nnomp", "wnomp"], "seed": args.seeds}}
    rows = run_sweep(spec)
    write_sweep_csv(rows, args.out)

    train = median_by(rows, ("solver",), "train_mae_db")
    test = median_by(rows, ("solver",), "test_mae_db")
    print(f"{'solver':>7} {'Train MAE [dB]':>15} {'Test MAE [dB]':>14}")
    for (solver,), t in test.items():
        print(f"{solver:>7} {train[(solver,)]:>15.2f} {t:>14.2f}")


if __name__ == "__main__":
    main()
