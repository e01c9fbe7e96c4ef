"""Command-line entry point ``mrlscm``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mrlscm import grid_builder as gb
from mrlscm.channel_model import (build_angular_grid, build_measurement_matrix, dbm_to_linear,
                                  radio_from_dict, read_matrix_bin, write_matrix_bin)
from mrlscm.errors import InvalidArgumentError, ParseError, StageError
from mrlscm.evaluation import (METHODS, PipelineConfig, evaluate, fit_grids, read_locations,
                               run_pipeline, run_sweep, write_locations, write_sweep_csv)
from mrlscm.hgnn_loc import TrainConfig, localize, mean_distance_error, split_labels
from mrlscm.sparse_recovery import SOLVERS, GeometryPrior, estimate_aps
from mrlscm.synth_data import (SENTINEL_DBM, MissingPolicy, feature_matrix, generate_scenario,
                               load_scenario, make_dataset, read_csv, save_scenario,
                               serving_arrays, true_locations, write_csv)

log = logging.getLogger("mrlscm")


def _floats(text, n=None):
    vals = tuple(float(v) for v in text.split(","))
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _pair(text):
    return _floats(text, 2)


def _triple(text):
    return _floats(text, 3)


def _quad(text):
    return _floats(text, 4)


# --------------------------------------------------------------------------
# subcommands

def cmd_matrix(args):
    cfg, codebook, grid = radio_from_dict(json.loads(Path(args.config).read_text()))
    a = build_measurement_matrix(cfg, codebook, grid)
    write_matrix_bin(args.out, a)
    log.info("wrote %s (M=%d, N_A=%d)", args.out, a.m, a.n_a)


def cmd_scenario(args):
    scn = generate_scenario(args.area, args.regions, args.c_true, args.seed,
                            bs_location=args.bs, n_neighbors=args.neighbors)
    save_scenario(scn, args.out)


def cmd_gen(args):
    scn = load_scenario(args.scenario)
    missing = MissingPolicy.none() if args.no_missing else MissingPolicy()
    data = make_dataset(scn, args.n_calls, args.samples_per_call, args.speed,
                        shadowing_db=args.shadowing, missing=missing, seed=args.seed,
                        n_test_calls=args.n_test_calls)
    write_csv(data.train, args.out)
    if args.out_test:
        write_csv(data.test, args.out_test)
    if args.matrix_out:
        write_matrix_bin(args.matrix_out, data.matrix_train)
    if args.matrix_test_out:
        write_matrix_bin(args.matrix_test_out, data.matrix_test)


def cmd_localize(args):
    samples = read_csv(args.train)
    truth = true_locations(samples)
    labeled = split_labels(len(samples), args.label_fraction, args.seed)
    cfg = TrainConfig(gamma=args.gamma, k=args.k, tau=args.tau, learning_rate=args.lr,
                      epochs=args.epochs, seed=args.seed, label_fraction=args.label_fraction)
    pred, model, _ = localize(feature_matrix(samples), [s.call_id for s in samples],
                              [s.timestamp for s in samples], truth, labeled, cfg)
    pred[labeled] = truth[labeled]
    write_locations(args.out, pred)
    if args.checkpoint:
        model.params.save(args.checkpoint)
    unlabeled = np.setdiff1d(np.arange(len(samples)), labeled)
    if unlabeled.size:
        log.info("mean distance error on unlabeled samples: %.2f m",
                 mean_distance_error(pred, truth, unlabeled))


def _fit_locations(args, samples):
    if args.true_locs:
        return true_locations(samples)
    if not args.locs:
        raise InvalidArgumentError("pass --locs or --true-locs")
    locs = read_locations(args.locs)
    if len(locs) != len(samples):
        raise InvalidArgumentError(f"{len(locs)} locations for {len(samples)} samples")
    return locs


def cmd_fit(args):
    samples = read_csv(args.train)
    locs = _fit_locations(args, samples)
    a = read_matrix_bin(args.matrix)
    _, y_lin, masks = serving_arrays(samples)
    cfg = PipelineConfig(seed=args.seed, bs_location=args.bs, method=args.method,
                         solver=args.solver, k=args.k, width=args.width, c=args.c,
                         beta=args.beta, iterations=args.iters, sigma_theta=args.sigma_theta,
                         sigma_phi=args.sigma_phi)
    model, report = fit_grids(cfg, y_lin, masks, locs, a)
    Path(args.out).write_text(json.dumps(gb.model_to_dict(model, report, locs),
                                         sort_keys=True) + "\n")


def _read_ybar(path):
    """One header row (beam names) and one row of dBm values, ``x`` for missing."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) != 2:
        raise ParseError(f"{path}: expected a header and one value row", line=len(rows))
    vals = rows[1]
    mask = np.array([v.strip() != "x" for v in vals])
    try:
        db = np.array([float(v) if m else SENTINEL_DBM for v, m in zip(vals, mask)])
    except ValueError as exc:
        raise ParseError(str(exc), line=2) from exc
    return np.where(mask, dbm_to_linear(db), 0.0), mask


def cmd_aps(args):
    a = read_matrix_bin(args.matrix)
    y, mask = _read_ybar(args.ybar)
    prior = None
    if args.solver == "gm":
        prior = GeometryPrior(args.centroid, args.bs, args.sigma_theta, args.sigma_phi)
    est = estimate_aps(args.solver, y, mask, a, args.c, prior)
    grid = a.grid if a.grid is not None else build_angular_grid()
    tilts, azs = grid.angles()
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_index", "tilt_deg", "azimuth_deg", "power_linear"])
        for i, p in est.pairs():
            w.writerow([i, repr(float(tilts[i])), repr(float(azs[i])), repr(p)])


def cmd_eval(args):
    model_d = json.loads(Path(args.model).read_text())
    model = gb.model_from_dict(model_d)
    if "locations" not in model_d:
        raise InvalidArgumentError("model file lacks training locations")
    test = read_csv(args.test)
    t_db, _, t_mask = serving_arrays(test)
    a_prime = read_matrix_bin(args.matrix_test)
    kw = {}
    if args.train and args.matrix:
        y_db, _, masks = serving_arrays(read_csv(args.train))
        kw = dict(train_y_db=y_db, train_masks=masks, a=read_matrix_bin(args.matrix))
    report = evaluate(model, np.asarray(model_d["locations"]), t_db, t_mask,
                      true_locations(test), a_prime, **kw)
    Path(args.out).write_text(report.to_json())
    log.info("test MAE %.3f dB", report.test_mae_db)


def cmd_pipeline(args):
    cfg = PipelineConfig.from_dict(json.loads(Path(args.config).read_text()))
    report = run_pipeline(cfg, out_dir=args.out_dir)
    log.info("test MAE %.3f dB", report.test_mae_db)


def cmd_sweep(args):
    rows = run_sweep(json.loads(Path(args.spec).read_text()))
    write_sweep_csv(rows, args.out)


# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mrlscm", description="MR-driven localized channel modeling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("matrix", help="build a measurement matrix from a radio config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("scenario", help="generate a synthetic scenario file")
    s.add_argument("--out", required=True)
    s.add_argument("--area", type=_quad, default=(10.0, -150.0, 310.0, 150.0),
                   help="x0,y0,x1,y1 in metres")
    s.add_argument("--regions", type=int, default=8)
    s.add_argument("--c-true", type=int, default=3)
    s.add_argument("--bs", type=_triple, default=(0.0, 0.0, 30.0))
    s.add_argument("--neighbors", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("gen", help="render MR samples for a scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--out-test")
    s.add_argument("--matrix-out")
    s.add_argument("--matrix-test-out")
    s.add_argument("--n-calls", type=int, default=100)
    s.add_argument("--n-test-calls", type=int)
    s.add_argument("--samples-per-call", type=int, default=20)
    s.add_argument("--speed", type=float, default=1.5)
    s.add_argument("--shadowing", type=float, default=4.0)
    s.add_argument("--no-missing", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("localize", help="semi-supervised hypergraph localization")
    s.add_argument("--train", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--label-fraction", type=float, default=0.1)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--gamma", type=float, default=0.5)
    s.add_argument("--tau", type=float, default=3.0)
    s.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    s.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("fit", help="construct grids and estimate per-grid APS")
    s.add_argument("--train", required=True)
    s.add_argument("--locs")
    s.add_argument("--true-locs", action="store_true", help="use the CSV's true locations")
    s.add_argument("--matrix", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=METHODS, default="joint")
    s.add_argument("--solver", choices=SOLVERS, default="gm")
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--width", type=float, default=50.0)
    s.add_argument("--c", type=int, default=6)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--iters", type=int, default=15)
    s.add_argument("--sigma-theta", type=float, default=10.0)
    s.add_argument("--sigma-phi", type=float, default=10.0)
    s.add_argument("--bs", type=_triple, default=(0.0, 0.0, 30.0))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("aps", help="estimate one APS from a mean RSRP vector")
    s.add_argument("--matrix", required=True)
    s.add_argument("--ybar", required=True)
    s.add_argument("--centroid", type=_pair, default=(100.0, 0.0))
    s.add_argument("--bs", type=_triple, default=(0.0, 0.0, 30.0))
    s.add_argument("--c", type=int, default=6)
    s.add_argument("--solver", choices=SOLVERS, default="gm")
    s.add_argument("--sigma-theta", type=float, default=10.0)
    s.add_argument("--sigma-phi", type=float, default=10.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_aps)

    s = sub.add_parser("eval", help="Train/Test MAE of a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--matrix-test", required=True)
    s.add_argument("--train")
    s.add_argument("--matrix")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", help="gen, localize, fit and eval from one config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("sweep", help="run a grid of pipeline configs into a CSV table")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"mrlscm {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"mrlscm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
