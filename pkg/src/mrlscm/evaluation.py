"""Metrics, the end-to-end pipeline and parameter sweeps."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from mrlscm import grid_builder as gb
from mrlscm.channel_model import write_matrix_bin
from mrlscm.errors import InvalidArgumentError, ParseError, StageError
from mrlscm.hgnn_loc import TrainConfig, knn_baseline, localize, mean_distance_error, split_labels
from mrlscm.synth_data import (SENTINEL_DBM, MissingPolicy, feature_matrix, generate_scenario,
                               make_dataset, save_scenario, serving_arrays, true_locations,
                               write_csv)

log = logging.getLogger(__name__)

METHODS = ("joint", "uniform", "kmeans_location", "kmeans_rsrp")


def assign_test_grids(test_locations, train_locations, assignment, k=None, chunk=1024):
    """Grid of the nearest training sample (squared Euclidean); ties to the lowest grid."""
    P = np.asarray(train_locations, dtype=float)
    Q = np.asarray(test_locations, dtype=float)
    assignment = np.asarray(assignment, dtype=int)
    if P.shape[0] == 0 or assignment.size == 0:
        raise InvalidArgumentError("empty grid model")
    k = int(assignment.max()) + 1 if k is None else k
    if np.any(np.bincount(assignment, minlength=k) == 0):
        raise InvalidArgumentError("every training grid must be non-empty")
    order = np.argsort(assignment, kind="stable")
    starts = np.searchsorted(assignment[order], np.arange(k))
    Ps = P[order]
    out = np.empty(Q.shape[0], dtype=int)
    for s in range(0, Q.shape[0], chunk):
        d2 = ((Q[s:s + chunk, None, :] - Ps[None, :, :]) ** 2).sum(-1)
        per_grid = np.minimum.reduceat(d2, starts, axis=1)
        out[s:s + chunk] = np.argmin(per_grid, axis=1)
    return out


def predicted_dbm(pred_linear):
    """dBm of predicted linear powers, floored at the sentinel level."""
    p = np.asarray(pred_linear, dtype=float)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(np.where(p > 0, p, 0.0))
    return np.maximum(db, SENTINEL_DBM)


def per_sample_abs_db(pred_linear, y_db, masks, assignment):
    """Mean absolute dB error over each sample's valid beams (NaN if none valid)."""
    pred_db = predicted_dbm(pred_linear)[np.asarray(assignment, dtype=int)]
    masks = np.asarray(masks, dtype=bool)
    err = np.where(masks, np.abs(pred_db - np.asarray(y_db, dtype=float)), 0.0)
    n_valid = masks.sum(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_valid > 0, err.sum(1) / np.maximum(n_valid, 1), np.nan)


def grid_mae(pred_linear, y_db, masks, assignment, k):
    """(average over populated grids, per-grid MAE with NaN for empty grids, per-grid counts)."""
    assignment = np.asarray(assignment, dtype=int)
    e = per_sample_abs_db(pred_linear, y_db, masks, assignment)
    ok = ~np.isnan(e)
    counts = np.bincount(assignment[ok], minlength=k)
    sums = np.bincount(assignment[ok], weights=e[ok], minlength=k)
    per_grid = np.full(k, np.nan)
    populated = counts > 0
    per_grid[populated] = sums[populated] / counts[populated]
    if not populated.any():
        raise InvalidArgumentError("no grid holds a sample with a valid beam")
    if (~populated).any():
        log.info("%d grids without samples excluded from the average", int((~populated).sum()))
    return float(per_grid[populated].mean()), per_grid, counts


def train_mae(model: gb.GridModel, y_db, masks, a) -> float:
    return grid_mae(model.predicted_rsrp(a), y_db, masks, model.assignment, model.k)[0]


def test_mae(model: gb.GridModel, y_db, masks, test_assignment, a_prime) -> float:
    return grid_mae(model.predicted_rsrp(a_prime), y_db, masks, test_assignment, model.k)[0]


# --------------------------------------------------------------------------
# reports

def _clean(v):
    if isinstance(v, float):
        return None if not np.isfinite(v) else v
    if isinstance(v, (np.floating,)):
        return _clean(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


@dataclass
class EvalReport:
    train_mae_db: Optional[float]
    test_mae_db: Optional[float]
    mean_distance_error_m: Optional[float] = None
    knn_distance_error_m: Optional[float] = None
    per_grid: List[dict] = field(default_factory=list)
    sweep: List[dict] = field(default_factory=list)
    config: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_clean(dataclasses.asdict(self)), sort_keys=True, indent=2) + "\n"


def evaluate(model: gb.GridModel, train_locations, test_y_db, test_masks, test_locations,
             a_prime, train_y_db=None, train_masks=None, a=None) -> EvalReport:
    """Test MAE (and Train MAE when training data is given) with per-grid diagnostics."""
    test_asg = assign_test_grids(test_locations, train_locations, model.assignment, model.k)
    te, te_grid, te_counts = grid_mae(model.predicted_rsrp(a_prime), test_y_db, test_masks,
                                      test_asg, model.k)
    tr, tr_grid = None, np.full(model.k, np.nan)
    if train_y_db is not None and a is not None:
        tr, tr_grid, _ = grid_mae(model.predicted_rsrp(a), train_y_db, train_masks,
                                  model.assignment, model.k)
    sizes = model.sizes()
    per_grid = [{"grid": g, "train_samples": int(sizes[g]), "test_samples": int(te_counts[g]),
                 "train_mae_db": float(tr_grid[g]), "test_mae_db": float(te_grid[g])}
                for g in range(model.k)]
    return EvalReport(tr, te, per_grid=per_grid)


# --------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineConfig:
    seed: int = 0
    # scenario
    area: tuple = (10.0, -150.0, 310.0, 150.0)
    n_regions: int = 8
    c_true: int = 3
    bs_location: tuple = (0.0, 0.0, 30.0)
    # data
    n_calls: int = 100
    samples_per_call: int = 20
    n_test_calls: Optional[int] = None
    shadowing_db: float = 4.0
    missing: bool = True
    # localization
    label_fraction: float = 0.1
    true_locations: bool = False
    learning_rate: float = 1e-2
    epochs: int = 300
    hgnn_k: int = 8
    gamma: float = 0.5
    tau: float = 3.0
    # grids
    method: str = "joint"
    solver: str = "gm"
    k: Optional[int] = None
    width: float = 50.0
    c: int = 6
    beta: float = 1.0
    iterations: int = 15
    sigma_theta: float = 10.0
    sigma_phi: float = 10.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown method {self.method!r}; choose from {METHODS}")
        self.area = tuple(float(v) for v in self.area)
        self.bs_location = tuple(float(v) for v in self.bs_location)

    @property
    def n_grids(self):
        return self.k if self.k is not None else self.n_regions

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgumentError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def seeds(self):
        """Independent sub-seeds for scenario, data, labels, training and grid fitting."""
        ss = np.random.SeedSequence([int(self.seed), 0x5EED])
        return [int(c.generate_state(1)[0]) for c in ss.spawn(5)]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, exc) from exc


def _data_key(cfg: PipelineConfig):
    return (cfg.seed, cfg.area, cfg.n_regions, cfg.c_true, cfg.bs_location, cfg.n_calls,
            cfg.samples_per_call, cfg.n_test_calls, cfg.shadowing_db, cfg.missing)


def _gen(cfg: PipelineConfig):
    s_scn, s_data = cfg.seeds()[:2]
    scenario = generate_scenario(cfg.area, cfg.n_regions, cfg.c_true, s_scn,
                                 bs_location=cfg.bs_location)
    data = make_dataset(scenario, cfg.n_calls, cfg.samples_per_call,
                        shadowing_db=cfg.shadowing_db,
                        missing=MissingPolicy() if cfg.missing else MissingPolicy.none(),
                        seed=s_data, n_test_calls=cfg.n_test_calls)
    return scenario, data


def _localize(cfg: PipelineConfig, data):
    s_label, s_train = cfg.seeds()[2:4]
    feats = feature_matrix(data.train)
    truth = true_locations(data.train)
    labeled = split_labels(len(data.train), cfg.label_fraction, s_label)
    tc = TrainConfig(gamma=cfg.gamma, k=cfg.hgnn_k, tau=cfg.tau, learning_rate=cfg.learning_rate,
                     epochs=cfg.epochs, seed=s_train, label_fraction=cfg.label_fraction)
    pred, _, _ = localize(feats, [s.call_id for s in data.train],
                          [s.timestamp for s in data.train], truth, labeled, tc)
    pred[labeled] = truth[labeled]
    unlabeled = np.setdiff1d(np.arange(len(truth)), labeled)
    err = mean_distance_error(pred, truth, unlabeled) if unlabeled.size else 0.0
    knn_err = None
    if labeled.size >= 5 and unlabeled.size:
        kp = knn_baseline(feats[labeled], truth[labeled], feats[unlabeled], k=5, gamma=cfg.gamma)
        knn_err = float(np.linalg.norm(kp - truth[unlabeled], axis=1).mean())
    return pred, err, knn_err


def fit_grids(cfg: PipelineConfig, y_lin, masks, locations, a):
    """Fit a grid model of the configured method; returns (GridModel, FitReport or None)."""
    s_fit = cfg.seeds()[4]
    k = cfg.n_grids
    common = dict(sigma_theta=cfg.sigma_theta, sigma_phi=cfg.sigma_phi)
    if cfg.method == "joint":
        return gb.fit_joint(y_lin, masks, locations, a, cfg.bs_location, k, cfg.c, cfg.beta,
                            cfg.iterations, seed=s_fit, solver=cfg.solver, **common)
    if cfg.method == "uniform":
        asg = gb.baseline_uniform_grid(locations, cfg.width)
    elif cfg.method == "kmeans_location":
        asg = gb.baseline_kmeans_location(locations, k, s_fit)
    else:
        asg = gb.baseline_kmeans_rsrp(y_lin, masks, k, s_fit)
    model = gb.fit_aps(y_lin, masks, locations, asg, a, cfg.bs_location, cfg.c,
                       solver=cfg.solver, beta=cfg.beta, **common)
    return model, None


def run_pipeline(cfg: PipelineConfig, out_dir=None, cache: Optional[dict] = None) -> EvalReport:
    """gen -> localize -> fit -> eval. Artifacts are written to ``out_dir`` when given.

    ``cache`` (a plain dict) lets sweeps reuse generated data and localization results.
    """
    cache = {} if cache is None else cache
    dkey = ("data",) + _data_key(cfg)
    if dkey not in cache:
        cache[dkey] = _stage("gen", _gen, cfg)
    scenario, data = cache[dkey]
    truth = true_locations(data.train)

    dist_err = knn_err = None
    if cfg.true_locations:
        locations = truth
    else:
        lkey = ("loc",) + _data_key(cfg) + (cfg.label_fraction, cfg.learning_rate, cfg.epochs,
                                            cfg.hgnn_k, cfg.gamma, cfg.tau)
        if lkey not in cache:
            cache[lkey] = _stage("localize", _localize, cfg, data)
        locations, dist_err, knn_err = cache[lkey]

    y_db, y_lin, masks = serving_arrays(data.train)
    model, report = _stage("fit", fit_grids, cfg, y_lin, masks, locations, data.matrix_train)

    t_db, _, t_masks = serving_arrays(data.test)
    result = _stage("eval", evaluate, model, locations, t_db, t_masks, true_locations(data.test),
                    data.matrix_test, y_db, masks, data.matrix_train)
    result.mean_distance_error_m = dist_err
    result.knn_distance_error_m = knn_err
    result.config = cfg.to_dict()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_scenario(scenario, out / "scenario.json")
        write_csv(data.train, out / "train.csv")
        write_csv(data.test, out / "test.csv")
        write_matrix_bin(out / "A.bin", data.matrix_train)
        write_matrix_bin(out / "Aprime.bin", data.matrix_test)
        write_locations(out / "locs.csv", locations)
        (out / "model.json").write_text(
            json.dumps(gb.model_to_dict(model, report, locations), sort_keys=True) + "\n")
        (out / "report.json").write_text(result.to_json())
    return result


def write_locations(path, locations):
    """CSV with columns sample_index, pred_x, pred_y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "pred_x", "pred_y"])
        for i, (x, y) in enumerate(np.asarray(locations, dtype=float)):
            w.writerow([i, repr(float(x)), repr(float(y))])


def read_locations(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [c.strip() for c in rows[0]] != ["sample_index", "pred_x", "pred_y"]:
        raise ParseError(f"{path}: expected header sample_index,pred_x,pred_y", line=1)
    out = np.empty((len(rows) - 1, 2))
    for n, r in enumerate(rows[1:]):
        try:
            idx, x, y = int(r[0]), float(r[1]), float(r[2])
        except (ValueError, IndexError) as exc:
            raise ParseError(str(exc), line=n + 2) from exc
        if idx != n:
            raise ParseError(f"sample_index {idx} out of order", line=n + 2)
        out[n] = (x, y)
    return out


# --------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ("method", "solver", "k", "width", "seed", "label_fraction", "true_locations",
                 "train_mae_db", "test_mae_db", "mean_distance_error_m", "knn_distance_error_m")


def expand_sweep(spec: dict) -> List[PipelineConfig]:
    """Cartesian product of ``spec["vary"]`` lists over ``spec["base"]``, in key order."""
    base = dict(spec.get("base", {}))
    vary = spec.get("vary", {})
    keys = sorted(vary)
    configs = []
    for values in itertools.product(*(vary[k] for k in keys)):
        d = dict(base)
        d.update(zip(keys, values))
        configs.append(PipelineConfig.from_dict(d))
    return configs


def run_sweep(spec: dict) -> List[dict]:
    cache: dict = {}
    rows = []
    for cfg in expand_sweep(spec):
        rep = run_pipeline(cfg, cache=cache)
        row = {c: getattr(cfg, c) for c in SWEEP_COLUMNS[:7]}
        row["k"] = cfg.n_grids if cfg.method != "uniform" else len(rep.per_grid)
        row.update(train_mae_db=rep.train_mae_db, test_mae_db=rep.test_mae_db,
                   mean_distance_error_m=rep.mean_distance_error_m,
                   knn_distance_error_m=rep.knn_distance_error_m)
        rows.append(row)
        log.info("sweep row %s", row)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(SWEEP_COLUMNS))
        w.writeheader()
        for r in rows:
            w.writerow({c: ("" if r.get(c) is None else
                            repr(r[c]) if isinstance(r[c], float) else r[c]) for c in SWEEP_COLUMNS})


def median_by(rows, keys, value="test_mae_db"):
    """Median of ``value`` over rows grouped by the ``keys`` tuple."""
    groups: Dict[tuple, list] = {}
    for r in rows:
        if r.get(value) is not None:
            groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return {g: float(np.median(v)) for g, v in sorted(groups.items(), key=lambda kv: str(kv[0]))}
