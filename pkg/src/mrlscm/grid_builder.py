"""Joint grid construction and per-grid APS estimation, plus baseline grids.

Samples are clustered on a mixed criterion (masked RSRP residual against the
grid's predicted beam powers plus a location term), and each grid's APS is
fitted to its masked mean RSRP. The two steps alternate.

Distances can be expressed in normalised units: RSRP terms are divided by
``power_scale`` (mW) and location terms by ``length_scale`` (m). With both
scales at 1 every formula is the raw one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from mrlscm.channel_model import MeasurementMatrix
from mrlscm.errors import InvalidArgumentError
from mrlscm.sparse_recovery import ApsEstimate, GeometryPrior, estimate_aps

log = logging.getLogger(__name__)

# ratio between the RSRP scale and the local RSRP noise level in fit_joint
NOISE_FACTOR = 32.0


def _as_matrix(a):
    return a.a if isinstance(a, MeasurementMatrix) else np.asarray(a, dtype=float)


def valid_distance(y_i, m_i, a, x_k) -> float:
    """(valid beams / M) * ||m_i * (A x_k - y_i)||_2, in linear power."""
    y_i = np.asarray(y_i, dtype=float)
    m_i = np.asarray(m_i, dtype=bool)
    pred = _as_matrix(a) @ np.asarray(x_k, dtype=float)
    diff = np.where(m_i, pred - y_i, 0.0)
    return float(m_i.sum() / m_i.size * np.linalg.norm(diff))


def valid_distance_matrix(Y, masks, preds, chunk=2048):
    """Valid distance of every sample (rows of Y) to every predicted vector (rows of preds)."""
    Y = np.asarray(Y, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    preds = np.asarray(preds, dtype=float)
    n, m = Y.shape
    out = np.empty((n, preds.shape[0]))
    frac = masks.sum(1) / m
    for s in range(0, n, chunk):
        diff = preds[None, :, :] - Y[s:s + chunk, None, :]
        diff *= masks[s:s + chunk, None, :]
        out[s:s + chunk] = np.sqrt((diff ** 2).sum(-1)) * frac[s:s + chunk, None]
    return out


def location_distance_matrix(P, centers):
    P = np.asarray(P, dtype=float)
    centers = np.asarray(centers, dtype=float)
    return np.sqrt(((P[:, None, :] - centers[None, :, :]) ** 2).sum(-1))


@dataclass
class GridModel:
    k: int
    assignment: np.ndarray
    centroids: np.ndarray                       # (K, 2)
    mean_rsrp: np.ndarray                       # (K, M) linear
    mean_mask: np.ndarray                       # (K, M) bool
    valid_counts: np.ndarray                    # (K, M)
    aps: List[ApsEstimate]
    beta: float = 1.0
    power_scale: float = 1.0
    length_scale: float = 1.0

    def aps_matrix(self, n_a):
        X = np.zeros((self.k, n_a))
        for k, est in enumerate(self.aps):
            if est is not None:
                X[k] = est.x
        return X

    def predicted_rsrp(self, a):
        """(K, M) linear beam powers A x_k."""
        A = _as_matrix(a)
        return self.aps_matrix(A.shape[1]) @ A.T

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.k)


@dataclass
class IterationRecord:
    assignment: np.ndarray          # raw Eq.-(15) argmin, before any re-seeding
    assign_centroids: np.ndarray    # centroids used by that assignment
    assign_predictions: np.ndarray  # (K, M) A x_k used by that assignment
    reseeded: List[int]
    final_assignment: np.ndarray    # after re-seeding; the centroids are its grid means
    centroids: np.ndarray           # after the centroid update


@dataclass
class FitReport:
    objective_first: List[float] = field(default_factory=list)
    objective_second: List[float] = field(default_factory=list)
    objective_total: List[float] = field(default_factory=list)
    nonempty: List[int] = field(default_factory=list)
    reseed_events: int = 0
    history: List[IterationRecord] = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.history) if self.history else max(len(self.objective_total) - 1, 0)


def assignment_criteria(Y, masks, locations, preds, centroids, beta,
                        power_scale=1.0, length_scale=1.0):
    """(N, K) matrix of valid distance + beta * location distance."""
    d = valid_distance_matrix(np.asarray(Y) / power_scale, masks, np.asarray(preds) / power_scale)
    return d + beta * location_distance_matrix(locations, centroids) / length_scale


def assign_grids(Y, masks, locations, model: GridModel, a) -> np.ndarray:
    """Nearest grid under the mixed criterion; ties go to the lowest index."""
    crit = assignment_criteria(Y, masks, locations, model.predicted_rsrp(a), model.centroids,
                               model.beta, model.power_scale, model.length_scale)
    return np.argmin(crit, axis=1)


def update_centroids(assignment, locations, k) -> np.ndarray:
    """Per-grid mean location; every grid must be non-empty."""
    assignment = np.asarray(assignment, dtype=int)
    locations = np.asarray(locations, dtype=float)
    counts = np.bincount(assignment, minlength=k)
    if np.any(counts == 0):
        raise InvalidArgumentError(f"empty grids {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((k, locations.shape[1]))
    np.add.at(sums, assignment, locations)
    return sums / counts[:, None]


def grid_mean_rsrp(Y, masks):
    """Masked per-beam mean of linear RSRP rows: (mean, mask, valid counts)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    counts = masks.sum(0)
    total = np.where(masks, Y, 0.0).sum(0)
    mean = np.where(counts > 0, total / np.maximum(counts, 1), 0.0)
    return mean, counts > 0, counts


def _grid_means(Y, masks, assignment, k):
    M = Y.shape[1]
    counts = np.zeros((k, M))
    total = np.zeros((k, M))
    np.add.at(counts, assignment, masks.astype(float))
    np.add.at(total, assignment, np.where(masks, Y, 0.0))
    mean = np.where(counts > 0, total / np.maximum(counts, 1), 0.0)
    return mean, counts > 0, counts.astype(int)


# --------------------------------------------------------------------------
# k-means machinery

def _kmeanspp_lloyd(n, k, rng, dist, centers_of, center_at, max_iter=100):
    """k-means++ seeding then Lloyd iterations.

    dist(state) -> (n, k') distances; centers_of(assignment) -> state;
    center_at(indices) -> state holding those samples as centers.
    """
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"need 1 <= k <= N, got k={k}, N={n}")
    chosen = [int(rng.integers(n))]
    d_min = dist(center_at(chosen))[:, 0]
    for _ in range(1, k):
        w = d_min ** 2
        w[chosen] = 0.0
        if w.sum() > 0:
            nxt = int(rng.choice(n, p=w / w.sum()))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d_min = np.minimum(d_min, dist(center_at([nxt]))[:, 0])
    state = center_at(chosen)
    assignment = None
    for _ in range(max_iter):
        d = dist(state)
        new = np.argmin(d, axis=1)
        new = _reseed_empty(new, d[np.arange(n), new], k)
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        state = centers_of(assignment)
    return assignment


def _reseed_empty(assignment, cost, k):
    assignment = assignment.copy()
    cost = np.asarray(cost, dtype=float).copy()
    counts = np.bincount(assignment, minlength=k)
    for g in np.flatnonzero(counts == 0):
        movable = counts[assignment] > 1
        if not movable.any():
            break
        i = int(np.argmax(np.where(movable, cost, -np.inf)))
        counts[assignment[i]] -= 1
        assignment[i] = g
        counts[g] = 1
        cost[i] = -np.inf
    return assignment


def init_kmeanspp(Y, masks, locations, k, beta, seed, power_scale=1.0, length_scale=1.0,
                  max_iter=100) -> np.ndarray:
    """k-means++ and Lloyd refinement on joint (RSRP, location) points.

    Distance: masked RSRP Euclidean distance + beta * location distance.
    """
    Y = np.asarray(Y, dtype=float) / power_scale
    masks = np.asarray(masks, dtype=bool)
    P = np.asarray(locations, dtype=float) / length_scale
    n = Y.shape[0]
    rng = np.random.default_rng(seed)

    def center_at(idx):
        idx = list(idx)
        return Y[idx], masks[idx], P[idx]

    def centers_of(assignment):
        mean, cmask, _ = _grid_means(Y, masks, assignment, k)
        loc = update_centroids(assignment, P, k)
        return mean, cmask, loc

    def dist(state):
        cy, cm, cp = state
        out = np.empty((n, cy.shape[0]))
        for j in range(cy.shape[0]):
            diff = np.where(masks & cm[j], Y - cy[j], 0.0)
            out[:, j] = np.linalg.norm(diff, axis=1)
        return out + beta * location_distance_matrix(P, cp)

    return _kmeanspp_lloyd(n, k, rng, dist, centers_of, center_at, max_iter)


def baseline_kmeans_location(locations, k, seed, max_iter=100) -> np.ndarray:
    P = np.asarray(locations, dtype=float)
    rng = np.random.default_rng(seed)
    return _kmeanspp_lloyd(P.shape[0], k, rng,
                           lambda c: location_distance_matrix(P, c),
                           lambda asg: update_centroids(asg, P, k),
                           lambda idx: P[list(idx)], max_iter)


def baseline_kmeans_rsrp(Y, masks, k, seed, max_iter=100) -> np.ndarray:
    """Lloyd on RSRP with the valid distance; centers are masked means."""
    Y = np.asarray(Y, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    rng = np.random.default_rng(seed)
    return _kmeanspp_lloyd(Y.shape[0], k, rng,
                           lambda c: valid_distance_matrix(Y, masks, c),
                           lambda asg: _grid_means(Y, masks, asg, k)[0],
                           lambda idx: Y[list(idx)], max_iter)


def baseline_uniform_grid(locations, width) -> np.ndarray:
    """Square cells of side ``width`` anchored at the bounding-box corner; empty cells dropped."""
    if not width > 0:
        raise InvalidArgumentError("grid width must be positive")
    P = np.asarray(locations, dtype=float)
    cells = np.floor((P - P.min(0)) / width + 1e-9).astype(np.int64)
    _, assignment = np.unique(cells, axis=0, return_inverse=True)
    return assignment.ravel()


# --------------------------------------------------------------------------
# APS per grid and the alternating loop

def fit_aps(Y, masks, locations, assignment, a, bs_location, c, k=None, solver="gm",
            sigma_theta=10.0, sigma_phi=10.0, beta=1.0, power_scale=1.0, length_scale=1.0,
            centroids=None, cache: Optional[dict] = None) -> GridModel:
    """Estimate the APS of every grid of a fixed assignment from its masked mean RSRP.

    ``cache`` maps a grid's member set to its estimate. Mean RSRP, mask and
    centroid are functions of the members, so reuse is exact as long as the
    caller keeps the remaining arguments fixed.
    """
    Y = np.asarray(Y, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    assignment = np.asarray(assignment, dtype=int)
    k = int(assignment.max()) + 1 if k is None else k
    mean, cmask, counts = _grid_means(Y, masks, assignment, k)
    if centroids is None:
        centroids = update_centroids(assignment, locations, k)
    if cache is None:
        aps = [_grid_aps(mean[g], cmask[g], a, centroids[g], bs_location, c, solver,
                         sigma_theta, sigma_phi) for g in range(k)]
    else:
        order = np.argsort(assignment, kind="stable")
        members = np.split(order, np.cumsum(np.bincount(assignment, minlength=k))[:-1])
        aps = []
        for g in range(k):
            key = (members[g].tobytes(), np.asarray(centroids[g], dtype=float).tobytes())
            if key not in cache:
                cache[key] = _grid_aps(mean[g], cmask[g], a, centroids[g], bs_location, c,
                                       solver, sigma_theta, sigma_phi)
            aps.append(cache[key])
    return GridModel(k, assignment, np.asarray(centroids, dtype=float), mean, cmask, counts,
                     aps, beta, power_scale, length_scale)


def _grid_aps(y_bar, mask, a, centroid, bs_location, c, solver, sigma_theta, sigma_phi):
    if not mask.any():
        return ApsEstimate(np.zeros(_as_matrix(a).shape[1]), np.zeros(0, int), 0.0)
    prior = None
    if solver == "gm":
        if np.hypot(centroid[0] - bs_location[0], centroid[1] - bs_location[1]) > 0:
            prior = GeometryPrior(tuple(centroid), tuple(bs_location), sigma_theta, sigma_phi)
    return estimate_aps(solver, y_bar, mask, a, c, prior)


def joint_objective(Y, masks, locations, model: GridModel, a):
    """Mixed objective: per-grid size-normalised RSRP and location terms."""
    preds = model.predicted_rsrp(a) / model.power_scale
    Ys = np.asarray(Y) / model.power_scale
    resid = np.where(masks, preds[model.assignment] - Ys, 0.0)
    first_i = (resid ** 2).sum(1)
    loc = (np.asarray(locations) - model.centroids[model.assignment]) / model.length_scale
    second_i = model.beta * (loc ** 2).sum(1)
    sizes = np.bincount(model.assignment, minlength=model.k).astype(float)
    w = 1.0 / sizes[model.assignment]
    return float((w * first_i).sum()), float((w * second_i).sum())


def default_scales(Y, masks, locations, k, noise_factor=NOISE_FACTOR):
    """Data-driven (power_scale, length_scale) for the mixed criterion.

    The length scale is the side of a square grid cell, sqrt(bbox area / K).
    The power scale is ``noise_factor`` times the median valid distance
    between each sample and its nearest neighbour in location, i.e. the RSRP
    spread observed at (almost) no displacement.
    """
    Y = np.asarray(Y, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    P = np.asarray(locations, dtype=float)
    n, m = Y.shape
    if n < 2:
        return 1.0, 1.0
    span = P.max(0) - P.min(0)
    ls = float(np.sqrt(span[0] * span[1] / k))
    if not ls > 0:
        ls = float(max(span.max(), 1.0))
    _, nn = cKDTree(P).query(P, k=2)
    j = nn[:, 1]
    both = masks & masks[j]
    d = masks.sum(1) / m * np.linalg.norm(np.where(both, Y - Y[j], 0.0), axis=1)
    noise = float(np.median(d)) or float(np.mean(d))
    if not noise > 0:
        noise = float(np.median(masks.sum(1) / m * np.linalg.norm(Y, axis=1))) or 1.0
    return noise_factor * noise, ls


def fit_joint(Y, masks, locations, a, bs_location, k, c, beta=1.0, iterations=15,
              sigma_theta=10.0, sigma_phi=10.0, seed=0, solver="gm",
              power_scale: Optional[float] = None, length_scale: Optional[float] = None,
              keep_history=False):
    """Alternate grid assignment / centroid update with per-grid APS estimation.

    ``iterations`` reassignment rounds follow the k-means++ initialisation and
    every round starts with an APS fit, with a final APS fit on the last
    assignment; ``iterations=0`` returns the initialisation with its APS.
    Scales left as None default to :func:`default_scales`.
    """
    Y = np.asarray(Y, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    P = np.asarray(locations, dtype=float)
    auto_ps, auto_ls = default_scales(Y, masks, P, k)
    ps = auto_ps if power_scale is None else power_scale
    ls = auto_ls if length_scale is None else length_scale

    assignment = init_kmeanspp(Y, masks, P, k, beta, seed, ps, ls)
    centroids = update_centroids(assignment, P, k)
    report = FitReport()
    cache: dict = {}

    def fit(asg, cents):
        return fit_aps(Y, masks, P, asg, a, bs_location, c, k, solver, sigma_theta, sigma_phi,
                       beta, ps, ls, cents, cache)

    def record(model):
        f1, f2 = joint_objective(Y, masks, P, model, a)
        report.objective_first.append(f1)
        report.objective_second.append(f2)
        report.objective_total.append(f1 + f2)
        report.nonempty.append(int((model.sizes() > 0).sum()))

    model = fit(assignment, centroids)
    record(model)
    for _ in range(iterations):
        preds = model.predicted_rsrp(a)
        crit = assignment_criteria(Y, masks, P, preds, model.centroids, beta, ps, ls)
        raw = np.argmin(crit, axis=1)
        assignment = _reseed_empty(raw, crit[np.arange(len(raw)), raw], k)
        reseeded = sorted(set(np.flatnonzero(raw != assignment).tolist()))
        if reseeded:
            report.reseed_events += len(reseeded)
            log.info("re-seeded %d empty grids", len(reseeded))
        centroids = update_centroids(assignment, P, k)
        if keep_history:
            report.history.append(IterationRecord(raw, model.centroids.copy(), preds,
                                                  reseeded, assignment.copy(), centroids))
        model = fit(assignment, centroids)
        record(model)
    return model, report


# --------------------------------------------------------------------------
# persistence

def model_to_dict(model: GridModel, report: Optional[FitReport] = None, locations=None):
    d = {
        "k": model.k,
        "beta": model.beta,
        "power_scale": model.power_scale,
        "length_scale": model.length_scale,
        "n_a": int(model.aps[0].x.size) if model.aps else 0,
        "assignment": model.assignment.astype(int).tolist(),
        "centroids": model.centroids.tolist(),
        "mean_rsrp": model.mean_rsrp.tolist(),
        "mean_mask": model.mean_mask.astype(int).tolist(),
        "valid_counts": np.asarray(model.valid_counts).astype(int).tolist(),
        "aps": [[[i, p] for i, p in est.pairs()] for est in model.aps],
    }
    if locations is not None:
        d["locations"] = np.asarray(locations, dtype=float).tolist()
    if report is not None:
        d["objective_trace"] = [list(t) for t in zip(report.objective_first,
                                                     report.objective_second,
                                                     report.objective_total)]
        d["nonempty_trace"] = list(report.nonempty)
    return d


def model_from_dict(d) -> GridModel:
    n_a = int(d["n_a"])
    aps = []
    for pairs in d["aps"]:
        x = np.zeros(n_a)
        idx = np.array([int(i) for i, _ in pairs], dtype=int)
        x[idx] = [float(p) for _, p in pairs]
        aps.append(ApsEstimate(x, idx, float("nan")))
    return GridModel(int(d["k"]), np.asarray(d["assignment"], dtype=int),
                     np.asarray(d["centroids"], dtype=float).reshape(-1, 2),
                     np.asarray(d["mean_rsrp"], dtype=float),
                     np.asarray(d["mean_mask"], dtype=bool),
                     np.asarray(d["valid_counts"], dtype=int), aps,
                     float(d["beta"]), float(d["power_scale"]), float(d["length_scale"]))
