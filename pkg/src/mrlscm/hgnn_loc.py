"""Semi-supervised localization with hypergraph convolution.

Vertices are MR samples. Two hyperedge families connect them: beam-space
k-nearest neighbours (one edge per vertex, centroid included) and same-call
samples within a time window. Each layer averages vertex features into
hyperedges, scales them by a learnable per-family weight, averages back into
vertices and applies a linear map plus activation. Gradients are derived by
hand; the model is small enough that full-batch descent is cheap.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from mrlscm.errors import InvalidArgumentError, TrainingError

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
DEFAULT_WIDTHS = (200, 1000, 2)


# --------------------------------------------------------------------------
# distances and hypergraph construction

def beam_space_distance(r_i, r_j, gamma) -> float:
    r_i = np.asarray(r_i, dtype=float)
    r_j = np.asarray(r_j, dtype=float)
    if r_i.shape != r_j.shape:
        raise InvalidArgumentError("RSRP vectors must have equal length")
    eu = np.linalg.norm(r_i - r_j)
    if gamma == 1:
        return float(eu)
    ni, nj = np.linalg.norm(r_i), np.linalg.norm(r_j)
    if ni == 0 or nj == 0:
        raise InvalidArgumentError("cosine distance undefined for a zero vector")
    cos = float(r_i @ r_j) / (ni * nj)
    return float(max(gamma * eu + (1 - gamma) * (1 - cos), 0.0))


def pairwise_beam_distance(R, Q, gamma):
    """Distances between every row of Q and every row of R, shape (len(Q), len(R))."""
    R = np.asarray(R, dtype=float)
    Q = np.asarray(Q, dtype=float)
    sq = (Q ** 2).sum(1)[:, None] + (R ** 2).sum(1)[None, :] - 2.0 * Q @ R.T
    eu = np.sqrt(np.maximum(sq, 0.0))
    if gamma == 1:
        return eu
    nr, nq = np.linalg.norm(R, axis=1), np.linalg.norm(Q, axis=1)
    if np.any(nr == 0) or np.any(nq == 0):
        raise InvalidArgumentError("cosine distance undefined for a zero vector")
    cos = (Q @ R.T) / (nq[:, None] * nr[None, :])
    return np.maximum(gamma * eu + (1 - gamma) * (1 - cos), 0.0)


def _knn_rows(R, Q, k, gamma, exclude_self=False, chunk=512):
    n_q = Q.shape[0]
    out = np.empty((n_q, k), dtype=int)
    for s in range(0, n_q, chunk):
        d = pairwise_beam_distance(R, Q[s:s + chunk], gamma)
        if exclude_self:
            rows = np.arange(d.shape[0])
            d[rows, s + rows] = np.inf
        # stable sort: equal distances resolve to the lower index
        out[s:s + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def build_beam_hyperedges(features, k, gamma) -> List[np.ndarray]:
    """One hyperedge per vertex: the vertex and its k nearest beam-space neighbours."""
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if not 1 <= k < n:
        raise InvalidArgumentError(f"need 1 <= k < n_vertices, got k={k}, n={n}")
    nn = _knn_rows(features, features, k, gamma, exclude_self=True)
    return [np.sort(np.concatenate([[v], nn[v]])) for v in range(n)]


def build_temporal_hyperedges(call_ids: Sequence, timestamps, tau) -> List[np.ndarray]:
    """One hyperedge per vertex: same-call samples within ``tau`` seconds."""
    if not tau > 0:
        raise InvalidArgumentError("tau must be positive")
    t = np.asarray(timestamps, dtype=float)
    groups = {}
    for i, c in enumerate(call_ids):
        groups.setdefault(c, []).append(i)
    edges: List[Optional[np.ndarray]] = [None] * len(t)
    for members in groups.values():
        members = np.asarray(members)
        order = members[np.argsort(t[members], kind="stable")]
        ts = t[order]
        lo = np.searchsorted(ts, ts - tau, side="left")
        hi = np.searchsorted(ts, ts + tau, side="right")
        for pos, v in enumerate(order):
            edges[v] = np.sort(order[lo[pos]:hi[pos]])
    return edges


@dataclass
class HypergraphIncidence:
    n_vertices: int
    edges_beam: List[np.ndarray]
    edges_time: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for e in list(self.edges_beam) + list(self.edges_time):
            e = np.asarray(e)
            if e.size == 0:
                raise InvalidArgumentError("hyperedges must be non-empty")
            if e.min() < 0 or e.max() >= self.n_vertices:
                raise InvalidArgumentError("hyperedge vertex index out of range")

    def _family_incidence(self, edges):
        if not edges:
            return sp.csr_matrix((self.n_vertices, 0))
        rows = np.concatenate([np.asarray(e) for e in edges])
        cols = np.repeat(np.arange(len(edges)), [len(e) for e in edges])
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)),
                             shape=(self.n_vertices, len(edges)))

    @cached_property
    def incidence(self):
        """H = [H1, H2] as a sparse 0/1 matrix."""
        return sp.hstack([self._family_incidence(self.edges_beam),
                          self._family_incidence(self.edges_time)]).tocsr()

    @property
    def edge_types(self):
        return np.concatenate([np.zeros(len(self.edges_beam), int),
                               np.ones(len(self.edges_time), int)])

    @cached_property
    def propagators(self):
        """(P1, P2): vertex -> hyperedge mean -> vertex mean, per family.

        The full operator is ``sigmoid(w1) P1 + sigmoid(w2) P2``.
        """
        H1 = self._family_incidence(self.edges_beam)
        H2 = self._family_incidence(self.edges_time)
        deg_v = np.asarray(H1.sum(1)).ravel() + np.asarray(H2.sum(1)).ravel()
        if np.any(deg_v == 0):
            raise InvalidArgumentError("every vertex needs at least one hyperedge")
        dv = sp.diags(1.0 / deg_v)
        out = []
        for H in (H1, H2):
            deg_e = np.asarray(H.sum(0)).ravel()
            de = sp.diags(1.0 / np.where(deg_e > 0, deg_e, 1.0))
            out.append((dv @ H @ de @ H.T).tocsr())
        return tuple(out)

    def operators(self, dtype=np.float64):
        dtype = np.dtype(dtype)
        cache = self.__dict__.setdefault("_ops", {})
        if dtype not in cache:
            cache[dtype] = tuple(P.astype(dtype) for P in self.propagators)
        return cache[dtype]


def build_hypergraph(features, call_ids, timestamps, k=8, gamma=0.5, tau=3.0):
    features = np.asarray(features, dtype=float)
    return HypergraphIncidence(features.shape[0],
                               build_beam_hyperedges(features, k, gamma),
                               build_temporal_hyperedges(call_ids, timestamps, tau))


# --------------------------------------------------------------------------
# model

@dataclass
class HgnnParams:
    thetas: List[np.ndarray]            # Theta^l with shape (d_out, d_in)
    w1: float = 0.0
    w2: float = 0.0
    activation: str = "leaky_relu"

    def copy(self):
        return HgnnParams([t.copy() for t in self.thetas], self.w1, self.w2, self.activation)

    @property
    def widths(self):
        return [self.thetas[0].shape[1]] + [t.shape[0] for t in self.thetas]

    def flat(self):
        return np.concatenate([t.ravel() for t in self.thetas] + [[self.w1, self.w2]])

    def save(self, path):
        """Flat little-endian float64 blob plus a JSON sidecar with shapes."""
        self.flat().astype("<f8").tofile(path)
        with open(str(path) + ".json", "w") as fh:
            json.dump({"shapes": [list(t.shape) for t in self.thetas],
                       "activation": self.activation, "order": "thetas..., w1, w2"}, fh)

    @classmethod
    def load(cls, path):
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        flat = np.fromfile(path, dtype="<f8")
        thetas, pos = [], 0
        for shape in meta["shapes"]:
            size = int(np.prod(shape))
            thetas.append(flat[pos:pos + size].reshape(shape).copy())
            pos += size
        return cls(thetas, float(flat[pos]), float(flat[pos + 1]), meta["activation"])


def init_params(widths, seed, activation="leaky_relu") -> HgnnParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; both edge logits 0."""
    rng = np.random.default_rng(seed)
    thetas = []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(d_in)
        thetas.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
    return HgnnParams(thetas, 0.0, 0.0, activation)


def sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _act(z, kind):
    if kind == "identity":
        return z
    if kind == "leaky_relu":
        return np.maximum(z, z * z.dtype.type(LEAKY_SLOPE))
    if kind == "tanh":
        return np.tanh(z)
    raise InvalidArgumentError(f"unknown activation {kind!r}")


def _act_grad(z, out, g, kind):
    if kind == "identity":
        return g
    if kind == "leaky_relu":
        return np.where(z > 0, g, g * z.dtype.type(LEAKY_SLOPE))
    return g * (1.0 - out ** 2)


def _forward(h, features, params):
    dtype = params.thetas[0].dtype
    P1, P2 = h.operators(dtype)
    s1, s2 = dtype.type(sigmoid(params.w1)), dtype.type(sigmoid(params.w2))
    f = np.asarray(features, dtype=dtype)
    if f.shape != (h.n_vertices, params.thetas[0].shape[1]):
        raise InvalidArgumentError(
            f"features {f.shape} do not match ({h.n_vertices}, {params.thetas[0].shape[1]})")
    cache = []
    last = len(params.thetas) - 1
    for ell, theta in enumerate(params.thetas):
        kind = "identity" if ell == last else params.activation
        d_out, d_in = theta.shape
        if d_in <= d_out:
            # propagate the narrower side first; both orders are the same linear map
            g1, g2 = P1 @ f, P2 @ f
            z = (s1 * g1 + s2 * g2) @ theta.T
            cache.append(("pre", f, g1, g2, z, kind))
        else:
            u = f @ theta.T
            g1, g2 = P1 @ u, P2 @ u
            z = s1 * g1 + s2 * g2
            cache.append(("post", f, g1, g2, z, kind))
        f = _act(z, kind)
        cache[-1] = cache[-1] + (f,)
    return f, cache


def hgnn_forward(h: HypergraphIncidence, features, params: HgnnParams) -> np.ndarray:
    return _forward(h, features, params)[0]


predict = hgnn_forward


def hgnn_loss(pred, labels, labeled) -> float:
    labeled = np.asarray(labeled, dtype=int)
    if labeled.size == 0:
        raise InvalidArgumentError("labeled index set must be non-empty")
    d = np.asarray(pred)[labeled] - np.asarray(labels)[labeled]
    return float((d ** 2).sum() / labeled.size)


def loss_and_grad(h, features, labels, labeled, params: HgnnParams):
    """Loss and exact gradients (list of dTheta, dw1, dw2)."""
    dtype = params.thetas[0].dtype
    P1, P2 = h.operators(dtype)
    s1, s2 = dtype.type(sigmoid(params.w1)), dtype.type(sigmoid(params.w2))
    pred, cache = _forward(h, features, params)
    labeled = np.asarray(labeled, dtype=int)
    loss = hgnn_loss(pred, labels, labeled)
    g = np.zeros_like(pred)
    g[labeled] = 2.0 * (pred[labeled] - np.asarray(labels, dtype=dtype)[labeled]) / labeled.size
    d_thetas = [None] * len(params.thetas)
    ds1 = ds2 = 0.0
    for ell in range(len(params.thetas) - 1, -1, -1):
        mode, f_in, g1, g2, z, kind, out = cache[ell]
        theta = params.thetas[ell]
        dz = _act_grad(z, out, g, kind)
        if mode == "pre":
            m = s1 * g1 + s2 * g2
            d_thetas[ell] = dz.T @ m
            dm = dz @ theta
            ds1 += float(np.vdot(dm, g1))
            ds2 += float(np.vdot(dm, g2))
            if ell:
                g = s1 * (P1.T @ dm) + s2 * (P2.T @ dm)
        else:
            ds1 += float(np.vdot(dz, g1))
            ds2 += float(np.vdot(dz, g2))
            du = s1 * (P1.T @ dz) + s2 * (P2.T @ dz)
            d_thetas[ell] = du.T @ f_in
            if ell:
                g = du @ theta
    return loss, d_thetas, ds1 * s1 * (1 - s1), ds2 * s2 * (1 - s2)


@dataclass
class TrainConfig:
    gamma: float = 0.5
    k: int = 8
    tau: float = 3.0
    learning_rate: float = 1e-2
    epochs: int = 300
    seed: int = 0
    label_fraction: float = 0.1
    momentum: float = 0.9
    widths: tuple = DEFAULT_WIDTHS
    activation: str = "leaky_relu"
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise InvalidArgumentError("gamma must lie in [0, 1]")
        if self.k < 1:
            raise InvalidArgumentError("k must be >= 1")
        if not self.tau > 0:
            raise InvalidArgumentError("tau must be positive")


def train(h, features, labels, labeled, config: TrainConfig, params: Optional[HgnnParams] = None):
    """Full-batch gradient descent (heavy-ball momentum); returns (params, loss_trace).

    ``loss_trace[e]`` is the loss evaluated before the update of epoch ``e``.
    """
    labeled = np.asarray(labeled, dtype=int)
    if labeled.size == 0:
        raise InvalidArgumentError("labeled index set must be non-empty")
    dtype = np.dtype(config.dtype)
    features = np.asarray(features, dtype=dtype)
    labels = np.asarray(labels, dtype=dtype)
    if params is None:
        widths = (features.shape[1],) + tuple(config.widths)
        params = init_params(widths, config.seed, config.activation)
    params = params.copy()
    params.thetas = [t.astype(dtype) for t in params.thetas]
    vel = [np.zeros_like(t) for t in params.thetas] + [0.0, 0.0]
    lr, mu = config.learning_rate, config.momentum
    trace = []
    for epoch in range(config.epochs):
        loss, d_thetas, dw1, dw2 = loss_and_grad(h, features, labels, labeled, params)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch)
        trace.append(loss)
        for i, d in enumerate(d_thetas):
            vel[i] = mu * vel[i] - lr * d
            params.thetas[i] += vel[i]
        vel[-2] = mu * vel[-2] - lr * dw1
        vel[-1] = mu * vel[-1] - lr * dw2
        params.w1 += vel[-2]
        params.w2 += vel[-1]
    params.thetas = [t.astype(float) for t in params.thetas]
    return params, np.array(trace)


# --------------------------------------------------------------------------
# end-to-end localization on MR features

@dataclass
class Localizer:
    """Trained model plus the invertible feature/label normalisation."""

    params: HgnnParams
    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_center: np.ndarray
    label_scale: float
    loss_trace: np.ndarray

    def standardize(self, features):
        return (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_std

    def predict(self, h, features):
        out = hgnn_forward(h, self.standardize(features), self.params)
        return out * self.label_scale + self.label_center


def localize(features, call_ids, timestamps, labels, labeled, config: TrainConfig):
    """Build the hypergraph, train on the labeled vertices, predict all vertices.

    Returns (predicted locations, Localizer, hypergraph).
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    labeled = np.asarray(labeled, dtype=int)
    if labeled.size == 0:
        raise InvalidArgumentError("need at least one labeled sample")
    h = build_hypergraph(features, call_ids, timestamps, config.k, config.gamma, config.tau)
    mean = features.mean(0)
    std = features.std(0)
    std[std == 0] = 1.0
    center = labels[labeled].mean(0)
    scale = float(np.sqrt(((labels[labeled] - center) ** 2).sum(1).mean())) or 1.0
    y = np.zeros_like(labels)
    y[labeled] = (labels[labeled] - center) / scale
    params, trace = train(h, (features - mean) / std, y, labeled, config)
    model = Localizer(params, mean, std, center, scale, trace)
    return model.predict(h, features), model, h


def mean_distance_error(pred, truth, index) -> float:
    index = np.asarray(index, dtype=int)
    if index.size == 0:
        raise InvalidArgumentError("index set must be non-empty")
    d = np.asarray(pred)[index] - np.asarray(truth)[index]
    return float(np.linalg.norm(d, axis=1).mean())


def knn_baseline(labeled_features, labeled_locations, query_features, k=5, gamma=0.5):
    """Mean location of the k nearest labeled samples in beam space."""
    labeled_features = np.asarray(labeled_features, dtype=float)
    if labeled_features.shape[0] < k:
        raise InvalidArgumentError(f"need at least k={k} labeled samples")
    loc = np.asarray(labeled_locations, dtype=float)
    nn = _knn_rows(labeled_features, np.asarray(query_features, dtype=float), k, gamma)
    return loc[nn].mean(1)


def split_labels(n, fraction, seed):
    """Random labeled index subset of size max(1, round(fraction * n)), sorted."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError("label fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    size = max(1, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=size, replace=False))
