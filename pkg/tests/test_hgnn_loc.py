import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mrlscm.errors import InvalidArgumentError, TrainingError
from mrlscm.hgnn_loc import (HgnnParams, HypergraphIncidence, TrainConfig,
                             beam_space_distance, build_beam_hyperedges, build_hypergraph,
                             build_temporal_hyperedges, hgnn_forward, hgnn_loss,
                             init_params, knn_baseline, localize, loss_and_grad,
                             mean_distance_error, pairwise_beam_distance, sigmoid,
                             split_labels, train)


def dense_forward(edges_beam, edges_time, features, params):
    """Loop-level reference: edge means, weighted, then vertex means of incident edges."""
    n = features.shape[0]
    f = np.asarray(features, float)
    s = (sigmoid(params.w1), sigmoid(params.w2))
    for ell, theta in enumerate(params.thetas):
        edge_feats = [[] for _ in range(n)]
        for fam, edges in enumerate((edges_beam, edges_time)):
            for e in edges:
                fe = s[fam] * f[list(e)].mean(0)
                for v in e:
                    edge_feats[v].append(fe)
        m = np.array([np.mean(ef, axis=0) for ef in edge_feats])
        z = m @ theta.T
        if ell < len(params.thetas) - 1:
            z = np.where(z > 0, z, 0.01 * z)
        f = z
    return f


def random_graph(rng, n, d_in, widths):
    feats = rng.standard_normal((n, d_in))
    calls = rng.integers(0, 3, n)
    times = rng.integers(0, 6, n).astype(float)
    k = int(rng.integers(1, n))
    h = build_hypergraph(feats, calls, times, k=k, gamma=0.5, tau=1.5)
    params = init_params((d_in,) + tuple(widths), int(rng.integers(1 << 30)))
    params.w1, params.w2 = rng.standard_normal(2)
    return h, feats, params


# ------------------------------------------------------------- distances

def test_distance_identity_is_zero():
    r = np.array([-80.0, -95.0, -140.0])
    assert beam_space_distance(r, r, 0.5) == pytest.approx(0.0, abs=1e-12)


def test_distance_euclidean_only():
    r = np.array([-80.0, -90.0, -100.0])
    assert beam_space_distance(r, r + [3, 4, 0], 1.0) == pytest.approx(5.0)


def test_distance_collinear_cosine_vanishes():
    r = np.array([-80.0, -90.0, -100.0])
    assert beam_space_distance(r, 2 * r, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_distance_zero_vector_rejected():
    with pytest.raises(InvalidArgumentError):
        beam_space_distance(np.zeros(3), np.ones(3), 0.5)


@given(st.lists(st.floats(-140, -40), min_size=6, max_size=6),
       st.floats(0, 1))
def test_pairwise_matches_scalar(vals, gamma):
    v = np.array(vals).reshape(2, 3)
    d = pairwise_beam_distance(v, v, gamma)
    assert d[0, 1] == pytest.approx(beam_space_distance(v[0], v[1], gamma), abs=1e-6)
    assert d[0, 1] == pytest.approx(d[1, 0], abs=1e-9)


# ------------------------------------------------------------- hyperedges

def test_two_vertices_k1():
    edges = build_beam_hyperedges(np.array([[-80.0, -90.0], [-85.0, -91.0]]), 1, 0.5)
    assert [e.tolist() for e in edges] == [[0, 1], [0, 1]]


def test_three_collinear_vertices_pick_nearest():
    feats = np.array([[-100.0], [-99.0], [-102.0]])
    edges = build_beam_hyperedges(feats, 1, 1.0)
    assert edges[0].tolist() == [0, 1]


def test_beam_edges_structure_on_500_samples():
    rng = np.random.default_rng(0)
    feats = -120 + 40 * rng.random((500, 16))
    edges = build_beam_hyperedges(feats, 8, 0.5)
    assert len(edges) == 500
    for v, e in enumerate(edges):
        assert len(e) == 9 and v in e and len(set(e.tolist())) == 9


def test_beam_edges_match_bruteforce_knn():
    rng = np.random.default_rng(1)
    feats = -120 + 40 * rng.random((40, 5))
    edges = build_beam_hyperedges(feats, 4, 0.3)
    for v in range(40):
        d = [beam_space_distance(feats[v], feats[u], 0.3) if u != v else np.inf
             for u in range(40)]
        assert set(edges[v].tolist()) == {v, *np.argsort(d)[:4].tolist()}


def test_beam_edges_require_k_below_n():
    with pytest.raises(InvalidArgumentError):
        build_beam_hyperedges(np.ones((3, 2)), 3, 1.0)


def test_temporal_window_example():
    edges = build_temporal_hyperedges([7, 7, 7], [0, 1, 2], 1)
    assert [e.tolist() for e in edges] == [[0, 1], [0, 1, 2], [1, 2]]


def test_temporal_distinct_calls_singletons():
    edges = build_temporal_hyperedges([1, 2, 3], [0, 0, 0], 10)
    assert [e.tolist() for e in edges] == [[0], [1], [2]]


def test_temporal_infinite_window_is_whole_call():
    edges = build_temporal_hyperedges(["a", "b", "a", "a"], [0, 5, 100, 1e6], np.inf)
    assert edges[0].tolist() == [0, 2, 3] and edges[1].tolist() == [1]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 20)), min_size=1, max_size=30),
       st.floats(0.5, 6))
def test_temporal_edges_property(samples, tau):
    calls = [c for c, _ in samples]
    times = [t for _, t in samples]
    edges = build_temporal_hyperedges(calls, times, tau)
    for v, e in enumerate(edges):
        expect = [u for u in range(len(samples))
                  if calls[u] == calls[v] and abs(times[u] - times[v]) <= tau]
        assert e.tolist() == expect


def test_temporal_tau_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        build_temporal_hyperedges([0], [0], 0)


def test_incidence_rejects_bad_edges():
    with pytest.raises(InvalidArgumentError):
        HypergraphIncidence(2, [np.array([0, 2])])
    with pytest.raises(InvalidArgumentError):
        HypergraphIncidence(2, [np.array([], int)])


def test_identical_edges_kept_in_both_families():
    h = HypergraphIncidence(2, [np.array([0, 1])] * 2, [np.array([0, 1])] * 2)
    assert h.incidence.shape == (2, 4)
    assert h.edge_types.tolist() == [0, 0, 1, 1]


# ------------------------------------------------------------- forward pass

def test_forward_single_vertex_halves_input():
    h = HypergraphIncidence(1, [np.array([0])])
    params = HgnnParams([np.eye(2)], 0.0, 0.0, "identity")
    out = hgnn_forward(h, np.array([[3.0, -4.0]]), params)
    np.testing.assert_allclose(out, [[1.5, -2.0]])


def test_forward_zero_features_give_zero():
    rng = np.random.default_rng(2)
    h, feats, params = random_graph(rng, 10, 4, (5, 3, 2))
    assert np.all(hgnn_forward(h, np.zeros_like(feats), params) == 0)


def test_forward_matches_loop_reference():
    rng = np.random.default_rng(3)
    for _ in range(5):
        h, feats, params = random_graph(rng, 9, 3, (5, 4, 2))
        np.testing.assert_allclose(hgnn_forward(h, feats, params),
                                   dense_forward(h.edges_beam, h.edges_time, feats, params),
                                   rtol=1e-10, atol=1e-12)


def test_forward_width_mismatch():
    h = HypergraphIncidence(1, [np.array([0])])
    with pytest.raises(InvalidArgumentError):
        hgnn_forward(h, np.ones((1, 3)), HgnnParams([np.eye(2)]))


def test_forward_permutation_equivariance():
    rng = np.random.default_rng(4)
    n = 12
    feats = rng.standard_normal((n, 3))
    calls = np.repeat([0, 1], 6)
    times = np.tile(np.arange(6.0), 2)
    h = build_hypergraph(feats, calls, times, k=3, tau=2)
    params = init_params((3, 5, 2), 0)
    perm = rng.permutation(n)
    hp = build_hypergraph(feats[perm], calls[perm], times[perm], k=3, tau=2)
    out, out_p = hgnn_forward(h, feats, params), hgnn_forward(hp, feats[perm], params)
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-12, atol=1e-12)


def test_disconnected_component_reordering():
    # two components of 3 vertices each; reverse the order inside the second
    e1 = [np.array([0, 1]), np.array([1, 2]), np.array([0, 2]),
          np.array([3, 4]), np.array([4, 5]), np.array([3, 5])]
    perm = np.array([0, 1, 2, 5, 4, 3])
    inv = np.argsort(perm)
    e1p = [np.sort(inv[e]) for e in e1]
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((6, 2))
    params = init_params((2, 4, 2), 1)
    out = hgnn_forward(HypergraphIncidence(6, e1), feats, params)
    out_p = hgnn_forward(HypergraphIncidence(6, e1p), feats[perm], params)
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


@given(st.floats(-50, 50))
def test_edge_weight_in_open_unit_interval(w):
    s = sigmoid(w)
    assert 0 <= s <= 1
    if abs(w) < 30:
        assert 0 < s < 1


# ------------------------------------------------------------- loss

def test_loss_examples():
    labels = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert hgnn_loss(labels, labels, [0, 1]) == 0
    assert hgnn_loss(np.array([[3.0, 4.0], [9, 9]]), labels, [0]) == pytest.approx(25)
    assert hgnn_loss(np.array([[3.0, 4.0], [1, 1]]), labels, [0, 1]) == pytest.approx(12.5)


def test_loss_empty_labeled_set():
    with pytest.raises(InvalidArgumentError):
        hgnn_loss(np.zeros((2, 2)), np.zeros((2, 2)), [])


def test_unlabeled_targets_do_not_affect_gradient():
    rng = np.random.default_rng(6)
    h, feats, params = random_graph(rng, 10, 3, (4, 2))
    labels = rng.standard_normal((10, 2))
    labeled = [0, 3, 7]
    g_a = loss_and_grad(h, feats, labels, labeled, params)
    labels2 = labels.copy()
    labels2[[1, 2, 4, 5, 6, 8, 9]] = 1e6
    g_b = loss_and_grad(h, feats, labels2, labeled, params)
    assert g_a[0] == g_b[0]
    for a, b in zip(g_a[1], g_b[1]):
        np.testing.assert_array_equal(a, b)
    assert (g_a[2], g_a[3]) == (g_b[2], g_b[3])


# ------------------------------------------------------------- gradients

def finite_difference(h, feats, labels, labeled, params, eps=1e-6):
    def loss_at(p):
        return hgnn_loss(hgnn_forward(h, feats, p), labels, labeled)
    grads = []
    for i, t in enumerate(params.thetas):
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            hi, lo = params.copy(), params.copy()
            hi.thetas[i][idx] += eps
            lo.thetas[i][idx] -= eps
            g[idx] = (loss_at(hi) - loss_at(lo)) / (2 * eps)
        grads.append(g)
    for name in ("w1", "w2"):
        hi, lo = params.copy(), params.copy()
        setattr(hi, name, getattr(hi, name) + eps)
        setattr(lo, name, getattr(lo, name) - eps)
        grads.append((loss_at(hi) - loss_at(lo)) / (2 * eps))
    return grads


def max_rel_error(analytic, numeric):
    a = np.concatenate([np.ravel(v) for v in analytic])
    b = np.concatenate([np.ravel(v) for v in numeric])
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(3, 13))
    d_in = int(rng.integers(1, 6))
    widths = tuple(int(w) for w in rng.integers(1, 6, 2)) + (2,)
    h, feats, params = random_graph(rng, n, d_in, widths)
    labels = rng.standard_normal((n, 2))
    labeled = np.sort(rng.choice(n, size=max(1, n // 2), replace=False))
    loss, d_thetas, dw1, dw2 = loss_and_grad(h, feats, labels, labeled, params)
    numeric = finite_difference(h, feats, labels, labeled, params)
    assert max_rel_error(d_thetas + [dw1, dw2], numeric) < 1e-4


# ------------------------------------------------------------- training

def linear_instance(n=30, seed=0):
    rng = np.random.default_rng(seed)
    h = HypergraphIncidence(n, [np.array([v]) for v in range(n)])
    feats = rng.standard_normal((n, 3))
    w = rng.standard_normal((2, 3))
    # with single-vertex edges the layer sees 0.5 * feats
    labels = 0.5 * feats @ w.T
    return h, feats, labels


def test_linear_targets_fit_to_tolerance():
    h, feats, labels = linear_instance()
    cfg = TrainConfig(learning_rate=0.2, epochs=5000, momentum=0.0,
                      widths=(2,), activation="identity", dtype="float64")
    params, trace = train(h, feats, labels, np.arange(30), cfg)
    assert trace[-1] < 1e-4
    assert np.all(np.isfinite(trace))


def test_zero_learning_rate_keeps_params():
    h, feats, labels = linear_instance()
    cfg = TrainConfig(learning_rate=0.0, epochs=5, widths=(4, 2), dtype="float64")
    start = init_params((3, 4, 2), cfg.seed)
    params, _ = train(h, feats, labels, [0, 1], cfg, params=start)
    for a, b in zip(params.thetas, start.thetas):
        np.testing.assert_array_equal(a, b)
    assert (params.w1, params.w2) == (start.w1, start.w2)


def test_training_is_deterministic():
    rng = np.random.default_rng(7)
    h, feats, _ = random_graph(rng, 12, 4, (5, 2))
    labels = rng.standard_normal((12, 2))
    cfg = TrainConfig(epochs=30, widths=(5, 2), seed=3)
    _, t1 = train(h, feats, labels, [0, 1, 2, 3], cfg)
    _, t2 = train(h, feats, labels, [0, 1, 2, 3], cfg)
    np.testing.assert_array_equal(t1, t2)


def test_small_step_loss_non_increasing():
    rng = np.random.default_rng(8)
    h, feats, _ = random_graph(rng, 12, 4, (5, 5, 2))
    feats = (feats - feats.mean(0)) / feats.std(0)
    labels = rng.standard_normal((12, 2))
    cfg = TrainConfig(learning_rate=1e-5, epochs=10, momentum=0.0,
                      widths=(5, 5, 2), dtype="float64")
    _, trace = train(h, feats, labels, np.arange(6), cfg)
    assert np.all(np.diff(trace) <= 1e-15)


def test_divergence_reports_epoch():
    h, feats, labels = linear_instance()
    cfg = TrainConfig(learning_rate=50.0, epochs=2000, momentum=0.0, widths=(2,),
                      activation="identity", dtype="float64")
    with pytest.raises(TrainingError) as err, np.errstate(all="ignore"):
        train(h, 1e200 * feats, labels, np.arange(30), cfg)
    assert err.value.epoch == 0


def test_train_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(gamma=1.5)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(k=0)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(tau=0)


def test_checkpoint_round_trip(tmp_path):
    params = init_params((3, 4, 2), 9)
    params.w1, params.w2 = 0.25, -1.5
    params.save(tmp_path / "ckpt.bin")
    back = HgnnParams.load(tmp_path / "ckpt.bin")
    for a, b in zip(params.thetas, back.thetas):
        np.testing.assert_array_equal(a, b)
    assert (back.w1, back.w2, back.activation) == (0.25, -1.5, "leaky_relu")


# ------------------------------------------------------------- metrics and baseline

def test_mean_distance_error_examples():
    truth = np.zeros((2, 2))
    assert mean_distance_error(truth, truth, [0, 1]) == 0
    assert mean_distance_error(np.array([[3.0, 4.0], [0, 0]]), truth, [0]) == 5
    assert mean_distance_error(np.array([[3.0, 4.0], [9.0, 12.0]]), truth, [0, 1]) == 10
    with pytest.raises(InvalidArgumentError):
        mean_distance_error(truth, truth, [])


def test_knn_exact_match_k1():
    feats = np.array([[-80.0, -90.0], [-100.0, -70.0], [-120.0, -110.0]])
    locs = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_allclose(knn_baseline(feats, locs, feats[[1]], k=1), [[3.0, 4.0]])


def test_knn_all_labels_gives_centroid():
    rng = np.random.default_rng(9)
    feats = -120 + 40 * rng.random((6, 4))
    locs = rng.random((6, 2)) * 100
    out = knn_baseline(feats, locs, feats[:2] + 1.0, k=6)
    np.testing.assert_allclose(out, np.tile(locs.mean(0), (2, 1)))


def test_knn_line_midpoint():
    feats = np.array([[-100.0], [-101.0], [-110.0]])
    locs = np.array([[0.0, 0.0], [10.0, 0.0], [50.0, 0.0]])
    np.testing.assert_allclose(knn_baseline(feats, locs, np.array([[-100.4]]), k=2, gamma=1),
                               [[5.0, 0.0]])


def test_knn_needs_enough_labels():
    with pytest.raises(InvalidArgumentError):
        knn_baseline(np.ones((2, 2)), np.zeros((2, 2)), np.ones((1, 2)), k=3)


def test_split_labels_size_and_determinism():
    a = split_labels(1000, 0.1, 4)
    assert a.size == 100 and np.all(np.diff(a) > 0)
    np.testing.assert_array_equal(a, split_labels(1000, 0.1, 4))
    assert split_labels(50, 0.001, 0).size == 1


def test_localize_recovers_smooth_field():
    rng = np.random.default_rng(10)
    n = 300
    locs = rng.random((n, 2)) * 200
    feats = np.column_stack([-60 - 0.2 * locs[:, 0], -60 - 0.2 * locs[:, 1],
                             -70 - 0.1 * (locs[:, 0] + locs[:, 1])])
    feats += rng.normal(0, 0.5, feats.shape)
    labeled = split_labels(n, 0.3, 1)
    cfg = TrainConfig(epochs=200, widths=(32, 32, 2))
    pred, model, h = localize(feats, np.arange(n), np.zeros(n), locs, labeled, cfg)
    unl = np.setdiff1d(np.arange(n), labeled)
    assert mean_distance_error(pred, locs, unl) < 30
    assert np.all(np.isfinite(model.loss_trace))
