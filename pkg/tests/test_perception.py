import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import rmse_oracle
from taxelgraph.diffcore import MlpParams, kaiming_init, mlp_forward
from taxelgraph.perception import (CNNRegressor, GCNNet, GCNRegressor, MLPRegressor, TacGNNRegressor,
                                   batch_rmse, cnn_grid_forward, encode_nodes, gcn_static_forward, init_cnn,
                                   init_mlp_baseline, init_tacgnn, load_regressor, make_regressor,
                                   message_layer, mlp_baseline_forward, pack_grid, rmse_loss,
                                   tacgnn_forward, tacgnn_gradient_check, train_perception, TacGNNNet)
from taxelgraph.pointset import PointSet, build_knn_graph, downsample_graph, knn_indices


def frame(n, seed=0, scale=0.02):
    rng = np.random.default_rng(seed)
    return PointSet(rng.permutation(100)[:n], rng.normal(size=(n, 3)) * scale, rng.uniform(0.1, 1, n))


def relu(v):
    return [max(0.0, x) for x in v]


def mlp_ref(p: MlpParams, x):
    """Row-vector evaluation with Python lists."""
    h = list(x)
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = [b[j] + sum(h[a] * w[a][j] for a in range(len(h))) for j in range(len(b))]
        h = relu(z) if (i < last or p.activate_output) else z
    return np.array(h)


def message_ref(phi, feats, positions, neighbors, length_scale):
    """Per-edge / per-node re-evaluation of one message layer."""
    out = []
    for i in range(len(feats)):
        nb = list(neighbors[i]) or [i]
        msgs = []
        for j in nb:
            rel = (positions[j] - positions[i]) / length_scale
            msgs.append(mlp_ref(phi, list(feats[i]) + list(feats[j]) + list(rel)))
        out.append(np.max(np.array(msgs), axis=0))
    return np.array(out)


def tacgnn_ref(params, ps: PointSet):
    """Unbatched pipeline built from the single-graph primitives."""
    if len(ps) == 0:
        return mlp_forward(params.head, np.zeros((1, params.channels)))[0][0]
    ps = ps.canonical()
    g = build_knn_graph(ps, params.k)
    g.features = encode_nodes(params, ps)
    for phi in params.layer_mlps:
        g.features = message_layer(phi, g, params.length_scale)
        g = downsample_graph(g, params.ratio)
    pooled = g.features.max(axis=0, keepdims=True)
    return mlp_forward(params.head, pooled)[0][0]


class TestEncoder:
    def test_zero_weights(self):
        p = init_tacgnn(4, 8, 0)
        p.encoder.weights[0][...] = 0
        assert np.all(encode_nodes(p, frame(5)) == 0)

    def test_shape(self):
        p = init_tacgnn(4, 8, 0)
        assert encode_nodes(p, frame(7)).shape == (7, 8)
        assert encode_nodes(p, PointSet.empty()).shape == (0, 8)

    def test_hand_evaluation(self):
        p = init_tacgnn(4, 8, 1)
        p.encoder.biases[0][:] = np.linspace(-0.5, 0.5, 8)
        f = frame(1, 3)
        x = list(f.positions[0] / p.length_scale) + [f.pressures[0]]
        assert np.allclose(encode_nodes(p, f)[0], mlp_ref(p.encoder, x), atol=1e-13)


class TestMessageLayer:
    def test_single_node_self_message(self):
        p = init_tacgnn(4, 6, 2)
        f = frame(1)
        g = build_knn_graph(f)
        g.features = np.random.default_rng(0).normal(size=(1, 6))
        expect = mlp_ref(p.layer_mlps[0], list(g.features[0]) * 2 + [0.0, 0.0, 0.0])
        assert np.allclose(message_layer(p.layer_mlps[0], g), expect[None], atol=1e-13)

    def test_symmetric_pair(self):
        p = init_tacgnn(4, 6, 2)
        ps = PointSet(np.array([0, 1]), np.zeros((2, 3)), np.ones(2))
        g = build_knn_graph(ps)
        g.features = np.ones((2, 6))
        out = message_layer(p.layer_mlps[1], g)
        assert np.array_equal(out[0], out[1])

    def test_five_node_reference(self):
        p = init_tacgnn(4, 6, 4)
        for b in p.layer_mlps[2].biases:
            b[:] = np.random.default_rng(9).normal(size=b.shape) * 0.1
        f = frame(5, 5)
        g = build_knn_graph(f)
        g.features = np.random.default_rng(1).normal(size=(5, 6))
        ref = message_ref(p.layer_mlps[2], g.features, f.positions, g.neighbors, p.length_scale)
        assert np.allclose(message_layer(p.layer_mlps[2], g), ref, atol=1e-12)

    def test_width_mismatch(self):
        p = init_tacgnn(4, 6, 0)
        g = build_knn_graph(frame(3))
        g.features = np.zeros((3, 5))
        with pytest.raises(ValueError):
            message_layer(p.layer_mlps[0], g)


class TestTacGNN:
    def test_parameter_shapes(self):
        p = init_tacgnn(6, 32, 0)
        assert p.encoder.layer_sizes == [4, 32]
        assert all(m.layer_sizes == [67, 32, 32] for m in p.layer_mlps)
        assert p.head.layer_sizes == [32, 32, 6]

    def test_empty_frame_is_head_of_zero(self):
        p = init_tacgnn(4, 8, 0)
        pred, _ = tacgnn_forward(p, PointSet.empty())
        assert np.array_equal(pred, mlp_forward(p.head, np.zeros((1, 8)))[0][0])

    def test_single_point_finite(self):
        p = init_tacgnn(4, 8, 0)
        assert np.all(np.isfinite(tacgnn_forward(p, frame(1))[0]))

    @pytest.mark.parametrize("n", [0, 1, 2, 3, 5, 12, 20])
    def test_matches_stage_composition(self, n):
        p = init_tacgnn(5, 8, n)
        f = frame(n, n + 10)
        assert np.allclose(tacgnn_forward(p, f)[0], tacgnn_ref(p, f), rtol=1e-12, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 16))
    def test_permutation_invariance(self, seed, n):
        p = init_tacgnn(4, 8, 0)
        f = frame(n, seed)
        perm = np.random.default_rng(seed).permutation(n)
        g = PointSet(f.ids[perm], f.positions[perm], f.pressures[perm])
        assert np.array_equal(tacgnn_forward(p, f)[0], tacgnn_forward(p, g)[0])

    def test_gradient_check_small(self):
        p = init_tacgnn(3, 4, 1)
        assert tacgnn_gradient_check(p, frame(2, 1), [0.1, -0.2, 0.3]) < 1e-4


class TestRmse:
    def test_zero(self):
        assert rmse_loss(np.ones(6), np.ones(6)) == 0.0

    def test_unit_offset(self):
        assert abs(rmse_loss(np.ones(6), np.zeros(6)) - 1.0) < 1e-12

    def test_hand_case(self):
        assert abs(rmse_loss([3, 4, 0, 0, 0, 0], np.zeros(6)) - math.sqrt(25 / 6)) < 1e-12

    def test_mismatch(self):
        with pytest.raises(ValueError):
            rmse_loss(np.zeros(3), np.zeros(4))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.integers(0, 1000))
    def test_symmetry_and_oracle(self, a, seed):
        b = list(np.random.default_rng(seed).normal(size=len(a)))
        assert rmse_loss(a, b) == rmse_loss(b, a)
        assert rmse_loss(a, b) >= 0 and rmse_loss(a, a) == 0
        assert math.isclose(rmse_loss(a, b), rmse_oracle(a, b), rel_tol=1e-12, abs_tol=1e-12)

    def test_batch_gradient(self):
        rng = np.random.default_rng(0)
        pred, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        val, grad = batch_rmse(pred, y)
        eps = 1e-6
        num = np.zeros_like(pred)
        for idx in np.ndindex(pred.shape):
            d = np.zeros_like(pred)
            d[idx] = eps
            num[idx] = (batch_rmse(pred + d, y)[0] - batch_rmse(pred - d, y)[0]) / (2 * eps)
        assert np.allclose(grad, num, atol=1e-8)


class TestTraining:
    def test_zero_epochs_unchanged(self):
        net = TacGNNNet(3, 8)
        p = net.init_params(0)
        before = {k: v.copy() for k, v in p.tensors().items()}
        X = [frame(4, s) for s in range(5)]
        train_perception(net, p, net.prepare(X), np.zeros((5, 3)), 0, seed=0)
        assert all(np.array_equal(before[k], v) for k, v in p.tensors().items())

    def test_memorizes_one_sample(self):
        est = TacGNNRegressor(channels=16, epochs=500, random_state=0)
        est.fit([frame(6, 1)], np.array([[0.01, -0.02, 0.005]]))
        assert est.history_.train_rmse[-1] < 1e-3

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            TacGNNRegressor().fit([], np.zeros((0, 3)))


class TestBaselines:
    def test_mlp_zero_weights(self):
        p = init_mlp_baseline(10, 3, seed=0)
        for w in p.weights:
            w[...] = 0
        assert np.all(mlp_baseline_forward(p, np.ones(10)) == 0)

    def test_mlp_zero_frame_is_head_bias(self):
        p = init_mlp_baseline(10, 3, seed=0)
        p.biases[-1][:] = [1.0, 2.0, 3.0]
        assert mlp_baseline_forward(p, np.zeros(10)).tolist() == [1.0, 2.0, 3.0]

    def test_mlp_hand_evaluation(self):
        p = init_mlp_baseline(6, 2, hidden=(5, 4), seed=1)
        x = np.random.default_rng(2).uniform(size=6)
        assert np.allclose(mlp_baseline_forward(p, x), mlp_ref(p, list(x)), atol=1e-13)

    def test_mlp_wrong_length(self):
        with pytest.raises(ValueError):
            mlp_baseline_forward(init_mlp_baseline(10, 3, seed=0), np.zeros(9))

    def test_cnn_zero_frame_is_head_bias(self):
        p = init_cnn((4, 4), 2, seed=0)
        p.dense.biases[-1][:] = [0.5, -0.5]
        assert cnn_grid_forward(p, np.zeros(16)).tolist() == [0.5, -0.5]

    def test_cnn_zero_kernel(self):
        p = init_cnn((3, 3), 2, seed=0)
        p.conv1_w[...] = 0
        x = np.random.default_rng(0).uniform(size=9)
        assert np.array_equal(cnn_grid_forward(p, x), cnn_grid_forward(p, np.zeros(9)))

    def test_cnn_hand_convolution(self):
        p = init_cnn((4, 4), 1, channels=(1, 1), dense=1, seed=0)
        p.conv1_w[:, 0] = np.arange(1.0, 10.0)  # kernel rows top to bottom
        p.conv1_b[:] = 0
        p.conv2_w[...] = 0
        p.conv2_w[4, 0] = 1.0  # identity second layer (center tap)
        p.dense.weights[0][...] = np.eye(16)[:, :1] * 0 + 1.0  # sum of the feature map
        p.dense.biases[0][:] = 0
        p.dense.weights[1][...] = 1.0
        p.dense.biases[1][:] = 0
        raw = np.zeros(16)
        raw[5] = 2.0  # grid cell (1, 1)
        # one hot at (1,1): every in-bounds neighbor (r, c) sees it at tap (1-r+1, 1-c+1)
        total = 0.0
        for r in range(4):
            for c in range(4):
                dy, dx = 1 - r + 1, 1 - c + 1
                if 0 <= dy < 3 and 0 <= dx < 3:
                    total += 2.0 * (dy * 3 + dx + 1)
        assert cnn_grid_forward(p, raw)[0] == pytest.approx(total, abs=1e-12)

    def test_cnn_grid_too_small(self):
        with pytest.raises(ValueError):
            pack_grid(np.zeros((1, 10)), (3, 3))

    def test_gcn_static_edges_and_response(self):
        rest = np.random.default_rng(0).normal(size=(9, 3)) * 0.01
        net = GCNNet(rest, 2, channels=8)
        assert net.static_neighbors().tolist() == knn_indices(rest, np.arange(9), 3).tolist()
        p = net.init_params(0)
        zero = gcn_static_forward(net, p, np.zeros(9))
        assert np.array_equal(zero, gcn_static_forward(net, p, np.zeros(9)))
        one = np.zeros(9)
        one[4] = 0.7
        assert not np.array_equal(zero, gcn_static_forward(net, p, one))


class TestEstimators:
    def test_sklearn_protocol(self):
        est = TacGNNRegressor(channels=8, epochs=2)
        assert clone(est).get_params() == est.get_params()
        with pytest.raises(NotFittedError):
            est.predict([frame(3)])

    @pytest.mark.parametrize("kind", ["tacgnn", "mlp", "cnn", "gcn"])
    def test_save_load_round_trip(self, kind, tmp_path):
        rng = np.random.default_rng(0)
        rest = rng.normal(size=(12, 3)) * 0.01
        frames = [PointSet(np.arange(12), rest, rng.uniform(0, 1, 12)) for _ in range(6)]
        raw = np.array([f.pressures for f in frames])
        y = rng.normal(size=(6, 3))
        kw = {"rest_positions": rest} if kind == "gcn" else {}
        if kind in ("tacgnn", "gcn"):
            kw["channels"] = 8
        est = make_regressor(kind, epochs=2, random_state=0, **kw)
        X = frames if kind == "tacgnn" else raw
        est.fit(X, y)
        est.save(tmp_path / "m.ckpt")
        back = load_regressor(tmp_path / "m.ckpt")
        assert np.array_equal(back.predict(X), est.predict(X))

    def test_warm_start_continues(self):
        X = [frame(5, s) for s in range(8)]
        y = np.random.default_rng(0).normal(size=(8, 2))
        est = TacGNNRegressor(channels=8, epochs=3, warm_start=True, random_state=0).fit(X, y)
        scale = est.y_scale_.copy()
        first = est.history_.train_rmse[-1]
        est.fit(X, y)
        assert np.array_equal(scale, est.y_scale_)
        assert est.history_.initial_train_rmse == pytest.approx(first, rel=0.5)

    def test_deterministic(self):
        X = [frame(5, s) for s in range(8)]
        y = np.random.default_rng(0).normal(size=(8, 2))
        a = TacGNNRegressor(channels=8, epochs=2, random_state=3).fit(X, y).predict(X)
        b = TacGNNRegressor(channels=8, epochs=2, random_state=3).fit(X, y).predict(X)
        assert np.array_equal(a, b)

    def test_bad_input_type(self):
        with pytest.raises((TypeError, ValueError)):
            TacGNNRegressor().fit(np.zeros((3, 4)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            MLPRegressor().fit(np.zeros((3, 4)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            CNNRegressor().fit(np.full((3, 4), np.nan), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            GCNRegressor().fit(np.zeros((3, 4)), np.zeros((3, 2)))
