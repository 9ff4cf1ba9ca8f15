"""Layer graph forward/backward, BN statistics, dropout, gradient checks."""

import numpy as np
import pytest

from duccnet.gradcheck import gradcheck_graph, rel_err
from duccnet.graph import (
    BatchNormState,
    GradTape,
    LayerGraph,
    LayerNode,
    activation,
    backward,
    batchnorm_forward,
    dropout,
    forward,
)
from duccnet.kernels import ConvSpec
from duccnet.optim import bce_loss

from .oracles import batch_stats_two_pass, logistic_dense_grads

rng = np.random.default_rng(7)


def rand(*shape, dtype=np.float32):
    return rng.standard_normal(shape).astype(dtype)


def chain_graph(nodes):
    """Build a linear graph from (kind, kwargs) tuples after an input node."""
    g = LayerGraph()
    prev = None
    for i, (kind, kwargs) in enumerate(nodes):
        nid = kwargs.pop("id", f"n{i}")
        ins = [] if kind == "Input" else [prev]
        g.add(LayerNode(id=nid, kind=kind, inputs=ins, **kwargs))
        prev = nid
    return g.finalize()


class TestActivationOps:
    def test_relu_values(self):
        x = np.array([-3.5, 0.0, 2.0], dtype=np.float32)
        np.testing.assert_array_equal(activation(x, "ReLU"), [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert activation(np.zeros(1, np.float32), "Sigmoid")[0] == 0.5

    def test_sigmoid_symmetry(self):
        x = rand(100)
        s = activation(x, "Sigmoid") + activation(-x, "Sigmoid")
        np.testing.assert_allclose(s, 1.0, atol=1e-6)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        x = np.array([-500.0, 500.0], dtype=np.float32)
        y = activation(x, "Sigmoid")
        assert np.isfinite(y).all() and 0 <= y[0] < 1e-30 and y[1] == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown activation"):
            activation(np.zeros(1), "Tanh")


class TestDropoutOp:
    def test_rate_zero_identity(self):
        x = rand(50)
        assert dropout(x, rate=0.0, mode="train") is x

    def test_infer_identity(self):
        x = rand(50)
        assert dropout(x, rate=0.5, mode="infer") is x

    def test_survivor_fraction_and_mean(self):
        x = np.ones(100_000, dtype=np.float32)
        y = dropout(x, rate=0.5, mode="train", rng=np.random.default_rng(3))
        frac = (y != 0).mean()
        assert abs(frac - 0.5) < 0.01
        assert abs(y.mean() - 1.0) < 0.02

    def test_bad_rate(self):
        with pytest.raises(ValueError, match="rate"):
            dropout(rand(4), rate=1.0)


class TestBatchNormOp:
    def test_train_statistics_normalized(self):
        # eps tiny so the variance bound is meaningful
        state = BatchNormState.for_channels(5, eps=1e-7)
        x = rand(16, 6, 6, 5) * 3.0 + 1.5
        y = batchnorm_forward(x, state, mode="train")
        mean = y.mean(axis=(0, 1, 2))
        var = y.var(axis=(0, 1, 2))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1).max() < 1e-4

    def test_matches_two_pass_oracle(self):
        state = BatchNormState.for_channels(3, eps=1e-7)
        x = rand(8, 4, 4, 3, dtype=np.float64) * 2.0 - 0.7
        y = batchnorm_forward(x, state, mode="train")
        mean, var = batch_stats_two_pass(x)
        ref = (x - mean) / np.sqrt(var + 1e-7)
        np.testing.assert_allclose(y, ref, rtol=1e-6, atol=1e-9)

    def test_inverse_transform_recovers_input(self):
        x = rand(8, 3, 3, 4, dtype=np.float64)
        mean, var = batch_stats_two_pass(x)
        state = BatchNormState.for_channels(4, eps=1e-7)
        state.gamma = np.sqrt(var + 1e-7)
        state.beta = mean.copy()
        y = batchnorm_forward(x, state, mode="train")
        np.testing.assert_allclose(y, x, atol=1e-4)

    def test_batch_of_one_rejected(self):
        state = BatchNormState.for_channels(2)
        with pytest.raises(ValueError, match="batch size"):
            batchnorm_forward(rand(1, 4, 4, 2), state, mode="train")

    def test_moving_statistics_update(self):
        state = BatchNormState.for_channels(2, momentum=0.9)
        x = rand(32, 2, 2, 2) + 4.0
        batchnorm_forward(x, state, mode="train")
        bmean = x.mean(axis=(0, 1, 2))
        np.testing.assert_allclose(state.moving_mean, 0.1 * bmean, rtol=1e-5)

    def test_infer_uses_moving_statistics(self):
        state = BatchNormState.for_channels(2, eps=1e-7)
        state.moving_mean = np.array([1.0, -1.0], dtype=np.float32)
        state.moving_var = np.array([4.0, 0.25], dtype=np.float32)
        x = np.ones((2, 1, 1, 2), dtype=np.float32)
        y = batchnorm_forward(x, state, mode="infer")
        np.testing.assert_allclose(y[0, 0, 0], [(1 - 1) / 2.0, (1 + 1) / 0.5], rtol=1e-5)


def tiny_net(with_extras=True, hw=6, c=2, f=3, seed=11):
    """Small conv net exercising every node kind, randomly initialized."""
    r = np.random.default_rng(seed)

    def w(*shape):
        return (r.standard_normal(shape) * 0.4).astype(np.float32)

    g = LayerGraph()
    g.add(LayerNode("in", "Input", input_shape=(hw, hw, c)))
    g.add(
        LayerNode(
            "conv1", "Conv2D", ["in"],
            params={"W": w(3, 3, c, f), "B": w(f)},
            spec=ConvSpec(3, c, f, padding="same"),
        )
    )
    g.add(LayerNode("relu1", "ReLU", ["conv1"]))
    if with_extras:
        g.add(LayerNode("bn1", "BatchNorm", ["relu1"], bn=BatchNormState.for_channels(f, eps=1e-3)))
        top = "bn1"
    else:
        top = "relu1"
    g.add(LayerNode("pool1", "MaxPool2", [top]))
    g.add(
        LayerNode(
            "conv2", "Conv2D", ["pool1"],
            params={"W": w(3, 3, f, f), "B": w(f)},
            spec=ConvSpec(3, f, f, padding="same"),
        )
    )
    g.add(LayerNode("relu2", "ReLU", ["conv2"]))
    g.add(LayerNode("skip", "AddMerge", ["pool1", "relu2"]))
    g.add(LayerNode("flat", "Flatten", ["skip"]))
    g.add(
        LayerNode(
            "dense1", "Dense", ["flat"],
            params={"W": w((hw // 2) ** 2 * f, 4), "B": w(4)},
        )
    )
    g.add(LayerNode("drelu", "ReLU", ["dense1"]))
    if with_extras:
        g.add(LayerNode("drop", "Dropout", ["drelu"], rate=0.5))
        top = "drop"
    else:
        top = "drelu"
    g.add(LayerNode("dense2", "Dense", [top], params={"W": w(4, 1), "B": w(1)}))
    g.add(LayerNode("sig", "Sigmoid", ["dense2"]))
    return g.finalize()


class TestGraphStructure:
    def test_shape_propagation(self):
        g = tiny_net()
        assert g.nodes["conv1"].out_shape == (6, 6, 3)
        assert g.nodes["pool1"].out_shape == (3, 3, 3)
        assert g.nodes["flat"].out_shape == (27,)
        assert g.nodes["sig"].out_shape == (1,)

    def test_merge_shape_mismatch_fails_at_build(self):
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(4, 4, 2)))
        g.add(LayerNode("pool", "MaxPool2", ["in"]))
        g.add(LayerNode("bad", "AddMerge", ["in", "pool"]))
        with pytest.raises(ValueError, match="bad"):
            g.finalize()

    def test_two_terminals_rejected(self):
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(4, 4, 2)))
        g.add(LayerNode("a", "ReLU", ["in"]))
        g.add(LayerNode("b", "Sigmoid", ["in"]))
        with pytest.raises(ValueError, match="terminal"):
            g.finalize()

    def test_duplicate_id_rejected(self):
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(4, 4, 2)))
        with pytest.raises(ValueError, match="duplicate"):
            g.add(LayerNode("in", "ReLU", ["in"]))

    def test_unknown_input_rejected(self):
        g = LayerGraph()
        with pytest.raises(ValueError, match="unknown input"):
            g.add(LayerNode("x", "ReLU", ["ghost"]))

    def test_parameters_and_state_tensors(self):
        g = tiny_net()
        p = g.parameters()
        assert "conv1.W" in p and "bn1.gamma" in p and "dense2.B" in p
        assert "bn1.moving_mean" not in p
        s = g.state_tensors()
        assert "bn1.moving_mean" in s and "bn1.moving_var" in s


class TestForward:
    def test_output_in_unit_interval(self):
        g = tiny_net()
        out, _ = forward(g, rand(4, 6, 6, 2), mode="train", rng_seed=0)
        assert out.shape == (4, 1)
        assert ((out > 0) & (out < 1)).all()

    def test_zero_weights_give_half(self):
        g = tiny_net(with_extras=False)
        for arr in g.parameters().values():
            arr[...] = 0
        out, _ = forward(g, rand(3, 6, 6, 2), mode="infer")
        np.testing.assert_array_equal(out, 0.5)

    def test_infer_deterministic_bitwise(self):
        g = tiny_net()
        x = rand(4, 6, 6, 2)
        a, _ = forward(g, x, mode="infer")
        b, _ = forward(g, x, mode="infer")
        np.testing.assert_array_equal(a, b)

    def test_same_seed_same_dropout_mask(self):
        g = tiny_net()
        x = rand(4, 6, 6, 2)
        a, _ = forward(g, x, mode="train", rng_seed=123)
        b, _ = forward(g, x, mode="train", rng_seed=123)
        np.testing.assert_array_equal(a, b)
        c, _ = forward(g, x, mode="train", rng_seed=124)
        assert not np.array_equal(a, c)

    def test_batch_shape_mismatch(self):
        g = tiny_net()
        with pytest.raises(ValueError, match="batch shape"):
            forward(g, rand(4, 8, 8, 2))


class TestBackward:
    def test_stale_tape_rejected(self):
        g = tiny_net()
        x = rand(4, 6, 6, 2)
        out, tape = forward(g, x, mode="train", rng_seed=0)
        g.note_param_update()
        with pytest.raises(ValueError, match="stale"):
            backward(g, tape, np.ones_like(out))

    def test_infer_tape_rejected(self):
        g = tiny_net()
        out, tape = forward(g, rand(4, 6, 6, 2), mode="infer")
        with pytest.raises(ValueError, match="train-mode"):
            backward(g, tape, np.ones_like(out))

    def test_gradients_finite_and_complete(self):
        g = tiny_net()
        x = rand(4, 6, 6, 2)
        out, tape = forward(g, x, mode="train", rng_seed=0)
        _, dpred = bce_loss(out, np.array([[0], [1], [1], [0]], np.float32))
        grads = backward(g, tape, dpred)
        params = g.parameters()
        assert set(grads) == set(params)
        for key, grad in grads.items():
            assert grad.shape == params[key].shape, key
            assert np.isfinite(grad).all(), key

    def test_single_dense_matches_closed_form(self):
        # sigmoid(x w + b) under mean BCE has the classic logistic gradient
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(1, 1, 5)))
        g.add(LayerNode("flat", "Flatten", ["in"]))
        w0 = rand(5, 1, dtype=np.float64)
        b0 = rand(1, dtype=np.float64)
        g.add(LayerNode("fc", "Dense", ["flat"], params={"W": w0.copy(), "B": b0.copy()}))
        g.add(LayerNode("sig", "Sigmoid", ["fc"]))
        g.finalize()
        x = rand(8, 1, 1, 5, dtype=np.float64)
        y = np.array([0, 1, 1, 0, 1, 0, 0, 1], np.float64).reshape(8, 1)
        out, tape = forward(g, x, mode="train", rng_seed=0)
        _, dpred = bce_loss(out, y)
        grads = backward(g, tape, dpred)
        ref_dw, ref_db = logistic_dense_grads(x.reshape(8, 5), y.ravel(), w0.ravel(), b0[0])
        np.testing.assert_allclose(grads["fc.W"].ravel(), ref_dw, rtol=1e-8)
        np.testing.assert_allclose(grads["fc.B"][0], ref_db, rtol=1e-8)

    def test_addmerge_routes_gradient_to_both_branches(self):
        g = tiny_net(with_extras=False)
        g.astype(np.float64)
        x = rand(2, 6, 6, 2, dtype=np.float64)
        labels = np.array([[1.0], [0.0]])
        out, tape = forward(g, x, mode="train", rng_seed=0)
        _, dpred = bce_loss(out, labels)
        grads = backward(g, tape, dpred)
        # conv1 feeds both branches through pool1; its gradient is the sum,
        # verified against finite differences of the whole loss
        _, per_key = gradcheck_graph(g, x, labels, rng_seed=0, keys=["conv1.W"])
        assert per_key["conv1.W"] < 1e-4
        assert np.isfinite(grads["conv1.W"]).all()


class TestLayerKindGradchecks:
    """Finite-difference verification per layer kind in isolation,
    64-bit mode, h=1e-5, max relative error < 1e-4."""

    def check(self, graph, hw, c, batch=3, seed=5):
        graph.astype(np.float64)
        r = np.random.default_rng(seed)
        x = r.standard_normal((batch, hw, hw, c))
        labels = r.integers(0, 2, (batch, 1)).astype(np.float64)
        err, per_key = gradcheck_graph(graph, x, labels, rng_seed=9)
        assert err < 1e-4, per_key
        return err

    def head(self, g, top, width, seed=0):
        r = np.random.default_rng(seed)
        g.add(LayerNode("flat", "Flatten", [top]))
        g.add(
            LayerNode(
                "out", "Dense", ["flat"],
                params={
                    "W": (r.standard_normal((width, 1)) * 0.3).astype(np.float32),
                    "B": np.zeros(1, np.float32),
                },
            )
        )
        g.add(LayerNode("sig", "Sigmoid", ["out"]))
        return g.finalize()

    def test_conv2d(self):
        r = np.random.default_rng(1)
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(4, 4, 2)))
        g.add(
            LayerNode(
                "conv", "Conv2D", ["in"],
                params={"W": (r.standard_normal((3, 3, 2, 3)) * 0.4).astype(np.float32), "B": np.zeros(3, np.float32)},
                spec=ConvSpec(3, 2, 3, padding="same"),
            )
        )
        self.check(self.head(g, "conv", 48), 4, 2)

    def test_conv2d_strided(self):
        r = np.random.default_rng(2)
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(5, 5, 2)))
        g.add(
            LayerNode(
                "conv", "Conv2D", ["in"],
                params={"W": (r.standard_normal((3, 3, 2, 2)) * 0.4).astype(np.float32), "B": np.zeros(2, np.float32)},
                spec=ConvSpec(3, 2, 2, stride=2, padding=0),
            )
        )
        self.check(self.head(g, "conv", 8), 5, 2)

    def test_batchnorm(self):
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(3, 3, 4)))
        g.add(LayerNode("bn", "BatchNorm", ["in"], bn=BatchNormState.for_channels(4)))
        self.check(self.head(g, "bn", 36), 3, 4, batch=4)

    def test_relu(self):
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(3, 3, 2)))
        g.add(LayerNode("relu", "ReLU", ["in"]))
        self.check(self.head(g, "relu", 18), 3, 2)

    def test_maxpool(self):
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(4, 4, 2)))
        g.add(LayerNode("pool", "MaxPool2", ["in"]))
        self.check(self.head(g, "pool", 8), 4, 2)

    def test_dense_stack(self):
        r = np.random.default_rng(3)
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(2, 2, 2)))
        g.add(LayerNode("flat0", "Flatten", ["in"]))
        g.add(
            LayerNode(
                "fc1", "Dense", ["flat0"],
                params={"W": (r.standard_normal((8, 6)) * 0.4).astype(np.float32), "B": np.zeros(6, np.float32)},
            )
        )
        g.add(LayerNode("r1", "ReLU", ["fc1"]))
        g.add(
            LayerNode(
                "out", "Dense", ["r1"],
                params={"W": (r.standard_normal((6, 1)) * 0.4).astype(np.float32), "B": np.zeros(1, np.float32)},
            )
        )
        g.add(LayerNode("sig", "Sigmoid", ["out"]))
        g.finalize()
        self.check(g, 2, 2)

    def test_dropout(self):
        r = np.random.default_rng(4)
        g = LayerGraph()
        g.add(LayerNode("in", "Input", input_shape=(2, 2, 2)))
        g.add(LayerNode("flat0", "Flatten", ["in"]))
        g.add(
            LayerNode(
                "fc1", "Dense", ["flat0"],
                params={"W": (r.standard_normal((8, 8)) * 0.4).astype(np.float32), "B": np.zeros(8, np.float32)},
            )
        )
        g.add(LayerNode("drop", "Dropout", ["fc1"], rate=0.5))
        g.add(
            LayerNode(
                "out", "Dense", ["drop"],
                params={"W": (r.standard_normal((8, 1)) * 0.4).astype(np.float32), "B": np.zeros(1, np.float32)},
            )
        )
        g.add(LayerNode("sig", "Sigmoid", ["out"]))
        g.finalize()
        self.check(g, 2, 2)

    def test_addmerge_and_sigmoid(self):
        g = tiny_net(with_extras=False)
        self.check(g, 6, 2)

    def test_rel_err_guard(self):
        assert rel_err(0.0, 0.0) == 0.0
        assert rel_err(1e-9, 0.0) < 1e-4  # guarded, compared absolutely
        assert rel_err(2.0, 1.0) == 0.5
