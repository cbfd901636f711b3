import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sharpdiag import kernels
from sharpdiag.diffcore import (
    Batch,
    Dataset,
    LayoutMismatch,
    MlpModel,
    NumericalError,
    Objective,
    ParamVector,
    batch_loss,
    forward,
    load_checkpoint,
    loss_and_grad,
    mlp_layout,
    param_axpy,
    param_dot,
    param_norm2,
    save_checkpoint,
    scores,
    weighted_cross_entropy,
)

from conftest import random_model_batch
from oracles import central_difference, gradient_error, loop_mlp_loss


class TestGradient:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_central_difference(self, seed):
        model, batch = random_model_batch(seed)
        obj = Objective(model, batch)
        w = model.params.values
        _, g = obj.loss_grad(w)
        num = central_difference(obj.loss, w, h=1e-5)
        rel, absolute = gradient_error(g, num)
        assert rel <= 1e-6
        assert absolute <= 1e-8

    def test_loss_and_grad_returns_layout(self, small_model, small_batch):
        loss, grad = loss_and_grad(small_model, small_batch)
        assert grad.layout == small_model.params.layout
        assert loss == batch_loss(small_model, small_batch)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_loss_matches_scalar_loop(self, activation):
        model, batch = random_model_batch(5, activation, n=6)
        expected = loop_mlp_loss(model.params.values, model.layer_dims, activation,
                                 batch.features, batch.labels, (0.9, 0.1))
        assert batch_loss(model, batch) == pytest.approx(expected, rel=1e-12)


class TestForward:
    def test_zero_input_gives_bias(self):
        layout = mlp_layout((2, 2))
        values = np.zeros(6)
        values[4:] = [1.0, -1.0]
        model = MlpModel((2, 2), "relu", ParamVector(values, layout))
        logits = forward(model, Batch(np.zeros((1, 2)), [0]))
        np.testing.assert_array_equal(logits, [[1.0, -1.0]])

    def test_identity_layer(self):
        layout = mlp_layout((2, 2))
        values = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        model = MlpModel((2, 2), "relu", ParamVector(values, layout))
        x = np.array([[0.3, -2.0]])
        np.testing.assert_array_equal(forward(model, Batch(x, [0])), x)

    def test_relu_hidden_clamps(self):
        # 1 -> 1 -> 2 network with unit weights; negative input is cut off
        layout = mlp_layout((1, 1, 2))
        values = np.array([1.0, 0.0, 1.0, -1.0, 0.0, 0.0])
        model = MlpModel((1, 1, 2), "relu", ParamVector(values, layout))
        out = forward(model, Batch(np.array([[-3.0], [2.0]]), [0, 1]))
        np.testing.assert_array_equal(out, [[0.0, 0.0], [2.0, -2.0]])

    def test_dimension_mismatch_names_layer(self, small_model):
        with pytest.raises(ValueError, match="layer 0"):
            forward(small_model, Batch(np.zeros((2, 5)), [0, 1]))

    def test_scores_are_logit_difference(self, small_model, small_batch):
        ds = Dataset(small_batch.features, small_batch.labels)
        logits = forward(small_model, small_batch)
        np.testing.assert_array_equal(scores(small_model, ds), logits[:, 0] - logits[:, 1])

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericalError):
            Batch(np.array([[np.nan, 1.0]]), [0])


class TestWeightedCrossEntropy:
    def test_uniform_logits_bona(self):
        mean, per = weighted_cross_entropy([[0.0, 0.0]], [0])
        assert mean == pytest.approx(0.9 * math.log(2), rel=1e-15)

    def test_uniform_logits_spoof(self):
        mean, _ = weighted_cross_entropy([[0.0, 0.0]], [1])
        assert mean == pytest.approx(0.1 * math.log(2), rel=1e-15)

    def test_saturated_correct_is_zero(self):
        mean, _ = weighted_cross_entropy([[1000.0, -1000.0]], [0])
        assert mean == 0.0

    def test_saturated_wrong_is_finite(self):
        mean, _ = weighted_cross_entropy([[-1000.0, 1000.0]], [0])
        assert mean == pytest.approx(0.9 * 2000.0, rel=1e-15)

    def test_high_precision(self):
        getcontext().prec = 50
        z = [0.7, -1.3]
        exact = Decimal("0.9") * ((Decimal(z[0]).exp() + Decimal(z[1]).exp()).ln() - Decimal(z[0]))
        mean, _ = weighted_cross_entropy([z], [0], (0.9, 0.1))
        assert abs(mean - float(exact)) <= 1e-12 * float(exact)

    def test_unweighted_mean_of_weighted_terms(self):
        logits = np.array([[0.0, 0.0], [0.0, 0.0]])
        mean, per = weighted_cross_entropy(logits, [0, 1])
        np.testing.assert_allclose(per, [0.9 * math.log(2), 0.1 * math.log(2)], rtol=1e-15)
        assert mean == pytest.approx(0.5 * math.log(2), rel=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=10),
           st.floats(0.01, 10.0))
    def test_nonnegative_and_linear_in_weights(self, rows, scale):
        logits = np.array(rows)
        labels = np.arange(len(rows)) % 2
        mean, per = weighted_cross_entropy(logits, labels, (0.9, 0.1))
        assert np.all(per >= 0)
        scaled, _ = weighted_cross_entropy(logits, labels, (0.9 * scale, 0.1 * scale))
        assert scaled == pytest.approx(scale * mean, rel=1e-12, abs=1e-300)

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            weighted_cross_entropy([[0.0, 0.0]], [0], (0.9, 0.0))


class TestParamVector:
    def test_axpy_dot_norm(self):
        layout = mlp_layout((1, 2))
        x = ParamVector(np.array([1.0, 2.0, 3.0, 4.0]), layout)
        y = ParamVector(np.array([0.5, 0.5, 0.5, 0.5]), layout)
        np.testing.assert_array_equal(param_axpy(2.0, x, y).values, [2.5, 4.5, 6.5, 8.5])
        assert param_dot(x, y) == 5.0
        assert param_norm2(x) == math.sqrt(30.0)

    def test_layout_mismatch(self):
        x = ParamVector(np.zeros(4), mlp_layout((1, 2)))
        z = ParamVector(np.zeros(9), mlp_layout((2, 3)))
        with pytest.raises(LayoutMismatch):
            param_dot(x, z)
        with pytest.raises(LayoutMismatch):
            param_axpy(1.0, x, z)

    def test_blocks_are_views(self):
        model = MlpModel.init((3, 4, 2), "relu", 0)
        W0 = model.params.block("W0")
        assert W0.shape == (3, 4)
        assert np.shares_memory(W0, model.params.values)

    def test_layout_must_cover_vector(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(5), mlp_layout((1, 2)))


class TestDeterminism:
    def test_same_seed_bit_identical(self, small_batch):
        a = MlpModel.init((3, 4, 2), "tanh", seed=11)
        b = MlpModel.init((3, 4, 2), "tanh", seed=11)
        np.testing.assert_array_equal(a.params.values, b.params.values)
        la, ga = loss_and_grad(a, small_batch)
        lb, gb = loss_and_grad(b, small_batch)
        assert la == lb
        np.testing.assert_array_equal(ga.values, gb.values)
        np.testing.assert_array_equal(forward(a, small_batch), forward(b, small_batch))

    def test_init_has_zero_biases(self):
        model = MlpModel.init((5, 7, 2), "relu", 1)
        assert not model.params.block("b0").any()
        assert not model.params.block("b1").any()
        limit = math.sqrt(6.0 / 12)
        assert np.abs(model.params.block("W0")).max() <= limit


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
class TestBackendEquivalence:
    @pytest.mark.parametrize("seed", range(8))
    def test_backends_agree(self, seed):
        model, batch = random_model_batch(seed, n=33)
        args = (model.params.values, model._dims, model._act, batch.features, batch.labels,
                np.where(batch.labels == 0, 0.9, 0.1))
        py = kernels.get_backend("python")
        cy = kernels.get_backend("cython")
        np.testing.assert_allclose(cy.mlp_forward(*args[:4]), py.mlp_forward(*args[:4]), rtol=1e-12, atol=1e-14)
        lp, gp = py.mlp_loss_grad(*args)
        lc, gc = cy.mlp_loss_grad(*args)
        assert lc == pytest.approx(lp, rel=1e-12)
        np.testing.assert_allclose(gc, gp, rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("n, expected", [(8, "cython"), (kernels.SMALL_WORK // 4, "cython"),
                                             (kernels.SMALL_WORK // 4 + 1, "python")])
    def test_auto_routes_by_work(self, monkeypatch, n, expected):
        calls = []
        for name in ("python", "cython"):
            impl = kernels.get_backend(name)
            monkeypatch.setattr(impl, "mlp_loss", lambda *a, _n=name: calls.append(_n) or 0.0)
        dims = np.array([3, 4, 2])
        kernels._auto_loss(None, dims, 0, np.zeros((n, 3)), None, None)
        assert calls == [expected]

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.get_backend("fortran")


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        model = MlpModel.init((4, 6, 2), "tanh", 3)
        model = model.with_params(model.params.values * rng.uniform(0.1, 1e6, model.n_params))
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.layer_dims == model.layer_dims
        assert back.activation == "tanh"
        np.testing.assert_array_equal(back.params.values, model.params.values)

    def test_truncated_file_rejected(self, tmp_path):
        model = MlpModel.init((2, 2), "relu", 0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError, match="expected"):
            load_checkpoint(path)


class TestDataset:
    def test_batches_partial_last(self):
        ds = Dataset(np.zeros((70, 2)), np.zeros(70, dtype=int))
        sizes = [len(b) for b in ds.batches(32)]
        assert sizes == [32, 32, 6]
        assert ds.n_batches(32) == 3

    def test_shuffle_is_seeded_permutation(self):
        ds = Dataset(np.arange(20.0).reshape(10, 2), np.arange(10) % 2)
        a = np.vstack([b.features for b in ds.batches(3, shuffle_seed=5)])
        b = np.vstack([b.features for b in ds.batches(3, shuffle_seed=5)])
        np.testing.assert_array_equal(a, b)
        assert sorted(a[:, 0]) == list(ds.features[:, 0])

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((2, 2)), [0, 2])
