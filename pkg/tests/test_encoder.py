import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, strategies as st

from icnnmetric import tape as T
from icnnmetric.encoder import (
    MlpEncoder,
    OptimizerState,
    apply_update,
    encode,
    encoder_init,
    load_checkpoint,
    save_checkpoint,
)
from icnnmetric.tape import Tape, backward, finite_diff_check


def loop_encode(enc, x):
    """Scalar-loop forward pass used as the oracle."""
    h = np.array(x, dtype=float)
    for layer, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        out = np.zeros((h.shape[0], w.shape[1]))
        for n in range(h.shape[0]):
            for j in range(w.shape[1]):
                acc = b[j]
                for i in range(w.shape[0]):
                    acc += h[n, i] * w[i, j]
                if layer < len(enc.weights) - 1:
                    acc = max(acc, 0.0)
                out[n, j] = acc
        h = out
    return h


def scalar_encoder(w0=0.0):
    return MlpEncoder((1, 1), [np.array([[w0]])], [np.zeros(1)])


class TestInit:
    def test_same_seed_same_weights(self):
        a, b = encoder_init(7, [8, 16, 4]), encoder_init(7, [8, 16, 4])
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_shapes(self):
        enc = encoder_init(0, [8, 16, 4])
        assert [w.shape for w in enc.weights] == [(8, 16), (16, 4)]

    def test_biases_zero_and_weights_in_range(self):
        enc = encoder_init(3, [9, 5, 2])
        for w, b in zip(enc.weights, enc.biases):
            assert not b.any()
            assert np.abs(w).max() <= 1 / np.sqrt(w.shape[0])

    @pytest.mark.parametrize("dims", [[4], [4, 0], [-1, 3]])
    def test_bad_dims(self, dims):
        with pytest.raises(ValueError):
            encoder_init(0, dims)


class TestEncode:
    def test_identity_layer_passes_nonnegative_input(self):
        enc = MlpEncoder((3, 3, 3), [np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(3)])
        x = np.array([[0.0, 1.5, 2.0], [3.0, 0.25, 0.0]])
        np.testing.assert_array_equal(encode(enc, x).data, x)

    def test_zero_input_zero_output(self):
        enc = encoder_init(1, [5, 7, 3])
        assert not encode(enc, np.zeros((2, 5))).data.any()

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        enc = encoder_init(4, [6, 5, 4, 3])
        enc.biases = [rng.normal(size=b.shape) for b in enc.biases]
        x = rng.normal(size=(5, 6))
        np.testing.assert_allclose(encode(enc, x).data, loop_encode(enc, x), atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(T.ShapeError):
            encode(encoder_init(0, [4, 2]), np.zeros((3, 5)))

    def test_weight_gradients_match_fd(self):
        rng = np.random.default_rng(2)
        enc = encoder_init(2, [3, 4, 2])
        x = rng.normal(size=(5, 3))

        def f(w0):
            params = {"W0": w0, "b0": T.Tensor(enc.biases[0]),
                      "W1": T.Tensor(enc.weights[1]), "b1": T.Tensor(enc.biases[1])}
            return T.sum(T.square(encode(enc, x, params)))

        assert finite_diff_check(f, enc.weights[0]) <= 1e-6

    def test_bind_reaches_every_parameter(self):
        enc = encoder_init(0, [3, 4, 2])
        with Tape() as tp:
            params = enc.bind(tp)
            loss = T.sum(encode(enc, np.ones((2, 3)), params))
        grads = backward(loss)
        assert set(params) == {"W0", "b0", "W1", "b1"}
        assert all(grads.wrt(p).shape == p.shape for p in params.values())


class TestOptimizer:
    def test_zero_lr_is_noop(self):
        enc = encoder_init(0, [3, 2])
        before = enc.copy()
        grads = {k: np.ones_like(v) for k, v in enc.params().items()}
        apply_update(enc, OptimizerState("sgd", learning_rate=0.0), grads)
        apply_update(enc, OptimizerState("adam", learning_rate=0.0), grads)
        np.testing.assert_array_equal(enc.weights[0], before.weights[0])

    def test_single_sgd_step(self):
        enc = scalar_encoder()
        apply_update(enc, OptimizerState("sgd", learning_rate=0.1, momentum=0.0),
                     {"W0": np.ones((1, 1)), "b0": np.zeros(1)})
        assert enc.weights[0][0, 0] == pytest.approx(-0.1, abs=1e-15)

    def test_two_momentum_steps(self):
        # v1 = 1, v2 = 0.9 + 1 = 1.9; w = -0.1 * (1 + 1.9)
        enc = scalar_encoder()
        opt = OptimizerState("sgd", learning_rate=0.1, momentum=0.9)
        for _ in range(2):
            apply_update(enc, opt, {"W0": np.ones((1, 1)), "b0": np.zeros(1)})
        assert enc.weights[0][0, 0] == pytest.approx(-0.29, abs=1e-15)

    def test_adam_ten_steps_against_recurrence(self):
        gs = [0.5, -1.0, 2.0, 0.1, 0.0, -0.3, 1.2, -2.2, 0.7, 0.05]
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        enc = scalar_encoder(1.0)
        opt = OptimizerState("adam", learning_rate=0.01)
        for g in gs:
            apply_update(enc, opt, {"W0": np.array([[g]]), "b0": np.zeros(1)})
        assert enc.weights[0][0, 0] == pytest.approx(w, abs=1e-14)

    def test_adam_first_step_is_lr_times_sign(self):
        enc = scalar_encoder()
        apply_update(enc, OptimizerState("adam", learning_rate=0.01),
                     {"W0": np.array([[-3.0]]), "b0": np.zeros(1)})
        assert enc.weights[0][0, 0] == pytest.approx(0.01, rel=1e-6)

    def test_missing_gradient(self):
        with pytest.raises(KeyError):
            apply_update(scalar_encoder(), OptimizerState(), {"W0": np.ones((1, 1))})

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            OptimizerState("rmsprop")


class TestCheckpoint:
    @given(st.integers(0, 2**31), st.lists(st.integers(1, 6), min_size=2, max_size=4))
    def test_round_trip_is_exact(self, seed, dims):
        enc = encoder_init(seed, dims)
        enc.biases = [b + 0.1 * (i + 1) / 3 for i, b in enumerate(enc.biases)]
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "enc.ckpt")
            save_checkpoint(enc, path)
            back = load_checkpoint(path)
        assert back.layer_dims == enc.layer_dims
        for a, b in zip(enc.weights + enc.biases, back.weights + back.biases):
            np.testing.assert_array_equal(a, b)

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_text("hello\n")
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(p)
