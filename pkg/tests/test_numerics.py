import numpy as np
import pytest

from ogctl.errors import ConfigError, NotFiniteError, ShapeError
from ogctl.numerics import AdamState, adam_step, finite_diff_check, make_rng


def test_matmul_matches_triple_loop_oracle():
    rng = make_rng(0)
    a = rng.standard_normal((16, 16))
    b = rng.standard_normal((16, 16))
    oracle = np.zeros((16, 16))
    for i in range(16):
        for j in range(16):
            s = 0.0
            for k in range(16):
                s += a[i, k] * b[k, j]
            oracle[i, j] = s
    got = a @ b
    rel = np.abs(got - oracle) / np.maximum(np.abs(oracle), 1.0)
    assert rel.max() < 1e-6


def test_rng_same_seed_bit_identical():
    a = make_rng(42).standard_normal(100)
    b = make_rng(42).standard_normal(100)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(43).standard_normal(100))


class TestAdam:
    def test_zero_gradient_leaves_params_bit_identical(self):
        params = {"w": np.array([1.0, -0.5, 3.25], dtype=np.float32)}
        before = params["w"].copy()
        state = AdamState(lr=0.1)
        adam_step(params, {"w": np.zeros(3, dtype=np.float32)}, state)
        assert state.step == 1
        assert np.array_equal(params["w"], before)
        # still true on repeated zero-gradient steps (moments stay zero)
        adam_step(params, {"w": np.zeros(3, dtype=np.float32)}, state)
        assert state.step == 2
        assert np.array_equal(params["w"], before)

    def test_first_step_moves_by_lr(self):
        # hand evaluation: m_hat = v_hat = 1 after one unit-gradient step,
        # so w <- 1 - lr/(1 + eps)
        params = {"w": np.array([1.0])}
        state = AdamState(lr=0.1)
        adam_step(params, {"w": np.array([1.0])}, state)
        assert params["w"][0] == pytest.approx(0.9, abs=1e-8)
        assert state.step == 1

    def test_two_steps_reduce_quadratic_loss(self):
        params = {"w": np.array([1.0])}
        state = AdamState(lr=0.1)
        losses = [params["w"][0] ** 2]
        for _ in range(2):
            adam_step(params, {"w": 2.0 * params["w"]}, state)
            losses.append(params["w"][0] ** 2)
        assert losses[1] < losses[0]
        assert losses[2] < losses[1]

    def test_shape_mismatch_names_parameter(self):
        state = AdamState()
        with pytest.raises(ShapeError, match="'w'"):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, state)

    def test_missing_and_unknown_gradients_rejected(self):
        state = AdamState()
        with pytest.raises(ShapeError, match="missing gradient"):
            adam_step({"w": np.zeros(3)}, {}, state)
        with pytest.raises(ShapeError, match="unknown parameter"):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(3), "x": np.zeros(1)}, state)

    def test_bad_hyperparameters_rejected(self):
        with pytest.raises(ConfigError):
            AdamState(lr=0.0)
        with pytest.raises(ConfigError):
            AdamState(beta1=1.0)


class TestFiniteDiff:
    def test_quadratic_is_exact_up_to_rounding(self):
        def loss_and_grad(p):
            w = p["w"]
            return float((w**2).sum()), {"w": 2.0 * w}

        errs = finite_diff_check(loss_and_grad, {"w": np.array([3.0])}, h=1e-4)
        assert errs["w"] < 1e-8

    def test_corrupted_gradient_flagged(self):
        def loss_and_grad(p):
            w = p["w"]
            return float((w**2).sum()), {"w": 4.0 * w}   # analytic doubled on purpose

        errs = finite_diff_check(loss_and_grad, {"w": np.array([3.0])}, h=1e-4)
        assert errs["w"] == pytest.approx(0.5, abs=1e-6)

    def test_requires_float64(self):
        def loss_and_grad(p):
            return 0.0, {"w": np.zeros(1, dtype=np.float32)}

        with pytest.raises(ConfigError, match="float64"):
            finite_diff_check(loss_and_grad, {"w": np.zeros(1, dtype=np.float32)})

    def test_nonfinite_loss_identifies_perturbation(self):
        def loss_and_grad(p):
            w = p["w"]
            val = np.inf if w[1] > 0.5 else float(w.sum())
            return val, {"w": np.ones_like(w)}

        with pytest.raises(NotFiniteError, match=r"'w'\[\(1,\)\]"):
            finite_diff_check(loss_and_grad, {"w": np.array([0.0, 0.5 - 1e-5])}, h=1e-4)
