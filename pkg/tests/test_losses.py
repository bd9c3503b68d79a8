import numpy as np
import pytest

from ogctl.errors import ConfigError, ZeroNormError
from ogctl.losses import (
    AffineClassifier,
    ClassProjection,
    angular_margin,
    asoftmax_logits,
    asoftmax_loss,
    decay_lambda,
    init_affine_classifier,
    init_class_projection,
    renormalize_rows,
    softmax_loss,
)
from ogctl.numerics import AdamState, adam_step, finite_diff_check, make_rng


def make_proj(n_classes=5, dim=8, omega=4, lam=0.0, monotonic=True, seed=0, dtype=np.float64):
    return init_class_projection(
        n_classes, dim, make_rng(seed), omega=omega,
        lambda_start=lam, lambda_min=0.0, lambda_decay=0.0,
        monotonic=monotonic, dtype=dtype,
    )


def batch(n=12, dim=8, n_classes=5, seed=1):
    rng = make_rng(seed)
    t = rng.standard_normal((n, dim)) + 0.1
    y = rng.integers(n_classes, size=n)
    return t, y


class TestAngularMargin:
    def test_omega_one_is_identity(self):
        c = np.linspace(-1, 1, 41)
        psi, dpsi = angular_margin(c, 1)
        np.testing.assert_allclose(psi, c, atol=1e-12)
        np.testing.assert_allclose(dpsi, np.ones_like(c), atol=1e-12)

    def test_aligned_angle_scores_one(self):
        for omega in (1, 2, 3, 4):
            psi, _ = angular_margin(np.array([1.0]), omega)
            assert psi[0] == pytest.approx(1.0, abs=1e-12)

    def test_monotonic_extension_decreases_in_angle(self):
        theta = np.linspace(0.0, np.pi, 400)
        psi, _ = angular_margin(np.cos(theta), 4)
        assert np.all(np.diff(psi) <= 1e-9)

    def test_literal_form_is_nonmonotonic(self):
        theta = np.linspace(0.0, np.pi, 400)
        psi, _ = angular_margin(np.cos(theta), 4, monotonic=False)
        assert np.any(np.diff(psi) > 1e-6)
        np.testing.assert_allclose(psi, np.cos(4 * theta), atol=1e-9)


class TestAsoftmax:
    def test_omega1_lambda0_reduces_to_normalized_softmax(self):
        t, y = batch()
        proj = make_proj(omega=1, lam=0.0)
        loss_a, dt_a, dw_a = asoftmax_loss(t, y, proj)
        clf = AffineClassifier(weight=proj.weight.copy(), bias=np.zeros(proj.n_classes))
        loss_s, dt_s, dw_s, _ = softmax_loss(t, y, clf)
        assert loss_a == pytest.approx(loss_s, abs=1e-6)
        np.testing.assert_allclose(dt_a, dt_s, atol=1e-6)
        np.testing.assert_allclose(dw_a, dw_s, atol=1e-6)

    def test_aligned_sample_has_minimal_loss(self):
        proj = make_proj(n_classes=4, dim=6, omega=4, lam=0.0)
        w0 = proj.weight[0]
        norm = 2.5
        aligned = (norm * w0)[None, :]
        base, _, _ = asoftmax_loss(aligned, np.array([0]), proj)
        rng = make_rng(3)
        for _ in range(25):
            v = rng.standard_normal(6)
            v = norm * v / np.linalg.norm(v)
            if abs(float(v @ w0) / norm - 1.0) < 1e-9:
                continue
            other, _, _ = asoftmax_loss(v[None, :], np.array([0]), proj)
            assert base < other

    def test_target_logit_is_norm_at_zero_angle(self):
        proj = make_proj(n_classes=4, dim=6, omega=4, lam=7.0)
        t = (3.0 * proj.weight[1])[None, :]
        logits, _ = asoftmax_logits(t, np.array([1]), proj)
        assert logits[0, 1] == pytest.approx(3.0, abs=1e-9)

    def test_scaling_template_preserves_logit_argmax(self):
        t, y = batch(n=30)
        proj = make_proj(omega=4, lam=2.0)
        base, _ = asoftmax_logits(t, y, proj)
        for alpha in (0.037, 5.0, 211.0):
            scaled, _ = asoftmax_logits(alpha * t, y, proj)
            assert np.array_equal(np.argmax(base, axis=1), np.argmax(scaled, axis=1))

    @pytest.mark.parametrize("omega,lam,monotonic", [(4, 0.0, True), (4, 3.0, True), (3, 1.0, True), (2, 0.5, False)])
    def test_gradients_match_finite_differences(self, omega, lam, monotonic):
        t, y = batch(n=10)
        proj = make_proj(omega=omega, lam=lam, monotonic=monotonic)

        def loss_and_grad(vec):
            proj.weight[...] = vec["w"]
            loss, d_t, d_w = asoftmax_loss(vec["t"], y, proj)
            return loss, {"w": d_w, "t": d_t}

        errs = finite_diff_check(
            loss_and_grad, {"w": proj.weight.copy(), "t": t.copy()}, h=1e-4
        )
        assert max(errs.values()) < 1e-3

    def test_zero_norm_template_rejected(self):
        proj = make_proj()
        t = np.zeros((1, 8))
        with pytest.raises(ZeroNormError):
            asoftmax_loss(t, np.array([0]), proj)

    def test_label_out_of_range_rejected(self):
        proj = make_proj(n_classes=3)
        t, _ = batch(n=2)
        with pytest.raises(ConfigError, match="label"):
            asoftmax_loss(t[:2], np.array([0, 3]), proj)

    def test_loss_decreases_on_separable_problem(self):
        # four separable clusters; optimize the class rows for 100 iterations
        rng = make_rng(9)
        centers = np.eye(4, 8) * 4.0
        t = np.vstack([centers[i] + 0.05 * rng.standard_normal((8, 8)) for i in range(4)])
        y = np.repeat(np.arange(4), 8)
        proj = init_class_projection(4, 8, make_rng(0), omega=4, dtype=np.float64)
        adam = AdamState(lr=1e-2)
        losses = []
        for it in range(100):
            loss, _, d_w = asoftmax_loss(t, y, proj)
            losses.append(loss)
            adam_step({"w": proj.weight}, {"w": d_w}, adam)
            renormalize_rows(proj.weight)
            decay_lambda(proj, it + 1)
        assert losses[-1] < losses[0]


class TestSoftmax:
    def test_uniform_logits_give_log_c(self):
        clf = AffineClassifier(weight=np.zeros((7, 8)), bias=np.zeros(7))
        t, _ = batch(n=5)
        loss, _, _, _ = softmax_loss(t, np.zeros(5, dtype=np.int64), clf)
        assert loss == pytest.approx(np.log(7), abs=1e-12)

    def test_large_margin_drives_loss_to_zero(self):
        clf = AffineClassifier(weight=np.zeros((3, 8)), bias=np.array([50.0, 0.0, 0.0]))
        t, _ = batch(n=4, n_classes=3)
        loss, _, _, _ = softmax_loss(t, np.zeros(4, dtype=np.int64), clf)
        assert loss < 1e-10

    def test_gradients_match_finite_differences(self):
        t, y = batch(n=9, n_classes=5)
        clf = init_affine_classifier(5, 8, make_rng(4), dtype=np.float64)

        def loss_and_grad(vec):
            clf.weight[...] = vec["w"]
            clf.bias[...] = vec["b"]
            loss, d_t, d_w, d_b = softmax_loss(vec["t"], y, clf)
            return loss, {"w": d_w, "b": d_b, "t": d_t}

        errs = finite_diff_check(
            loss_and_grad,
            {"w": clf.weight.copy(), "b": clf.bias.copy(), "t": t.copy()},
            h=1e-4,
        )
        assert max(errs.values()) < 1e-3

    def test_label_out_of_range_rejected(self):
        clf = init_affine_classifier(3, 8, make_rng(4))
        t, _ = batch(n=2)
        with pytest.raises(ConfigError, match="label"):
            softmax_loss(t[:2], np.array([0, 7]), clf)


class TestProjectionMaintenance:
    def test_rows_unit_norm_after_optimizer_step(self):
        proj = init_class_projection(6, 16, make_rng(2), dtype=np.float32)
        adam = AdamState(lr=0.05)
        rng = make_rng(5)
        for _ in range(5):
            adam_step({"w": proj.weight}, {"w": rng.standard_normal(proj.weight.shape).astype(np.float32)}, adam)
            renormalize_rows(proj.weight)
            norms = np.linalg.norm(proj.weight.astype(np.float64), axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_decay_lambda_schedule(self):
        proj = make_proj()
        proj.lambda_start, proj.lambda_min, proj.lambda_decay = 1000.0, 5.0, 1e6
        assert decay_lambda(proj, 10) == 5.0                       # floor
        proj.lambda_decay = 0.0
        assert decay_lambda(proj, 10_000) == 1000.0                # constant
        proj.lambda_decay = 0.1
        assert decay_lambda(proj, 0) == 1000.0                     # start

    def test_omega_must_be_positive_integer(self):
        proj = make_proj()
        proj.omega = 0
        with pytest.raises(ConfigError):
            proj.validate()
