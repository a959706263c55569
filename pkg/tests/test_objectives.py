import numpy as np
import pytest

from fidomasks import objectives as obj
from fidomasks import tensor as T
from fidomasks.objectives import LossConfig, log_odds, sdr_loss, ssr_loss, total_variation
from fidomasks.tensor import Tape, Tensor, finite_difference_gradient


class TestLogOdds:
    def test_even_odds(self):
        assert log_odds(Tensor(np.array([0.5]))).data[0] == 0.0

    def test_closed_form(self):
        out = log_odds(Tensor(np.array([0.9]))).data[0]
        assert out == pytest.approx(np.log(9.0), abs=1e-12)

    def test_clamped_at_one(self):
        out = log_odds(Tensor(np.array([1.0])), eps=1e-6).data[0]
        want = np.log((1 - 1e-6) / 1e-6)
        assert out == pytest.approx(want, abs=1e-9)
        assert want == pytest.approx(13.8155, abs=1e-4)

    def test_antisymmetry(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.01, 0.99, size=50)
        a = log_odds(Tensor(p)).data
        b = log_odds(Tensor(1.0 - p)).data
        np.testing.assert_allclose(a, -b, atol=1e-12)

    def test_monotone(self):
        p = np.linspace(0.01, 0.99, 99)
        s = log_odds(Tensor(p)).data
        assert np.all(np.diff(s) > 0)


class TestTotalVariation:
    def test_constant_is_zero(self):
        assert total_variation(Tensor(np.full((5, 7), 0.3))).item() == 0.0

    def test_checkerboard(self):
        m = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert total_variation(m).item() == 4.0

    def test_ramp_1x3(self):
        m = Tensor(np.array([[0.0, 0.5, 1.0]]))
        assert total_variation(m).item() == pytest.approx(0.5, abs=1e-15)

    def test_inversion_invariance(self):
        rng = np.random.default_rng(1)
        m = rng.random((6, 6))
        assert total_variation(Tensor(m)).item() == pytest.approx(
            total_variation(Tensor(1.0 - m)).item(), rel=1e-12
        )

    def test_matches_evaluation_mirror(self):
        from fidomasks.evaluation import coherency_tv

        rng = np.random.default_rng(2)
        m = rng.random((9, 4))
        assert total_variation(Tensor(m)).item() == pytest.approx(coherency_tv(m), rel=1e-12)


class TestLosses:
    def test_ssr_score_only(self):
        cfg = LossConfig(lambda_l1=0.0, tv_weight=0.0)
        z = Tensor(np.random.default_rng(0).random((3, 2, 2)))
        loss = ssr_loss(Tensor(np.full(3, 1.7)), z, cfg)
        assert loss.item() == pytest.approx(-1.7, abs=1e-12)

    def test_ssr_all_ones_mask_zero_penalty(self):
        cfg = LossConfig(lambda_l1=0.001, tv_weight=0.0)
        loss = ssr_loss(Tensor(np.zeros(2)), Tensor(np.ones((2, 3, 3))), cfg)
        assert loss.item() == 0.0

    def test_ssr_hand_computed(self):
        # B=2, scores {1, 3}, z all 0.5 over 4 pixels: -2 + 0.001 * 2 = -1.998
        cfg = LossConfig(lambda_l1=0.001, tv_weight=0.0)
        z = Tensor(np.full((2, 2, 2), 0.5))
        loss = ssr_loss(Tensor(np.array([1.0, 3.0])), z, cfg)
        assert loss.item() == pytest.approx(-1.998, abs=1e-12)

    def test_sdr_score_only(self):
        cfg = LossConfig(lambda_l1=0.0, tv_weight=0.0)
        z = Tensor(np.random.default_rng(1).random((4, 2, 2)))
        loss = sdr_loss(Tensor(np.full(4, 0.9)), z, cfg)
        assert loss.item() == pytest.approx(0.9, abs=1e-12)

    def test_sdr_zero_mask_zero_loss(self):
        cfg = LossConfig(lambda_l1=0.001, tv_weight=0.0)
        loss = sdr_loss(Tensor(np.zeros(2)), Tensor(np.zeros((2, 3, 3))), cfg)
        assert loss.item() == 0.0

    def test_sdr_hand_computed(self):
        # B=1, score 2, z all ones over 10 pixels: 2 + 0.001 * 10 = 2.01
        cfg = LossConfig(lambda_l1=0.001, tv_weight=0.0)
        loss = sdr_loss(Tensor(np.array([2.0])), Tensor(np.ones((1, 2, 5))), cfg)
        assert loss.item() == pytest.approx(2.01, abs=1e-12)

    def test_empty_batch_rejected(self):
        cfg = LossConfig()
        with pytest.raises(ValueError):
            ssr_loss(Tensor(np.zeros(0)), Tensor(np.zeros((0, 2, 2))), cfg)

    def test_tv_requires_theta(self):
        cfg = LossConfig(tv_weight=0.01)
        with pytest.raises(ValueError):
            ssr_loss(Tensor(np.zeros(1)), Tensor(np.zeros((1, 2, 2))), cfg)

    def test_tv_per_sample_switch(self):
        cfg = LossConfig(lambda_l1=0.0, tv_weight=1.0, tv_per_sample=True)
        z = np.zeros((2, 2, 2))
        z[0] = [[0.0, 1.0], [1.0, 0.0]]  # TV 4, second row constant
        loss = ssr_loss(Tensor(np.zeros(2)), Tensor(z), cfg)
        assert loss.item() == pytest.approx(2.0, abs=1e-12)

    def test_losses_deterministic_given_batch(self):
        cfg = LossConfig()
        rng = np.random.default_rng(3)
        z = Tensor(rng.random((4, 3, 3)))
        s = Tensor(rng.standard_normal(4))
        theta = Tensor(rng.random((3, 3)))
        a = ssr_loss(s, z, cfg, theta).item()
        b = ssr_loss(s, z, cfg, theta).item()
        assert a == b

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(lambda_l1=-1.0)
        with pytest.raises(ValueError):
            LossConfig(prob_clamp_eps=0.7)


class TestLossGradients:
    @pytest.mark.parametrize("loss_fn", [ssr_loss, sdr_loss], ids=["ssr", "sdr"])
    def test_gradient_wrt_logits_matches_fd_with_frozen_noise(self, loss_fn):
        # differentiate through sampling and the loss at fixed noise
        from fidomasks.dropout import noise_logit, sample_simplified

        rng = np.random.default_rng(4)
        cfg = LossConfig(lambda_l1=0.01, tv_weight=0.01)
        eta_hat = noise_logit(rng.uniform(0.05, 0.95, size=(3, 4, 4)))
        weights = rng.standard_normal((4, 4))

        def scores_of(z):
            # deterministic differentiable stand-in for a classifier score
            return T.sum_(T.mul(z, Tensor(np.broadcast_to(weights, (3, 4, 4)).copy())), axes=(1, 2))

        def build(logits):
            z = sample_simplified(logits, eta_hat, 0.5)
            return loss_fn(scores_of(z), z, cfg, theta=T.sigmoid(logits))

        x0 = rng.uniform(-1.5, 1.5, size=(4, 4))
        x_t = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            out = build(x_t)
        ad = tape.backward(out)[x_t]
        fd = finite_difference_gradient(lambda arr: build(Tensor(arr)).item(), x0, step=1e-6)
        denom = max(np.max(np.abs(fd)), 1e-12)
        assert np.max(np.abs(ad - fd)) / denom < 1e-4
