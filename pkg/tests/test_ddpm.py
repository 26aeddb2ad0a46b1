"""Diffusion model: schedule, embedding, gradients, training, sampling."""

import math

import numpy as np
import pytest

from fblalloc import ddpm
from fblalloc.errors import FblError

ALPHA_BAR_500 = 0.0063527107970150500065  # cumprod oracle, default schedule


@pytest.fixture(scope="module")
def sched():
    return ddpm.make_schedule(50, 1e-4, 0.05)


@pytest.fixture(scope="module")
def toy_params():
    return ddpm.init_params(n=3, hidden=(16, 8), d_t=8, seed=5)


class TestSchedule:
    def test_two_step_products(self):
        s = ddpm.make_schedule(2, 0.1, 0.2)
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=1e-15)

    def test_default_terminal_signal_fraction(self):
        s = ddpm.make_schedule(500)
        assert s.alpha_bars[-1] == pytest.approx(ALPHA_BAR_500, rel=1e-10)
        # first-order bound: prod(1-b) <= exp(-sum b)
        assert s.alpha_bars[-1] < math.exp(-float(np.sum(s.betas)))
        assert s.alpha_bars[-1] < 0.05

    def test_strictly_decreasing(self, sched):
        assert np.all(np.diff(sched.alpha_bars) < 0)

    def test_bound_errors(self):
        with pytest.raises(ValueError):
            ddpm.make_schedule(1)
        with pytest.raises(ValueError):
            ddpm.make_schedule(10, 0.2, 0.1)
        with pytest.raises(ValueError):
            ddpm.make_schedule(10, 0.0, 0.1)


class TestTimeEmbedding:
    def test_zero_reference_pattern(self):
        emb = ddpm.time_embedding(0, 8)
        np.testing.assert_allclose(emb[0::2], 0.0, atol=1e-15)
        np.testing.assert_allclose(emb[1::2], 1.0, rtol=1e-15)
        assert np.sum(emb ** 2) == pytest.approx(4.0)  # d_t / 2

    def test_no_collisions_over_range(self):
        embs = ddpm.time_embedding(np.arange(1, 501), 16)
        diff = np.abs(embs[1:] - embs[:-1]).max(axis=1)
        assert np.all(diff > 1e-6)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            ddpm.time_embedding(1, 7)


class TestForwardNoise:
    def test_zero_noise(self, sched):
        x0 = np.array([0.5, -0.5])
        x_t = ddpm.forward_noise(x0, 10, np.zeros(2), sched)
        np.testing.assert_allclose(x_t, math.sqrt(sched.alpha_bars[9]) * x0,
                                   rtol=1e-15)

    def test_terminal_step_is_mostly_noise(self):
        deep = ddpm.make_schedule(500)
        x0 = np.array([1.0, -1.0])
        eps = np.array([0.3, 0.7])
        x_T = ddpm.forward_noise(x0, deep.steps, eps, deep)
        abar = deep.alpha_bars[-1]
        # triangle bound straight from the formula; the first term dominates
        # once the terminal signal fraction is small
        bound = (math.sqrt(abar) * np.linalg.norm(x0)
                 + (1.0 - math.sqrt(1.0 - abar)) * np.linalg.norm(eps))
        assert np.linalg.norm(x_T - eps) <= bound + 1e-12
        assert np.linalg.norm(x_T - eps) <= 2 * math.sqrt(abar) * np.linalg.norm(x0)

    def test_basis_direction(self, sched):
        e1 = np.array([1.0, 0.0, 0.0])
        x_t = ddpm.forward_noise(np.zeros(3), 5, e1, sched)
        np.testing.assert_allclose(
            x_t, math.sqrt(1 - sched.alpha_bars[4]) * e1, rtol=1e-15)

    def test_step_bounds_checked(self, sched):
        with pytest.raises(ValueError):
            ddpm.forward_noise(np.zeros(2), 0, np.zeros(2), sched)
        with pytest.raises(ValueError):
            ddpm.forward_noise(np.zeros(2), sched.steps + 1, np.zeros(2), sched)

    def test_marginal_variance_preserved(self):
        # encoded data near zero mean: terminal marginal is near unit variance
        sched = ddpm.make_schedule(500)
        rng = np.random.default_rng(3)
        x0 = rng.choice([-0.8, 0.8], size=(10_000, 1))
        eps = rng.standard_normal((10_000, 1))
        x_T = ddpm.forward_noise(x0, np.full(10_000, 500), eps, sched)
        assert 0.9 <= float(np.var(x_T)) <= 1.1


class TestDenoiser:
    def test_zero_parameters_give_zero(self, toy_params):
        p = toy_params.copy()
        for w in p.flat():
            w[:] = 0.0
        out = ddpm.denoiser_forward(np.ones(3), 4, np.ones(3), p)
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_purity(self, toy_params):
        x, g = np.array([0.1, -0.2, 0.3]), np.array([1.0, 0.5, -0.5])
        a = ddpm.denoiser_forward(x, 7, g, toy_params)
        b = ddpm.denoiser_forward(x, 7, g, toy_params)
        np.testing.assert_array_equal(a, b)

    def test_conditioning_is_wired_in(self):
        # random nonzero head so conditioning reaches the output
        params = ddpm.init_params(n=3, hidden=(16, 8), d_t=8, seed=9)
        rng = np.random.default_rng(10)
        params.weights[-1][:] = rng.normal(0, 0.5, size=params.weights[-1].shape)
        x = np.array([0.1, -0.2, 0.3])
        out1 = ddpm.denoiser_forward(x, 4, np.array([1.0, 0.0, 0.0]), params)
        out2 = ddpm.denoiser_forward(x, 4, np.array([0.0, 1.0, 0.0]), params)
        assert not np.allclose(out1, out2)

    def test_shape_mismatch_rejected(self, toy_params):
        with pytest.raises(ValueError):
            ddpm.denoiser_forward(np.ones(4), 1, np.ones(3), toy_params)


class TestLossAndGradients:
    def test_zero_residual_means_zero_gradients(self, sched):
        # zero net predicts 0; injecting eps = 0 makes the residual vanish
        params = ddpm.init_params(n=2, hidden=(8,), d_t=4, seed=1)
        for w in params.flat():
            w[:] = 0.0
        loss, grads = ddpm.loss_and_grads_given(
            params, sched, np.zeros((4, 2)), np.zeros((4, 2)),
            np.array([1, 5, 9, 20]), np.zeros((4, 2)))
        assert loss == 0.0
        for g in grads.flat():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_zero_net_loss_is_noise_power(self, sched):
        params = ddpm.init_params(n=2, hidden=(8,), d_t=4, seed=1)
        rng = np.random.default_rng(0)
        loss, _, _, _ = ddpm.loss_and_gradients(
            rng.uniform(-1, 1, size=(2000, 2)), rng.standard_normal((2000, 2)),
            params, sched, rng)
        assert loss == pytest.approx(1.0, rel=0.1)

    def test_finite_difference_agreement(self, sched):
        params = ddpm.init_params(n=2, hidden=(12, 6), d_t=4, seed=4)
        rng = np.random.default_rng(8)
        for w in params.flat():  # nonzero everywhere, head included
            w[:] = rng.normal(0, 0.4, size=w.shape)
        x0 = rng.uniform(-1, 1, size=(5, 2))
        g = rng.standard_normal((5, 2))
        t = rng.integers(1, sched.steps + 1, size=5)
        eps = rng.standard_normal((5, 2))
        _, grads = ddpm.loss_and_grads_given(params, sched, x0, g, t, eps)
        for arr, grad in zip(params.flat(), grads.flat()):
            flat = arr.ravel()
            gflat = grad.ravel()
            for idx in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                h = 1e-6 * max(1.0, abs(flat[idx]))
                orig = flat[idx]
                flat[idx] = orig + h
                lp, _ = ddpm.loss_and_grads_given(params, sched, x0, g, t, eps)
                flat[idx] = orig - h
                lm, _ = ddpm.loss_and_grads_given(params, sched, x0, g, t, eps)
                flat[idx] = orig
                numeric = (lp - lm) / (2 * h)
                scale = max(abs(numeric), abs(gflat[idx]), 1e-8)
                assert abs(numeric - gflat[idx]) / scale < 1e-4

    def test_empty_batch_rejected(self, sched):
        params = ddpm.init_params(n=2, hidden=(8,), d_t=4, seed=1)
        with pytest.raises(ValueError):
            ddpm.loss_and_gradients(np.empty((0, 2)), np.empty((0, 2)), params,
                                    sched, np.random.default_rng(0))


class TestTraining:
    def _toy_data(self, n_rows=64):
        rng = np.random.default_rng(2)
        x0 = rng.choice([-0.5, 0.5], size=(n_rows, 1))
        return x0, np.sign(x0)

    def test_zero_learning_rate_freezes_parameters(self, sched):
        x0, cond = self._toy_data()
        tcfg = ddpm.TrainConfig(batch_size=16, epochs=2, learning_rate=0.0,
                                learning_rate_min=0.0, weight_decay=0.01,
                                hidden=(8,), d_t=4, seed=3)
        params, _, _ = ddpm.train(x0, cond, sched, tcfg)
        fresh = ddpm.init_params(1, (8,), 4,
                                 seed=int(np.random.default_rng(3).integers(2 ** 32)))
        for a, b in zip(params.flat(), fresh.flat()):
            np.testing.assert_array_equal(a, b)

    def test_ema_single_update_rule(self):
        ema = ddpm.DenoiserParams(1, 4, [np.zeros((1, 1))], [np.zeros(1)])
        cur = ddpm.DenoiserParams(1, 4, [np.ones((1, 1))], [np.ones(1)])
        ddpm.ema_update(ema, cur, 0.995)
        assert ema.weights[0][0, 0] == pytest.approx(0.005, rel=1e-12)

    def test_ema_linearity_over_constant_updates(self):
        ema0, w = 0.3, 1.0
        ema = ddpm.DenoiserParams(1, 4, [np.full((1, 1), ema0)], [np.full(1, ema0)])
        cur = ddpm.DenoiserParams(1, 4, [np.full((1, 1), w)], [np.full(1, w)])
        k = 50
        for _ in range(k):
            ddpm.ema_update(ema, cur, 0.995)
        want = w + (ema0 - w) * 0.995 ** k
        assert ema.weights[0][0, 0] == pytest.approx(want, rel=1e-9)

    def test_training_reduces_loss_and_is_deterministic(self, sched):
        x0, cond = self._toy_data(256)
        tcfg = ddpm.TrainConfig(batch_size=32, epochs=10, learning_rate=1e-3,
                                learning_rate_min=1e-5, hidden=(32,), d_t=8, seed=6)
        p1, e1, l1 = ddpm.train(x0, cond, sched, tcfg)
        p2, e2, l2 = ddpm.train(x0, cond, sched, tcfg)
        assert l1 == l2
        for a, b in zip(e1.flat(), e2.flat()):
            np.testing.assert_array_equal(a, b)
        assert l1[-1] < l1[0]

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_guard(self, sched):
        x0, cond = self._toy_data(64)
        tcfg = ddpm.TrainConfig(batch_size=16, epochs=50, learning_rate=1e9,
                                learning_rate_min=1e9, hidden=(8,), d_t=4, seed=3)
        with pytest.raises(FblError, match="diverged"):
            ddpm.train(x0, cond, sched, tcfg)

    def test_gradient_clip_bounds_update(self, sched):
        grads = ddpm.Gradients(weights=[np.full((2, 2), 10.0)], biases=[np.full(2, 10.0)])
        ddpm._clip_gradients(grads, 1.0)
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.flat()))
        assert total == pytest.approx(1.0, rel=1e-12)


class TestSampling:
    def test_deterministic_mode_reproducible(self, sched, toy_params):
        g = np.array([0.2, -0.1, 0.4])
        a = ddpm.sample(g, toy_params, sched, np.random.default_rng(4),
                        deterministic=True)
        b = ddpm.sample(g, toy_params, sched, np.random.default_rng(4),
                        deterministic=True)
        np.testing.assert_array_equal(a, b)

    def test_single_step_schedule_by_hand(self, toy_params):
        beta = np.array([0.04])
        one = ddpm.NoiseSchedule(betas=beta, alphas=1 - beta,
                                 alpha_bars=np.cumprod(1 - beta))
        g = np.array([0.2, -0.1, 0.4])
        rng = np.random.default_rng(12)
        got = ddpm.sample(g, toy_params, one, rng, deterministic=True)
        x_T = np.random.default_rng(12).standard_normal((1, 3))[0]
        eps_hat = ddpm.denoiser_forward(x_T, 1, g, toy_params)
        want = (x_T - 0.04 / math.sqrt(0.04) * eps_hat) / math.sqrt(0.96)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_posterior_variance_option_runs(self, sched, toy_params):
        g = np.array([0.2, -0.1, 0.4])
        out = ddpm.sample(g, toy_params, sched, np.random.default_rng(4),
                          posterior_variance=True)
        assert out.shape == (3,)
        assert np.all(np.isfinite(out))


class TestCheckpoint:
    def test_roundtrip_bit_identical_forward(self, sched, toy_params, tmp_path):
        ckpt = ddpm.ModelCheckpoint(
            params=toy_params, ema_params=toy_params.copy(), schedule=sched,
            n=3, cond_mean_db=np.array([-80.0, -85.0, -90.0]),
            cond_std_db=np.array([3.0, 4.0, 5.0]), m_lo=1, m_hi=100)
        path = str(tmp_path / "model.ckpt")
        ddpm.save_checkpoint(ckpt, path)
        loaded = ddpm.load_checkpoint(path)
        x, g = np.array([0.3, 0.1, -0.2]), np.array([1.0, 0.0, -1.0])
        a = ddpm.denoiser_forward(x, 9, g, ckpt.params)
        b = ddpm.denoiser_forward(x, 9, g, loaded.params)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ckpt.schedule.betas, loaded.schedule.betas)
        assert loaded.m_hi == 100

    def test_version_check(self, sched, toy_params, tmp_path):
        from fblalloc.errors import CheckpointError
        ckpt = ddpm.ModelCheckpoint(
            params=toy_params, ema_params=toy_params.copy(), schedule=sched,
            n=3, cond_mean_db=np.zeros(3), cond_std_db=np.ones(3),
            m_lo=1, m_hi=100, format_version=999)
        path = str(tmp_path / "model.ckpt")
        ddpm.save_checkpoint(ckpt, path)
        with pytest.raises(CheckpointError, match="version"):
            ddpm.load_checkpoint(path)
