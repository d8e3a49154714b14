import numpy as np
import pytest

from stylediff.errors import ConfigError, TimestepError
from stylediff.rng import make_rng
from stylediff.schedule import (
    NoiseSchedule,
    make_cosine_schedule,
    make_linear_schedule,
    posterior_mean_from_eps,
    posterior_mean_from_x0,
    predict_x0,
    q_sample,
    q_step,
)
from stylediff.tensor import Tensor


def product_oracle(betas):
    """Direct running product of (1 - beta), no cumprod shortcut."""
    bars = []
    acc = 1.0
    for b in betas:
        acc *= 1.0 - b
        bars.append(acc)
    return np.array(bars)


@pytest.fixture
def sched_t2():
    # alpha = (0.9, 0.8), abar = (0.9, 0.72): matches the worked examples below
    return NoiseSchedule(2, np.array([0.1, 0.2]))


class TestTables:
    def test_hand_betas_match_product_oracle(self):
        betas = np.array([0.1, 0.2, 0.3, 0.4])
        s = NoiseSchedule(4, betas)
        np.testing.assert_allclose(s.alpha_bars, product_oracle(betas), atol=1e-15)
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504, 0.3024], atol=1e-12)

    def test_single_step(self):
        s = make_linear_schedule(1, 0.3, 0.3)
        assert s.alpha_bars[0] == pytest.approx(0.7, abs=1e-15)

    def test_default_thousand_step_terminal(self):
        s = make_linear_schedule(1000)
        oracle = product_oracle(s.betas)
        np.testing.assert_allclose(s.alpha_bars, oracle, atol=1e-12)
        assert oracle[-1] < 1e-4

    @pytest.mark.parametrize("make", [make_linear_schedule, make_cosine_schedule])
    def test_invariants(self, make):
        s = make(200)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[-1] < s.alpha_bars[0] < 1.0
        assert np.all(s.posterior_variances <= s.betas + 1e-15)
        np.testing.assert_allclose(s.alpha_bars, product_oracle(s.betas), atol=1e-12)

    def test_bounds_rejected(self):
        with pytest.raises(ConfigError):
            make_linear_schedule(0)
        with pytest.raises(ConfigError):
            make_linear_schedule(10, 0.0, 0.02)
        with pytest.raises(ConfigError):
            make_linear_schedule(10, 0.5, 0.2)
        with pytest.raises(ConfigError):
            make_linear_schedule(10, 0.5, 1.0)


class TestQStep:
    def test_zero_variance_limit(self):
        # beta -> 0 keeps x unchanged; use the smallest representable step
        s = NoiseSchedule(1, np.array([1e-12]))
        x = np.array([1.0, -2.0])
        out = q_step(x, 1, s, np.array([5.0, 5.0])).data
        np.testing.assert_allclose(out, x, atol=1e-5)

    def test_zero_signal(self, sched_t2):
        noise = np.array([1.0, 2.0])
        out = q_step(np.zeros(2), 2, sched_t2, noise).data
        np.testing.assert_allclose(out, np.sqrt(0.2) * noise, rtol=1e-6)

    def test_t_out_of_range(self, sched_t2):
        with pytest.raises(TimestepError):
            q_step(np.zeros(2), 3, sched_t2, np.zeros(2))
        with pytest.raises(TimestepError):
            q_step(np.zeros(2), 0, sched_t2, np.zeros(2))

    def test_composition_reproduces_marginal(self):
        # Monte-Carlo oracle: chain t=1..T matches the direct q_sample moments
        s = make_linear_schedule(50, 1e-3, 0.2)
        n = 100_000
        x0 = 0.7
        rng = make_rng(11, "qchain")
        x = np.full(n, x0)
        for t in range(1, s.timesteps + 1):
            x = q_step(x, t, s, rng.standard_normal(n)).data
        abar = s.alpha_bars[-1]
        mean_se = np.sqrt((1 - abar) / n)
        var_se = (1 - abar) * np.sqrt(2.0 / (n - 1))
        assert abs(x.mean() - np.sqrt(abar) * x0) < 3 * mean_se
        assert abs(x.var() - (1 - abar)) < 3 * var_se


class TestQSample:
    def test_direct_formula(self, sched_t2):
        out = q_sample(np.array([1.0]), 2, sched_t2, np.array([0.5])).data
        expected = np.sqrt(0.72) + np.sqrt(0.28) * 0.5  # = 1.1131033...
        np.testing.assert_allclose(out, [expected], rtol=1e-6)
        assert out[0] == pytest.approx(1.1131, abs=1e-4)

    def test_noiseless(self, sched_t2):
        out = q_sample(np.array([2.0]), 1, sched_t2, np.zeros(1)).data
        np.testing.assert_allclose(out, [np.sqrt(0.9) * 2.0], rtol=1e-6)

    def test_t_zero_identity(self, sched_t2):
        x0 = np.array([0.3, -0.4])
        out = q_sample(x0, 0, sched_t2, np.ones(2)).data
        np.testing.assert_allclose(out, x0, atol=1e-7)


class TestPredictX0:
    @pytest.mark.parametrize("t", [1, 2])
    def test_round_trip_is_identity(self, sched_t2, t):
        rng = make_rng(t, "rt")
        x0 = rng.uniform(-1, 1, size=(3, 4)).astype(np.float32)
        eps = rng.standard_normal((3, 4)).astype(np.float32)
        x_t = q_sample(x0, t, sched_t2, eps)
        back = predict_x0(x_t, t, eps, sched_t2).data
        np.testing.assert_allclose(back, x0, atol=1e-6)

    def test_zero_prediction(self, sched_t2):
        x_t = np.array([1.0])
        out = predict_x0(x_t, 2, np.zeros(1), sched_t2).data
        np.testing.assert_allclose(out, x_t / np.sqrt(0.72), rtol=1e-6)

    def test_inverse_of_q_sample_example(self, sched_t2):
        x_t = np.array([np.sqrt(0.72) + np.sqrt(0.28) * 0.5])
        out = predict_x0(x_t, 2, np.array([0.5]), sched_t2).data
        np.testing.assert_allclose(out, [1.0], atol=1e-6)

    def test_clamp_flag(self, sched_t2):
        out = predict_x0(np.array([10.0]), 2, np.zeros(1), sched_t2, clamp=True).data
        assert out[0] == 1.0


class TestPosteriorMean:
    def test_no_noise_step_passthrough(self):
        s = NoiseSchedule(1, np.array([1e-12]))
        x_t = np.array([1.5])
        out = posterior_mean_from_eps(x_t, 1, np.array([3.0]), s).data
        np.testing.assert_allclose(out, x_t, atol=1e-5)

    def test_direct_formula(self, sched_t2):
        out = posterior_mean_from_eps(np.array([1.0]), 2, np.array([0.5]), sched_t2).data
        # direct evaluation of (1/sqrt(0.8)) (1 - 0.2/sqrt(0.28) * 0.5)
        expected = (1.0 / np.sqrt(0.8)) * (1.0 - 0.2 / np.sqrt(0.28) * 0.5)
        np.testing.assert_allclose(out, [expected], rtol=1e-6)
        assert expected == pytest.approx(0.90675, abs=1e-5)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_two_coefficient_form(self, seed):
        s = make_linear_schedule(40, 1e-3, 0.1)
        rng = make_rng(seed, "pm2c")
        t = int(rng.integers(1, 41))
        x_t = rng.standard_normal((2, 3)).astype(np.float32)
        eps = rng.standard_normal((2, 3)).astype(np.float32)
        via_eps = posterior_mean_from_eps(x_t, t, eps, s).data
        x0_hat = predict_x0(x_t, t, eps, s)
        # independent oracle: recompute both coefficients from raw tables
        beta, alpha, abar = s.beta(t), s.alpha(t), s.alpha_bar(t)
        abar_prev = s.alpha_bar(t - 1)
        oracle = (
            np.sqrt(abar_prev) * beta / (1 - abar) * x0_hat.data
            + np.sqrt(alpha) * (1 - abar_prev) / (1 - abar) * x_t
        )
        np.testing.assert_allclose(via_eps, oracle, atol=1e-5)
        via_x0 = posterior_mean_from_x0(x_t, t, x0_hat, s).data
        np.testing.assert_allclose(via_x0, oracle, atol=1e-5)

    def test_batched_timesteps(self):
        s = make_linear_schedule(10, 1e-3, 0.1)
        rng = make_rng(0, "bt")
        x0 = rng.standard_normal((4, 1, 2, 2)).astype(np.float32)
        eps = rng.standard_normal((4, 1, 2, 2)).astype(np.float32)
        ts = np.array([1, 3, 7, 10])
        batched = q_sample(x0, ts, s, eps).data
        for i, t in enumerate(ts):
            single = q_sample(x0[i], int(t), s, eps[i]).data
            np.testing.assert_allclose(batched[i], single, rtol=1e-6)
