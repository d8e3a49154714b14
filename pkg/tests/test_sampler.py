import numpy as np
import pytest

from stylediff.errors import ConfigError, TimestepError
from stylediff.guidance import ConditionPair, GuidanceWeights
from stylediff.rng import make_rng
from stylediff.sampler import (
    SamplerConfig,
    ddim_sigma,
    ddim_step,
    ddpm_step,
    generate,
    timestep_sequence,
)
from stylediff.schedule import make_linear_schedule, posterior_mean_from_eps, q_sample


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(200, 1e-4, 0.1)


def oracle_model(x0, schedule):
    """Denoiser stand-in that inverts q_sample exactly (knows the clean image)."""

    def model(x_t, t, pair):
        abar = float(schedule.alpha_bar(t))
        return (np.asarray(x_t) - np.sqrt(abar) * x0) / np.sqrt(1 - abar)

    return model


class CountingConstantModel:
    def __init__(self, value=0.0):
        self.calls = 0
        self.value = value

    def __call__(self, x_t, t, pair):
        self.calls += 1
        return np.full_like(np.asarray(x_t), self.value)


class TestDdpmStep:
    def test_final_step_is_posterior_mean(self, sched):
        rng = make_rng(0, "dp")
        x = rng.standard_normal((3, 4, 4)).astype(np.float32)
        eps = rng.standard_normal((3, 4, 4)).astype(np.float32)
        out = ddpm_step(x, 1, eps, sched, make_rng(1, "z"))
        expected = posterior_mean_from_eps(x, 1, eps, sched).data
        np.testing.assert_array_equal(out, expected)

    def test_fixed_sigma_matches_posterior_table(self, sched):
        t = 57
        x = np.zeros((2, 2), dtype=np.float32)
        eps = np.zeros((2, 2), dtype=np.float32)
        z = make_rng(2, "z").standard_normal((2, 2)).astype(np.float32)
        out = ddpm_step(x, t, eps, sched, make_rng(2, "z"))
        np.testing.assert_allclose(
            out, np.sqrt(sched.posterior_variance(t)) * z, rtol=1e-6
        )

    def test_t_out_of_range(self, sched):
        with pytest.raises(TimestepError):
            ddpm_step(np.zeros(1), 0, np.zeros(1), sched, make_rng(0, "z"))
        with pytest.raises(TimestepError):
            ddpm_step(np.zeros(1), 201, np.zeros(1), sched, make_rng(0, "z"))

    def test_oracle_chain_recovers_x0_in_expectation(self):
        # Monte-Carlo oracle: 1e4 single-pixel chains driven by the exact noise
        sched = make_linear_schedule(50, 1e-3, 0.15)
        n = 10_000
        x0 = np.float32(0.6)
        rng = make_rng(3, "chain")
        x = q_sample(
            np.full(n, x0, dtype=np.float32), 50, sched, rng.standard_normal(n)
        ).data
        for t in range(50, 0, -1):
            abar = float(sched.alpha_bar(t))
            eps_oracle = (x - np.sqrt(abar) * x0) / np.sqrt(1 - abar)
            x = ddpm_step(x, t, eps_oracle, sched, rng)
        se = x.std() / np.sqrt(n)
        assert abs(x.mean() - x0) < 3 * max(se, 1e-4)


class TestDdimStep:
    def test_single_jump_recovers_x0(self, sched):
        # float64 here: at abar_T ~ 3e-5 the inversion amplifies rounding by
        # 1/sqrt(abar) ~ 178x, so float32 construction noise alone exceeds 1e-5
        rng = make_rng(4, "dj")
        x0 = rng.uniform(-1, 1, (3, 4, 4))
        eps = rng.standard_normal((3, 4, 4))
        x_t = q_sample(x0, 200, sched, eps)
        out = ddim_step(x_t, 200, 0, eps, sched, eta=0.0)
        np.testing.assert_allclose(out, x0, atol=1e-5)

    def test_deterministic_at_eta_zero(self, sched):
        rng = make_rng(5, "dd")
        x = rng.standard_normal((3, 4, 4)).astype(np.float32)
        eps = rng.standard_normal((3, 4, 4)).astype(np.float32)
        a = ddim_step(x, 100, 50, eps, sched, eta=0.0)
        b = ddim_step(x, 100, 50, eps, sched, eta=0.0)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("t", [2, 57, 131, 200])
    def test_eta_one_adjacent_variance_equals_posterior(self, sched, t):
        sigma2 = ddim_sigma(t, t - 1, sched, eta=1.0) ** 2
        assert sigma2 == pytest.approx(float(sched.posterior_variance(t)), abs=1e-8)

    def test_ordering_violation(self, sched):
        with pytest.raises(TimestepError):
            ddim_step(np.zeros(1), 10, 10, np.zeros(1), sched)
        with pytest.raises(TimestepError):
            ddim_step(np.zeros(1), 10, 11, np.zeros(1), sched)

    def test_eta_without_rng_rejected(self, sched):
        with pytest.raises(ConfigError):
            ddim_step(np.zeros(1), 10, 5, np.zeros(1), sched, eta=0.5)

    def test_full_sequence_oracle_inversion(self, sched):
        # criterion-3 core: eta=0 full chain with the exact-noise oracle
        rng = make_rng(6, "inv")
        x0 = rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32)
        x = q_sample(x0, 200, sched, rng.standard_normal((3, 8, 8))).data
        model = oracle_model(x0, sched)
        seq = timestep_sequence(200, 200)
        hops = list(zip(seq, np.append(seq[1:], 0)))
        for t, t_prev in hops:
            eps = model(x, int(t), None)
            x = ddim_step(x, int(t), int(t_prev), eps, sched, eta=0.0)
        assert np.abs(x - x0).max() < 1e-4


class TestTimestepSequence:
    def test_includes_endpoints_descending(self):
        seq = timestep_sequence(200, 50)
        assert seq[0] == 200 and seq[-1] == 1
        assert np.all(np.diff(seq) < 0)

    def test_full_length(self):
        seq = timestep_sequence(10, 10)
        np.testing.assert_array_equal(seq, np.arange(10, 0, -1))

    def test_too_many_steps_rejected(self):
        with pytest.raises(ConfigError):
            timestep_sequence(10, 11)


class TestGenerate:
    def _pair(self):
        return ConditionPair(np.zeros(8, dtype=np.int64), np.zeros((3, 4, 4), dtype=np.float32))

    def test_output_shape_and_range(self, sched):
        model = CountingConstantModel()
        out = generate(
            model,
            self._pair(),
            GuidanceWeights(),
            SamplerConfig(steps=10),
            sched,
            make_rng(7, "g"),
            shape=(3, 16, 16),
        )
        assert out.shape == (3, 16, 16)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_same_seed_bit_identical(self, sched):
        cfg = SamplerConfig(steps=10, eta=0.0)
        outs = [
            generate(
                CountingConstantModel(),
                self._pair(),
                GuidanceWeights(),
                cfg,
                sched,
                make_rng(8, "g"),
                shape=(3, 8, 8),
            )
            for _ in range(2)
        ]
        assert np.array_equal(outs[0], outs[1])

    def test_model_call_budget(self, sched):
        model = CountingConstantModel()
        steps = 12
        generate(
            model,
            self._pair(),
            GuidanceWeights(),
            SamplerConfig(steps=steps),
            sched,
            make_rng(9, "g"),
            shape=(3, 8, 8),
        )
        assert model.calls == 3 * steps

    def test_step_count_continuity_regression(self, sched):
        # 50- vs 100-step outputs stay within a bounded mean abs pixel gap
        def run(steps):
            return generate(
                CountingConstantModel(0.1),
                self._pair(),
                GuidanceWeights(),
                SamplerConfig(steps=steps),
                sched,
                make_rng(10, "g"),
                shape=(3, 8, 8),
            )

        gap = np.abs(run(50) - run(100)).mean()
        assert gap < 0.25
