import math

import numpy as np
import pytest

from fedsim.errors import ConfigurationError
from fedsim.privacy import DpState, adapt_bound, add_noise, clip


class TestClip:
    def test_scales_down_when_over(self):
        delta = np.array([6.0, 8.0])  # norm 10
        clipped, flag = clip(delta, 5.0)
        assert flag
        assert np.allclose(clipped, [3.0, 4.0], atol=1e-12)

    def test_untouched_when_under(self):
        delta = np.array([3.0, 0.0])
        clipped, flag = clip(delta, 5.0)
        assert not flag
        assert np.array_equal(clipped, delta)

    def test_zero_vector_untouched(self):
        clipped, flag = clip(np.zeros(4), 1.0)
        assert not flag
        assert np.array_equal(clipped, np.zeros(4))

    def test_norm_bound_holds_over_random_vectors(self):
        rng = np.random.default_rng(31)
        for _ in range(10_000):
            delta = rng.normal(0, rng.uniform(0.1, 10), size=8)
            bound = rng.uniform(0.01, 5.0)
            clipped, _ = clip(delta, bound)
            assert np.linalg.norm(clipped) <= bound + 1e-9


class TestAdaptBound:
    def test_fixed_point_at_target(self):
        state = DpState(clip_bound=2.0, target_quantile=0.5, adapt_rate=0.2)
        # half the updates clipped: unclipped fraction equals the target
        assert adapt_bound(state, [True, False, True, False]) == pytest.approx(2.0, abs=1e-12)

    def test_shrinks_when_nothing_clipped(self):
        state = DpState(clip_bound=1.0, target_quantile=0.5, adapt_rate=0.2)
        assert adapt_bound(state, [False] * 4) == pytest.approx(math.exp(-0.1), abs=1e-12)

    def test_grows_when_everything_clipped(self):
        state = DpState(clip_bound=1.0, target_quantile=0.5, adapt_rate=0.2)
        assert adapt_bound(state, [True] * 4) == pytest.approx(math.exp(0.1), abs=1e-12)

    def test_scale_consistency(self):
        # doubling all norms and the starting bound doubles the whole trajectory
        rng = np.random.default_rng(7)
        norms = rng.uniform(0.1, 3.0, size=(20, 6))

        def trajectory(scale):
            state = DpState(clip_bound=scale * 1.0)
            bounds = []
            for round_norms in norms:
                flags = [float(n) * scale > state.clip_bound for n in round_norms]
                state.clip_bound = adapt_bound(state, flags)
                bounds.append(state.clip_bound)
            return np.asarray(bounds)

        assert np.allclose(2.0 * trajectory(1.0), trajectory(2.0), rtol=1e-12)

    def test_requires_flags(self):
        with pytest.raises(ValueError):
            adapt_bound(DpState(), [])


class TestAddNoise:
    def test_zero_multiplier_is_identity(self):
        delta = np.arange(5, dtype=np.float64)
        assert np.array_equal(add_noise(delta, 0.0, 1.0, round_seed=3), delta)

    def test_deterministic_given_seed(self):
        delta = np.ones(100)
        a = add_noise(delta, 1.0, 2.0, round_seed=11, participants=4)
        b = add_noise(delta, 1.0, 2.0, round_seed=11, participants=4)
        assert np.array_equal(a, b)

    def test_empirical_std_matches_target(self):
        delta = np.zeros(10_000)
        z, bound, participants = 0.8, 2.5, 5
        noisy = add_noise(delta, z, bound, round_seed=13, participants=participants)
        target = z * bound / participants
        assert abs(noisy.std() - target) / target < 0.05

    def test_negative_multiplier_rejected(self):
        with pytest.raises(ConfigurationError):
            add_noise(np.zeros(2), -0.1, 1.0, round_seed=0)


class TestPipeline:
    def test_clip_then_noise_identity_when_disabled(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            delta = rng.normal(0, 5, size=12)
            clipped, flag = clip(delta, math.inf)
            out = add_noise(clipped, 0.0, math.inf, round_seed=1)
            assert not flag
            assert np.array_equal(out, delta)


class TestDpState:
    def test_bound_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            DpState(clip_bound=0.0)

    def test_quantile_open_interval(self):
        with pytest.raises(ConfigurationError):
            DpState(target_quantile=1.0)
