import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from wonham import suite
from wonham.exceptions import GridMismatch
from wonham.model import ergodic_decomposition
from wonham.paths import (
    RngStream,
    brownian_increments,
    integrate_h,
    sample_ctmc,
    sample_initial,
    simulate_batch,
    simulate_trial,
    trial_chunks,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(7, 3).signal().random(5)
        b = RngStream(7, 3).signal().random(5)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("other", [RngStream(7, 4), RngStream(8, 3)])
    def test_streams_differ(self, other):
        assert not np.array_equal(RngStream(7, 3).signal().random(5), other.signal().random(5))

    def test_signal_and_noise_disjoint(self):
        s = RngStream(1, 0)
        assert not np.array_equal(s.signal().random(5), s.noise().random(5))

    def test_large_and_negative_seeds(self):
        RngStream(2**64 - 1, 0).signal().random()
        RngStream(-5, 0).noise().random()


class TestCtmc:
    def test_static_model_never_jumps(self):
        path = sample_ctmc(suite.detect2(), 1, 10.0, np.random.default_rng(0))
        assert path.jump_times.size == 0 and path.state_at(5.0) == 1

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_jumps_follow_positive_rates(self, seed):
        rng = np.random.default_rng(seed)
        m = suite.random_model(rng)
        path = sample_ctmc(m, int(rng.integers(m.d)), 3.0, rng)
        t = path.jump_times
        assert np.all(np.diff(t) > 0) and (t.size == 0 or (t[0] > 0 and t[-1] <= 3.0))
        s = path.states
        assert np.all(m.A[s[:-1], s[1:]] > 0)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_paths_stay_in_their_class(self, seed):
        rng = np.random.default_rng(seed)
        m = suite.random_model(rng)
        labels = ergodic_decomposition(m).labels()
        batch = simulate_batch(m, np.full(m.d, 1.0 / m.d), 5.0, 0.1, np.arange(5), seed)
        for path in batch.paths:
            assert np.all(labels[path.states] == labels[path.initial_state])

    def test_occupation_law(self):
        m = suite.asym2()
        fractions = []
        for i in range(40):
            # start from the invariant law so the time average is unbiased
            rng = RngStream(8, i).signal()
            path = sample_ctmc(m, sample_initial([2 / 3, 1 / 3], rng), 25.0, rng)
            fractions.append(path.integral([1.0, 0.0]) / 25.0)
        fractions = np.asarray(fractions)
        se = fractions.std(ddof=1) / np.sqrt(fractions.size)
        assert abs(fractions.mean() - 2 / 3) < 3 * se

    def test_terminal_law(self):
        m = suite.cycle3()
        prior = np.array([1.0, 0.0, 0.0])
        T, n = 0.7, 4000
        ends = np.array([simulate_trial(m, prior, T, 0.1, RngStream(11, i))[0].state_at(T)
                         for i in range(n)])
        expected = expm(m.A * T).T @ prior
        freq = np.bincount(ends, minlength=3) / n
        se = np.sqrt(expected * (1 - expected) / n)
        assert np.all(np.abs(freq - expected) < 4 * se)


class TestObservations:
    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_step_integrals_are_exact(self, seed):
        rng = np.random.default_rng(seed)
        m = suite.cycle3()
        path = sample_ctmc(m, 0, 2.0, rng)
        inc = integrate_h(path, m.h, 0.01)
        assert inc.shape == (200,)
        assert abs(inc.sum() - path.integral(m.h)) < 1e-12
        assert np.all(inc >= -1e-15) and np.all(inc <= 2 * 0.01 + 1e-15)

    def test_substeps_see_the_same_brownian_path(self):
        fine = brownian_increments(np.random.default_rng(3), 20, 0.05, 2.0)
        coarse = brownian_increments(np.random.default_rng(3), 10, 0.1, 2.0, substeps=2)
        np.testing.assert_allclose(coarse, fine.reshape(10, 2).sum(axis=1), rtol=1e-14)

    def test_noise_variance(self):
        x = brownian_increments(np.random.default_rng(0), 200_000, 0.01, 4.0)
        assert abs(x.var() / 0.04 - 1) < 0.02

    def test_grid_must_divide_horizon(self):
        with pytest.raises(GridMismatch):
            simulate_trial(suite.sym2(), [0.5, 0.5], 1.0, 0.3, RngStream(0, 0))


class TestBatch:
    def test_matches_single_trials(self):
        m = suite.twin()
        prior = np.full(4, 0.25)
        batch = simulate_batch(m, prior, 1.0, 0.01, [0, 5, 9], seed=42)
        for row, sid in enumerate([0, 5, 9]):
            path, obs = simulate_trial(m, prior, 1.0, 0.01, RngStream(42, sid))
            np.testing.assert_array_equal(batch.dZ[row], obs.increments)
            np.testing.assert_array_equal(batch.states[row], path.state_at(np.arange(101) * 0.01))

    def test_signal_unchanged_by_refinement(self):
        m = suite.asym2()
        a = simulate_batch(m, [0.5, 0.5], 1.0, 0.01, [3], seed=1)
        b = simulate_batch(m, [0.5, 0.5], 1.0, 0.005, [3], seed=1)
        np.testing.assert_array_equal(a.paths[0].jump_times, b.paths[0].jump_times)
        np.testing.assert_array_equal(a.states[0], b.states[0, ::2])

    @pytest.mark.parametrize("chunk", [1, 7, 100])
    def test_chunks_cover_trials_in_order(self, chunk):
        blocks = trial_chunks(23, 10, chunk_size=chunk)
        np.testing.assert_array_equal(np.concatenate(blocks), np.arange(23))
