import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lr_posterior
from wonham import suite
from wonham.estimators import WonhamFilter
from wonham.exceptions import DegenerateLikelihood, GridMismatch
from wonham.filter import (
    bayes_step,
    covariance,
    filter_batch,
    filter_batch_multi,
    quadratic_form,
    run_wonham,
    transition_matrix,
)
from wonham.model import ergodic_decomposition
from wonham.paths import simulate_batch, simulate_trial, RngStream

seeds = st.integers(min_value=0, max_value=2**32 - 1)
simplex2 = st.floats(min_value=0.01, max_value=0.99).map(lambda p: np.array([p, 1 - p]))


class TestTransitionMatrix:
    @pytest.mark.parametrize("name", sorted(suite.CURATED))
    def test_stochastic(self, name):
        P = transition_matrix(suite.get_model(name), 0.01)
        assert P.min() >= 0
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)

    def test_unreachable_entries_are_zero(self):
        P = transition_matrix(suite.twin(), 0.5)
        assert np.all(P[:2, 2:] == 0) and np.all(P[2:, :2] == 0)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(GridMismatch):
            transition_matrix(suite.sym2(), 0.0)


class TestStaticModelOracle:
    @settings(max_examples=25, deadline=None)
    @given(seeds, simplex2, st.sampled_from([0.25, 1.0, 4.0]))
    def test_matches_likelihood_ratio(self, seed, prior, R):
        m = suite.detect2(R)
        batch = simulate_batch(m, prior, 2.0, 0.01, np.arange(4), seed)
        post = filter_batch(m, prior, batch.dZ, 0.01)
        Z = np.concatenate([np.zeros((4, 1)), np.cumsum(batch.dZ, axis=1)], axis=1)
        t = np.arange(201) * 0.01
        expected = lr_posterior(prior, m.h, R, Z.T, t[:, None])
        np.testing.assert_allclose(post, expected, atol=1e-12)


class TestInvariants:
    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_positive_and_normalized(self, seed):
        rng = np.random.default_rng(seed)
        m = suite.random_model(rng)
        prior = rng.dirichlet(np.ones(m.d))
        batch = simulate_batch(m, prior, 1.0, 0.01, np.arange(3), seed)
        post = filter_batch(m, prior, batch.dZ, 0.01)
        assert post.min() >= 0
        np.testing.assert_allclose(post.sum(axis=-1), 1.0, atol=1e-12)

    def test_class_confinement(self):
        m = suite.twin()
        prior = [0.3, 0.7, 0.0, 0.0]
        batch = simulate_batch(m, prior, 2.0, 0.001, np.arange(5), 0)
        post = filter_batch(m, prior, batch.dZ, 0.001)
        assert np.all(post[..., 2:] == 0.0)

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_splitting_identity(self, seed):
        rng = np.random.default_rng(seed)
        m = suite.random_model(rng)
        dec = ergodic_decomposition(m)
        nu = rng.dirichlet(np.ones(m.d))
        parts = [ind * nu / (ind @ nu) for ind in dec.indicator_vectors]
        batch = simulate_batch(m, nu, 1.0, 0.01, np.arange(3), seed)
        post, *post_k = filter_batch_multi(m, [nu] + parts, batch.dZ, 0.01)
        f = rng.normal(size=m.d)
        mixture = sum((post @ ind) * (pk @ f) for ind, pk in zip(dec.indicator_vectors, post_k))
        np.testing.assert_allclose(post @ f, mixture, atol=1e-12)

    def test_multi_matches_single(self):
        m = suite.cycle3()
        batch = simulate_batch(m, [1 / 3] * 3, 1.0, 0.01, np.arange(4), 9)
        priors = [np.array([0.2, 0.3, 0.5]), np.array([1.0, 0.0, 0.0])]
        multi = filter_batch_multi(m, priors, batch.dZ, 0.01, record=[0, 50, 100])
        for q, p in enumerate(priors):
            np.testing.assert_array_equal(multi[q], filter_batch(m, p, batch.dZ, 0.01, record=[0, 50, 100]))

    def test_numpy_step_agrees_with_kernel(self):
        m = suite.cycle3()
        batch = simulate_batch(m, [1 / 3] * 3, 0.5, 0.01, [0], 2)
        pi = np.array([0.2, 0.3, 0.5])
        for dz in batch.dZ[0]:
            pi = bayes_step(pi, dz, m, 0.01)
        np.testing.assert_allclose(pi, filter_batch(m, [0.2, 0.3, 0.5], batch.dZ, 0.01)[-1, 0], atol=1e-14)

    def test_extreme_increment_stays_finite(self):
        m = suite.detect2(1e-6)
        post = filter_batch(m, [0.5, 0.5], np.array([[-50.0, 50.0]]), 0.01)
        assert np.all(np.isfinite(post))
        # the first increment rules out state 1 completely; it never returns
        np.testing.assert_array_equal(post[-1, 0], [1.0, 0.0])

    def test_nan_increment_raises(self):
        with pytest.raises(DegenerateLikelihood):
            filter_batch(suite.sym2(), [0.5, 0.5], np.array([[0.0, np.nan]]), 0.01)

    @pytest.mark.parametrize("record", [[3], [1, 1], [-1]])
    def test_record_validated(self, record):
        with pytest.raises(GridMismatch):
            filter_batch(suite.sym2(), [0.5, 0.5], np.zeros((1, 2)), 0.01, record=record)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            filter_batch(suite.sym2(), [0.5, 0.5], np.zeros((1, 2)), 0.01, scheme="rk4")


class TestEuler:
    def test_self_convergence(self):
        # the Euler scheme approaches the split-step scheme as dt shrinks,
        # both driven by the same Brownian path
        m = suite.asym2()
        errors = []
        for dt, sub in [(0.02, 8), (0.005, 2), (0.0025, 1)]:
            batch = simulate_batch(m, [0.5, 0.5], 1.0, dt, np.arange(200), 5, substeps=sub)
            a = filter_batch(m, [0.5, 0.5], batch.dZ, dt, record=[batch.dZ.shape[1]], scheme="euler")
            b = filter_batch(m, [0.5, 0.5], batch.dZ, dt, record=[batch.dZ.shape[1]])
            errors.append(np.sqrt(np.mean((a - b) ** 2)))
        assert errors[0] > errors[1] > errors[2]

    def test_stays_in_simplex(self):
        m = suite.detect2(0.01)
        batch = simulate_batch(m, [0.5, 0.5], 1.0, 0.01, np.arange(10), 1)
        post = filter_batch(m, [0.5, 0.5], batch.dZ, 0.01, scheme="euler")
        assert post.min() >= 0
        np.testing.assert_allclose(post.sum(axis=-1), 1.0, atol=1e-12)


class TestTrajectory:
    def test_innovations_are_white_under_own_measure(self):
        m = suite.asym2(0.5)
        prior = np.array([2 / 3, 1 / 3])
        innov = []
        for i in range(300):
            _, obs = simulate_trial(m, prior, 1.0, 0.01, RngStream(4, i))
            innov.append(run_wonham(m, prior, obs).innovations)
        innov = np.asarray(innov)
        n = innov.size
        assert abs(innov.mean()) < 4 * np.sqrt(0.5 * 0.01 / n)
        assert abs(innov.var() / (0.5 * 0.01) - 1) < 0.05

    def test_expectation_and_times(self):
        m = suite.sym2()
        _, obs = simulate_trial(m, [0.5, 0.5], 0.5, 0.1, RngStream(0, 0))
        traj = run_wonham(m, [0.5, 0.5], obs, prior_label="uniform")
        np.testing.assert_allclose(traj.times, np.arange(6) * 0.1)
        np.testing.assert_allclose(traj.expectation([0, 1]), traj.posteriors[:, 1])
        assert traj.prior_label == "uniform"


class TestQuadraticForm:
    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_equals_matrix_form(self, seed):
        rng = np.random.default_rng(seed)
        pi = rng.dirichlet(np.ones(4))
        f = rng.normal(size=4)
        q = quadratic_form(pi, f)
        assert q >= 0
        assert abs(q - f @ covariance(pi) @ f) < 1e-12


class TestWonhamFilterEstimator:
    def test_sklearn_protocol(self):
        from sklearn.base import clone

        est = WonhamFilter(A=suite.asym2().A, h=[0, 1], R=0.5, prior=[0.5, 0.5], dt=0.01)
        assert clone(est).get_params()["R"] == 0.5
        est.set_params(R=2.0)
        assert est.R == 2.0

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            WonhamFilter(A=[[0, 0], [0, 0]], h=[0, 1]).predict(np.zeros((1, 3)))

    def test_transform_matches_filter(self):
        m = suite.detect2()
        batch = simulate_batch(m, [0.5, 0.5], 1.0, 0.01, np.arange(6), 3)
        est = WonhamFilter.from_model(m, dt=0.01).fit(batch.dZ)
        expected = filter_batch(m, [0.5, 0.5], batch.dZ, 0.01)[-1]
        np.testing.assert_array_equal(est.transform(batch.dZ), expected)
        np.testing.assert_array_equal(est.predict(batch.dZ), expected.argmax(axis=1))
        traj = est.filter_path(batch.dZ[0])
        np.testing.assert_array_equal(traj.posteriors[-1], expected[0])

    def test_invalid_params_raise_on_fit(self):
        with pytest.raises(ValueError):
            WonhamFilter(A=[[-1, 2], [1, -1]], h=[0, 1]).fit()
        with pytest.raises(ValueError):
            WonhamFilter(A=[[0, 0], [0, 0]], h=[0, 1], scheme="rk4").fit()

    def test_empty_paths_return_prior(self):
        est = WonhamFilter(A=[[0, 0], [0, 0]], h=[0, 1], prior=[0.3, 0.7]).fit()
        np.testing.assert_allclose(est.predict_proba(np.zeros((2, 0))), [[0.3, 0.7]] * 2)


class TestSelfConvergence:
    def test_first_order_in_dt(self):
        # same Brownian path at every dt through summed sub-increments
        m = suite.asym2()
        f = np.array([0.0, 1.0])
        est = {}
        for dt, sub in [(0.04, 8), (0.02, 4), (0.01, 2), (0.005, 1)]:
            b = simulate_batch(m, [0.5, 0.5], 2.0, dt, np.arange(1000), 3, substeps=sub)
            est[dt] = filter_batch(m, [0.5, 0.5], b.dZ, dt, record=[b.dZ.shape[1]])[0] @ f
        steps = sorted(est, reverse=True)
        weak = [abs(est[a].mean() - est[b].mean()) for a, b in zip(steps, steps[1:])]
        strong = [np.abs(est[a] - est[b]).mean() for a, b in zip(steps, steps[1:])]
        assert weak[0] > weak[1] > weak[2]
        for a, b in zip(strong, strong[1:]):
            assert 1.5 < a / b < 2.7
