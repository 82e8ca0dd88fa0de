import json

import numpy as np
import pytest
from scipy.linalg import expm
from hypothesis import given, settings
from hypothesis import strategies as st

from wonham import suite
from wonham.exceptions import (
    DimensionMismatch,
    ModelValidationError,
    NegativeOffDiagonal,
    NonFiniteValue,
    NonPositiveR,
    RowSumNonZero,
    TransientStatesPresent,
    WeightCountMismatch,
)
from wonham.model import (
    dump_model,
    ergodic_decomposition,
    invariant_measure,
    load_model,
    loads_model,
    mixture_invariant,
    model_from_dict,
    validate_model,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


class TestValidateModel:
    def test_accepts_rate_matrix(self):
        m = validate_model([[-1, 1], [2, -2]], [0, 1], 0.5, name="x")
        assert m.d == 2 and m.R == 0.5 and m.name == "x"
        assert not m.A.flags.writeable

    def test_small_row_sum_error_is_rebalanced(self):
        m = validate_model([[-1 - 1e-12, 1], [2, -2]], [0, 1], 1.0)
        assert np.all(m.A.sum(axis=1) == 0.0)

    @pytest.mark.parametrize(
        "A, h, R, error",
        [
            ([[-1, 2], [1, -1]], [0, 1], 1.0, RowSumNonZero),
            ([[1, -1], [1, -1]], [0, 1], 1.0, NegativeOffDiagonal),
            ([[-1, 1], [1, -1]], [0, 1], 0.0, NonPositiveR),
            ([[-1, 1], [1, -1]], [0, 1], -2.0, NonPositiveR),
            ([[-1, 1], [1, -1]], [0, np.nan], 1.0, NonFiniteValue),
            ([[-1, 1], [1, -1]], [0, 1, 2], 1.0, DimensionMismatch),
            ([[-1, 1, 0], [1, -1, 0]], [0, 1], 1.0, DimensionMismatch),
        ],
    )
    def test_rejections(self, A, h, R, error):
        with pytest.raises(error):
            validate_model(A, h, R)

    def test_collects_all_violations(self):
        with pytest.raises(ModelValidationError) as info:
            validate_model([[1, -2], [1, -1]], [0, 1], -1.0)
        assert {"NegativeOffDiagonal", "NonPositiveR"} <= set(info.value.codes)

    def test_with_noise(self):
        m = suite.asym2().with_noise(4.0)
        assert m.R == 4.0
        np.testing.assert_array_equal(m.A, suite.asym2().A)


class TestJson:
    def test_round_trip(self, tmp_path):
        m = suite.twin(0.25)
        dump_model(m, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(back.A, m.A)
        np.testing.assert_array_equal(back.h, m.h)
        assert back.R == m.R and back.name == "twin"

    @pytest.mark.parametrize("token", ["NaN", "Infinity", "-Infinity"])
    def test_rejects_non_finite_literals(self, token):
        text = f'{{"d": 2, "A": [[-1, 1], [1, -1]], "h": [0, {token}], "R": 1}}'
        with pytest.raises(ModelValidationError):
            loads_model(text)

    def test_declared_dimension_checked(self):
        doc = {"d": 3, "A": [[-1, 1], [1, -1]], "h": [0, 1], "R": 1}
        with pytest.raises(DimensionMismatch):
            model_from_dict(doc)

    def test_to_dict_is_json(self):
        doc = suite.cycle3().to_dict()
        assert json.loads(json.dumps(doc))["d"] == 3


class TestErgodicDecomposition:
    def test_twin_has_two_classes(self):
        dec = ergodic_decomposition(suite.twin())
        assert dec.classes == ((0, 1), (2, 3))
        np.testing.assert_array_equal(dec.labels(), [0, 0, 1, 1])
        np.testing.assert_array_equal(dec.indicator_vectors.sum(axis=0), np.ones(4))

    def test_static_model_has_singleton_classes(self):
        dec = ergodic_decomposition(suite.detect2())
        assert dec.m == 2 and dec.class_of(1) == 1

    def test_transient_states_rejected(self):
        m = validate_model([[-1, 1, 0], [0, -1, 1], [0, 1, -1]], [0, 1, 2], 1.0)
        with pytest.raises(TransientStatesPresent) as info:
            ergodic_decomposition(m)
        assert 0 in info.value.states

    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_classes_are_closed(self, seed):
        m = suite.random_model(np.random.default_rng(seed))
        dec = ergodic_decomposition(m)
        for ind in dec.indicator_vectors:
            # A 1_S = 0 exactly characterizes a closed class
            np.testing.assert_allclose(m.A @ ind, 0.0, atol=1e-12)


class TestSemigroup:
    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_exponential_is_stochastic(self, seed):
        m = suite.random_model(np.random.default_rng(seed))
        np.testing.assert_allclose(m.A @ np.ones(m.d), 0.0, atol=1e-12)
        for t in (0.1, 1.0, 10.0):
            P = expm(m.A * t)
            assert P.min() >= -1e-12
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_invariant_measure_is_fixed_by_the_flow(self, seed):
        m = suite.random_model(np.random.default_rng(seed))
        for k in range(ergodic_decomposition(m).m):
            pi = invariant_measure(m, k)
            np.testing.assert_allclose(expm(m.A.T) @ pi, pi, atol=1e-9)


class TestInvariantMeasure:
    def test_asymmetric_chain(self):
        np.testing.assert_allclose(invariant_measure(suite.asym2(), 0), [2 / 3, 1 / 3], atol=1e-14)

    def test_twin_class_measures(self):
        m = suite.twin()
        np.testing.assert_allclose(invariant_measure(m, 1), [0, 0, 2 / 3, 1 / 3], atol=1e-14)
        np.testing.assert_allclose(mixture_invariant(m, [0.5, 0.5]), [1 / 3, 1 / 6, 1 / 3, 1 / 6])

    def test_weight_count_checked(self):
        with pytest.raises(WeightCountMismatch):
            mixture_invariant(suite.twin(), [1.0])

    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_stationary_on_random_models(self, seed):
        m = suite.random_model(np.random.default_rng(seed))
        dec = ergodic_decomposition(m)
        for k, members in enumerate(dec.classes):
            pi = invariant_measure(m, k, dec)
            assert pi.min() >= 0 and abs(pi.sum() - 1) < 1e-12
            np.testing.assert_allclose(m.A.T @ pi, 0.0, atol=1e-10)
            outside = np.setdiff1d(np.arange(m.d), members)
            assert np.all(pi[outside] == 0)
