"""Domain types, RNG streams, and masking primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stationsense as ss
from stationsense.core import apply_embedding_mask, sample_mask_matrix, sample_mask_set

from conftest import random_multistation_sample


# ---------------------------------------------------------------------------
# RandomStream
# ---------------------------------------------------------------------------


class TestRandomStream:
    def test_same_seed_label_reproduces(self):
        a = ss.RandomStream(42, "foo").random(100)
        b = ss.RandomStream(42, "foo").random(100)
        np.testing.assert_array_equal(a, b)

    def test_different_labels_differ(self):
        a = ss.RandomStream(42, "foo").random(100)
        b = ss.RandomStream(42, "bar").random(100)
        assert not np.array_equal(a, b)

    def test_child_stream_isolated_from_parent_consumption(self):
        r1 = ss.RandomStream(0, "root")
        r2 = ss.RandomStream(0, "root")
        r1.random(1000)  # consume from the parent only
        np.testing.assert_array_equal(
            r1.child("sub").random(10), r2.child("sub").random(10)
        )

    def test_child_equals_direct_path_label(self):
        a = ss.RandomStream(7, "a").child("b").random(10)
        b = ss.RandomStream(7, "a/b").random(10)
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# MaskSet
# ---------------------------------------------------------------------------


class TestMaskSet:
    def test_of_and_membership(self):
        m = ss.MaskSet.of([3, 1, 3])
        assert 1 in m and 3 in m and 0 not in m
        assert len(m) == 2
        assert list(m) == [1, 3]

    def test_union(self):
        assert set(ss.MaskSet.of([0]).union(ss.MaskSet.of([2]))) == {0, 2}

    def test_empty(self):
        assert len(ss.MaskSet.empty()) == 0

    def test_validate_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ss.MaskSet.of([8]).validate(8)
        with pytest.raises(ValueError):
            ss.MaskSet.of([-1]).validate(8)
        ss.MaskSet.of([0, 7]).validate(8)


# ---------------------------------------------------------------------------
# mask sampling
# ---------------------------------------------------------------------------


class TestSampleMaskSet:
    def test_p_zero_empty(self, rng):
        assert len(sample_mask_set(0.0, 8, rng)) == 0

    def test_p_one_full(self, rng):
        assert set(sample_mask_set(1.0, 8, rng)) == set(range(8))

    def test_invalid_p(self, rng):
        with pytest.raises(ValueError):
            sample_mask_set(1.5, 8, rng)

    def test_consumes_exactly_n_draws(self):
        # after sampling, the stream continues exactly where n manual draws
        # would have left it
        r1 = ss.RandomStream(3, "m")
        r2 = ss.RandomStream(3, "m")
        sample_mask_set(0.5, 8, r1)
        r2.random(8)
        np.testing.assert_array_equal(r1.random(16), r2.random(16))

    def test_mean_size_matches_binomial_expectation(self):
        # oracle: E|M| = n * p for i.i.d. Bernoulli masking
        r = ss.RandomStream(0, "mc")
        sizes = sample_mask_matrix(0.5, 100_000, 8, r).sum(axis=1)
        assert abs(sizes.mean() - 4.0) < 0.05

    def test_matrix_rows_equal_sequential_set_draws(self):
        r1 = ss.RandomStream(5, "x")
        r2 = ss.RandomStream(5, "x")
        mat = sample_mask_matrix(0.3, 50, 8, r1)
        for i in range(50):
            assert set(np.nonzero(mat[i])[0]) == set(sample_mask_set(0.3, 8, r2))


# ---------------------------------------------------------------------------
# input-level masking
# ---------------------------------------------------------------------------


class TestApplyInputMask:
    def test_masks_only_selected_stations(self):
        gen = np.random.default_rng(0)
        x = random_multistation_sample(gen, missing=(3,))
        y = ss.apply_input_mask(x, ss.MaskSet.of([3, 5]))
        # reference loop oracle
        for d in range(8):
            if d in (3, 5):
                assert y.stations[d].missing
                np.testing.assert_array_equal(y.stations[d].values, 0.0)
            else:
                np.testing.assert_array_equal(y.stations[d].values, x.stations[d].values)
                assert not y.stations[d].missing

    def test_out_of_range_mask_rejected(self):
        x = random_multistation_sample(np.random.default_rng(0))
        with pytest.raises(ValueError):
            ss.apply_input_mask(x, ss.MaskSet.of([99]))

    @settings(max_examples=50, deadline=None)
    @given(
        m1=st.sets(st.integers(0, 7)),
        m2=st.sets(st.integers(0, 7)),
        seed=st.integers(0, 1000),
    )
    def test_idempotent_and_commutative(self, m1, m2, seed):
        gen = np.random.default_rng(seed)
        x = random_multistation_sample(gen, n_d=8, k=6)
        a, b = ss.MaskSet.of(m1), ss.MaskSet.of(m2)
        once = ss.apply_input_mask(x, a)
        twice = ss.apply_input_mask(once, a)
        np.testing.assert_array_equal(once.matrix(), twice.matrix())
        assert once.observed_missing.members == twice.observed_missing.members
        ab = ss.apply_input_mask(ss.apply_input_mask(x, a), b)
        ba = ss.apply_input_mask(ss.apply_input_mask(x, b), a)
        np.testing.assert_array_equal(ab.matrix(), ba.matrix())
        assert ab.observed_missing.members == ba.observed_missing.members

    @settings(max_examples=50, deadline=None)
    @given(m=st.sets(st.integers(0, 7)), pre=st.sets(st.integers(0, 7)), seed=st.integers(0, 1000))
    def test_missingness_union_property(self, m, pre, seed):
        gen = np.random.default_rng(seed)
        x = random_multistation_sample(gen, n_d=8, k=6, missing=tuple(pre))
        y = ss.apply_input_mask(x, ss.MaskSet.of(m))
        assert y.observed_missing.members == frozenset(m) | frozenset(pre)


class TestApplyEmbeddingMask:
    def test_zeroes_exact_positions(self):
        gen = np.random.default_rng(1)
        q = [gen.random(5) for _ in range(8)]
        out = apply_embedding_mask(q, ss.MaskSet.of([0, 4]))
        # index-loop oracle
        for i in range(8):
            if i in (0, 4):
                np.testing.assert_array_equal(out[i], np.zeros(5))
            else:
                np.testing.assert_array_equal(out[i], q[i])


# ---------------------------------------------------------------------------
# sample types
# ---------------------------------------------------------------------------


class TestSampleTypes:
    def test_observed_rejects_negative_and_nonfinite(self):
        with pytest.raises(ValueError):
            ss.StationSample.observed(np.array([1.0, -0.1]))
        with pytest.raises(ValueError):
            ss.StationSample.observed(np.array([np.nan, 0.0]))

    def test_absent_is_zero_and_flagged(self):
        s = ss.StationSample.absent(4)
        assert s.missing
        np.testing.assert_array_equal(s.values, np.zeros(4))

    def test_matrix_shape_and_missing_rows(self):
        gen = np.random.default_rng(0)
        x = random_multistation_sample(gen, n_d=3, k=4, missing=(1,))
        m = x.matrix()
        assert m.shape == (3, 4)
        np.testing.assert_array_equal(m[1], 0.0)

    def test_label_bounds(self):
        gen = np.random.default_rng(0)
        x = random_multistation_sample(gen, n_d=2, k=3)
        ss.LabeledSample(x, 0.0)
        ss.LabeledSample(x, 1.0)
        with pytest.raises(ValueError):
            ss.LabeledSample(x, 1.5)
        with pytest.raises(ValueError):
            ss.LabeledSample(x, float("nan"))

    def test_station_id_non_negative(self):
        with pytest.raises(ValueError):
            ss.StationId(-1)

    def test_frame_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ss.CsiFrame(0, 0.0, np.array([np.inf + 0j]))
        with pytest.raises(ValueError):
            ss.CsiFrame(0, -1.0, np.array([1 + 0j]))
