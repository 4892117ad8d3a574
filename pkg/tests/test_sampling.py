import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailforge.exceptions import ConfigError
from tailforge.sampling import (
    SamplerKind,
    class_balanced_epoch,
    epoch_indices,
    group_by_class,
    instance_balanced_epoch,
)
from tailforge.synthbench import gen_class_counts


def _groups(counts):
    labels = np.repeat(np.arange(len(counts)), counts)
    return labels, group_by_class(labels, len(counts))


class TestInstanceBalanced:
    def test_small_permutation(self):
        assert sorted(instance_balanced_epoch(3, np.random.default_rng(0))) == [0, 1, 2]

    def test_deterministic(self):
        a = instance_balanced_epoch(50, np.random.default_rng(4))
        b = instance_balanced_epoch(50, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            instance_balanced_epoch(0, np.random.default_rng(0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 500), st.integers(0, 2**32 - 1))
    def test_exact_permutation(self, n, seed):
        out = instance_balanced_epoch(n, np.random.default_rng(seed))
        np.testing.assert_array_equal(np.sort(out), np.arange(n))

    def test_sample_frequency_uniform(self):
        rng = np.random.default_rng(0)
        first = np.bincount([instance_balanced_epoch(5, rng)[0] for _ in range(20000)], minlength=5)
        expected = 4000
        chi2 = ((first - expected) ** 2 / expected).sum()
        assert chi2 < 18.47  # 99.9% critical value, 4 d.o.f.


class TestClassBalanced:
    def test_two_classes_frequency(self):
        labels, groups = _groups([1000, 1])
        draws = class_balanced_epoch(groups, 100_000, np.random.default_rng(0))
        freq = np.mean(labels[draws] == 1)
        assert abs(freq - 0.5) <= 3 * np.sqrt(0.25 / 100_000)

    def test_chi_square(self):
        counts = gen_class_counts(10, 1000, 1000)
        assert counts[0] == 1000 and counts[-1] == 1
        labels, groups = _groups(counts)
        draws = class_balanced_epoch(groups, 100_000, np.random.default_rng(1))
        observed = np.bincount(labels[draws], minlength=10)
        chi2 = ((observed - 10_000) ** 2 / 10_000).sum()
        assert chi2 < 27.88

    def test_single_class(self):
        out = class_balanced_epoch([np.array([3, 7, 9])], 50, np.random.default_rng(0))
        assert set(out.tolist()) <= {3, 7, 9}

    def test_singleton_class_contributes_its_index(self):
        _, groups = _groups([5, 1])
        out = class_balanced_epoch(groups, 200, np.random.default_rng(0))
        assert 5 in out
        assert set(out.tolist()) <= set(range(6))

    def test_empty_class_rejected(self):
        with pytest.raises(ConfigError):
            class_balanced_epoch([np.array([0]), np.array([], dtype=int)], 10,
                                 np.random.default_rng(0))

    def test_deterministic(self):
        _, groups = _groups([10, 3, 1])
        a = class_balanced_epoch(groups, 40, np.random.default_rng(2))
        b = class_balanced_epoch(groups, 40, np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)


class TestEpochIndices:
    def test_cbs_default_size_is_n(self):
        labels, _ = _groups([8, 4, 2])
        out = epoch_indices(SamplerKind("CBS"), labels, 3, np.random.default_rng(0))
        assert len(out) == 14

    def test_cbs_explicit_size(self):
        labels, _ = _groups([8, 4, 2])
        out = epoch_indices(SamplerKind("CBS", 100), labels, 3, np.random.default_rng(0))
        assert len(out) == 100

    def test_ibs(self):
        labels, _ = _groups([8, 4, 2])
        out = epoch_indices(SamplerKind("IBS"), labels, 3, np.random.default_rng(0))
        np.testing.assert_array_equal(np.sort(out), np.arange(14))

    def test_kind_validation(self):
        with pytest.raises(ConfigError):
            SamplerKind("RBS").validate()
