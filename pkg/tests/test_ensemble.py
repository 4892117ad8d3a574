import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailforge.ensemble import (
    PredictionRecord,
    ensemble_average,
    ensemble_records,
    eval_report,
    mean_class_error_rate,
    read_records,
    records_from_probs,
    tercile_splits,
    truncate_topk,
    write_records,
    write_report,
)
from tailforge.exceptions import ConfigError, RecordMismatchError


def _prob_vectors(seed, n, c):
    p = np.random.default_rng(seed).random((n, c))
    return p / p.sum(axis=1, keepdims=True)


class TestTruncate:
    def test_example(self):
        rec = truncate_topk([0.5, 0.3, 0.2], 2)
        assert rec.top == ((0, 0.5), (1, 0.3))

    def test_all_classes_when_k_large(self):
        assert truncate_topk([0.1, 0.6, 0.3], 10).classes == [1, 2, 0]

    def test_tie_to_lower_index(self):
        probs = np.zeros(6)
        probs[4] = probs[2] = 0.5
        assert truncate_topk(probs, 1).top == ((2, 0.5),)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            truncate_topk([1.0], 0)

    def test_jsonl_roundtrip(self, tmp_path):
        recs = records_from_probs(_prob_vectors(0, 5, 12), k=10, ids=range(100, 105))
        write_records(recs, tmp_path / "p.jsonl")
        assert read_records(tmp_path / "p.jsonl") == recs


class TestEnsembleAverage:
    def test_single_model_renormalizes(self):
        rec = PredictionRecord(0, ((1, 0.6), (0, 0.2)))
        np.testing.assert_allclose(ensemble_average([rec], 3), [0.25, 0.75, 0.0])

    def test_duplicate_record(self):
        rec = truncate_topk([0.2, 0.5, 0.3], 2)
        np.testing.assert_array_equal(ensemble_average([rec, rec], 3), ensemble_average([rec], 3))

    def test_tie_goes_to_class_zero(self):
        a = PredictionRecord(0, ((0, 0.6),))
        b = PredictionRecord(0, ((1, 0.6),))
        avg = ensemble_average([a, b], 3)
        assert avg[0] == avg[1] == 0.5
        assert truncate_topk(avg, 1).classes == [0]

    def test_mismatched_ids(self):
        with pytest.raises(RecordMismatchError):
            ensemble_average([PredictionRecord(0, ((0, 1.0),)), PredictionRecord(1, ((0, 1.0),))], 2)

    def test_length_mismatch(self):
        r = [PredictionRecord(0, ((0, 1.0),))]
        with pytest.raises(RecordMismatchError):
            ensemble_records([r, r + r], 2)

    def test_weights(self):
        a = PredictionRecord(0, ((0, 1.0),))
        b = PredictionRecord(0, ((1, 1.0),))
        np.testing.assert_allclose(ensemble_average([a, b], 2, weights=[3, 1]), [0.75, 0.25])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5), st.integers(2, 12))
    def test_invariances(self, seed, m, c):
        probs = _prob_vectors(seed, m, c)
        recs = [truncate_topk(p, 3) for p in probs]
        base = ensemble_average(recs, c)
        perm = np.random.default_rng(seed).permutation(m)
        np.testing.assert_allclose(ensemble_average([recs[i] for i in perm], c), base,
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(ensemble_average([recs[0]] * m, c),
                                   ensemble_average([recs[0]], c), rtol=0, atol=1e-12)
        full = ensemble_average([truncate_topk(probs[0], c)], c)
        np.testing.assert_allclose(full, probs[0], rtol=0, atol=1e-12)


class TestMetrics:
    def test_all_correct(self):
        assert mean_class_error_rate([0, 1, 2], [0, 1, 2], 3) == 0.0

    def test_hand_value(self):
        # class 0: 1/1 correct, class 1: 1/2 correct
        assert mean_class_error_rate([0, 1, 0], [0, 1, 1], 2) == 0.25

    def test_absent_classes_excluded(self):
        assert mean_class_error_rate([0, 1, 0], [0, 1, 1], 5) == 0.25

    def test_empty(self):
        with pytest.raises(ConfigError):
            mean_class_error_rate([], [], 2)

    def test_balanced_identity(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(7), 20)
        pred = np.where(rng.random(140) < 0.6, labels, rng.integers(0, 7, 140))
        assert mean_class_error_rate(pred, labels, 7) == pytest.approx(
            1 - np.mean(pred == labels), abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_order_and_duplication_invariant(self, seed, reps):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 5, 30)
        pred = rng.integers(0, 5, 30)
        base = mean_class_error_rate(pred, labels, 5)
        perm = rng.permutation(30)
        assert mean_class_error_rate(pred[perm], labels[perm], 5) == pytest.approx(base, abs=1e-12)
        assert mean_class_error_rate(np.tile(pred, reps), np.tile(labels, reps), 5) == \
            pytest.approx(base, abs=1e-12)


class TestTerciles:
    def test_even_split(self):
        assert tercile_splits([100, 50, 30, 20, 10, 5]).tolist() == [0, 0, 1, 1, 2, 2]

    def test_ties_join_headier_split(self):
        # the head absorbs every tied class; the remainder is split medium-first
        assert tercile_splits([10, 10, 10, 1]).tolist() == [0, 0, 0, 1]
        assert tercile_splits([5, 4, 4, 4, 1, 1]).tolist() == [0, 0, 0, 0, 1, 1]

    def test_order_by_count(self):
        assert tercile_splits([1, 100, 10]).tolist() == [2, 0, 1]


class TestEvalReport:
    def test_single_class(self):
        probs = np.array([[1.0], [1.0]])
        r = eval_report(probs, [0, 0], [5])
        assert r.mean_class_error_rate == 1 - r.top1_accuracy

    def test_mcer_definition(self):
        probs = _prob_vectors(1, 60, 6)
        labels = np.repeat(np.arange(6), 10)
        r = eval_report(probs, labels, [60, 40, 20, 10, 5, 2])
        assert r.mean_class_error_rate == pytest.approx(1 - np.mean(r.per_class_accuracy), abs=1e-15)
        assert all(0 <= v <= 1 for v in r.split_accuracy)
        assert 0 <= r.top1_accuracy <= r.top5_accuracy <= 1

    def test_records_and_arrays_agree(self):
        probs = _prob_vectors(2, 40, 8)
        labels = np.random.default_rng(2).integers(0, 8, 40)
        counts = np.arange(8, 0, -1)
        a = eval_report(probs, labels, counts)
        b = eval_report(records_from_probs(probs, 8), labels, counts)
        assert a == b

    def test_write(self, tmp_path):
        probs = _prob_vectors(3, 12, 3)
        r = eval_report(probs, [0, 1, 2] * 4, [9, 3, 1])
        write_report(r, [9, 3, 1], tmp_path / "r.json", tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "class,count,accuracy,split"
        assert lines[3].endswith(",tail")
