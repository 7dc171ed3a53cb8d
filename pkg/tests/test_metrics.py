import json

import numpy as np
import pytest

from fewshot_facies.metrics import (ConfusionMatrix, EmptyEvaluationError, MetricsReport, accumulate,
                                    compute_report, evaluate_masks)

from oracles import dict_confusion, dict_report


def test_perfect_prediction_is_diagonal(rng):
    m = rng.integers(1, 4, (6, 6))
    cm = accumulate(ConfusionMatrix(3), m, m)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0


def test_commutative(rng):
    a = rng.integers(1, 4, (2, 5, 5))
    b = rng.integers(1, 4, (2, 5, 5))
    one = accumulate(accumulate(ConfusionMatrix(3), a[0], a[1]), b[0], b[1])
    two = accumulate(accumulate(ConfusionMatrix(3), b[0], b[1]), a[0], a[1])
    assert np.array_equal(one.counts, two.counts)
    assert np.array_equal((accumulate(ConfusionMatrix(3), a[0], a[1]) + accumulate(ConfusionMatrix(3), b[0], b[1])).counts,
                          one.counts)


def test_dictionary_oracle_counts(rng):
    t, p = rng.integers(1, 5, (8, 8)), rng.integers(1, 5, (8, 8))
    assert accumulate(ConfusionMatrix(4), t, p).counts.tolist() == dict_confusion(t, p, 4)


@pytest.mark.parametrize("truth,pred", [(np.array([[0, 1]]), np.array([[1, 1]])),
                                        (np.array([[1, 1]]), np.array([[1, 4]]))])
def test_out_of_range_labels(truth, pred):
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(3), truth, pred)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(2), np.ones((2, 2), int), np.ones((2, 3), int))


def test_perfect_report():
    m = np.array([[1, 2], [2, 1]])
    r = evaluate_masks([m], [m], 2)
    assert (r.pa, r.mca, r.fwiou, r.fwf1) == (1.0, 1.0, 1.0, 1.0)
    assert r.class_accuracy == [1.0, 1.0]


def test_total_miss_with_absent_class():
    r = evaluate_masks([np.ones((3, 3), int)], [np.full((3, 3), 2)], 2)
    assert (r.pa, r.mca, r.fwiou, r.fwf1) == (0.0, 0.0, 0.0, 0.0)
    assert r.class_accuracy == [0.0, None]
    assert json.loads(r.to_json())["per_class"][1]["acc"] is None


def test_hand_matrix():
    r = compute_report(ConfusionMatrix(2, [[3, 1], [2, 4]]))
    assert r.pa == pytest.approx(0.7, abs=1e-12)
    assert r.class_accuracy == pytest.approx([0.75, 2 / 3], abs=1e-12)
    assert r.mca == pytest.approx((0.75 + 2 / 3) / 2, abs=1e-12)
    assert [c.iou for c in r.per_class] == pytest.approx([0.5, 4 / 7], abs=1e-12)
    assert r.fwiou == pytest.approx(0.4 * 0.5 + 0.6 * 4 / 7, abs=1e-12)
    assert [c.f1 for c in r.per_class] == pytest.approx([2 / 3, 8 / 11], abs=1e-12)
    assert r.fwf1 == pytest.approx(0.4 * 2 / 3 + 0.6 * 8 / 11, abs=1e-12)
    assert round(r.fwiou, 4) == 0.5429 and round(r.fwf1, 4) == 0.7030


def test_random_pairs_match_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        c = int(rng.integers(2, 7))
        t, p = rng.integers(1, c + 1, (10, 9)), rng.integers(1, c + 1, (10, 9))
        r = evaluate_masks([t], [p], c)
        ref = dict_report(dict_confusion(t, p, c))
        for key in ("pa", "mca", "fwiou", "fwf1"):
            assert getattr(r, key) == pytest.approx(ref[key], abs=1e-12)


def test_empty_matrix():
    with pytest.raises(EmptyEvaluationError):
        compute_report(ConfusionMatrix(3))


def test_report_round_trip():
    r = compute_report(ConfusionMatrix(3, [[2, 0, 1], [0, 0, 0], [1, 1, 5]]))
    back = MetricsReport.from_dict(json.loads(r.to_json()))
    assert back.to_dict() == r.to_dict()
    assert back.class_accuracy[1] is None
