import json

import numpy as np
import pytest

import oracles
from segorder.errors import ConfigError, UndefinedMetricError
from segorder.metrics import MetricReport, average_precision_at_k, f1_scores, map_at_k, rank_classes


def test_perfect_predictions():
    assert f1_scores([0, 1, 2, 1], [0, 1, 2, 1]) == (1.0, 1.0)


def test_all_wrong_on_two_balanced_classes():
    assert f1_scores([1, 0, 1, 0], [0, 1, 0, 1]) == (0.0, 0.0)


def test_zero_support_class_counts_as_zero_in_macro():
    micro, macro = f1_scores([0, 0], [0, 0], num_classes=3)
    assert micro == 1.0 and macro == pytest.approx(1 / 3)


def test_empty_input_is_undefined():
    with pytest.raises(UndefinedMetricError):
        f1_scores([], [])


def test_multilabel_counts_each_class():
    micro, macro = f1_scores([(0, 1), ()], [(0,), (1,)], num_classes=2)
    # class 0: tp 1; class 1: fp 1, fn 1 -> micro 2/4, macro (1 + 0) / 2
    assert micro == pytest.approx(0.5) and macro == pytest.approx(0.5)


def test_multiclass_f1_equals_confusion_matrix_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r, n = int(rng.integers(2, 6)), int(rng.integers(1, 40))
        preds, labels = rng.integers(0, r, n).tolist(), rng.integers(0, r, n).tolist()
        got = f1_scores(preds, labels, num_classes=r)
        assert got == pytest.approx(oracles.f1_bruteforce(preds, labels, r), abs=1e-15)


def test_multilabel_f1_equals_confusion_matrix_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        r, n = int(rng.integers(2, 6)), int(rng.integers(1, 30))
        preds = [tuple(np.flatnonzero(rng.random(r) < 0.4)) for _ in range(n)]
        labels = [tuple(np.flatnonzero(rng.random(r) < 0.4)) for _ in range(n)]
        got = f1_scores(preds, labels, num_classes=r)
        assert got == pytest.approx(oracles.f1_bruteforce(preds, labels, r), abs=1e-15)


def test_relevant_first_gives_full_precision():
    assert average_precision_at_k([2, 0, 1], {2}, 3) == 1.0


def test_relevant_second_gives_one_half():
    assert average_precision_at_k([1, 2, 3], {2}, 3) == 0.5
    assert map_at_k([[1, 2, 3]], [{2}], 3) == 0.5


def test_segments_without_relevant_labels_are_excluded():
    assert map_at_k([[0, 1], [1, 0]], [{0}, set()], 2) == 1.0
    with pytest.raises(UndefinedMetricError):
        map_at_k([[0, 1]], [set()], 2)


def test_k_below_one_is_a_config_error():
    with pytest.raises(ConfigError):
        map_at_k([[0]], [{0}], 0)


def test_map_equals_exhaustive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        r, n, k = int(rng.integers(2, 8)), int(rng.integers(1, 20)), int(rng.integers(1, 6))
        scores = rng.random((n, r))
        rankings = [list(np.argsort(-s)) for s in scores]
        relevant = [set(np.flatnonzero(rng.random(r) < 0.3).tolist()) for _ in range(n)]
        relevant[0] |= {int(rng.integers(0, r))}
        assert map_at_k(rankings, relevant, k) == pytest.approx(
            oracles.mean_average_precision(rankings, relevant, k), abs=1e-15)


def test_ranking_is_descending_and_stable():
    assert rank_classes([0.1, 0.5, 0.5, 0.2]).tolist() == [1, 2, 3, 0]


def test_report_serialises_and_checks_rates():
    rep = MetricReport(step=3, split="validation", f1_micro=0.5, map_at_k={3: 0.25}, losses={"total": 1.5})
    back = MetricReport.from_dict(json.loads(rep.to_json()))
    assert back == rep
    assert rep.scalars()["map@3"] == 0.25
    with pytest.raises(ValueError):
        MetricReport(mlm_accuracy=1.5)
