import json
import math

import numpy as np
import pytest

from tsftrack.data_io import SequenceRecord, write_results
from tsftrack.evaluation import (PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, SequenceResult, build_report,
                                 compare_report, evaluate_result_files, format_table, ope_run, per_frame_metrics,
                                 precision_curve, success_curve, table_from_csv, table_to_csv)
from tsftrack.geometry import Box

from .oracles import precision_brute_force, success_brute_force


def _res(os_, pe=None, sid="s", attrs=()):
    pe = pe if pe is not None else [0.0] * len(os_)
    return SequenceResult(sid, list(os_), list(pe), frozenset(attrs))


def test_identity_and_disjoint():
    gt = [Box(10, 10, 4, 4), Box(20, 20, 6, 2)]
    r = per_frame_metrics(gt, gt)
    assert r.os == [1.0, 1.0] and r.pe == [0.0, 0.0]
    far = [Box(500, 500, 4, 4)] * 2
    assert per_frame_metrics(far, gt).os == [0.0, 0.0]


def test_three_frame_hand_case():
    gt = [Box.from_xywh(0, 0, 4, 4)] * 3
    pred = [Box.from_xywh(0, 0, 4, 4), Box.from_xywh(2, 0, 4, 4), Box.from_xywh(3, 4, 4, 4)]
    r = per_frame_metrics(pred, gt)
    assert r.os[0] == 1.0 and r.os[1] == pytest.approx(1 / 3) and r.os[2] == 0.0
    assert r.pe == [0.0, 2.0, 5.0]


def test_length_mismatch_and_missing_gt():
    with pytest.raises(ValueError):
        per_frame_metrics([Box(1, 1, 1, 1)], [])
    r = per_frame_metrics([Box(1, 1, 1, 1), None, None], [Box(1, 1, 1, 1), None, Box(1, 1, 1, 1)])
    assert r.os == [1.0, 0.0] and math.isinf(r.pe[1])


def test_success_examples():
    assert success_curve(_res([0.2, 0.5, 0.8])).at(0.4) == pytest.approx(2 / 3)
    ones = success_curve(_res([1.0] * 5))
    assert all(v == 1.0 for v in ones.values[:-1]) and ones.values[-1] == 0.0
    zeros = success_curve(_res([0.0] * 5))
    assert zeros.values == [0.0] * 21


def test_precision_examples():
    assert precision_curve(_res([0, 0, 0], [5, 25, 15])).at(20) == pytest.approx(2 / 3)
    zero = precision_curve(_res([0] * 4, [0.0] * 4))
    assert zero.values[0] == 0.0 and all(v == 1.0 for v in zero.values[1:])


def test_far_miss_precision_zero():
    gt = [Box(50, 50, 10, 10)] * 4
    pred = [Box(150, 50, 10, 10)] * 4
    assert precision_curve(per_frame_metrics(pred, gt)).at(20) == 0.0


def test_oracle_auc_is_twenty_over_twentyone():
    gt = [Box(30 + i, 40, 12, 9) for i in range(10)]
    curve = success_curve(per_frame_metrics(gt, gt))
    assert curve.auc == 20 / 21


def test_curves_match_brute_force_on_random_pairs():
    rng = np.random.default_rng(0)
    preds, gts = [], []
    for _ in range(1000):
        gts.append(Box(*rng.uniform(0, 100, 2), *rng.uniform(1, 40, 2)))
        preds.append(Box(*rng.uniform(0, 100, 2), *rng.uniform(1, 40, 2)))
    r = per_frame_metrics(preds, gts)
    np.testing.assert_array_equal(success_curve(r).values, success_brute_force(r.os, SUCCESS_THRESHOLDS))
    np.testing.assert_array_equal(precision_curve(r).values, precision_brute_force(r.pe, PRECISION_THRESHOLDS))


def test_pooled_and_per_sequence_aggregation():
    a = _res([1.0, 1.0, 1.0], sid="a")
    b = _res([0.0], sid="b")
    pooled = success_curve([a, b])
    per_seq = success_curve([a, b], per_sequence=True)
    assert pooled.at(0.5) == 0.75
    assert per_seq.at(0.5) == 0.5


def test_curve_monotonicity_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        r = _res(rng.uniform(0, 1, 30), rng.uniform(0, 80, 30))
        s, p = success_curve(r), precision_curve(r)
        assert np.all(np.diff(s.values) <= 0) and np.all(np.diff(p.values) >= 0)
        assert 0 <= s.auc <= 1 and 0 <= p.auc <= 1


def _record(sid, gt, attrs=()):
    return SequenceRecord(sid, [], gt, frozenset(attrs), frames_data=[np.zeros((4, 4))] * len(gt))


class _Echo:
    def __init__(self, rec):
        self.boxes = list(rec.gt)
        self.frame_seconds = [0.01] * len(rec)


def test_ope_oracle_tracker_and_attribute_slicing():
    recs = [_record("a", [Box(10, 10, 5, 5)] * 4, {"blur"}), _record("b", [Box(20, 20, 5, 5)] * 6)]
    rep = ope_run(recs, _Echo)
    assert rep["auc"] == 20 / 21
    assert rep["precision_at_20"] == 1.0
    assert rep["fps"] == pytest.approx(100.0)
    assert rep["attributes"]["blur"]["sequences"] == ["a"]
    assert rep["attributes"]["blur"]["frames"] == 4


def test_pooled_report_matches_per_frame_dump():
    rng = np.random.default_rng(2)
    recs = [_record(f"s{i}", [Box(50, 50, 20, 20)] * n) for i, n in enumerate((5, 9, 3))]

    class Noisy:
        def __init__(self, rec):
            self.boxes = [Box(50 + rng.normal(0, 6), 50 + rng.normal(0, 6), 20, 20) for _ in rec.gt]
            self.frame_seconds = [0.01] * len(rec)

    rep = ope_run(recs, Noisy)
    dump = [o for seq in rep["per_sequence"].values() for o in seq["os"]]
    manual = success_brute_force(dump, SUCCESS_THRESHOLDS)
    assert rep["curves"]["success"]["values"] == manual


def test_report_is_json_serialisable_with_missing_predictions():
    r = per_frame_metrics([None], [Box(1, 1, 1, 1)], "x")
    rep = build_report("t", "d", [r])
    json.dumps(rep, allow_nan=False)


def test_result_files_missing_sequence(tmp_path):
    recs = [_record("a", [Box(10, 10, 5, 5)] * 3), _record("b", [Box(10, 10, 5, 5)] * 3)]
    write_results(tmp_path / "a.txt", recs[0].gt, [1.0] * 3, [0.02] * 3)
    rep = evaluate_result_files(recs, tmp_path)
    assert rep["missing"] == ["b"]
    assert rep["auc"] == 20 / 21
    assert rep["fps"] == pytest.approx(50.0)


def test_compare_ordering_and_csv_round_trip():
    reps = [{"tracker": "low", "dataset": "d", "auc": 0.3, "precision_at_20": 0.5, "fps": 10.0},
            {"tracker": "high", "dataset": "d", "auc": 0.6, "precision_at_20": 0.7, "fps": None}]
    rows = compare_report(reps)
    assert [r["tracker"] for r in rows] == ["high", "low"]
    assert table_from_csv(table_to_csv(rows)) == rows
    assert len(compare_report(reps[:1])) == 1
    same = compare_report([reps[0], dict(reps[0])])
    assert same[0] == same[1]
    assert "high" in format_table(rows).splitlines()[2]
    with pytest.raises(ValueError):
        compare_report([])
