from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorctx.dataset import FrameRecord
from anchorctx.errors import ConfigurationError, ValidationError
from anchorctx.metrics import (
    SUMMARY_FIELDS,
    ConfidenceInstance,
    Detection,
    average_precision,
    confidence_csv,
    confidence_instances,
    confidence_report,
    iou,
    map_suite,
    match_and_ap,
    metrics_csv,
    per_class_ap,
    pooled_iw,
)

_EMPTY = np.zeros((1, 1, 1))


def _frames(gts_by_frame):
    return [FrameRecord("v", t, _EMPTY, (), tuple(g), "test") for t, g in sorted(gts_by_frame.items())]


# -- exact oracle -------------------------------------------------------------------


def _iou_exact(a, b):
    a = [Fraction(v) for v in a]
    b = [Fraction(v) for v in b]
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _oracle_ap(dets, gts, tau):
    """PR staircase by brute force: re-match every ranked prefix from scratch."""
    n_gt = sum(len(v) for v in gts.values())
    ranked = sorted(dets, key=lambda d: (-d.score, d.frame, d.box))
    points = []
    for k in range(1, len(ranked) + 1):
        used = set()
        tp = 0
        for d in ranked[:k]:
            cands = [(_iou_exact(d.box, g), j) for j, g in enumerate(gts.get(d.frame, [])) if (d.frame, j) not in used]
            cands = [(o, j) for o, j in cands if o >= Fraction(tau).limit_denominator(1000)]
            if cands:
                best = max(o for o, _ in cands)
                j = min(j for o, j in cands if o == best)
                used.add((d.frame, j))
                tp += 1
        points.append((Fraction(tp, n_gt), Fraction(tp, k)))
    # area under p_interp(r) = max precision at any recall >= r
    ap = Fraction(0)
    prev_r = Fraction(0)
    for r in sorted({r for r, _ in points if r > 0}):
        ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
        prev_r = r
    return ap


def _random_case(rng):
    n_frames = int(rng.integers(1, 3))
    K = int(rng.integers(1, 4))

    def box():
        x, y = rng.integers(0, 3, size=2)
        w, h = rng.integers(1, 3, size=2)
        return (float(x), float(y), float(x + w), float(y + h))

    gts = {t: [(box(), int(rng.integers(0, K)))] * 0 for t in range(1, n_frames + 1)}
    for _ in range(int(rng.integers(1, 4))):
        gts[int(rng.integers(1, n_frames + 1))].append((box(), int(rng.integers(0, K))))
    preds = []
    for _ in range(int(rng.integers(0, 6))):
        # coarse scores so ties (and the tie-break rule) are exercised
        scores = [float(rng.integers(0, 4)) / 4 for _ in range(K)]
        preds.append({"video_id": "v", "t": int(rng.integers(1, n_frames + 1)), "box": box(), "scores": scores})
    return gts, preds, K


class TestIoU:
    def test_identical(self):
        assert iou((0, 0, 2, 3), (0, 0, 2, 3)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_touching_edges(self):
        assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0

    def test_half_shift(self):
        assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(ValidationError):
            iou((1, 0, 1, 2), (0, 0, 1, 1))


class TestAveragePrecision:
    def test_perfect(self):
        gts = {("v", 1): [(0, 0, 1, 1)], ("v", 2): [(0, 0, 1, 1)]}
        dets = [Detection(("v", 1), (0, 0, 1, 1), 0.9), Detection(("v", 2), (0, 0, 1, 1), 0.8)]
        assert match_and_ap(dets, gts, 0.5) == 1.0

    def test_no_detections(self):
        assert match_and_ap([], {("v", 1): [(0, 0, 1, 1)]}, 0.5) == 0.0

    def test_no_ground_truth_is_undefined(self):
        assert match_and_ap([Detection(("v", 1), (0, 0, 1, 1), 0.9)], {}, 0.5) is None

    def test_middle_hit(self):
        # ranking F, T, F with two ground truths: one PR point (1/2, 1/2)
        gts = {("v", 1): [(0, 0, 1, 1)], ("v", 2): [(5, 5, 6, 6)]}
        dets = [
            Detection(("v", 1), (3, 3, 4, 4), 0.9),
            Detection(("v", 1), (0, 0, 1, 1), 0.8),
            Detection(("v", 2), (0, 0, 1, 1), 0.7),
        ]
        assert match_and_ap(dets, gts, 0.5) == 0.25
        assert _oracle_ap(dets, gts, 0.5) == Fraction(1, 4)

    def test_duplicate_detection_is_false_positive(self):
        gts = {("v", 1): [(0, 0, 1, 1)]}
        dets = [Detection(("v", 1), (0, 0, 1, 1), 0.9), Detection(("v", 1), (0, 0, 1, 1), 0.8)]
        assert match_and_ap(dets, gts, 0.5) == 1.0
        dets = [Detection(("v", 1), (0, 0, 1, 1), 0.7), Detection(("v", 1), (0, 0, 1, 1), 0.8)]
        assert match_and_ap(dets, gts, 0.5) == 1.0

    def test_tie_prefers_lower_frame(self):
        gts = {("v", 2): [(0, 0, 1, 1)]}
        dets = [Detection(("v", 2), (0, 0, 1, 1), 0.5), Detection(("v", 1), (0, 0, 1, 1), 0.5)]
        # the miss on frame 1 ranks first, so precision at full recall is 1/2
        assert match_and_ap(dets, gts, 0.5) == 0.5

    def test_invalid_tau(self):
        with pytest.raises(ValueError):
            match_and_ap([], {("v", 1): [(0, 0, 1, 1)]}, 0.0)

    def test_average_precision_requires_ground_truth(self):
        with pytest.raises(ValueError):
            average_precision([True], 0)

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(2024)
        checked = 0
        for _ in range(600):
            gts_by_frame, preds, K = _random_case(rng)
            frames = _frames(gts_by_frame)
            table = per_class_ap(preds, frames, K, thresholds=(0.1, 0.3, 0.5))
            for tau, row in table.items():
                for k in range(K):
                    gts = {("v", t): [b for b, c in g if c == k] for t, g in gts_by_frame.items()}
                    gts = {key: v for key, v in gts.items() if v}
                    dets = [Detection(("v", p["t"]), tuple(p["box"]), p["scores"][k]) for p in preds]
                    if not gts:
                        assert k not in row
                        continue
                    assert row[k] == float(_oracle_ap(dets, gts, tau))
                    checked += 1
        assert checked >= 500


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_threshold(self, seed):
        gts_by_frame, preds, K = _random_case(np.random.default_rng(seed))
        table = per_class_ap(preds, _frames(gts_by_frame), K, thresholds=(0.1, 0.3, 0.5, 0.7, 0.9))
        for k in table[0.1]:
            aps = [table[t][k] for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
            assert all(a >= b - 1e-15 for a, b in zip(aps, aps[1:]))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_low_false_positive_never_helps(self, seed):
        rng = np.random.default_rng(seed)
        gts = {("v", 1): [(0.0, 0.0, 1.0, 1.0), (2.0, 2.0, 3.0, 3.0)]}
        dets = [Detection(("v", 1), (float(x), float(x), float(x) + 1, float(x) + 1), float(s))
                for x, s in zip(rng.integers(0, 4, 4), rng.uniform(0.2, 1.0, 4))]
        base = match_and_ap(dets, gts, 0.5)
        worse = match_and_ap(dets + [Detection(("v", 1), (7.0, 7.0, 8.0, 8.0), 0.1)], gts, 0.5)
        assert worse <= base
        # a perfect, confident detection of an unmatched ground truth never hurts
        better = match_and_ap(dets + [Detection(("v", 2), (0.0, 0.0, 1.0, 1.0), 2.0)],
                              {**gts, ("v", 2): [(0.0, 0.0, 1.0, 1.0)]}, 0.5)
        assert better >= match_and_ap(dets, {**gts, ("v", 2): [(0.0, 0.0, 1.0, 1.0)]}, 0.5)


class TestMapSuite:
    def test_perfect_predictions(self):
        frames = _frames({1: [((0.0, 0.0, 2.0, 2.0), 0)], 2: [((1.0, 1.0, 3.0, 3.0), 1)]})
        preds = [{"video_id": "v", "t": f.t, "box": f.ground_truth[0][0],
                  "scores": [1.0 if k == f.ground_truth[0][1] else 0.0 for k in range(2)]} for f in frames]
        assert map_suite(preds, frames, 2) == {k: 1.0 for k in SUMMARY_FIELDS}

    def test_field_set(self):
        frames = _frames({1: [((0.0, 0.0, 2.0, 2.0), 0)]})
        assert tuple(map_suite([], frames, 1)) == ("mAP10", "mAP30", "mAP50", "mAPmean")

    def test_threshold_arithmetic(self):
        # IoU exactly 0.4: counted at 0.1 and 0.3 but not 0.5
        frames = _frames({1: [((0.0, 0.0, 5.0, 1.0), 0)]})
        preds = [{"video_id": "v", "t": 1, "box": (0.0, 0.0, 2.0, 1.0), "scores": [0.9]}]
        out = map_suite(preds, frames, 1)
        assert out["mAP10"] == 1.0 and out["mAP30"] == 1.0 and out["mAP50"] == 0.0
        assert out["mAPmean"] == pytest.approx(2 / 3, abs=1e-15)

    def test_class_without_ground_truth_is_excluded(self):
        frames = _frames({1: [((0.0, 0.0, 1.0, 1.0), 0)]})
        preds = [{"video_id": "v", "t": 1, "box": (0.0, 0.0, 1.0, 1.0), "scores": [0.9, 0.8, 0.7]}]
        assert map_suite(preds, frames, 3)["mAPmean"] == 1.0

    def test_refined_records_rank_by_mean_scores(self):
        frames = _frames({1: [((0.0, 0.0, 1.0, 1.0), 1)]})
        preds = [{"video_id": "v", "t": 1, "box": (0.0, 0.0, 1.0, 1.0), "mean_scores": [0.1, 0.9]}]
        assert map_suite(preds, frames, 2)["mAP50"] == 1.0

    def test_empty_dataset(self):
        with pytest.raises(ConfigurationError):
            map_suite([], [], 2)

    def test_unknown_frame(self):
        with pytest.raises(ValidationError):
            map_suite([{"video_id": "w", "t": 1, "box": (0, 0, 1, 1), "scores": [1.0]}],
                      _frames({1: [((0.0, 0.0, 1.0, 1.0), 0)]}), 1)

    def test_csv_layout(self):
        table = {0.1: {0: 1.0}, 0.3: {0: 0.5}, 0.5: {0: 0.25}}
        text = metrics_csv(table, {"mAP10": 1.0, "mAP30": 0.5, "mAP50": 0.25, "mAPmean": 0.5833333333}, ["cut"])
        lines = text.splitlines()
        assert lines[0] == "threshold,class,AP"
        assert lines[1:4] == ["0.1,cut,1.000000", "0.3,cut,0.500000", "0.5,cut,0.250000"]
        assert lines[4] == ""
        assert lines[5] == "mAP10,mAP30,mAP50,mAPmean"
        assert lines[6] == "1.000000,0.500000,0.250000,0.583333"


class TestConfidenceReport:
    def test_single_class_row(self):
        rows = confidence_report(
            [ConfidenceInstance(0, 0, [0.01, 0.5]), ConfidenceInstance(0, 1, [0.03, 0.5])], ["grasp", "cut"]
        )
        (r,) = rows
        assert (r.instances, r.accuracy) == (2, 0.5)
        assert r.mean_iw_correct == pytest.approx(1.0, abs=1e-12)
        assert r.mean_iw_incorrect == pytest.approx(3.0, abs=1e-12)
        assert r.n_correct + r.n_incorrect == r.instances

    def test_all_correct_has_empty_incorrect_column(self):
        rows = confidence_report([ConfidenceInstance(0, 0, [0.2])], ["grasp"])
        assert rows[0].mean_iw_incorrect is None
        assert confidence_csv(rows).splitlines()[1] == "grasp,1,1.0000,20.0000,1,NA,0"

    def test_sorted_by_accuracy_and_recount(self):
        rng = np.random.default_rng(5)
        insts = [ConfidenceInstance(int(t), int(p), list(rng.uniform(0, 1, 3)))
                 for t, p in zip(rng.integers(0, 3, 200), rng.integers(0, 3, 200))]
        rows = confidence_report(insts, ["a", "b", "c"])
        assert [r.accuracy for r in rows] == sorted((r.accuracy for r in rows), reverse=True)
        for r in rows:
            k = "abc".index(r.class_name)
            mine = [i for i in insts if i.true_class == k]
            assert abs(r.accuracy - sum(i.predicted_class == k for i in mine) / len(mine)) < 1e-12
            assert r.n_correct + r.n_incorrect == r.instances == len(mine)

    def test_csv_header_mirrors_table_columns(self):
        header = confidence_csv([]).splitlines()[0]
        assert header == "class,instances,accuracy,mean_iw_correct,n_correct,mean_iw_incorrect,n_incorrect"

    def test_instances_from_refined_predictions(self):
        frames = _frames({1: [((0.0, 0.0, 2.0, 2.0), 1), ((4.0, 4.0, 6.0, 6.0), 0)]})
        preds = [
            {"video_id": "v", "t": 1, "box": (0.0, 0.0, 2.0, 2.0), "refined_class": 1,
             "mean_scores": [0.1, 0.9], "iw": [0.3, 0.1]},
            {"video_id": "v", "t": 1, "box": (4.2, 4.0, 6.2, 6.0), "refined_class": 1,
             "mean_scores": [0.4, 0.6], "iw": [0.7, 0.2]},
            {"video_id": "v", "t": 1, "box": (9.0, 9.0, 10.0, 10.0), "refined_class": 0,
             "mean_scores": [0.9, 0.1], "iw": [0.0, 0.0]},
        ]
        out = confidence_instances(preds, frames)
        assert sorted((i.true_class, i.predicted_class, i.iw[i.true_class]) for i in out) == [(0, 1, 0.7), (1, 1, 0.1)]
        good, bad = pooled_iw(out)
        assert good == pytest.approx(10.0) and bad == pytest.approx(70.0)
