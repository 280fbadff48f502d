import numpy as np
import pytest

from xicpeak import detect
from xicpeak.data import Annotation
from xicpeak.detect import Detection


class TestThresholdMask:
    def test_default_half(self):
        p = np.array([0.1, 0.5, 0.9])
        assert detect.threshold_mask(p, 0.5).tolist() == [0, 1, 1]

    def test_lower_threshold_superset(self):
        p = np.random.default_rng(0).random(50)
        high = detect.threshold_mask(p, 0.5)
        low = detect.threshold_mask(p, 0.35)
        assert np.all(low >= high)

    def test_all_below(self):
        assert detect.threshold_mask(np.full(5, 0.1), 0.5).sum() == 0

    def test_invalid(self):
        with pytest.raises(ValueError):
            detect.threshold_mask(np.zeros(3), 0.0)


class TestExtractDetections:
    def test_worked_example(self):
        p = np.array([0, 0.9, 0.8, 0.7, 0, 0.6, 0.6, 0])
        dets = detect.extract_detections(p, 0.5)
        assert dets == [Detection(1, 3, pytest.approx(0.9))]

    def test_empty(self):
        assert detect.extract_detections(np.zeros(10) + 0.01, 0.5) == []

    def test_full_run(self):
        dets = detect.extract_detections(np.full(5, 0.8), 0.5)
        assert dets == [Detection(0, 4, pytest.approx(0.8))]

    def test_min_length_three(self):
        p = np.array([0.9, 0.9, 0, 0.9, 0.9, 0.9])
        dets = detect.extract_detections(p, 0.5)
        assert [(d.start, d.end) for d in dets] == [(3, 5)]


class TestIntervalIoU:
    def test_identical(self):
        assert detect.interval_iou((2, 6), (2, 6)) == 1.0

    def test_disjoint(self):
        assert detect.interval_iou((0, 3), (5, 9)) == 0.0

    def test_point_counting(self):
        assert detect.interval_iou((0, 9), (5, 14)) == pytest.approx(5 / 15)

    def test_symmetric_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = sorted(rng.integers(0, 30, 2))
            b = sorted(rng.integers(0, 30, 2))
            iou_ab = detect.interval_iou(tuple(a), tuple(b))
            iou_ba = detect.interval_iou(tuple(b), tuple(a))
            assert iou_ab == iou_ba
            assert 0 <= iou_ab <= 1
            assert (iou_ab == 1.0) == (a == b)


class TestMatching:
    def test_single_tp(self):
        dets = {"a": [Detection(2, 6, 0.9)]}
        truths = {"a": [Annotation(2, 6)]}
        flags, _, n, _ = detect.match_detections(dets, truths, 0.5)
        assert flags == [True] and n == 1

    def test_duplicate_detection(self):
        dets = {"a": [Detection(2, 6, 0.9), Detection(2, 7, 0.8)]}
        truths = {"a": [Annotation(2, 6)]}
        flags, scores, _, _ = detect.match_detections(dets, truths, 0.5)
        assert flags == [True, False]
        assert scores == [0.9, 0.8]

    def test_low_iou_fp(self):
        dets = {"a": [Detection(0, 2, 0.9)]}
        truths = {"a": [Annotation(10, 14)]}
        flags, _, _, _ = detect.match_detections(dets, truths, 0.3)
        assert flags == [False]


class TestAveragePrecision:
    def test_perfect(self):
        assert detect.average_precision([True], 1) == 1.0

    def test_no_detections(self):
        assert detect.average_precision([], 3) == 0.0

    def test_worked_pr_curve(self):
        ap = detect.average_precision([True, False, True], 2)
        assert ap == pytest.approx(0.5 * 1 + 0.5 * (2 / 3))

    def test_score_transform_invariance(self):
        # AP only depends on ordering, so any strictly increasing transform
        # of the scores leaves the result unchanged
        rng = np.random.default_rng(0)
        truths = {"x": [Annotation(0, 5), Annotation(10, 15)]}
        dets = {"x": [Detection(0, 4, 0.9), Detection(9, 14, 0.4), Detection(20, 24, 0.6)]}
        def run(transform):
            d2 = {k: [Detection(d.start, d.end, transform(d.score)) for d in v]
                  for k, v in dets.items()}
            flags, _, n, _ = detect.match_detections(d2, truths, 0.5)
            return detect.average_precision(flags, n)
        assert run(lambda s: s) == run(lambda s: s**3 + 2)


class TestAverageRecall:
    def test_all_matched(self):
        assert detect.average_recall({"a": [True, True]}, 2, 5) == 1.0

    def test_no_detections(self):
        assert detect.average_recall({"a": [False] * 4}, 4, 0) == 0.0

    def test_partial(self):
        assert detect.average_recall({"a": [True, True, True, False]}, 4, 4) == 0.75

    def test_empty_truths_convention(self):
        assert detect.average_recall({}, 0, 0) == 1.0
        assert detect.average_recall({}, 0, 2) == 0.0


# ---------------------------------------------------------------------------
# independent brute-force evaluator used as an oracle
# ---------------------------------------------------------------------------

def brute_force_evaluate(probs_by_id, truths_by_id, theta, iou_t, top1=False):
    """Slow reference evaluator written against the definitions only:
    python loops, set-based interval intersection, direct PR-curve scan."""
    all_dets = []
    for xic_id, probs in probs_by_id.items():
        runs = []
        cur = []
        for i, p in enumerate(list(probs) + [0.0]):
            if p >= theta:
                cur.append(i)
            else:
                if len(cur) >= 3:
                    runs.append((cur[0], cur[-1], max(probs[cur[0]:cur[-1] + 1])))
                cur = []
        if top1 and runs:
            runs = [max(runs, key=lambda r: (r[2], -r[0]))]
        for start, end, score in runs:
            all_dets.append((xic_id, start, end, score))

    all_dets.sort(key=lambda d: (-d[3], d[1], d[0]))
    used = {xic_id: set() for xic_id in truths_by_id}
    flags = []
    for xic_id, start, end, _ in all_dets:
        points = set(range(start, end + 1))
        best = (0.0, None)
        for j, truth in enumerate(truths_by_id[xic_id]):
            if j in used[xic_id]:
                continue
            tpoints = set(range(truth.left, truth.right + 1))
            inter = len(points & tpoints)
            union = len(points | tpoints)
            iou = inter / union if union else 0.0
            if iou > best[0]:
                best = (iou, j)
        if best[1] is not None and best[0] >= iou_t:
            used[xic_id].add(best[1])
            flags.append(True)
        else:
            flags.append(False)

    n_truths = sum(len(t) for t in truths_by_id.values())
    if n_truths == 0:
        ap = 0.0
        rec = 1.0 if not all_dets else 0.0
    elif not flags:
        ap, rec = 0.0, 0.0
    else:
        ap = 0.0
        tp = 0
        precisions, recalls = [], []
        for i, f in enumerate(flags, 1):
            tp += int(f)
            precisions.append(tp / i)
            recalls.append(tp / n_truths)
        prev_r = 0.0
        for i in range(len(flags)):
            max_p = max(precisions[i:])
            ap += (recalls[i] - prev_r) * max_p
            prev_r = recalls[i]
        rec = sum(len(u) for u in used.values()) / n_truths
    return ap, rec


def random_instance(rng, n_xics):
    length = 40
    probs, truths = {}, {}
    for i in range(n_xics):
        xic_id = f"x{i}"
        p = np.zeros(length)
        for _ in range(rng.integers(0, 6)):
            start = int(rng.integers(0, length - 3))
            width = int(rng.integers(1, 8))
            p[start:start + width] = rng.uniform(0.5, 1.0)
        probs[xic_id] = p
        anns = []
        for _ in range(rng.integers(0, 4)):
            left = int(rng.integers(0, length - 2))
            right = min(length - 1, left + int(rng.integers(0, 9)))
            anns.append(Annotation(left, right))
        truths[xic_id] = anns
    return probs, truths


@pytest.mark.parametrize("top1", [False, True])
def test_evaluate_matches_brute_force(top1):
    rng = np.random.default_rng(42)
    for trial in range(100):
        probs, truths = random_instance(rng, int(rng.integers(1, 11)))
        theta = 0.5
        report = detect.evaluate(probs, truths, theta=theta, top1=top1)
        for iou_t in report.iou_thresholds:
            ap_ref, rec_ref = brute_force_evaluate(probs, truths, theta, iou_t, top1=top1)
            assert report.ap[iou_t] == pytest.approx(ap_ref, abs=1e-12), (trial, iou_t)
            assert report.recall[iou_t] == pytest.approx(rec_ref, abs=1e-12), (trial, iou_t)


class TestEvaluate:
    def _perfect(self):
        truth_mask = np.zeros(30, dtype=np.uint8)
        truth_mask[5:12] = 1
        probs = truth_mask.astype(float)
        return {"a": probs}, {"a": truth_mask}

    def test_perfect_predictor(self):
        probs, truths = self._perfect()
        # probabilities of exactly 1.0 are excluded by theta<1; use 0.99
        probs = {k: v * 0.99 for k, v in probs.items()}
        report = detect.evaluate(probs, truths, theta=0.5)
        assert report.mean_ap == 1.0
        assert report.mean_ar == 1.0

    def test_constant_zero_predictor(self):
        report = detect.evaluate({"a": np.zeros(30)},
                                 {"a": detect.mask_to_annotations(np.ones(5, dtype=np.uint8))
                                  and [Annotation(2, 8)]}, theta=0.5)
        assert report.mean_ap == 0.0

    def test_id_mismatch(self):
        with pytest.raises(ValueError):
            detect.evaluate({"a": np.zeros(5)}, {"b": []})

    def test_iou_threshold_grid(self):
        probs, truths = self._perfect()
        report = detect.evaluate({k: v * 0.9 for k, v in probs.items()}, truths)
        np.testing.assert_allclose(report.iou_thresholds,
                                   np.arange(0.30, 0.701, 0.05), atol=1e-9)
        assert len(report.iou_thresholds) == 9

    def test_top1_caps_detection_count(self):
        p = np.zeros(40)
        p[2:8] = 0.9
        p[20:26] = 0.8
        dets = detect.extract_detections(p, 0.5)
        assert len(dets) == 2
        report = detect.evaluate({"a": p}, {"a": [Annotation(2, 7)]}, top1=True)
        assert report.mean_ap == 1.0  # only the top detection is kept, and it is correct

    def test_report_json_round_trip(self):
        probs, truths = self._perfect()
        report = detect.evaluate({k: v * 0.9 for k, v in probs.items()}, truths)
        back = detect.EvalReport.from_json(report.to_json())
        assert back.mean_ap == report.mean_ap
        assert back.ap == report.ap


class TestTuneThreshold:
    def test_single_candidate(self):
        p = np.zeros(20)
        p[3:9] = 0.9
        assert detect.tune_threshold({"a": p}, {"a": [Annotation(3, 8)]}, grid=(0.5,)) == 0.5

    def test_perfect_predictor_tie_rule(self):
        p = np.zeros(20)
        p[3:9] = 0.99
        theta = detect.tune_threshold({"a": p}, {"a": [Annotation(3, 8)]},
                                      grid=(0.2, 0.5, 0.8))
        assert theta == 0.2

    def test_empty_validation(self):
        with pytest.raises(ValueError):
            detect.tune_threshold({}, {})

    def test_picks_better_threshold(self):
        # a weak peak at 0.4 only becomes a detection below theta=0.4
        p = np.zeros(30)
        p[3:9] = 0.45
        truths = {"a": [Annotation(3, 8)]}
        theta = detect.tune_threshold({"a": p}, truths, grid=(0.35, 0.5))
        assert theta == 0.35


def test_detections_csv_round_trip():
    dets = {"a": [Detection(1, 5, 0.75), Detection(8, 12, 0.5)], "b": []}
    text = detect.detections_to_csv(dets)
    back = detect.detections_from_csv(text)
    assert back["a"] == [Detection(1, 5, 0.75), Detection(8, 12, 0.5)]
