import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch

from vistr.evaluation import (
    IOU_THRESHOLDS,
    InstanceResult,
    ResultsFormatError,
    average_precision,
    evaluate,
    evaluate_dataset,
    evaluate_detailed,
    postprocess,
    results_from_json,
    results_to_json,
    sequence_mask_iou,
    truths_by_video,
)
from vistr.structures import PredictionSet
from vistr.synthdata import load_annotations

PAIR = Path(__file__).parent / "fixtures" / "eval_pair"


@pytest.fixture(scope="module")
def pair():
    dataset = load_annotations(PAIR / "annotations.json")
    videos = {v.id: (v.T, v.height, v.width) for v in dataset.videos}
    results = results_from_json(json.loads((PAIR / "results.json").read_text()), videos)
    expected = json.loads((PAIR / "expected.json").read_text())
    return dataset, results, expected


def frac(s):
    return Fraction(s)


class TestFixturePair:
    def test_video_ious(self, pair):
        dataset, results, expected = pair
        gts = {(a.video_id, a.class_id): a.masks for a in dataset.annotations}
        for r in results:
            key = f"{r.video_id}/{r.score} vs {r.video_id}/{r.category}"
            iou = sequence_mask_iou(r.masks, gts[r.video_id, r.category])
            assert iou == float(frac(expected["video_iou"][key]))

    def test_ap_per_threshold_exact(self, pair):
        dataset, results, expected = pair
        detail = evaluate_detailed(results, truths_by_video(dataset), [0, 1, 2])
        want = {
            (int(c), Fraction(t)): frac(v) for c, table in expected["ap"].items() for t, v in table.items()
        }
        assert detail["ap"] == want

    def test_report(self, pair):
        dataset, results, expected = pair
        report = evaluate_dataset(results, dataset)
        for key, value in expected["report"].items():
            assert getattr(report, key) == float(frac(value)), key

    def test_result_order_is_irrelevant(self, pair):
        dataset, results, _ = pair
        a = evaluate_dataset(results, dataset)
        b = evaluate_dataset(results[::-1], dataset)
        assert a == b


def square_video(T=3, H=8, W=8, x0=0):
    m = np.zeros((T, H, W), dtype=bool)
    m[:, 2:5, x0 : x0 + 3] = True
    return m


class TestEvaluate:
    def test_perfect(self):
        truths = {"v": [(0, square_video()), (1, square_video(x0=4))]}
        results = [InstanceResult(c, 0.9, m, "v") for c, m in truths["v"]]
        report = evaluate(results, truths, [0, 1])
        assert (report.AP, report.AP50, report.AP75, report.AR1, report.AR10) == (1, 1, 1, 1, 1)

    def test_no_predictions(self):
        report = evaluate([], {"v": [(0, square_video())]}, [0])
        assert (report.AP, report.AP50, report.AP75, report.AR1, report.AR10) == (0, 0, 0, 0, 0)

    def test_duplicate_is_false_positive(self):
        truths = {"v": [(0, square_video())]}
        results = [InstanceResult(0, 0.9, square_video(), "v"), InstanceResult(0, 0.8, square_video(), "v")]
        assert evaluate(results, truths, [0]).AP == 1.0  # interpolated precision stays 1 until recall 1
        results[0].score = 0.7
        assert evaluate(results, truths, [0]).AP == 1.0

    def test_wrong_category_never_matches(self):
        truths = {"v": [(0, square_video())]}
        assert evaluate([InstanceResult(1, 0.9, square_video(), "v")], truths, [0, 1]).AP == 0

    def test_unknown_video_or_category(self):
        truths = {"v": [(0, square_video())]}
        with pytest.raises(ResultsFormatError, match="video"):
            evaluate([InstanceResult(0, 0.5, square_video(), "w")], truths, [0])
        with pytest.raises(ResultsFormatError, match="category"):
            evaluate([InstanceResult(5, 0.5, square_video(), "v")], truths, [0])

    def test_thresholds(self):
        assert [float(t) for t in IOU_THRESHOLDS] == pytest.approx([0.5 + 0.05 * i for i in range(10)])

    def test_average_precision_interpolation(self):
        assert average_precision([False, True, True], 2) == Fraction(2, 3)
        # precision 1 up to recall 1/2 (51 points), then 2/3 (50 points)
        assert average_precision([True, False, True], 2) == (51 + Fraction(2, 3) * 50) / 101
        assert average_precision([False, True], 2) == Fraction(51, 202)
        assert average_precision([], 3) == 0


class TestSequenceIoU:
    def test_identical_and_disjoint(self):
        m = square_video()
        assert sequence_mask_iou(m, m) == 1
        assert sequence_mask_iou(m, square_video(x0=5)) == 0

    def test_frame_summed(self):
        # frame 1: inter 2, union 4; frame 2: inter 1, union 3
        a = np.zeros((2, 1, 4), dtype=bool)
        b = np.zeros((2, 1, 4), dtype=bool)
        a[0, 0, :3] = True
        b[0, 0, 1:4] = True
        a[1, 0, :2] = True
        b[1, 0, 1:3] = True
        assert sequence_mask_iou(a, b) == 3 / 7

    def test_both_empty(self):
        z = np.zeros((2, 3, 3), dtype=bool)
        assert sequence_mask_iou(z, z) == 1


def prediction_set(probs_per_frame, n=1):
    """Logits whose softmax equals the given per-frame distributions (prediction j = frame j // n)."""
    p = torch.tensor(probs_per_frame, dtype=torch.float64)
    return PredictionSet(p.log(), torch.full((p.shape[0], 4), 0.5), n, p.shape[0] // n)


class TestPostprocess:
    def test_confident_class(self):
        preds = prediction_set([[0.02, 0.02, 0.02, 0.9, 0.04]] * 3)
        (r,) = postprocess(preds, torch.ones(1, 3, 2, 2), (4, 4), "v")
        assert r.category == 3
        assert r.score == pytest.approx(0.9)
        assert r.masks.shape == (3, 4, 4) and r.masks.all()

    def test_majority_vote(self):
        frames = [[0.1, 0.6, 0.2, 0.1], [0.1, 0.5, 0.3, 0.1], [0.1, 0.2, 0.6, 0.1]]
        (r,) = postprocess(prediction_set(frames), torch.zeros(1, 3, 2, 2), (2, 2))
        assert r.category == 1
        assert r.score == pytest.approx((0.6 + 0.5 + 0.2) / 3)
        assert not r.masks.any()

    def test_vote_tie_goes_to_lower_id(self):
        frames = [[0.1, 0.1, 0.7, 0.1], [0.1, 0.7, 0.1, 0.1]]
        (r,) = postprocess(prediction_set(frames), torch.zeros(1, 2, 2, 2), (2, 2))
        assert r.category == 1

    def test_low_score_dropped(self):
        frames = [[0.0005, 0.0005, 0.999]] * 2
        assert postprocess(prediction_set(frames), torch.zeros(1, 2, 2, 2), (2, 2)) == []

    def test_at_most_n_results(self):
        g = torch.Generator().manual_seed(0)
        preds = PredictionSet(torch.randn(5 * 2, 4, generator=g), torch.rand(10, 4, generator=g), 5, 2)
        out = postprocess(preds, torch.randn(5, 2, 3, 3, generator=g), (6, 6), "v")
        assert len(out) <= 5
        assert [r.sequence for r in out] == sorted(r.sequence for r in out)


class TestResultsFiles:
    def test_round_trip(self, pair):
        _, results, _ = pair
        back = results_from_json(json.loads(json.dumps(results_to_json(results))), {"A": (2, 4, 5), "B": (2, 4, 5)})
        assert [(r.video_id, r.category, r.score) for r in back] == [(r.video_id, r.category, r.score) for r in results]
        for a, b in zip(back, results):
            assert np.array_equal(a.masks, b.masks)

    @pytest.mark.parametrize(
        "doc, match",
        [
            ({}, "array"),
            ([{"video_id": "A", "score": 1, "rle_masks": []}], "category_id"),
            ([{"video_id": "Z", "category_id": 0, "score": 1, "rle_masks": []}], "unknown video"),
            ([{"video_id": "A", "category_id": 0, "score": 1, "rle_masks": [[20]]}], "frames"),
            ([{"video_id": "A", "category_id": 0, "score": 1, "rle_masks": [[20], [3]]}], "rle_masks"),
        ],
    )
    def test_bad_documents(self, doc, match):
        with pytest.raises(ResultsFormatError, match=match):
            results_from_json(doc, {"A": (2, 4, 5)})
