import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowddet.evalmetrics import (
    FP,
    IGNORED,
    TP,
    LabeledResults,
    average_precision,
    evaluate,
    load_detections,
    log_average_miss_rate,
    match_detections,
    metrics_report,
    recall,
    write_detections,
)
from crowddet.geometry import Annotation, BBox, iou
from oracles import sweep_metrics


def _ann(*xyxy, ignore=False):
    b = BBox(*xyxy)
    return Annotation(b, b, ignore=ignore)


def test_single_and_duplicate_detections():
    gt = [_ann(0, 0, 10, 20)]
    assert match_detections([(0.9, BBox(0, 0, 10, 20))], gt).labels.tolist() == [TP]
    m = match_detections([(0.4, BBox(0, 0, 10, 20)), (0.8, BBox(1, 0, 11, 20))], gt)
    assert m.labels.tolist() == [FP, TP]
    assert m.gt_matched.tolist() == [True]


def test_hand_labeled_three_images():
    gts = {
        "a": [_ann(0, 0, 10, 20), _ann(30, 0, 40, 20)],
        "b": [_ann(0, 0, 10, 20), _ann(50, 50, 70, 90, ignore=True)],
        "c": [],
    }
    dets = {
        # hits GT0; half-overlap with GT1 (IoU 1/3) is a miss; duplicate of GT0
        "a": [(0.9, BBox(0, 0, 10, 20)), (0.7, BBox(35, 0, 45, 20)), (0.5, BBox(0, 1, 10, 21))],
        # inside the ignore region; a good hit
        "b": [(0.6, BBox(52, 52, 70, 90)), (0.95, BBox(0, 0, 10, 19))],
        "c": [(0.3, BBox(0, 0, 5, 5))],
    }
    res = {k: match_detections(dets[k], gts[k]) for k in gts}
    assert res["a"].labels.tolist() == [TP, FP, FP]
    assert res["b"].labels.tolist() == [IGNORED, TP]
    assert res["c"].labels.tolist() == [FP]
    assert res["a"].gt_matched.tolist() == [True, False]
    assert res["b"].n_gt == 1
    pooled = evaluate(dets, gts)
    assert pooled.n_gt == 3 and pooled.n_images == 3
    assert recall(pooled) == pytest.approx(2 / 3)


def test_ap_trivial_cases():
    perfect = LabeledResults(np.array([0.9, 0.8]), np.array([TP, TP]), 2, 1)
    assert average_precision(perfect) == 1.0
    assert recall(perfect) == 1.0
    empty = LabeledResults(np.zeros(0), np.zeros(0, int), 3, 2)
    assert average_precision(empty) == 0.0
    assert recall(empty) == 0.0
    with pytest.raises(ValueError, match="AP undefined"):
        average_precision(LabeledResults(np.array([0.5]), np.array([FP]), 0, 1))
    with pytest.raises(ValueError):
        log_average_miss_rate(LabeledResults(np.array([0.5]), np.array([FP]), 0, 1))


def test_ap_hand_staircase():
    # TP, FP, TP over 3 GTs: points (1/3, 1), (1/3, 1/2), (2/3, 2/3)
    # envelope 1 on (0, 1/3], 2/3 on (1/3, 2/3]
    res = LabeledResults(np.array([0.9, 0.8, 0.7]), np.array([TP, FP, TP]), 3, 1)
    assert average_precision(res) == pytest.approx(1 / 3 + 1 / 3 * 2 / 3, abs=1e-15)


def test_mr_trivial_cases():
    perfect = LabeledResults(np.array([0.9, 0.8, 0.1]), np.array([TP, TP, FP]), 2, 1)
    assert log_average_miss_rate(perfect) == pytest.approx(1e-10 * 100, rel=1e-12)
    nothing = LabeledResults(np.array([0.9]), np.array([FP]), 4, 2)
    assert log_average_miss_rate(nothing) == 100.0
    assert log_average_miss_rate(LabeledResults(np.zeros(0), np.zeros(0, int), 4, 2)) == 100.0


def test_mr_hand_value():
    # 10 images, 2 GTs. TP at the top, then 5 FPs (fppi 0.1..0.5), then a TP
    labels = np.array([TP, FP, FP, FP, FP, FP, TP])
    scores = np.linspace(1, 0.1, 7)
    res = LabeledResults(scores, labels, 2, 10)
    # fppi refs 10^(-2 + i/4): 0.01..0.0562 only reach fppi 0 (miss 0.5);
    # 0.1, 0.178, 0.316 reach fp = 1, 1, 3 (miss 0.5); 0.562 and 1.0 reach
    # past the fifth FP to the second TP (miss 0, floored)
    logs = [np.log(0.5)] * 7 + [np.log(1e-10)] * 2
    assert log_average_miss_rate(res) == pytest.approx(np.exp(np.mean(logs)) * 100, rel=1e-12)


def _random_scene(rng, n_images=10):
    dets, gts, plain = {}, {}, {}
    for i in range(n_images):
        n_g = int(rng.integers(0, 5))
        g = []
        for _ in range(n_g):
            x, y = rng.uniform(0, 80, 2)
            w, h = rng.uniform(5, 20, 2)
            g.append((x, y, x + w, y + h, bool(rng.random() < 0.15)))
        d = []
        for gx0, gy0, gx1, gy1, _ in g:
            for _ in range(int(rng.integers(0, 3))):
                j = rng.normal(0, 2.0, 4)
                d.append((float(rng.random()), (gx0 + j[0], gy0 + j[1], gx1 + j[2], gy1 + j[3])))
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 80, 2)
            d.append((float(rng.random()), (x, y, x + 10, y + 15)))
        d = [(s, tuple(map(float, (min(b[0], b[2] - 1), min(b[1], b[3] - 1), b[2], b[3])))) for s, b in d]
        dets[i] = [(s, BBox(*b)) for s, b in d]
        gts[i] = [Annotation(BBox(*a[:4]), BBox(*a[:4]), ignore=a[4]) for a in g]
        plain[i] = ([(s, b) for s, b in d], [(a[:4], a[4]) for a in g])
    return dets, gts, plain


def test_matches_threshold_sweep_oracle_on_random_scenes():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 100:
        dets, gts, plain = _random_scene(rng)
        res = evaluate(dets, gts)
        if res.n_gt == 0:
            continue
        ap, mr2, rec = sweep_metrics(plain)
        assert average_precision(res) == pytest.approx(ap, abs=1e-9)
        assert log_average_miss_rate(res) == pytest.approx(mr2, abs=1e-9)
        assert recall(res) == pytest.approx(rec, abs=1e-9)
        checked += 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["cube", "exp", "affine", "logit"]))
def test_monotone_score_transform_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    dets, gts, _ = _random_scene(rng)
    res = evaluate(dets, gts)
    if res.n_gt == 0:
        return
    f = {
        "cube": lambda s: s**3,
        "exp": np.exp,
        "affine": lambda s: 0.25 * s + 0.5,
        "logit": lambda s: np.log((s + 1e-3) / (1 + 1e-3 - s)),
    }[kind]
    moved = LabeledResults(f(res.scores), res.labels, res.n_gt, res.n_images)
    assert average_precision(moved) == pytest.approx(average_precision(res), abs=1e-12)
    assert log_average_miss_rate(moved) == pytest.approx(log_average_miss_rate(res), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1))
def test_duplicate_detection_never_helps(seed, dup_score):
    rng = np.random.default_rng(seed)
    dets, gts, _ = _random_scene(rng)
    base = evaluate(dets, gts)
    if base.n_gt == 0:
        return
    # a duplicate that can only ever claim the GT its original holds
    for img, m in ((i, match_detections(dets[i], gts[i])) for i in dets):
        real = [g.fbox for g in gts[img] if not g.ignore]
        for h in np.flatnonzero(m.labels == TP):
            score, box = dets[img][h]
            if sum(iou(box, g) >= 0.5 for g in real) == 1:
                # ranked no higher than the original; a higher-ranked copy
                # would take the GT and push a TP up the ranking
                dets[img] = dets[img] + [(dup_score * score, box)]
                break
        else:
            continue
        break
    else:
        return
    more = evaluate(dets, gts)
    assert average_precision(more) <= average_precision(base) + 1e-12
    assert log_average_miss_rate(more) >= log_average_miss_rate(base) - 1e-12


def test_detection_jsonl_round_trip(tmp_path):
    dets = {"img1": [(0.5, BBox(1, 2, 4, 8))], "img2": [(0.25, BBox(0, 0, 1, 1)), (1.0, BBox(2, 2, 3, 5))]}
    path = tmp_path / "d.jsonl"
    write_detections(path, dets)
    first = json.loads(path.read_text().splitlines()[0])
    assert first == {"image_id": "img1", "score": 0.5, "box": [1.0, 2.0, 3.0, 6.0]}
    back = load_detections(path)
    assert back == dets
    path.write_text('{"image_id": 1, "score": 0.5}\n')
    with pytest.raises(ValueError):
        load_detections(path)


def test_report_is_json():
    res = LabeledResults(np.array([0.9, 0.8, 0.7]), np.array([TP, FP, TP]), 3, 2)
    rep = metrics_report(res)
    json.dumps(rep)
    assert set(rep) >= {"AP", "MR2", "recall", "curves"}
