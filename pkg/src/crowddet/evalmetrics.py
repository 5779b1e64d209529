"""Detection metrics: all-point AP, log-average miss rate over FPPI, recall.

Detections are matched greedily per image, highest score first; each
non-ignored GT absorbs at most one detection. A detection that overlaps no
free GT but does overlap an ignore region is dropped from the counts.
Operating points are taken at each distinct score, so tied scores enter the
curves together.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import Annotation, BBox, as_box_array, pairwise_iou

TP = 1
FP = 0
IGNORED = -1
MISS_RATE_FLOOR = 1e-10
FPPI_POINTS = np.logspace(-2.0, 0.0, 9)


@dataclass
class ImageMatch:
    labels: np.ndarray  # per detection, input order: TP / FP / IGNORED
    scores: np.ndarray
    gt_matched: np.ndarray  # per non-ignored GT
    n_gt: int


@dataclass
class LabeledResults:
    scores: np.ndarray
    labels: np.ndarray
    n_gt: int
    n_images: int


def _split_gts(gts):
    """(boxes, ignore flags) from Annotations, BBoxes or an (N, 4) array."""
    if isinstance(gts, np.ndarray):
        boxes = as_box_array(gts)
        return boxes, np.zeros(len(boxes), dtype=bool)
    items = list(gts)
    if not items:
        return np.zeros((0, 4)), np.zeros(0, dtype=bool)
    boxes, ignore = [], []
    for g in items:
        if isinstance(g, Annotation):
            boxes.append(g.fbox.as_array())
            ignore.append(g.ignore)
        else:
            boxes.append(BBox(*g).as_array() if not isinstance(g, BBox) else g.as_array())
            ignore.append(False)
    return np.array(boxes, dtype=np.float64), np.array(ignore, dtype=bool)


def _split_dets(dets):
    items = list(dets)
    if not items:
        return np.zeros(0), np.zeros((0, 4))
    scores = np.array([float(s) for s, _ in items], dtype=np.float64)
    boxes = as_box_array([b for _, b in items])
    if not np.all(np.isfinite(scores)):
        raise ValueError("detection scores must be finite")
    return scores, boxes


def match_detections(dets, gts, iou_thresh: float = 0.5) -> ImageMatch:
    """Greedy matching of one image's ``(score, box)`` detections to its GTs.

    A detection takes the free non-ignored GT it overlaps most with IoU at
    least ``iou_thresh``; failing that it is IGNORED if it reaches the
    threshold on an ignore-region GT, otherwise a false positive. Equal scores
    are processed in input order.
    """
    scores, boxes = _split_dets(dets)
    gt_boxes, ignore = _split_gts(gts)
    real = np.flatnonzero(~ignore)
    ign = np.flatnonzero(ignore)
    labels = np.full(len(scores), FP, dtype=np.int64)
    taken = np.zeros(len(real), dtype=bool)
    if len(scores) and len(gt_boxes):
        iou = pairwise_iou(boxes, gt_boxes)
        for d in np.argsort(-scores, kind="stable"):
            if len(real):
                cand = np.where(taken, -1.0, iou[d, real])
                best = int(np.argmax(cand))
                if cand[best] >= iou_thresh:
                    taken[best] = True
                    labels[d] = TP
                    continue
            if len(ign) and iou[d, ign].max() >= iou_thresh:
                labels[d] = IGNORED
    return ImageMatch(labels, scores, taken, len(real))


def evaluate(dets_by_image: dict, gts_by_image: dict, iou_thresh: float = 0.5) -> LabeledResults:
    """Match every image and pool the results. Images present in either
    mapping count towards the image total."""
    ids = sorted(set(dets_by_image) | set(gts_by_image), key=str)
    scores, labels = [], []
    n_gt = 0
    for i in ids:
        m = match_detections(dets_by_image.get(i, []), gts_by_image.get(i, []), iou_thresh)
        scores.append(m.scores)
        labels.append(m.labels)
        n_gt += m.n_gt
    s = np.concatenate(scores) if scores else np.zeros(0)
    lab = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    return LabeledResults(s, lab, n_gt, len(ids))


def _operating_points(res: LabeledResults):
    """Cumulative (TP, FP) at each distinct score, highest first, starting
    from the empty detection set."""
    keep = res.labels != IGNORED
    s = res.scores[keep]
    lab = res.labels[keep]
    order = np.argsort(-s, kind="stable")
    s = s[order]
    tp = np.cumsum(lab[order] == TP)
    fp = np.cumsum(lab[order] == FP)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True)) if len(s) else np.zeros(0, dtype=np.int64)
    return np.concatenate([[0], tp[ends]]), np.concatenate([[0], fp[ends]]), s[ends]


def pr_curve(res: LabeledResults):
    """(recall, precision, threshold) at each distinct score."""
    if res.n_gt == 0:
        raise ValueError("AP undefined: no ground truths")
    tp, fp, thr = _operating_points(res)
    tp, fp = tp[1:], fp[1:]
    return tp / res.n_gt, tp / np.maximum(tp + fp, 1), thr


def average_precision(res: LabeledResults) -> float:
    """Area under the precision envelope over recall (all points)."""
    recall_, precision, _ = pr_curve(res)
    if len(recall_) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall_]))
    return float(np.sum(steps * envelope))


def fppi_curve(res: LabeledResults):
    """(fppi, miss rate) at each operating point, including no detections."""
    if res.n_gt == 0:
        raise ValueError("miss rate undefined: no ground truths")
    if res.n_images < 1:
        raise ValueError("need at least one image")
    tp, fp, _ = _operating_points(res)
    return fp / res.n_images, 1.0 - tp / res.n_gt


def log_average_miss_rate(res: LabeledResults, n_images: int | None = None) -> float:
    """MR^-2 in percent: geometric mean of the miss rate at nine FPPI values
    log-spaced over [0.01, 1]. At each value the curve is read at the most
    permissive operating point whose FPPI does not exceed it."""
    if n_images is not None:
        res = LabeledResults(res.scores, res.labels, res.n_gt, n_images)
    fppi, mr = fppi_curve(res)
    sampled = []
    for ref in FPPI_POINTS:
        ok = np.flatnonzero(fppi <= ref)
        sampled.append(mr[ok[-1]])
    sampled = np.maximum(np.array(sampled), MISS_RATE_FLOOR)
    return float(np.exp(np.mean(np.log(sampled))) * 100.0)


def recall(res: LabeledResults) -> float:
    if res.n_gt == 0:
        raise ValueError("recall undefined: no ground truths")
    return float(np.sum(res.labels == TP) / res.n_gt)


def metrics_report(res: LabeledResults) -> dict:
    r, p, thr = pr_curve(res)
    f, mr = fppi_curve(res)
    return {
        "AP": average_precision(res),
        "MR2": log_average_miss_rate(res),
        "recall": recall(res),
        "n_gt": int(res.n_gt),
        "n_images": int(res.n_images),
        "curves": {
            "pr": {"recall": r.tolist(), "precision": p.tolist(), "threshold": thr.tolist()},
            "fppi": {"fppi": f.tolist(), "miss_rate": mr.tolist()},
        },
    }


def load_detections(path) -> dict:
    """Line-delimited JSON ``{image_id, score, box: [x, y, w, h]}`` grouped by image."""
    out: dict = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                x, y, w, h = (float(v) for v in rec["box"])
                item = (float(rec["score"]), BBox.from_xywh(x, y, w, h))
                out.setdefault(rec["image_id"], []).append(item)
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{n}: bad detection record ({e})") from e
    return out


def write_detections(path, dets_by_image: dict) -> None:
    with open(path, "w") as fh:
        for image_id, dets in dets_by_image.items():
            for score, box in dets:
                b = box if isinstance(box, BBox) else BBox(*box)
                fh.write(json.dumps({"image_id": image_id, "score": float(score), "box": list(b.to_xywh())}) + "\n")
