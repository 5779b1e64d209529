"""Naive reference evaluators used only by the tests.

The sweep evaluator re-runs matching from scratch for every score threshold,
with plain Python loops and a hand-written IoU, and reads the metrics off the
resulting operating points.
"""
import math


def iou_xyxy(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def greedy_counts(images, threshold, iou_thresh=0.5):
    """TP and FP counts using only detections scoring at least ``threshold``.

    ``images`` maps id -> (dets [(score, xyxy)], gts [(xyxy, ignore)]).
    """
    tp = fp = 0
    for dets, gts in images.values():
        kept = [(s, i, b) for i, (s, b) in enumerate(dets) if s >= threshold]
        kept.sort(key=lambda t: (-t[0], t[1]))
        used = [False] * len(gts)
        for _, _, box in kept:
            best, best_iou = None, -1.0
            for j, (g, ign) in enumerate(gts):
                if ign or used[j]:
                    continue
                v = iou_xyxy(box, g)
                if v > best_iou:
                    best, best_iou = j, v
            if best is not None and best_iou >= iou_thresh:
                used[best] = True
                tp += 1
            elif any(ign and iou_xyxy(box, g) >= iou_thresh for g, ign in gts):
                pass
            else:
                fp += 1
    return tp, fp


def sweep_metrics(images, iou_thresh=0.5):
    """(AP, MR^-2 percent, recall) from a brute-force threshold sweep."""
    n_gt = sum(1 for _, gts in images.values() for _, ign in gts if not ign)
    n_img = len(images)
    thresholds = sorted({s for dets, _ in images.values() for s, _ in dets}, reverse=True)
    points = [(0, 0)] + [greedy_counts(images, t, iou_thresh) for t in thresholds]

    pr = [(tp / n_gt, tp / (tp + fp) if tp + fp else 0.0) for tp, fp in points[1:]]
    ap = 0.0
    prev_r = 0.0
    for k, (r, _) in enumerate(pr):
        best_p = max(p for _, p in pr[k:])
        ap += (r - prev_r) * best_p
        prev_r = r

    logs = []
    for i in range(9):
        ref = 10.0 ** (-2.0 + 0.25 * i)
        mr = None
        for tp, fp in points:  # later points are more permissive
            if fp / n_img <= ref:
                mr = 1.0 - tp / n_gt
        logs.append(math.log(max(mr, 1e-10)))
    mr2 = math.exp(sum(logs) / 9) * 100.0
    rec = points[-1][0] / n_gt
    return ap, mr2, rec
