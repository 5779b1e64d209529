"""Instance generators and the exact vs Fast-KM timing harness."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .assignment import build_match_cost, solve_exact, solve_fast_km

CSV_FIELDS = ["instance_id", "N_q", "N_g", "k", "time_exact_ns", "time_fast_ns", "certificate"]


@dataclass
class MatchInstance:
    probs: np.ndarray
    pred_boxes: np.ndarray
    gt_boxes: np.ndarray


def _person_boxes(rng, n, frame, clustered: bool):
    fw, fh = frame
    h = rng.uniform(0.08, 0.3, n) * fh
    w = h / rng.uniform(2.2, 2.8, n)
    if clustered:
        # people stand along a few horizontal lines, bunched into groups
        n_lines = max(1, int(rng.integers(2, 5)))
        base_y = rng.uniform(0.3 * fh, 0.95 * fh, n_lines)
        line = rng.integers(0, n_lines, n)
        n_groups = max(1, n // 6)
        group_x = rng.uniform(0.05 * fw, 0.95 * fw, n_groups)
        gx = group_x[rng.integers(0, n_groups, n)] + rng.normal(0, 0.04 * fw, n)
        bottom = base_y[line] + rng.normal(0, 0.02 * fh, n)
        cx = gx
    else:
        cx = rng.uniform(0, fw, n)
        bottom = rng.uniform(0.2 * fh, fh, n)
    x0 = np.clip(cx - w / 2, 0, fw - w)
    y1 = np.clip(bottom, h, fh)
    return np.stack([x0, y1 - h, x0 + w, y1], axis=1)


def clustered_instance(rng, n_pred: int, n_gt: int, frame=(1333.0, 800.0), jitter: float = 0.12) -> MatchInstance:
    """Crowd-like detector output: several jittered predictions per person plus clutter.

    Boxes are returned in coordinates normalized by the frame size.
    """
    gt = _person_boxes(rng, n_gt, frame, clustered=True)
    return detections_around(rng, gt, n_pred, frame, jitter)


def detections_around(rng, gt: np.ndarray, n_pred: int, frame=(1333.0, 800.0), jitter: float = 0.12) -> MatchInstance:
    """Simulated detector output for pixel GT boxes ``gt``: jittered copies
    (every GT gets at least one while predictions last) plus clutter."""
    n_gt = len(gt)
    if n_gt == 0:
        raise ValueError("need at least one ground-truth box")
    n_near = min(n_pred, int(round(0.75 * n_pred)))
    owner = rng.integers(0, n_gt, n_near)
    owner[: min(n_gt, n_near)] = np.arange(min(n_gt, n_near))
    size = np.stack([gt[owner, 2] - gt[owner, 0], gt[owner, 3] - gt[owner, 1]] * 2, axis=1)
    noise = rng.normal(0, jitter, (n_near, 4)) * size
    near = gt[owner] + noise
    near[:, 2:] = np.maximum(near[:, 2:], near[:, :2] + 2.0)  # at least 2 px
    clutter = _person_boxes(rng, n_pred - n_near, frame, clustered=True)
    preds = np.concatenate([near, clutter])
    # confidence tracks localisation quality, with noise
    q = np.concatenate([np.exp(-np.abs(noise).sum(1) / (size.sum(1) * 0.25)), np.zeros(len(clutter))])
    probs = np.clip(0.15 + 0.7 * q + rng.normal(0, 0.1, n_pred), 0.0, 1.0)
    perm = rng.permutation(n_pred)
    norm = np.array([frame[0], frame[1], frame[0], frame[1]])
    return MatchInstance(probs[perm], preds[perm] / norm, gt / norm)


def random_instance(rng, n_pred: int, n_gt: int) -> MatchInstance:
    """Uniformly scattered boxes in the unit frame with independent confidences."""
    xy = rng.uniform(0, 0.9, (n_pred, 2))
    wh = rng.uniform(0.01, 0.1, (n_pred, 2))
    preds = np.concatenate([xy, xy + wh], axis=1)
    gt = _person_boxes(rng, n_gt, (1.0, 1.0), clustered=False)
    return MatchInstance(rng.uniform(0, 1, n_pred), preds, gt)


def time_instance(inst: MatchInstance, k: int, repeats: int = 3):
    """Best-of-``repeats`` wall time for each solver on one instance.

    The two solvers are timed in alternating order on the same cost matrix.
    """
    cost = build_match_cost((inst.probs, inst.pred_boxes), inst.gt_boxes)
    t_exact = t_fast = None
    exact = fast = None
    for r in range(repeats):
        order = (0, 1) if r % 2 == 0 else (1, 0)
        for which in order:
            t0 = time.perf_counter_ns()
            if which == 0:
                exact = solve_exact(cost)
            else:
                fast = solve_fast_km(cost, k_candidates=k)
            dt = time.perf_counter_ns() - t0
            if which == 0:
                t_exact = dt if t_exact is None else min(t_exact, dt)
            else:
                t_fast = dt if t_fast is None else min(t_fast, dt)
    return exact, fast, t_exact, t_fast


def run_benchmark(n_instances: int, n_pred: int, n_gt: int, k: int, seed: int, kind: str = "clustered", repeats: int = 3):
    """Rows for the CSV report plus the largest |cost difference| seen."""
    gen = clustered_instance if kind == "clustered" else random_instance
    rng = np.random.default_rng(seed)
    warm = gen(np.random.default_rng(seed + 1), n_pred, n_gt)
    time_instance(warm, k, repeats=1)  # compile outside the timed region
    return bench_instances((gen(rng, n_pred, n_gt) for _ in range(n_instances)), k, repeats)


def bench_instances(instances, k: int, repeats: int = 3):
    """Time both solvers on each instance; ``(rows, worst |cost difference|)``."""
    rows = []
    worst = 0.0
    for i, inst in enumerate(instances):
        exact, fast, t_exact, t_fast = time_instance(inst, k, repeats)
        worst = max(worst, abs(exact.total_cost - fast.total_cost))
        rows.append(
            {
                "instance_id": i,
                "N_q": len(inst.probs),
                "N_g": len(inst.gt_boxes),
                "k": k,
                "time_exact_ns": t_exact,
                "time_fast_ns": t_fast,
                "certificate": fast.certificate,
            }
        )
    return rows, worst


def summarize(rows) -> dict:
    te = np.array([r["time_exact_ns"] for r in rows], dtype=float)
    tf = np.array([r["time_fast_ns"] for r in rows], dtype=float)
    certs: dict[str, int] = {}
    for r in rows:
        certs[r["certificate"]] = certs.get(r["certificate"], 0) + 1
    qs = [0.05, 0.25, 0.5, 0.75, 0.95]
    return {
        "n": len(rows),
        "exact_ns_quantiles": dict(zip(map(str, qs), np.quantile(te, qs).tolist())),
        "fast_ns_quantiles": dict(zip(map(str, qs), np.quantile(tf, qs).tolist())),
        "median_speedup": float(np.median(te) / np.median(tf)),
        "certificates": certs,
    }


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
