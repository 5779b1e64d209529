"""Match costs, the exact Kuhn-Munkres solver and the pruned Fast-KM solver.

Costs are minimized. Rows of a :class:`CostMatrix` are predictions and
columns are ground truths; predictions left unmatched are background.

Fast-KM restricts every GT to its ``k`` nearest predictions under
``1 - GIoU``, solves that sparse problem, and then proves the answer optimal
for the full matrix through LP duality. If the proof fails it re-solves
exactly, so the result is always a minimum-cost assignment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _assign_kernels as _k
from .geometry import as_box_array, pairwise_giou, pairwise_query_distance

OPTIMAL_EXACT = "optimal_exact"
OPTIMAL_CERTIFIED = "optimal_certified"
FALLBACK_EXACT = "fallback_exact"


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass(frozen=True)
class _CostTerms:
    """Ingredients of a built cost matrix, kept so Fast-KM can bound entries."""

    probs: np.ndarray
    pred_boxes: np.ndarray
    gt_boxes: np.ndarray
    distance_gt_major: np.ndarray  # (N_g, N_q) 1 - GIoU
    weights: MatchWeights
    # cost[g, p] >= gt_scale[g] * dist[g, p] + pred_offset[p], using
    # L1 >= dist * min(w_gt, h_gt) / 2 (see tests for the property check)
    gt_scale: np.ndarray
    pred_offset: np.ndarray
    bound_valid: bool


class CostMatrix:
    """``values[i, j]``: cost of assigning prediction ``i`` to GT ``j``.

    The buffer is stored GT-major (one contiguous row per GT); ``values`` is a
    transposed view of it.
    """

    def __init__(self, values, weights: MatchWeights | None = None, _terms: _CostTerms | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {arr.shape}")
        n_q, n_g = arr.shape
        if n_g > n_q:
            raise ValueError(f"more GTs than predictions ({n_g} > {n_q})")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cost matrix has non-finite entries")
        self.gt_major = np.ascontiguousarray(arr.T)
        self.weights = weights if weights is not None else (_terms.weights if _terms else MatchWeights())
        self._terms = _terms

    @classmethod
    def _from_gt_major(cls, gt_major: np.ndarray, terms: _CostTerms) -> "CostMatrix":
        obj = cls.__new__(cls)
        n_g, n_q = gt_major.shape
        if n_g > n_q:
            raise ValueError(f"more GTs than predictions ({n_g} > {n_q})")
        if not np.all(np.isfinite(gt_major)):
            raise ValueError("cost matrix has non-finite entries")
        obj.gt_major = gt_major
        obj.weights = terms.weights
        obj._terms = terms
        return obj

    @property
    def values(self) -> np.ndarray:
        return self.gt_major.T

    @property
    def n_pred(self) -> int:
        return self.gt_major.shape[1]

    @property
    def n_gt(self) -> int:
        return self.gt_major.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_pred, self.n_gt)


@dataclass(frozen=True)
class Assignment:
    gt_to_pred: np.ndarray
    total_cost: float
    certificate: str
    stats: dict = field(default_factory=dict, compare=False)

    def pairs(self) -> list[tuple[int, int]]:
        """(prediction, gt) index pairs ordered by GT."""
        return [(int(p), g) for g, p in enumerate(self.gt_to_pred)]

    def pred_to_gt(self, n_pred: int) -> np.ndarray:
        out = np.full(n_pred, -1, dtype=np.int64)
        out[self.gt_to_pred] = np.arange(len(self.gt_to_pred))
        return out


def build_match_cost(preds, gts, weights: MatchWeights | tuple | None = None) -> CostMatrix:
    """Cost ``-w_cls * p + w_l1 * |box - gt|_1 + w_giou * (1 - GIoU)``.

    ``preds`` is either a sequence of ``(prob, box)`` pairs or a tuple
    ``(probs, boxes)`` of arrays; boxes are corner form.
    """
    probs, boxes = _split_preds(preds)
    gt_boxes = as_box_array(gts)
    w = _as_weights(weights)
    if len(gt_boxes) > len(boxes):
        raise ValueError(f"more GTs than predictions ({len(gt_boxes)} > {len(boxes)})")
    if np.any((probs < 0.0) | (probs > 1.0)) or not np.all(np.isfinite(probs)):
        raise ValueError("class probabilities must lie in [0, 1]")
    dist = 1.0 - pairwise_giou(gt_boxes, boxes)
    l1 = np.abs(gt_boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    cost = w.l1 * l1 + w.giou * dist - w.cls * probs[None, :]
    terms = _CostTerms(
        probs=probs,
        pred_boxes=np.ascontiguousarray(boxes),
        gt_boxes=np.ascontiguousarray(gt_boxes),
        distance_gt_major=np.ascontiguousarray(dist),
        weights=w,
        gt_scale=w.giou + 0.5 * w.l1 * np.minimum(gt_boxes[:, 2] - gt_boxes[:, 0], gt_boxes[:, 3] - gt_boxes[:, 1]),
        pred_offset=-w.cls * probs,
        bound_valid=w.cls >= 0.0 and w.l1 >= 0.0 and w.giou >= 0.0,
    )
    return CostMatrix._from_gt_major(np.ascontiguousarray(cost), terms)


def _split_preds(preds):
    if isinstance(preds, tuple) and len(preds) == 2 and not np.isscalar(preds[0]):
        probs = np.asarray(preds[0], dtype=np.float64).reshape(-1)
        boxes = as_box_array(preds[1])
    else:
        items = list(preds)
        probs = np.array([float(p) for p, _ in items], dtype=np.float64)
        boxes = as_box_array([b for _, b in items]) if items else np.zeros((0, 4))
    if len(probs) != len(boxes):
        raise ValueError("need one probability per predicted box")
    return probs, boxes


def _as_weights(weights) -> MatchWeights:
    if weights is None:
        return MatchWeights()
    if isinstance(weights, MatchWeights):
        return weights
    cls_w, l1_w, giou_w = weights
    return MatchWeights(float(cls_w), float(l1_w), float(giou_w))


def _as_cost(c) -> CostMatrix:
    return c if isinstance(c, CostMatrix) else CostMatrix(c)


def _total(gt_major: np.ndarray, gt_to_pred: np.ndarray) -> float:
    return float(gt_major[np.arange(len(gt_to_pred)), gt_to_pred].sum())


def _empty(certificate: str) -> Assignment:
    return Assignment(np.zeros(0, dtype=np.int64), 0.0, certificate)


def solve_exact(c) -> Assignment:
    """Minimum-cost assignment of every GT to a distinct prediction."""
    c = _as_cost(c)
    if c.n_gt == 0:
        return _empty(OPTIMAL_EXACT)
    gt_to_pred, _, _ = _k.dense_sap(c.gt_major)
    return Assignment(gt_to_pred, _total(c.gt_major, gt_to_pred), OPTIMAL_EXACT)


def solve_fast_km(c, pred_boxes=None, gt_boxes=None, k_candidates: int = 16) -> Assignment:
    """Pruned solve over each GT's ``k_candidates`` nearest predictions, certified or re-solved.

    Box arguments default to nothing only when ``c`` came from
    :func:`build_match_cost`; otherwise they are required to rank candidates.
    """
    if int(k_candidates) < 1:
        raise ValueError("k_candidates must be >= 1")
    c = _as_cost(c)
    if c.n_gt == 0:
        return _empty(OPTIMAL_CERTIFIED)
    terms = c._terms
    if pred_boxes is None or gt_boxes is None:
        if terms is None:
            raise ValueError("boxes are required for a cost matrix not built by build_match_cost")
        pred_arr = gt_arr = np.zeros((0, 4))
    else:
        pred_arr = np.ascontiguousarray(as_box_array(pred_boxes))
        gt_arr = np.ascontiguousarray(as_box_array(gt_boxes))
        if pred_arr.shape[0] != c.n_pred or gt_arr.shape[0] != c.n_gt:
            raise ValueError("box counts do not match the cost matrix")
    k = min(int(k_candidates), c.n_pred)

    # the cached distance and the cost lower bound only apply when the boxes
    # given are the ones the cost was built from
    if terms is not None and (pred_boxes is None or _boxes_match(terms, pred_arr, gt_arr)):
        dist = terms.distance_gt_major
        use_bound = terms.bound_valid
        gt_scale, pred_offset = terms.gt_scale, terms.pred_offset
    else:
        dist = np.ascontiguousarray(pairwise_query_distance(gt_arr, pred_arr))
        use_bound = False
        gt_scale = np.zeros(c.n_gt)
        pred_offset = np.zeros(c.n_pred)

    gt_to_pred, status, scanned = _k.fast_km(c.gt_major, dist, k, use_bound, gt_scale, pred_offset)
    stats = {"k": k, "rows_scanned": int(scanned), "status": int(status)}
    if status == _k.STATUS_CERTIFIED:
        return Assignment(gt_to_pred, _total(c.gt_major, gt_to_pred), OPTIMAL_CERTIFIED, stats)
    gt_to_pred, _, _ = _k.dense_sap(c.gt_major)
    return Assignment(gt_to_pred, _total(c.gt_major, gt_to_pred), FALLBACK_EXACT, stats)


def _boxes_match(terms: _CostTerms, pred_arr, gt_arr) -> bool:
    return np.array_equal(terms.pred_boxes, pred_arr) and np.array_equal(terms.gt_boxes, gt_arr)


def brute_force_assignment(c) -> tuple[np.ndarray, float]:
    """Exhaustive search over injective GT->prediction maps; for tiny problems only."""
    from itertools import permutations

    c = _as_cost(c)
    n_g, n_q = c.gt_major.shape
    best = None
    best_map = None
    rows = np.arange(n_g)
    for perm in permutations(range(n_q), n_g):
        total = float(c.gt_major[rows, list(perm)].sum())
        if best is None or total < best:
            best = total
            best_map = np.array(perm, dtype=np.int64)
    if best_map is None:
        return np.zeros(0, dtype=np.int64), 0.0
    return best_map, best
