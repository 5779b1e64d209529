"""Per-layer set-prediction loss with visible/full target routing.

Early decoder layers are matched and supervised against visible-region boxes,
the last ``L`` layers against full-body boxes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .assignment import Assignment, MatchWeights, _as_weights, build_match_cost, solve_exact
from .autodiff import Tensor
from .geometry import as_box_array

VISIBLE = "visible"
FULL = "full"


@dataclass(frozen=True)
class LayerTargetPlan:
    n_layers: int
    n_full: int
    kinds: tuple

    def kind(self, layer: int) -> str:
        return self.kinds[layer]


def plan_targets(n_layers: int, n_full: int) -> LayerTargetPlan:
    """``[visible] * (n_layers - n_full) + [full] * n_full``."""
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if not 1 <= n_full <= n_layers:
        raise ValueError(f"n_full must lie in [1, {n_layers}], got {n_full}")
    kinds = (VISIBLE,) * (n_layers - n_full) + (FULL,) * n_full
    return LayerTargetPlan(n_layers, n_full, kinds)


def giou_rows(pred, target: np.ndarray) -> Tensor:
    """Differentiable GIoU of ``pred[i]`` with ``target[i]`` (corner form)."""
    p = ad.as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    px0, py0, px1, py1 = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    tx0, ty0, tx1, ty1 = t[:, 0], t[:, 1], t[:, 2], t[:, 3]
    area_p = (px1 - px0) * (py1 - py0)
    area_t = (tx1 - tx0) * (ty1 - ty0)
    iw = ad.relu(ad.minimum(px1, tx1) - ad.maximum(px0, tx0))
    ih = ad.relu(ad.minimum(py1, ty1) - ad.maximum(py0, ty0))
    inter = iw * ih
    union = area_p + area_t - inter
    hull = (ad.maximum(px1, tx1) - ad.minimum(px0, tx0)) * (ad.maximum(py1, ty1) - ad.minimum(py0, ty0))
    return inter / union - (hull - union) / hull


def _bce_terms(probs, logits, matched: np.ndarray):
    """Per-query binary cross-entropy with target 1 on ``matched``."""
    y = matched.astype(np.float64)
    if logits is not None:
        lt = ad.as_tensor(logits)
        return -(ad.log_sigmoid(lt) * y + ad.log_sigmoid(-lt) * (1.0 - y))
    # p where matched, 1 - p elsewhere: perfect predictions give exactly zero
    picked = ad.as_tensor(probs) * (2.0 * y - 1.0) + (1.0 - y)
    return -ad.log(picked)


def set_loss(preds, targets, weights: MatchWeights | tuple | None = None, logits=None):
    """Hungarian-matched loss of one layer's predictions against ``targets``.

    ``preds`` is ``(class_probs, boxes)``; either may be a Tensor so gradients
    flow back into a decoder. ``logits``, if given, replaces the probabilities
    in the classification term (numerically safer). The loss is the sum of
    ``w_cls * BCE`` over all queries (matched queries target 1, the rest 0)
    plus ``w_l1 * |box - target|_1`` and ``w_giou * (1 - GIoU)`` over matched
    pairs. Returns ``(loss, assignment)``; the loss is a Tensor when any input
    is one, a float otherwise.
    """
    probs, boxes = preds
    w = _as_weights(weights)
    pv = probs.value if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    bv = boxes.value if isinstance(boxes, Tensor) else as_box_array(boxes)
    tgt = as_box_array(targets)
    n_q = len(pv)
    if len(tgt):
        cost = build_match_cost((pv, bv), tgt, w)
        match = solve_exact(cost)
    else:
        match = Assignment(np.zeros(0, dtype=np.int64), 0.0, "optimal_exact")
    matched = np.zeros(n_q, dtype=bool)
    matched[match.gt_to_pred] = True

    loss = _bce_terms(probs, logits, matched).sum() * w.cls
    if len(tgt):
        rows = match.gt_to_pred
        mb = ad.take_rows(ad.as_tensor(boxes), rows)
        l1 = ad.abs_(mb - tgt).sum()
        g = giou_rows(mb, tgt)
        loss = loss + l1 * w.l1 + (1.0 - g).sum() * w.giou
    tensor_in = any(isinstance(x, Tensor) for x in (probs, boxes, logits))
    return (loss if tensor_in else float(loss.value)), match


@dataclass
class LayerLoss:
    layer: int
    kind: str
    targets: np.ndarray  # the exact array the layer was matched and supervised against
    loss: Tensor
    assignment: Assignment


def routed_targets(plan: LayerTargetPlan, full_boxes, visible_boxes) -> list:
    """The target array each layer uses (the same objects, not copies)."""
    return [full_boxes if k == FULL else visible_boxes for k in plan.kinds]


def decoder_loss(layers, full_boxes, visible_boxes, plan: LayerTargetPlan, weights=None):
    """Total loss over decoder layers with per-layer target routing.

    ``layers`` are the decoder's per-layer outputs (anything with
    ``class_probs``, ``boxes`` and optionally ``class_logits``). Returns
    ``(total, records)`` with one :class:`LayerLoss` per layer.
    """
    if len(layers) != plan.n_layers:
        raise ValueError(f"plan covers {plan.n_layers} layers, decoder produced {len(layers)}")
    full = as_box_array(full_boxes)
    vis = as_box_array(visible_boxes)
    if full.shape != vis.shape:
        raise ValueError("need one visible box per full box")
    total = None
    records = []
    for t, (out, tgt) in enumerate(zip(layers, routed_targets(plan, full, vis))):
        loss, match = set_loss((out.class_probs, out.boxes), tgt, weights, logits=getattr(out, "class_logits", None))
        loss = ad.as_tensor(loss)
        records.append(LayerLoss(t, plan.kind(t), tgt, loss, match))
        total = loss if total is None else total + loss
    return total, records
