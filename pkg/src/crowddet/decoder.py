"""Toy-scale set-prediction decoder with dense-query self-attention,
grid-rectified cross-attention and iterative box refinement.

Boxes inside the decoder are normalized to the unit image frame, corner form.
Gradients come from :mod:`crowddet.autodiff`. Neighbor selection and the
rectified sampling grid depend on box values only; no gradient flows through
the selection or through box-derived sample positions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import pairwise_iou, pairwise_query_distance

DEFORMABLE = "deformable_learned"
RECTIFIED = "rectified_grid"
MIN_SIZE = 1e-3  # smallest refined box side, in frame units


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 6
    n_heads: int = 2
    channels: int = 8
    n_queries: int = 12
    k_neighbors: int = 4
    grid_side: int = 2
    n_dq_layers: int = 0
    n_rf_layers: int = 0
    sampling_points: int = 4
    mlp_hidden: int | None = None
    refine: str = "additive"  # or "inverse_sigmoid"

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1 or self.n_queries < 1:
            raise ValueError("n_layers, n_heads and n_queries must be positive")
        if self.channels % self.n_heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by n_heads ({self.n_heads})")
        if not 1 <= self.k_neighbors <= self.n_queries:
            raise ValueError("need 1 <= k_neighbors <= n_queries")
        if self.grid_side < 1:
            raise ValueError("grid_side must be >= 1")
        if self.sampling_points < 1:
            raise ValueError("sampling_points must be >= 1")
        if not 0 <= self.n_rf_layers <= self.n_layers or not 0 <= self.n_dq_layers <= self.n_layers:
            raise ValueError("n_dq_layers and n_rf_layers must lie in [0, n_layers]")
        if self.refine not in ("additive", "inverse_sigmoid"):
            raise ValueError(f"unknown refine mode {self.refine!r}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.n_heads

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 2 * self.channels

    def uses_dq(self, layer: int) -> bool:
        return layer >= self.n_layers - self.n_dq_layers

    def cross_mode(self, layer: int) -> str:
        return RECTIFIED if layer >= self.n_layers - self.n_rf_layers else DEFORMABLE

    def points_per_head(self, layer: int) -> int:
        return self.grid_side**2 if self.cross_mode(layer) == RECTIFIED else self.sampling_points


class FeatureGrid:
    """An ``(H, W, C)`` feature map sampled bilinearly with zero padding.

    Grid units put stored vector ``values[r, c]`` at position ``(x=c, y=r)``.
    A normalized frame point ``(u, v)`` maps to ``(u * W - 0.5, v * H - 0.5)``.
    """

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"feature grid must be (H, W, C), got {arr.shape}")
        self.values = arr

    @property
    def shape(self):
        return self.values.shape

    def to_grid_units(self, points):
        H, W, _ = self.values.shape
        scale = np.array([W, H], dtype=np.float64)
        if isinstance(points, Tensor):
            return points * scale - 0.5
        return np.asarray(points, dtype=np.float64) * scale - 0.5

    def sample(self, points) -> np.ndarray:
        """Bilinear samples at grid-unit positions ``(..., 2)``."""
        return ad.bilinear_sample(self.values, np.asarray(points, dtype=np.float64)).value

    def sample_normalized(self, points):
        """Differentiable samples at normalized frame positions."""
        return ad.bilinear_sample(self.values, self.to_grid_units(points))


def random_feature_grid(height: int, width: int, channels: int, seed: int = 0) -> FeatureGrid:
    rng = np.random.default_rng(seed)
    return FeatureGrid(rng.normal(0.0, 1.0, (height, width, channels)))


@dataclass
class QuerySet:
    """Decoder state for one layer.

    ``boxes`` are corner-form frame boxes. The attention fields are filled in by
    the layer that produced this state: ``self_fields[i]`` lists the queries
    query ``i`` attended to, ``cross_points[i, m]`` the normalized sample points
    of head ``m`` and ``field_boxes`` the boxes those points were derived from.
    """

    features: Tensor
    boxes: Tensor
    self_fields: np.ndarray | None = None
    self_weights: np.ndarray | None = None
    cross_points: np.ndarray | None = None
    cross_weights: np.ndarray | None = None
    field_boxes: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    @property
    def n_queries(self) -> int:
        return self.features.shape[0]

    def feature_array(self) -> np.ndarray:
        return self.features.value

    def box_array(self) -> np.ndarray:
        return self.boxes.value


@dataclass
class LayerOutput:
    class_probs: Tensor
    boxes: Tensor
    queries: QuerySet
    class_logits: Tensor | None = None

    def __iter__(self):
        yield self.class_probs.value
        yield self.boxes.value
        yield self.queries


@dataclass
class Tape:
    """Forward record needed for :func:`decoder_backward`."""

    params: dict
    recorded: bool = False


@dataclass
class DecoderRun:
    layers: list
    tape: Tape
    initial: QuerySet

    @property
    def field_boxes(self) -> list:
        return [l.queries.field_boxes for l in self.layers]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __iter__(self):
        return iter(self.layers)


# parameters

def param_shapes(config: DecoderConfig) -> dict:
    C, F, M = config.channels, config.hidden, config.n_heads
    shapes = {"query.embed": (config.n_queries, C), "query.box": (config.n_queries, 4)}
    for t in range(config.n_layers):
        P = config.points_per_head(t)
        pre = f"layers.{t}."
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[pre + "self." + nm] = (C, C)
            if nm != "wk":  # a key bias cancels in the softmax
                shapes[pre + "self.b" + nm[1]] = (C,)
        for blk in ("self", "cross"):
            shapes[pre + blk + ".ln1.g"] = (C,)
            shapes[pre + blk + ".ln1.b"] = (C,)
            shapes[pre + blk + ".mlp.w1"] = (C, F)
            shapes[pre + blk + ".mlp.b1"] = (F,)
            shapes[pre + blk + ".mlp.w2"] = (F, C)
            shapes[pre + blk + ".mlp.b2"] = (C,)
            shapes[pre + blk + ".ln2.g"] = (C,)
            shapes[pre + blk + ".ln2.b"] = (C,)
        shapes[pre + "cross.wa"] = (C, M * P)
        shapes[pre + "cross.ba"] = (M * P,)
        shapes[pre + "cross.woff"] = (C, M * config.sampling_points * 2)
        shapes[pre + "cross.boff"] = (M * config.sampling_points * 2,)
        for nm in ("wv", "wo"):
            shapes[pre + "cross." + nm] = (C, C)
            shapes[pre + "cross.b" + nm[1]] = (C,)
        shapes[pre + "head.cls.w"] = (C, 1)
        shapes[pre + "head.cls.b"] = (1,)
        shapes[pre + "head.box.w1"] = (C, C)
        shapes[pre + "head.box.b1"] = (C,)
        shapes[pre + "head.box.w2"] = (C, 4)
        shapes[pre + "head.box.b2"] = (4,)
    return shapes


_ZERO_AT_INIT = ("cross.woff", "cross.boff", "head.box.w2", "head.box.b2")


def _name_seed(seed: int, name: str) -> np.random.Generator:
    # per-tensor streams, so a tensor's initial value does not depend on
    # which other tensors exist
    return np.random.default_rng([seed, *name.encode()])


def init_params(config: DecoderConfig, seed: int = 0) -> dict:
    """Weights uniform in ``[-1/sqrt(C), 1/sqrt(C)]``; biases zero; LayerNorm
    gains one; offset and box-delta heads zero."""
    bound = 1.0 / np.sqrt(config.channels)
    params = {}
    for name, shape in param_shapes(config).items():
        short = name.split(".", 2)[-1] if name.startswith("layers.") else name
        if any(short.endswith(z) for z in _ZERO_AT_INIT):
            val = np.zeros(shape)
        elif name.endswith(".g"):
            val = np.ones(shape)
        elif name == "query.embed":
            val = _name_seed(seed, name).normal(0.0, 1.0, shape)
        elif name == "query.box":
            rng = _name_seed(seed, name)
            # centers spread over the frame, sizes around a standing person
            val = np.stack(
                [
                    rng.uniform(-2.0, 2.0, shape[0]),
                    rng.uniform(-1.5, 1.5, shape[0]),
                    rng.uniform(-2.6, -1.8, shape[0]),
                    rng.uniform(-1.4, -0.6, shape[0]),
                ],
                axis=1,
            )
        elif len(shape) == 1:
            val = np.zeros(shape)
        else:
            val = _name_seed(seed, name).uniform(-bound, bound, shape)
        params[name] = ad.param(val, name)
    return params


def perturb_params(params: dict, scale: float = 0.1, seed: int = 0, keep=()) -> dict:
    """Copy of ``params`` with Gaussian noise on every entry (zero-initialized
    heads become active, which gradient checks need). Tensors whose name
    contains any substring in ``keep`` are copied unchanged."""
    rng = np.random.default_rng(seed)
    out = {}
    for k, v in params.items():
        noise = rng.normal(0.0, scale, v.shape)
        out[k] = ad.param(v.value if any(s in k for s in keep) else v.value + noise, k)
    return out


def anchor_queries(params: dict, boxes) -> dict:
    """Copy of ``params`` whose first ``len(boxes)`` queries start exactly on
    ``boxes`` (normalized corners)."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    logits = params["query.box"].value.copy()
    if len(b) > len(logits):
        raise ValueError(f"{len(b)} anchor boxes for {len(logits)} queries")
    cxcywh = np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2, b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], 1)
    cxcywh = np.clip(cxcywh, 1e-9, 1 - 1e-9)
    logits[: len(b)] = np.log(cxcywh) - np.log1p(-cxcywh)
    out = dict(params)
    out["query.box"] = ad.param(logits, "query.box")
    return out


def layer_params(params: dict, layer: int) -> dict:
    pre = f"layers.{layer}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def validate_params(config: DecoderConfig, params: dict) -> None:
    want = param_shapes(config)
    missing = sorted(set(want) - set(params))
    if missing:
        raise ValueError(f"missing parameters: {missing[:5]}")
    for name, shape in want.items():
        got = tuple(np.shape(params[name].value if isinstance(params[name], Tensor) else params[name]))
        if got != shape:
            raise ValueError(f"parameter {name} has shape {got}, expected {shape}")


# tensor bundles

BUNDLE_FORMAT = "tensor-bundle/1"


def save_bundle(path, arrays: dict) -> None:
    """JSON object ``{"format", "tensors": {name: {"shape", "data"}}}``; ``data``
    is the row-major flattening. Float repr round-trips exactly."""
    tensors = {}
    for name, arr in arrays.items():
        a = np.asarray(arr.value if isinstance(arr, Tensor) else arr, dtype=np.float64)
        tensors[name] = {"shape": list(a.shape), "data": a.ravel().tolist()}
    with open(path, "w") as fh:
        json.dump({"format": BUNDLE_FORMAT, "tensors": tensors}, fh)


def load_bundle(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"not a tensor bundle: format={doc.get('format')!r}")
    out = {}
    for name, t in doc["tensors"].items():
        shape = tuple(t["shape"])
        data = np.asarray(t["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ValueError(f"tensor {name}: {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out


def params_from_arrays(arrays: dict) -> dict:
    return {k: ad.param(v, k) for k, v in arrays.items()}


# attention

def _head_split(x: Tensor, n_heads: int) -> Tensor:
    n, c = x.shape
    return x.reshape(n, n_heads, c // n_heads)


def multi_head_attention(q, z, field, params: dict, n_heads: int):
    """Attention of each query over the positions ``field`` of the set ``z``.

    ``q`` is ``(N, C)`` (or a single ``(C,)`` query), ``z`` is ``(N_z, C)`` and
    ``field`` an ``(N, K)`` integer array of positions in ``z``. With ``wq``/``wk``
    in ``params`` weights come from scaled dot products, otherwise from a linear
    head ``wa``/``ba`` over the ``K`` positions; both are softmax-normalized per
    head. ``z`` may also be pre-sampled per head as ``(N, M, K, C)``, in which
    case ``field`` is ignored. Returns ``(output, weights)`` with weights
    ``(N, M, K)``.
    """
    q = ad.as_tensor(q)
    single = q.ndim == 1
    if single:
        q = q.reshape(1, -1)
        if field is not None:
            field = np.asarray(field).reshape(1, -1)
    z = ad.as_tensor(z)
    N, C = q.shape
    M = n_heads
    D = C // M
    if z.ndim == 2:
        field = np.asarray(field, dtype=np.int64)
        if field.ndim != 2 or field.shape[1] == 0:
            raise ValueError("attention field must be non-empty")
        K = field.shape[1]
    else:
        K = z.shape[2]
        if K == 0:
            raise ValueError("attention field must be non-empty")

    if "wq" in params:
        if z.ndim != 2:
            raise ValueError("dot-product attention needs an indexed key set")
        qh = _head_split(q @ params["wq"] + params["bq"], M)
        kh = _head_split(z @ params["wk"], M)
        vh = _head_split(z @ params["wv"] + params["bv"], M)
        kg = ad.take_rows(kh, field)  # (N, K, M, D)
        vg = ad.take_rows(vh, field)
        scores = ad.einsum("nmd,nkmd->nmk", qh, kg) * (1.0 / np.sqrt(D))
        weights = ad.softmax(scores, axis=-1)
        mixed = ad.einsum("nmk,nkmd->nmd", weights, vg)
    else:
        logits = (q @ params["wa"] + params["ba"]).reshape(N, M, K)
        weights = ad.softmax(logits, axis=-1)
        wv = params["wv"].reshape(C, M, D)
        if z.ndim == 2:
            zg = ad.take_rows(z, field)  # (N, K, C)
            vals = ad.einsum("nkc,cmd->nmkd", zg, wv) + params["bv"].reshape(M, 1, D)
        else:
            vals = ad.einsum("nmkc,cmd->nmkd", z, wv) + params["bv"].reshape(M, 1, D)
        mixed = ad.einsum("nmk,nmkd->nmd", weights, vals)
    out = mixed.reshape(N, C) @ params["wo"] + params["bo"]
    if single:
        out = out.reshape(C)
    return out, weights.value


def _mlp_block(x: Tensor, p: dict, pre: str) -> Tensor:
    h = ad.relu(x @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"])
    y = h @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
    return ad.layer_norm(y + x, p[pre + "ln2.g"], p[pre + "ln2.b"])


def dq_neighborhood(boxes, k: int) -> np.ndarray:
    """For each box the ``k`` boxes nearest under ``1 - GIoU``, ordered by
    (distance, index). Returns an ``(N, k)`` integer array."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(b)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got {k}")
    if k == n:
        d = pairwise_query_distance(b, b)
        return np.argsort(d, axis=1, kind="stable")
    d = pairwise_query_distance(b, b)
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    # argpartition is not tie-stable; redo boundary ties by index
    kth = np.take_along_axis(d, part, axis=1).max(axis=1, keepdims=True)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        below = np.flatnonzero(d[i] < kth[i, 0])
        tied = np.flatnonzero(d[i] == kth[i, 0])
        pick = np.concatenate([below, tied[: k - len(below)]])
        out[i] = pick[np.lexsort((pick, d[i, pick]))]
    return out


def rf_grid(box, grid_side: int) -> np.ndarray:
    """``R x R`` points at ``(x0 + i*w/(R+1), y0 + j*h/(R+1))``, ``i, j`` in ``1..R``.

    ``box`` is corner form; a single box gives ``(R*R, 2)``, ``(N, 4)`` gives
    ``(N, R*R, 2)``. Points run over ``i`` (x) first, then ``j`` (y).
    """
    if grid_side < 1:
        raise ValueError("grid_side must be >= 1")
    b = np.asarray(box.as_array() if hasattr(box, "as_array") else box, dtype=np.float64)
    single = b.ndim == 1
    b = b.reshape(-1, 4)
    frac = np.arange(1, grid_side + 1) / (grid_side + 1)
    fi, fj = np.meshgrid(frac, frac, indexing="ij")
    fi = fi.ravel()
    fj = fj.ravel()
    w = (b[:, 2] - b[:, 0])[:, None]
    h = (b[:, 3] - b[:, 1])[:, None]
    pts = np.stack([b[:, 0:1] + fi * w, b[:, 1:2] + fj * h], axis=-1)
    return pts[0] if single else pts


def self_attention_layer(
    qs: QuerySet, params: dict, dq_enabled: bool, k_neighbors: int, n_heads: int, field_boxes=None
) -> QuerySet:
    """Self-attention, residual and LayerNorm, then MLP, residual and LayerNorm.

    ``params`` holds this layer's ``self.*`` tensors. With ``dq_enabled`` each
    query attends to its ``k_neighbors`` nearest queries by box, otherwise to
    all queries. ``field_boxes`` overrides the boxes neighborhoods are built
    from (the gradient check holds them fixed).
    """
    n = qs.n_queries
    if dq_enabled:
        boxes = qs.box_array() if field_boxes is None else np.asarray(field_boxes)
        ranked = dq_neighborhood(boxes, k_neighbors)
        # attend in index order so a saturated neighborhood is the dense case
        attend = np.sort(ranked, axis=1)
    else:
        ranked = None
        attend = np.tile(np.arange(n), (n, 1))
    p = {k[5:]: v for k, v in params.items() if k.startswith("self.")}
    x = qs.features
    out, weights = multi_head_attention(x, x, attend, p, n_heads)
    x = ad.layer_norm(out + x, p["ln1.g"], p["ln1.b"])
    x = _mlp_block(x, p, "")
    pairs = int(attend.size)
    C = x.shape[1]
    stats = {
        "self_pairs": pairs,
        # multiply-adds for scores plus value mixing
        "self_attention_macs": 2 * pairs * C,
        "dq": bool(dq_enabled),
    }
    return QuerySet(
        features=x,
        boxes=qs.boxes,
        self_fields=ranked if ranked is not None else attend,
        self_weights=weights,
        stats={**qs.stats, **stats},
    )


def cross_attention_layer(
    qs: QuerySet,
    grid: FeatureGrid,
    params: dict,
    mode: str,
    n_heads: int,
    grid_side: int = 2,
    sampling_points: int = 4,
    field_boxes=None,
) -> QuerySet:
    """Attention from each query to sampled feature-map points, then the
    residual/LayerNorm/MLP block.

    In ``deformable_learned`` mode each head samples ``sampling_points`` points
    offset from the center of the query's box by a linear head over the query
    (offsets are in half box sizes). In ``rectified_grid`` mode every head
    samples the ``rf_grid`` of the query's box.
    """
    p = {k[6:]: v for k, v in params.items() if k.startswith("cross.")}
    x = qs.features
    N, C = x.shape
    M = n_heads
    box = qs.box_array() if field_boxes is None else np.asarray(field_boxes, dtype=np.float64)
    if mode == RECTIFIED:
        pts = rf_grid(box, grid_side)  # (N, P, 2)
        pts = np.broadcast_to(pts[:, None], (N, M, pts.shape[1], 2)).copy()
        points = Tensor(pts)
    elif mode == DEFORMABLE:
        center = 0.5 * (box[:, :2] + box[:, 2:])
        half = 0.5 * (box[:, 2:] - box[:, :2])
        off = (x @ p["woff"] + p["boff"]).reshape(N, M, sampling_points, 2)
        points = off * half[:, None, None, :] + center[:, None, None, :]
    else:
        raise ValueError(f"unknown cross-attention mode {mode!r}")
    samples = grid.sample_normalized(points)  # (N, M, P, C)
    out, weights = multi_head_attention(x, samples, None, p, n_heads)
    x = ad.layer_norm(out + x, p["ln1.g"], p["ln1.b"])
    x = _mlp_block(x, p, "")
    return replace(
        qs,
        features=x,
        cross_points=points.value,
        cross_weights=weights,
        field_boxes=box.copy(),
        stats={**qs.stats, "cross_mode": mode, "cross_points": int(points.value.size // 2)},
    )


def _corners_to_center(b: Tensor) -> Tensor:
    x0, y0, x1, y1 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return ad.stack([(x0 + x1) * 0.5, (y0 + y1) * 0.5, x1 - x0, y1 - y0], axis=1)


def _center_to_clipped_corners(cb: Tensor) -> Tensor:
    cx = ad.clip(cb[:, 0], 0.0, 1.0)
    cy = ad.clip(cb[:, 1], 0.0, 1.0)
    w = ad.clip(cb[:, 2], MIN_SIZE, 1.0)
    h = ad.clip(cb[:, 3], MIN_SIZE, 1.0)
    return ad.stack(
        [
            ad.clip(cx - w * 0.5, 0.0, 1.0),
            ad.clip(cy - h * 0.5, 0.0, 1.0),
            ad.clip(cx + w * 0.5, 0.0, 1.0),
            ad.clip(cy + h * 0.5, 0.0, 1.0),
        ],
        axis=1,
    )


def predict_boxes(qs: QuerySet, params: dict, prev_boxes, refine: str = "additive"):
    """Class probability from a sigmoid head; boxes refined from ``prev_boxes``
    by a delta head in center-size space and clamped to the frame.

    Returns ``(probs, boxes, logits)`` as tensors.
    """
    p = params
    x = qs.features
    logits = (x @ p["head.cls.w"] + p["head.cls.b"]).reshape(-1)
    probs = ad.sigmoid(logits)
    h = ad.relu(x @ p["head.box.w1"] + p["head.box.b1"])
    delta = h @ p["head.box.w2"] + p["head.box.b2"]
    prev = _corners_to_center(ad.as_tensor(prev_boxes))
    if refine == "inverse_sigmoid":
        pv = ad.clip(prev, 1e-6, 1.0 - 1e-6)
        new = ad.sigmoid(ad.log(pv) - ad.log(1.0 - pv) + delta)
    else:
        new = prev + delta
    return probs, _center_to_clipped_corners(new), logits


def initial_queries(config: DecoderConfig, params: dict) -> QuerySet:
    start = ad.sigmoid(params["query.box"])
    boxes = _center_to_clipped_corners(start)
    return QuerySet(features=params["query.embed"] * 1.0, boxes=boxes)


def decoder_layer(
    qs: QuerySet, grid: FeatureGrid, config: DecoderConfig, params: dict, layer: int, field_boxes=None
) -> LayerOutput:
    p = layer_params(params, layer)
    s = self_attention_layer(qs, p, config.uses_dq(layer), config.k_neighbors, config.n_heads, field_boxes)
    c = cross_attention_layer(
        s, grid, p, config.cross_mode(layer), config.n_heads, config.grid_side, config.sampling_points, field_boxes
    )
    probs, boxes, logits = predict_boxes(c, p, qs.boxes, config.refine)
    out_q = replace(c, boxes=boxes)
    return LayerOutput(probs, boxes, out_q, logits)


def decoder_forward(grid: FeatureGrid, config: DecoderConfig, params: dict, field_boxes=None) -> DecoderRun:
    """Run all layers; layer ``t`` attends using the boxes predicted by layer ``t-1``.

    Shapes are validated before any computation. ``field_boxes`` (one array
    per layer, as recorded in ``run.field_boxes``) replays the boxes that
    neighborhoods and sample positions were built from.
    """
    validate_params(config, params)
    if grid.shape[2] != config.channels:
        raise ValueError(f"feature grid has {grid.shape[2]} channels, decoder expects {config.channels}")
    qs = initial_queries(config, params)
    start = qs
    layers = []
    for t in range(config.n_layers):
        out = decoder_layer(qs, grid, config, params, t, None if field_boxes is None else field_boxes[t])
        layers.append(out)
        qs = QuerySet(features=out.queries.features, boxes=out.boxes)
    return DecoderRun(layers, Tape(params, recorded=True), start)


def decoder_backward(loss, tape: Tape | None) -> dict:
    """Gradient of a scalar loss for every parameter recorded on ``tape``."""
    if tape is None or not tape.recorded:
        raise RuntimeError("backward called before forward")
    if not isinstance(loss, Tensor):
        if np.ndim(loss) != 0:
            raise ValueError("loss must be a scalar")
        return {k: np.zeros_like(v.value) for k, v in tape.params.items()}
    names = list(tape.params)
    grads = ad.grad(loss.reshape(()) if loss.shape != () else loss, [tape.params[k] for k in names])
    return dict(zip(names, grads))


# gradient checking

def probe_loss(run: DecoderRun, seed: int = 0) -> Tensor:
    """A fixed random linear functional of every layer's outputs plus a
    quadratic term on the final features, touching every parameter."""
    rng = np.random.default_rng(seed)
    total = None
    for out in run.layers:
        a = rng.normal(size=out.class_probs.shape)
        b = rng.normal(size=out.boxes.shape)
        term = (out.class_probs * a).sum() + (out.boxes * b).sum()
        total = term if total is None else total + term
    f = run.layers[-1].queries.features
    c = rng.normal(size=f.shape)
    return total + ((f * c) ** 2).sum() * 0.1


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference(fn: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn()`` for every entry of ``tensor`` (perturbed in place)."""
    out = np.zeros_like(tensor.value)
    flat = tensor.value.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return out


def gradient_check(grid: FeatureGrid, config: DecoderConfig, params: dict, loss_fn=probe_loss, h: float = 1e-5) -> dict:
    """Max relative error between reverse-mode and central-difference
    gradients, per parameter tensor."""
    run = decoder_forward(grid, config, params)
    grads = decoder_backward(loss_fn(run), run.tape)
    # box-derived fields carry no gradient, so the differences hold them fixed
    fixed = [b.copy() for b in run.field_boxes]

    def value():
        with ad.no_grad():
            return float(loss_fn(decoder_forward(grid, config, params, fixed)).value)

    report = {}
    for name, t in params.items():
        num = finite_difference(value, t, h)
        report[name] = float(relative_error(grads[name], num).max())
    return report


# diagnostics

def _inside(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """``points`` (..., 2) against ``boxes`` (..., 4), closed boxes."""
    return (
        (points[..., 0] >= boxes[..., 0])
        & (points[..., 0] <= boxes[..., 2])
        & (points[..., 1] >= boxes[..., 1])
        & (points[..., 1] <= boxes[..., 3])
    )


def attention_diagnostics(
    layers, gts, matches=None, query_to_gt=None, score_threshold: float | None = None, probs=None
) -> dict:
    """Per-layer attention field and matching statistics.

    ``layers`` is a list of :class:`QuerySet` (or :class:`LayerOutput`) and
    ``gts`` the ``(N_g, 4)`` full boxes. The per-layer matching is given either
    as ``matches[t]`` (an Assignment or a ``gt_to_pred`` array) or directly as
    ``query_to_gt[t]``, one GT index per query with -1 for none. Reports per
    layer:

    - ``outside_fraction``: cross points of matched queries outside their GT;
      ``outside_in_other_gt``: of those, the share inside some other GT;
    - ``similarity``: share of queries whose matched GT (or none) equals the
      previous layer's; ``consecutive_iou``: mean IoU of each query's box with
      its previous-layer box;
    - ``queries_per_gt``: histogram of how many queries have each GT as their
      nearest box, and ``missed_gts`` with no query at all.
    """
    qsets = [l.queries if isinstance(l, LayerOutput) else l for l in layers]
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    report = {"layers": []}
    prev_match = prev_boxes = None
    for t, qs in enumerate(qsets):
        n = qs.n_queries
        if query_to_gt is not None:
            q2g = np.asarray(query_to_gt[t], dtype=np.int64)
        else:
            g2p = matches[t]
            g2p = np.asarray(getattr(g2p, "gt_to_pred", g2p), dtype=np.int64)
            q2g = np.full(n, -1, dtype=np.int64)
            q2g[g2p] = np.arange(len(g2p))
        row = {"layer": t}
        if qs.cross_points is not None and (q2g >= 0).any():
            pts = qs.cross_points.reshape(n, -1, 2)
            matched = np.flatnonzero(q2g >= 0)
            own = gts[q2g[matched]][:, None, :]
            p = pts[matched]
            out = ~_inside(p, own)
            n_pts = p.shape[0] * p.shape[1]
            n_out = int(out.sum())
            row["outside_fraction"] = n_out / n_pts if n_pts else 0.0
            if n_out:
                op = p[out]
                owner = np.broadcast_to(q2g[matched][:, None], out.shape)[out]
                in_any = _inside(op[:, None, :], gts[None, :, :])
                in_any[np.arange(len(op)), owner] = False
                row["outside_in_other_gt"] = float(in_any.any(axis=1).mean())
            else:
                row["outside_in_other_gt"] = 0.0
        boxes = qs.box_array()
        if prev_match is not None:
            row["similarity"] = float(np.mean(q2g == prev_match))
            row["consecutive_iou"] = float(np.mean(np.diag(pairwise_iou(boxes, prev_boxes))))
        if len(gts):
            keep = np.ones(n, dtype=bool)
            if score_threshold is not None and probs is not None:
                keep = np.asarray(probs[t]) >= score_threshold
            nearest = np.argmin(pairwise_query_distance(boxes[keep], gts), axis=1) if keep.any() else np.zeros(0, int)
            counts = np.bincount(nearest, minlength=len(gts))
            hist = np.bincount(counts)
            row["queries_per_gt"] = {str(i): int(c) for i, c in enumerate(hist) if c}
            row["missed_gts"] = int((counts == 0).sum())
            row["gts_with_more_than_3"] = int((counts > 3).sum())
        report["layers"].append(row)
        prev_match, prev_boxes = q2g, boxes
    return report
