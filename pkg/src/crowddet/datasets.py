"""Pedestrian annotation I/O (odgt), synthetic crowd scenes and visibility-aware cropping.

A dataset is a list of ``(image_id, [Annotation, ...])`` pairs. Synthetic
scenes use integer pixel coordinates so they survive an odgt round trip
exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Annotation, BBox, as_box_array, pairwise_iou

IGNORE_TAGS = ("mask",)
OVERLAP_IOU = 0.5


# ---------------------------------------------------------------- odgt I/O


def _box_from_xywh(rec: dict, key: str) -> BBox:
    if key not in rec:
        raise ValueError(f"missing {key}")
    v = rec[key]
    if not isinstance(v, (list, tuple)) or len(v) != 4:
        raise ValueError(f"{key} must be [x, y, w, h]")
    x, y, w, h = (float(c) for c in v)
    return BBox.from_xywh(x, y, w, h)


def parse_gtbox(rec: dict) -> Annotation:
    """One ``gtboxes`` entry. Ignore comes from ``extra.ignore`` or a mask tag."""
    if not isinstance(rec, dict):
        raise ValueError("gtbox entry must be an object")
    tag = str(rec.get("tag", "person"))
    extra = rec.get("extra") or {}
    ignore = bool(int(extra.get("ignore", 0))) or tag in IGNORE_TAGS
    return Annotation(_box_from_xywh(rec, "fbox"), _box_from_xywh(rec, "vbox"), tag, ignore, raw=rec)


def load_odgt(path, errors: list | None = None, with_sizes: bool = False) -> list:
    """Read an odgt file into ``[(image_id, annotations), ...]``.

    Bad lines or boxes raise ``ValueError`` naming the line (and box index).
    When an ``errors`` list is supplied, those messages are appended there and
    the offending records are skipped instead. With ``with_sizes`` each item
    gains a third element, ``(width, height)`` or None, read from optional
    ``width``/``height`` keys.
    """
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or "ID" not in rec:
                    raise ValueError("record needs an ID")
                boxes = rec.get("gtboxes", [])
                if not isinstance(boxes, list):
                    raise ValueError("gtboxes must be a list")
            except ValueError as e:
                msg = f"{path}:{n}: {e}"
                if errors is None:
                    raise ValueError(msg) from e
                errors.append(msg)
                continue
            anns = []
            for j, b in enumerate(boxes):
                try:
                    anns.append(parse_gtbox(b))
                except (ValueError, TypeError) as e:
                    msg = f"{path}:{n}: gtbox {j}: {e}"
                    if errors is None:
                        raise ValueError(msg) from e
                    errors.append(msg)
            item = (rec["ID"], anns)
            if with_sizes:
                size = (rec["width"], rec["height"]) if "width" in rec and "height" in rec else None
                item = item + (size,)
            out.append(item)
    return out


def _xywh(b: BBox) -> list:
    return [_plain(v) for v in b.to_xywh()]


def _plain(v: float):
    """Integers stay integers in the file; anything else is written as a float."""
    return int(v) if float(v).is_integer() and abs(v) < 2**53 else float(v)


def gtbox_record(ann: Annotation) -> dict:
    """The odgt entry for ``ann``; the source record is reused when it still
    describes the same boxes, so foreign keys survive a round trip."""
    raw = ann.raw
    if raw is not None:
        try:
            same = parse_gtbox(raw)
            if (same.fbox, same.vbox, same.tag, same.ignore) == (ann.fbox, ann.vbox, ann.tag, ann.ignore):
                return raw
        except (ValueError, TypeError):
            pass
    rec = dict(raw) if raw else {}
    extra = dict(rec.get("extra") or {})
    extra["ignore"] = int(ann.ignore)
    rec.update(tag=ann.tag, fbox=_xywh(ann.fbox), vbox=_xywh(ann.vbox), extra=extra)
    return rec


def write_odgt(path, dataset, sizes: dict | None = None) -> None:
    """Write ``[(image_id, annotations), ...]``; ``sizes`` maps image id to
    ``(width, height)`` and adds those keys to the record."""
    with open(path, "w") as fh:
        for item in dataset:
            image_id, anns = item[0], item[1]
            rec = {"ID": image_id, "gtboxes": [gtbox_record(a) for a in anns]}
            if sizes and image_id in sizes:
                rec["width"], rec["height"] = (_plain(v) for v in sizes[image_id])
            fh.write(json.dumps(rec) + "\n")


# ------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """Distribution of synthetic crowd scenes.

    Person count per image is ``1 + Poisson(persons_per_image - 1)`` and the
    number of deliberately overlapping pairs (IoU above 0.5) is
    ``Poisson(overlaps_per_image)``; every other pair is kept at IoU <= 0.5,
    so both means are hit in expectation. People gather in ``n_clusters``
    groups shaped as horizontal lines or blobs of relative size ``spread``.
    """

    width: int = 1024
    height: int = 768
    persons_per_image: float = 22.64
    overlaps_per_image: float = 2.40
    n_clusters: int = 3
    spread: float = 0.15
    height_median: float = 0.22  # person height as a fraction of the frame
    height_sigma: float = 0.45
    aspect: float = 0.41  # width / height of a full body
    seed: int = 0
    fixed_counts: bool = False  # exactly round(mean) persons and pairs in every image

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError("frame must be at least 16x16 pixels")
        if self.persons_per_image < 1:
            raise ValueError("persons_per_image must be >= 1")
        if self.overlaps_per_image < 0:
            raise ValueError("overlaps_per_image must be >= 0")
        if self.overlaps_per_image > self.persons_per_image / 2:
            raise ValueError("infeasible spec: each overlapping pair needs two distinct persons")
        if self.n_clusters < 1 or not 0 < self.spread <= 1:
            raise ValueError("need n_clusters >= 1 and spread in (0, 1]")
        if not 0 < self.height_median <= 0.9 or self.height_sigma < 0 or self.aspect <= 0:
            raise ValueError("bad person size distribution")
        # mean box area times count against a generous occlusion allowance
        mean_h2 = (self.height_median * self.height) ** 2 * math.exp(2 * self.height_sigma**2)
        if self.persons_per_image * self.aspect * mean_h2 > 4.0 * self.width * self.height:
            raise ValueError("infeasible spec: persons cannot fit in the frame at this density")


class InfeasibleScene(ValueError):
    pass


def overlap_pairs(boxes, threshold: float = OVERLAP_IOU) -> int:
    """Number of unordered box pairs with IoU strictly above ``threshold``."""
    b = as_box_array(boxes)
    if len(b) < 2:
        return 0
    iou = pairwise_iou(b, b)
    return int(np.sum(np.triu(iou > threshold, 1)))


def largest_free_rect(box: np.ndarray, occluders: np.ndarray) -> np.ndarray:
    """Largest axis-aligned sub-box of ``box`` not covered by any occluder.

    Works on the grid induced by all box edges; returns a zero-area box at the
    corner when nothing is visible.
    """
    x0, y0, x1, y1 = box
    occ = occluders[
        (occluders[:, 0] < x1) & (occluders[:, 2] > x0) & (occluders[:, 1] < y1) & (occluders[:, 3] > y0)
    ] if len(occluders) else occluders
    if len(occ) == 0:
        return box.copy()
    xs = np.unique(np.clip(np.concatenate([[x0, x1], occ[:, 0], occ[:, 2]]), x0, x1))
    ys = np.unique(np.clip(np.concatenate([[y0, y1], occ[:, 1], occ[:, 3]]), y0, y1))
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    covered = np.zeros((len(cy), len(cx)), dtype=bool)
    for o in occ:
        covered |= ((cy > o[1]) & (cy < o[3]))[:, None] & ((cx > o[0]) & (cx < o[2]))[None, :]
    best_area, best = 0.0, np.array([x0, y0, x0, y0])
    run = np.zeros(len(cx))  # free height reaching up from the current row
    for r in range(len(cy)):
        run = np.where(covered[r], 0.0, run + (ys[r + 1] - ys[r]))
        # largest rectangle under a histogram with uneven bar widths
        stack: list = []  # (start column, height)
        for c in range(len(cx) + 1):
            h = run[c] if c < len(cx) else 0.0
            start = c
            while stack and stack[-1][1] >= h:
                s, sh = stack.pop()
                area = sh * (xs[c] - xs[s])
                if area > best_area:
                    best_area = area
                    best = np.array([xs[s], ys[r + 1] - sh, xs[c], ys[r + 1]])
                start = s
            if h > 0:
                stack.append((start, h))
    return best


def visible_boxes(fboxes: np.ndarray) -> np.ndarray:
    """Visible box of each person under painter's order: a person whose feet
    are lower in the frame (larger ``y_max``) stands in front."""
    f = as_box_array(fboxes)
    depth = np.lexsort((np.arange(len(f)), f[:, 3]))  # back to front
    rank = np.empty(len(f), dtype=np.int64)
    rank[depth] = np.arange(len(f))
    out = np.empty_like(f)
    for i in range(len(f)):
        front = f[rank > rank[i]]
        out[i] = largest_free_rect(f[i], front)
    return out


def _person_box(rng, spec: SceneSpec, center) -> np.ndarray:
    W, H = spec.width, spec.height
    # perspective: people further up the frame stand further back and look smaller
    depth = 0.5 + float(np.clip(center[1] / H, 0.0, 1.0))
    h = H * float(np.clip(depth * spec.height_median * math.exp(spec.height_sigma * rng.standard_normal()), 0.04, 0.9))
    w = min(h * spec.aspect * rng.uniform(0.85, 1.15), 0.9 * W)
    cx = float(np.clip(center[0], w / 2, W - w / 2))
    cy = float(np.clip(center[1], h / 2, H - h / 2))
    return _snap(np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]), W, H)


def _snap(b: np.ndarray, W: int, H: int) -> np.ndarray:
    """Round to whole pixels, keep inside the frame and at least 2px wide."""
    b = np.round(b)
    b[[0, 2]] = np.clip(b[[0, 2]], 0, W)
    b[[1, 3]] = np.clip(b[[1, 3]], 0, H)
    if b[2] - b[0] < 2:
        b[0], b[2] = (b[0], b[0] + 2) if b[0] + 2 <= W else (W - 2, W)
    if b[3] - b[1] < 2:
        b[1], b[3] = (b[1], b[1] + 2) if b[1] + 2 <= H else (H - 2, H)
    return b


def _clusters(rng, spec: SceneSpec):
    out = []
    for _ in range(spec.n_clusters):
        kind = "line" if rng.random() < 0.5 else "blob"
        out.append((kind, rng.uniform(0.1, 0.9) * spec.width, rng.uniform(0.25, 0.85) * spec.height))
    return out


def _cluster_point(rng, spec: SceneSpec, clusters):
    kind, cx, cy = clusters[int(rng.integers(len(clusters)))]
    s = spec.spread
    if kind == "line":
        return cx + rng.uniform(-2.0, 2.0) * s * spec.width, cy + rng.normal(0, 0.15 * s) * spec.height
    return cx + rng.normal(0, s) * spec.width, cy + rng.normal(0, s) * spec.height


def _fits(b: np.ndarray, placed: list, skip=()) -> bool:
    """Accept ``b`` as the next person when its IoU with everyone (other than
    ``skip``) stays at or below 0.5, it shows some visible area, and it does
    not fully hide anyone already placed."""
    if not placed:
        return True
    arr = np.array(placed)
    iou = pairwise_iou(b[None], arr)[0]
    iou[list(skip)] = 0.0
    if np.any(iou > OVERLAP_IOU):
        return False
    n = len(arr)
    # painter's order as in visible_boxes: (y_max, index) larger = in front
    in_front = arr[:, 3] > b[3]  # the candidate takes index n, after everyone
    if _area(largest_free_rect(b, arr[in_front])) <= 0:
        return False
    touching = np.flatnonzero(~in_front & (_overlap_area(arr, b) > 0))
    for k in touching:
        front_k = np.flatnonzero((arr[:, 3] > arr[k, 3]) | ((arr[:, 3] == arr[k, 3]) & (np.arange(n) > k)))
        occ = np.concatenate([arr[front_k], b[None]])
        if _area(largest_free_rect(arr[k], occ)) <= 0:
            return False
    return True


def _area(b: np.ndarray) -> float:
    return float((b[2] - b[0]) * (b[3] - b[1]))


def _overlap_area(arr: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = np.minimum(arr[:, 2], b[2]) - np.maximum(arr[:, 0], b[0])
    h = np.minimum(arr[:, 3], b[3]) - np.maximum(arr[:, 1], b[1])
    return np.clip(w, 0, None) * np.clip(h, 0, None)


def _free_person(rng, spec, clusters, placed, max_tries):
    for attempt in range(max_tries):
        # fall back to uniform placement when the clusters are saturated
        if attempt < max_tries // 2:
            center = _cluster_point(rng, spec, clusters)
        else:
            center = (rng.uniform(0, spec.width), rng.uniform(0, spec.height))
        b = _person_box(rng, spec, center)
        if _fits(b, placed):
            return b
    return None


def _partner(rng, spec, anchor: int, placed, max_tries):
    """A box overlapping ``placed[anchor]`` with IoU above 0.5 and nobody else."""
    base = placed[anchor]
    w, h = base[2] - base[0], base[3] - base[1]
    for _ in range(max_tries):
        s = rng.uniform(0.85, 1.15)
        cx = 0.5 * (base[0] + base[2]) + rng.uniform(-0.25, 0.25) * w
        cy = 0.5 * (base[1] + base[3]) + rng.uniform(-0.1, 0.1) * h
        b = _snap(np.array([cx - s * w / 2, cy - s * h / 2, cx + s * w / 2, cy + s * h / 2]), spec.width, spec.height)
        if pairwise_iou(b[None], base[None])[0, 0] > OVERLAP_IOU and _fits(b, placed, (anchor,)):
            return b
    return None


def _place_scene(rng, spec: SceneSpec, n_persons: int, n_pairs: int, max_tries: int = 400):
    """Full and visible boxes for one scene.

    Free persons never overlap anyone with IoU above 0.5; ``n_pairs`` planted
    partners overlap exactly one free person. Every placement keeps everyone
    at least partly visible.
    """
    clusters = _clusters(rng, spec)
    placed: list = []
    for _ in range(n_persons - n_pairs):
        b = _free_person(rng, spec, clusters, placed, max_tries)
        if b is None:
            raise InfeasibleScene("could not place a person without unplanned overlaps")
        placed.append(b)
    n_free, planted = len(placed), 0
    for a in rng.permutation(n_free):
        if planted == n_pairs:
            break
        b = _partner(rng, spec, int(a), placed, max_tries // 4)
        if b is not None:
            placed.append(b)
            planted += 1
    if planted < n_pairs:
        raise InfeasibleScene("could not plant the requested overlapping pairs")
    full = np.array(placed, dtype=np.float64).reshape(-1, 4)
    vis = visible_boxes(full)
    if np.any((vis[:, 2] <= vis[:, 0]) | (vis[:, 3] <= vis[:, 1])):
        raise InfeasibleScene("a person ended up fully hidden")
    return full, vis


def generate_scene(spec: SceneSpec, rng, max_restarts: int = 20) -> list:
    """One synthetic image's annotations (integer pixel boxes)."""
    if spec.fixed_counts:
        n = int(round(spec.persons_per_image))
        pairs = min(int(round(spec.overlaps_per_image)), n // 2)
    else:
        n = 1 + int(rng.poisson(spec.persons_per_image - 1))
        pairs = min(int(rng.poisson(spec.overlaps_per_image)), n // 2)
    for _ in range(max_restarts):
        try:
            full, vis = _place_scene(rng, spec, n, pairs)
        except InfeasibleScene:
            continue
        return [Annotation(BBox.from_array(f), BBox.from_array(v)) for f, v in zip(full, vis)]
    raise InfeasibleScene(f"no valid layout for {n} persons with {pairs} overlapping pairs")


def generate_scenes(spec: SceneSpec, n_images: int) -> list:
    """``n_images`` scenes as ``[(image_id, annotations), ...]``. Each image has
    its own RNG stream derived from ``spec.seed``, so images are independent
    of one another and of generation order."""
    spec.validate()
    if n_images < 0:
        raise ValueError("n_images must be >= 0")
    streams = np.random.SeedSequence(spec.seed).spawn(n_images)
    width = max(6, len(str(n_images)))
    return [
        (f"synthetic_{i:0{width}d}", generate_scene(spec, np.random.default_rng(ss)))
        for i, ss in enumerate(streams)
    ]


def dataset_statistics(dataset) -> dict:
    """Mean persons and mean IoU>0.5 full-box pairs per image (ignores excluded)."""
    persons, pairs = [], []
    for item in dataset:
        anns = [a for a in item[1] if not a.ignore]
        persons.append(len(anns))
        pairs.append(overlap_pairs([a.fbox for a in anns]))
    n = len(persons)
    return {
        "n_images": n,
        "persons_per_image": float(np.mean(persons)) if n else 0.0,
        "overlaps_per_image": float(np.mean(pairs)) if n else 0.0,
    }


# ------------------------------------------------------------- cropping


@dataclass(frozen=True)
class CropSpec:
    """Crop window sampling. Window sides are drawn independently and
    uniformly between ``min_scale`` and ``max_scale`` of the frame."""

    min_scale: float = 0.5
    max_scale: float = 1.0
    min_retention: float = 0.8
    max_retries: int = 50
    clip_fbox: bool = False  # full-body boxes may extend past the crop

    def validate(self) -> None:
        if not 0 < self.min_scale <= self.max_scale <= 1:
            raise ValueError("need 0 < min_scale <= max_scale <= 1")
        if not 0 < self.min_retention <= 1:
            raise ValueError("min_retention must lie in (0, 1]")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass
class CropResult:
    window: BBox  # in source image coordinates
    annotations: list  # remapped into window coordinates
    kept: list  # source index of each remapped annotation
    retention: list  # visible-area retention of each kept annotation
    attempts: int
    fallback: bool = False  # retry budget ran out; identity crop returned
    rejected: list = field(default_factory=list)  # windows turned down


def _frame_box(frame) -> BBox:
    if isinstance(frame, BBox):
        return frame
    w, h = frame
    return BBox(0.0, 0.0, float(w), float(h))


def vbox_retention(ann: Annotation, window: BBox) -> float:
    """Share of the visible box's area that lies inside ``window``."""
    v = ann.vbox
    if v.area <= 0:
        return 1.0 if window.contains_point(v.x_min, v.y_min) else 0.0
    iw = min(v.x_max, window.x_max) - max(v.x_min, window.x_min)
    ih = min(v.y_max, window.y_max) - max(v.y_min, window.y_min)
    return max(iw, 0.0) * max(ih, 0.0) / v.area


def window_ok(annotations, window: BBox, min_retention: float = 0.8) -> bool:
    """A window is acceptable when no non-ignore pedestrian is cut: each is
    either left out entirely or keeps at least ``min_retention`` of its
    visible area."""
    for a in annotations:
        if a.ignore:
            continue
        r = vbox_retention(a, window)
        if 0.0 < r < min_retention:
            return False
    return True


def _clip(b: BBox, w: BBox) -> BBox | None:
    x0, y0 = max(b.x_min, w.x_min), max(b.y_min, w.y_min)
    x1, y1 = min(b.x_max, w.x_max), min(b.y_max, w.y_max)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1, y1)


def _shift(b: BBox, dx: float, dy: float) -> BBox:
    return BBox(b.x_min - dx, b.y_min - dy, b.x_max - dx, b.y_max - dy)


def apply_crop(annotations, window: BBox, spec: CropSpec = CropSpec()):
    """Remap annotations into ``window``. Returns ``(annotations, kept, retention)``;
    pedestrians whose visible box misses the window are dropped."""
    out, kept, ret = [], [], []
    dx, dy = window.x_min, window.y_min
    for i, a in enumerate(annotations):
        r = vbox_retention(a, window)
        vis = _clip(a.vbox, window)
        if vis is None:
            if a.ignore and _clip(a.fbox, window) is not None:
                vis = BBox(window.x_min, window.y_min, window.x_min, window.y_min)
            else:
                continue
        fbox = a.fbox
        if spec.clip_fbox:
            fbox = _clip(fbox, window) or vis
        same = vis == a.vbox and fbox == a.fbox and dx == 0 and dy == 0
        new = a if same else Annotation(_shift(fbox, dx, dy), _shift(vis, dx, dy), a.tag, a.ignore, raw=a.raw)
        out.append(new)
        kept.append(i)
        ret.append(r)
    return out, kept, ret


def sample_window(frame: BBox, spec: CropSpec, rng) -> BBox:
    W, H = frame.width, frame.height
    w = int(rng.integers(math.ceil(spec.min_scale * W), math.floor(spec.max_scale * W) + 1))
    h = int(rng.integers(math.ceil(spec.min_scale * H), math.floor(spec.max_scale * H) + 1))
    x = frame.x_min + int(rng.integers(0, int(W) - w + 1))
    y = frame.y_min + int(rng.integers(0, int(H) - h + 1))
    return BBox(float(x), float(y), float(x + w), float(y + h))


def crop_augment(frame, annotations, spec: CropSpec = CropSpec(), rng=None, propose=None) -> CropResult:
    """Sample a crop window that never cuts a pedestrian's visible region.

    Windows are drawn by ``propose(rng)`` (default: :func:`sample_window`) and
    rejected while any non-ignore pedestrian would keep some but less than
    ``spec.min_retention`` of its visible box. After ``spec.max_retries``
    rejections the full frame is returned with ``fallback`` set.
    """
    spec.validate()
    fb = _frame_box(frame)
    rng = np.random.default_rng(rng)
    draw = propose or (lambda g: sample_window(fb, spec, g))
    anns = list(annotations)
    rejected = []
    for attempt in range(1, spec.max_retries + 1):
        win = draw(rng)
        if window_ok(anns, win, spec.min_retention):
            out, kept, ret = apply_crop(anns, win, spec)
            return CropResult(win, out, kept, ret, attempt, False, rejected)
        rejected.append(win)
    return CropResult(fb, anns, list(range(len(anns))), [1.0] * len(anns), spec.max_retries, True, rejected)


def min_retention(result: CropResult, source) -> float:
    """Smallest visible-area retention among kept non-ignore pedestrians,
    recomputed from the source annotations (1.0 when none are kept)."""
    vals = [vbox_retention(source[i], result.window) for i in result.kept if not source[i].ignore]
    return min(vals, default=1.0)
