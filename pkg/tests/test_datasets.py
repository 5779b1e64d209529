import itertools
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowddet.datasets import (
    CropSpec,
    SceneSpec,
    apply_crop,
    crop_augment,
    dataset_statistics,
    generate_scenes,
    largest_free_rect,
    load_odgt,
    min_retention,
    overlap_pairs,
    vbox_retention,
    visible_boxes,
    write_odgt,
)
from crowddet.geometry import Annotation, BBox

FIXTURES = Path(__file__).parent / "fixtures"


def test_empty_file(tmp_path):
    p = tmp_path / "e.odgt"
    p.write_text("")
    assert load_odgt(p) == []


def test_single_line_exact_coordinates(tmp_path):
    p = tmp_path / "one.odgt"
    p.write_text(json.dumps({"ID": "a", "gtboxes": [{"tag": "person", "fbox": [1.5, 2, 10, 20.25], "vbox": [2, 3, 4, 5]}]}) + "\n")
    ((image_id, anns),) = load_odgt(p)
    assert image_id == "a"
    assert anns[0].fbox == BBox(1.5, 2.0, 11.5, 22.25)
    assert anns[0].vbox == BBox(2.0, 3.0, 6.0, 8.0)
    assert not anns[0].ignore


def test_ignore_fixture():
    data = load_odgt(FIXTURES / "ignore_sample.odgt")
    assert [len(a) for _, a in data] == [3, 1]
    flags = [a.ignore for a in data[0][1]]
    # plain person, mask region, person flagged through extra.ignore
    assert flags == [False, True, True]
    assert data[0][1][2].fbox == BBox(300.5, 40.25, 380.5, 251.0)
    assert data[1][1][0].ignore is False


def test_malformed_records_name_their_line(tmp_path):
    p = tmp_path / "bad.odgt"
    good = json.dumps({"ID": "x", "gtboxes": []})
    p.write_text(good + "\n{not json\n" + json.dumps({"ID": "y", "gtboxes": [{"fbox": [0, 0, 1, 1]}]}) + "\n")
    with pytest.raises(ValueError, match=r":2:"):
        load_odgt(p)
    errors = []
    data = load_odgt(p, errors=errors)
    assert [i for i, _ in data] == ["x", "y"]
    assert data[1][1] == []
    assert len(errors) == 2 and ":3: gtbox 0: missing vbox" in errors[1]


def test_missing_file_is_an_io_error(tmp_path):
    with pytest.raises(OSError):
        load_odgt(tmp_path / "nope.odgt")


def test_fixture_round_trip_is_byte_faithful(tmp_path):
    src = FIXTURES / "ignore_sample.odgt"
    data = load_odgt(src)
    out = tmp_path / "out.odgt"
    write_odgt(out, data)
    assert load_odgt(out) == data
    for a, b in zip(src.read_text().splitlines(), out.read_text().splitlines()):
        assert json.loads(a) == json.loads(b)


coord = st.integers(0, 400).map(lambda v: v / 2)


@st.composite
def datasets(draw):
    out = []
    for i in range(draw(st.integers(0, 4))):
        anns = []
        for _ in range(draw(st.integers(0, 5))):
            x, y = draw(coord), draw(coord)
            w, h = draw(coord) + 1, draw(coord) + 1
            vw, vh = draw(st.integers(1, 2 * int(w))) / 2, draw(st.integers(1, 2 * int(h))) / 2
            anns.append(Annotation(BBox(x, y, x + w, y + h), BBox(x, y, x + vw, y + vh), "person", draw(st.booleans())))
        out.append((f"img{i}", anns))
    return out


@settings(max_examples=60, deadline=None)
@given(datasets())
def test_write_then_load_is_identity(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("rt") / "d.odgt"
    write_odgt(p, data)
    assert load_odgt(p) == data


def test_sizes_travel_with_records(tmp_path):
    data = generate_scenes(SceneSpec(seed=3, persons_per_image=4, overlaps_per_image=1), 3)
    p = tmp_path / "g.odgt"
    write_odgt(p, data, sizes={i: (1024, 768) for i, _ in data})
    back = load_odgt(p, with_sizes=True)
    assert [(i, a) for i, a, _ in back] == data
    assert {s for _, _, s in back} == {(1024, 768)}


def test_single_person_no_overlap_spec():
    data = generate_scenes(SceneSpec(persons_per_image=1, overlaps_per_image=0, seed=5), 40)
    assert all(len(a) == 1 for _, a in data)
    assert dataset_statistics(data)["overlaps_per_image"] == 0.0


def test_generator_is_deterministic_and_per_image():
    spec = SceneSpec(seed=11)
    a = generate_scenes(spec, 12)
    assert a == generate_scenes(spec, 12)
    assert a[:5] == generate_scenes(spec, 12)[:5]
    assert a != generate_scenes(SceneSpec(seed=12), 12)


def test_generated_boxes_are_well_formed():
    spec = SceneSpec(seed=2)
    for _, anns in generate_scenes(spec, 30):
        for a in anns:
            f, v = a.fbox, a.vbox
            assert 0 <= f.x_min < f.x_max <= spec.width and 0 <= f.y_min < f.y_max <= spec.height
            assert f.x_min <= v.x_min < v.x_max <= f.x_max and f.y_min <= v.y_min < v.y_max <= f.y_max
            assert all(float(c).is_integer() for c in (*f.as_array(), *v.as_array()))


def test_generated_overlaps_are_only_the_planted_pairs():
    # one planted pair per image on average; the count per image never
    # exceeds half the people
    for _, anns in generate_scenes(SceneSpec(seed=4, persons_per_image=6, overlaps_per_image=1), 50):
        assert overlap_pairs([a.fbox for a in anns]) <= len(anns) // 2


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(persons_per_image=4, overlaps_per_image=3),
        dict(persons_per_image=0.5),
        dict(overlaps_per_image=-1),
        dict(persons_per_image=400, height_median=0.6),
        dict(width=8),
    ],
)
def test_infeasible_specs_are_rejected(kwargs):
    with pytest.raises(ValueError):
        generate_scenes(SceneSpec(**kwargs), 1)


def test_overlap_pairs_is_strict():
    a = [0, 0, 2, 1]
    b = [1, 0, 3, 1]  # IoU 1/3
    c = [0, 0, 3, 1]  # IoU 2/3 with a, exactly 2/3 with b
    assert overlap_pairs([a, b]) == 0
    assert overlap_pairs([a, c]) == 1
    assert overlap_pairs([[0, 0, 3, 1], [1, 0, 4, 1]]) == 0  # IoU exactly 0.5


def _free_cells(box, occluders, side):
    free = np.zeros((side, side), dtype=bool)
    x0, y0, x1, y1 = (int(v) for v in box)
    free[y0:y1, x0:x1] = True
    for o in occluders:
        ox0, oy0, ox1, oy1 = (int(v) for v in o)
        free[oy0:oy1, ox0:ox1] = False
    return free


def _best_free_area(free):
    side = free.shape[0]
    best = 0
    for y0, y1 in itertools.combinations(range(side + 1), 2):
        rows = free[y0:y1].all(axis=0)
        run = 0
        for ok in rows:
            run = run + 1 if ok else 0
            best = max(best, run * (y1 - y0))
    return best


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(*[st.integers(0, 9)] * 4), min_size=1, max_size=6))
def test_largest_free_rect_matches_raster_search(raw):
    boxes = np.array([[min(a, c), min(b, d), max(a, c) + 1, max(b, d) + 1] for a, b, c, d in raw], dtype=float)
    target, occ = boxes[0], boxes[1:]
    got = largest_free_rect(target, occ)
    free = _free_cells(target, occ, 11)
    area = (got[2] - got[0]) * (got[3] - got[1])
    assert area == _best_free_area(free)
    if area > 0:
        gx0, gy0, gx1, gy1 = (int(v) for v in got)
        assert free[gy0:gy1, gx0:gx1].all()


def test_visible_boxes_painter_order():
    # the lower-standing person is in front and hides the left half behind it
    f = np.array([[0, 0, 4, 10], [0, 2, 2, 12]], dtype=float)
    v = visible_boxes(f)
    assert v[1].tolist() == [0, 2, 2, 12]
    assert v[0].tolist() == [2, 0, 4, 10]


# ---------------------------------------------------------------- cropping


def _person(x0, y0, x1, y1, vbox=None):
    f = BBox(x0, y0, x1, y1)
    return Annotation(f, vbox or f)


def test_full_frame_crop_leaves_annotations_unchanged():
    anns = [_person(10, 10, 50, 100), _person(60, 20, 90, 80, BBox(60, 20, 90, 50))]
    res = crop_augment((200, 200), anns, rng=0, propose=lambda g: BBox(0, 0, 200, 200))
    assert res.annotations == anns and res.kept == [0, 1] and not res.fallback
    out, kept, ret = apply_crop(anns, BBox(0, 0, 200, 200))
    assert out == anns and ret == [1.0, 1.0]


def test_fully_contained_vbox_has_retention_one():
    a = _person(10, 10, 50, 100)
    assert vbox_retention(a, BBox(5, 5, 60, 120)) == 1.0
    out, kept, ret = apply_crop([a], BBox(5, 5, 60, 120))
    assert kept == [0] and ret == [1.0]
    assert out[0].fbox == BBox(5, 5, 45, 95)


def test_window_retaining_79_percent_is_rejected():
    a = _person(0, 0, 100, 10)
    cut = BBox(21, 0, 150, 150)
    assert vbox_retention(a, cut) == pytest.approx(0.79)
    fine = BBox(0, 0, 150, 150)
    proposals = iter([cut, fine])
    res = crop_augment((200, 200), [a], rng=0, propose=lambda g: next(proposals))
    assert res.rejected == [cut]
    assert res.window == fine and res.attempts == 2
    # exactly 80% is allowed
    res = crop_augment((200, 200), [a], rng=0, propose=lambda g: BBox(20, 0, 150, 150))
    assert res.attempts == 1 and res.retention == [pytest.approx(0.8)]


def test_retry_budget_falls_back_to_identity():
    a = _person(0, 0, 100, 10)
    res = crop_augment((200, 200), [a], CropSpec(max_retries=5), rng=0, propose=lambda g: BBox(50, 0, 150, 150))
    assert res.fallback and res.attempts == 5 and len(res.rejected) == 5
    assert res.window == BBox(0, 0, 200, 200) and res.annotations == [a]


def test_people_outside_the_window_are_dropped():
    anns = [_person(0, 0, 10, 10), _person(100, 100, 120, 140)]
    res = crop_augment((200, 200), anns, rng=0, propose=lambda g: BBox(90, 90, 200, 200))
    assert res.kept == [1]
    assert res.annotations[0].fbox == BBox(10, 10, 30, 50)


def test_full_box_is_not_clipped_by_default():
    a = _person(40, 40, 80, 160, BBox(45, 45, 75, 90))
    win = BBox(0, 0, 100, 100)
    (kept,), _, _ = apply_crop([a], win)
    assert kept.fbox == BBox(40, 40, 80, 160)
    (clipped,), _, _ = apply_crop([a], win, CropSpec(clip_fbox=True))
    assert clipped.fbox == BBox(40, 40, 80, 100)


def test_ignore_regions_do_not_block_windows():
    region = Annotation(BBox(0, 0, 100, 100), BBox(0, 0, 100, 100), "mask", True)
    res = crop_augment((200, 200), [region], rng=0, propose=lambda g: BBox(50, 50, 200, 200))
    assert res.attempts == 1 and res.kept == [0]
    assert res.annotations[0].vbox == BBox(0, 0, 50, 50)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_sampled_crops_keep_visible_area(seed):
    spec = SceneSpec(seed=seed, persons_per_image=8, overlaps_per_image=1)
    (_, anns), = generate_scenes(spec, 1)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        res = crop_augment((spec.width, spec.height), anns, CropSpec(), rng)
        assert min_retention(res, anns) >= 0.8
        w = res.window
        assert 0 <= w.x_min < w.x_max <= spec.width and 0 <= w.y_min < w.y_max <= spec.height
        for i, a in zip(res.kept, res.annotations):
            assert a.vbox.area == pytest.approx(vbox_retention(anns[i], w) * anns[i].vbox.area)


def test_crop_is_seed_deterministic():
    spec = SceneSpec(seed=9)
    (_, anns), = generate_scenes(spec, 1)
    a = crop_augment((spec.width, spec.height), anns, rng=5)
    b = crop_augment((spec.width, spec.height), anns, rng=5)
    assert a.window == b.window and a.annotations == b.annotations
