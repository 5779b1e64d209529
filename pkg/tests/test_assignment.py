import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from crowddet.assignment import (
    FALLBACK_EXACT,
    OPTIMAL_CERTIFIED,
    OPTIMAL_EXACT,
    CostMatrix,
    MatchWeights,
    brute_force_assignment,
    build_match_cost,
    solve_exact,
    solve_fast_km,
)
from crowddet.bench import clustered_instance, random_instance
from crowddet.geometry import BBox, pairwise_giou


def _scipy_total(values):
    rows, cols = linear_sum_assignment(values)
    return float(values[rows, cols].sum())


def test_cost_examples():
    c = build_match_cost([(1.0, BBox(0, 0, 1, 1))], [BBox(0, 0, 1, 1)], (1, 1, 1))
    assert c.values[0, 0] == -1.0
    c = build_match_cost([(0.5, BBox(0, 0, 1, 1))], [BBox(2, 2, 3, 3)], (1, 1, 1))
    assert c.values[0, 0] == pytest.approx(-0.5 + 8 + 16 / 9, abs=1e-12)
    for p in (0.0, 0.3, 1.0):
        c = build_match_cost([(p, BBox(1, 2, 3, 5))], [BBox(1, 2, 3, 5)], (0, 1, 1))
        assert c.values[0, 0] == 0.0


def test_cost_defaults_and_layout():
    preds = [(0.9, BBox(0, 0, 1, 2)), (0.2, BBox(0.5, 0, 1.5, 2)), (0.4, BBox(3, 3, 4, 4))]
    gts = [BBox(0, 0, 1, 2), BBox(3, 3, 4, 5)]
    c = build_match_cost(preds, gts)
    assert c.weights == MatchWeights(2.0, 5.0, 2.0)
    assert c.shape == (3, 2)
    # entry-by-entry oracle
    for i, (p, b) in enumerate(preds):
        for j, g in enumerate(gts):
            l1 = np.abs(b.as_array() - g.as_array()).sum()
            gi = pairwise_giou(b.as_array()[None], g.as_array()[None])[0, 0]
            assert c.values[i, j] == pytest.approx(-2 * p + 5 * l1 + 2 * (1 - gi), abs=1e-12)


def test_cost_errors():
    with pytest.raises(ValueError, match="more GTs than predictions"):
        build_match_cost([(0.5, BBox(0, 0, 1, 1))], [BBox(0, 0, 1, 1)] * 2)
    with pytest.raises(ValueError, match="more GTs than predictions"):
        CostMatrix(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        build_match_cost([(1.5, BBox(0, 0, 1, 1))], [BBox(0, 0, 1, 1)])
    with pytest.raises(ValueError):
        CostMatrix([[np.inf]])


def test_exact_small_examples():
    a = solve_exact(CostMatrix([[1, 2], [2, 1]]))
    assert a.gt_to_pred.tolist() == [0, 1]
    assert a.total_cost == 2.0
    assert a.certificate == OPTIMAL_EXACT
    one = solve_exact(CostMatrix([[3.5]]))
    assert one.gt_to_pred.tolist() == [0] and one.total_cost == 3.5


def test_exact_matches_permutation_oracle_8x8():
    rng = np.random.default_rng(8)
    values = rng.integers(0, 100, (8, 8)).astype(float)
    _, best = brute_force_assignment(CostMatrix(values))
    assert solve_exact(CostMatrix(values)).total_cost == best
    assert solve_fast_km(CostMatrix(values), np.tile([0, 0, 1, 1.0], (8, 1)), np.tile([0, 0, 1, 1.0], (8, 1)), 3).total_cost == best


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2), st.integers(0, 10**6))
def test_square_and_rectangular_match_brute_force(n_g, extra, seed):
    rng = np.random.default_rng(seed)
    n_q = min(n_g + extra, 7)
    inst = random_instance(rng, n_q, n_g)
    c = build_match_cost((inst.probs, inst.pred_boxes), inst.gt_boxes)
    _, best = brute_force_assignment(c)
    assert solve_exact(c).total_cost == pytest.approx(best, abs=1e-9)
    for k in (1, 2, n_q):
        assert solve_fast_km(c, k_candidates=k).total_cost == pytest.approx(best, abs=1e-9)


def test_assignment_invariants():
    rng = np.random.default_rng(3)
    inst = clustered_instance(rng, 60, 20)
    c = build_match_cost((inst.probs, inst.pred_boxes), inst.gt_boxes)
    for a in (solve_exact(c), solve_fast_km(c, k_candidates=4)):
        assert len(set(a.gt_to_pred.tolist())) == 20
        assert a.total_cost == pytest.approx(c.values[a.gt_to_pred, np.arange(20)].sum(), abs=1e-12)
        back = a.pred_to_gt(60)
        assert all(back[p] == g for p, g in [(p, g) for p, g in a.pairs()])


def test_fast_km_disjoint_k1_is_certified():
    gts = np.array([[0, 0, 1, 2], [5, 0, 6, 2], [10, 0, 11, 2]], float)
    preds = np.concatenate([gts + 0.05, np.array([[20, 20, 21, 22], [30, 0, 31, 2]], float)])
    probs = np.array([0.9, 0.8, 0.7, 0.1, 0.2])
    c = build_match_cost((probs, preds), gts)
    fast = solve_fast_km(c, preds, gts, 1)
    exact = solve_exact(c)
    assert fast.certificate == OPTIMAL_CERTIFIED
    assert fast.gt_to_pred.tolist() == exact.gt_to_pred.tolist() == [0, 1, 2]
    assert fast.total_cost == exact.total_cost


def test_fast_km_adversarial_falls_back():
    # the nearest prediction is exact but unconfident; a slightly shifted
    # confident one is cheaper, and k=1 prunes it away
    gts = np.array([[0, 0, 1, 2.0]])
    preds = np.array([[0, 0, 1, 2.0], [0.01, 0, 1.01, 2.0]])
    probs = np.array([0.0, 1.0])
    c = build_match_cost((probs, preds), gts)
    fast = solve_fast_km(c, preds, gts, 1)
    assert fast.certificate == FALLBACK_EXACT
    assert fast.gt_to_pred.tolist() == [1]
    assert fast.total_cost == solve_exact(c).total_cost
    assert solve_fast_km(c, preds, gts, 2).certificate == OPTIMAL_CERTIFIED


def test_fast_km_identical_boxes_ties():
    # every box identical: candidates fall to the lowest indices, while the
    # optimum takes the most confident predictions
    gts = np.tile([0.2, 0.2, 0.4, 0.6], (10, 1))
    preds = np.tile([0.2, 0.2, 0.4, 0.6], (50, 1))
    probs = np.linspace(0, 1, 50)
    c = build_match_cost((probs, preds), gts)
    exact = solve_exact(c)
    assert sorted(exact.gt_to_pred.tolist()) == list(range(40, 50))
    for k in (1, 3, 16, 49, 50):
        fast = solve_fast_km(c, k_candidates=k)
        assert fast.total_cost == pytest.approx(exact.total_cost, abs=1e-12)
    assert solve_fast_km(c, k_candidates=50).certificate == OPTIMAL_CERTIFIED


def test_fast_km_clustered_scene_example():
    rng = np.random.default_rng(200)
    inst = clustered_instance(rng, 200, 30)
    c = build_match_cost((inst.probs, inst.pred_boxes), inst.gt_boxes)
    fast = solve_fast_km(c, inst.pred_boxes, inst.gt_boxes, 16)
    assert fast.total_cost == pytest.approx(solve_exact(c).total_cost, abs=1e-9)
    assert fast.total_cost == pytest.approx(_scipy_total(c.values), abs=1e-9)


def test_fast_km_plain_matrix_needs_boxes():
    c = CostMatrix(np.eye(3))
    with pytest.raises(ValueError):
        solve_fast_km(c, k_candidates=1)
    with pytest.raises(ValueError, match="k_candidates"):
        solve_fast_km(c, np.zeros((3, 4)), np.zeros((3, 4)), 0)


def test_fast_km_recomputes_distance_for_other_boxes():
    rng = np.random.default_rng(5)
    inst = random_instance(rng, 40, 10)
    c = build_match_cost((inst.probs, inst.pred_boxes), inst.gt_boxes)
    # ranking by unrelated boxes still yields the optimum (through certification or fallback)
    other = random_instance(rng, 40, 10)
    fast = solve_fast_km(c, other.pred_boxes, other.gt_boxes, 4)
    assert fast.total_cost == pytest.approx(solve_exact(c).total_cost, abs=1e-9)


def test_empty_gt_set():
    c = CostMatrix(np.zeros((4, 0)))
    assert solve_exact(c).total_cost == 0.0
    assert solve_fast_km(c, np.zeros((4, 4)), np.zeros((0, 4)), 2).gt_to_pred.size == 0


@pytest.mark.parametrize("kind", ["random", "clustered"])
def test_fast_equals_exact_and_scipy(kind):
    rng = np.random.default_rng(11)
    gen = clustered_instance if kind == "clustered" else random_instance
    for _ in range(60):
        n_q = int(rng.integers(10, 401))
        n_g = int(rng.integers(1, min(50, n_q) + 1))
        inst = gen(rng, n_q, n_g)
        c = build_match_cost((inst.probs, inst.pred_boxes), inst.gt_boxes)
        exact = solve_exact(c).total_cost
        assert exact == pytest.approx(_scipy_total(c.values), abs=1e-9)
        assert solve_fast_km(c, k_candidates=int(rng.integers(1, 20))).total_cost == pytest.approx(exact, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100.0))
def test_scale_invariance_of_argmin(seed, scale):
    rng = np.random.default_rng(seed)
    values = rng.uniform(-5, 5, (12, 6))  # continuous draws: tie-free
    a = solve_exact(CostMatrix(values))
    b = solve_exact(CostMatrix(values * scale))
    assert a.gt_to_pred.tolist() == b.gt_to_pred.tolist()
    boxes = rng.uniform(0, 1, (12, 2))
    pb = np.concatenate([boxes, boxes + 0.1], axis=1)
    f = solve_fast_km(CostMatrix(values * scale), pb, pb[:6], 3)
    assert f.gt_to_pred.tolist() == a.gt_to_pred.tolist()


def test_ties_go_to_lowest_prediction_index():
    a = solve_exact(CostMatrix(np.zeros((5, 2))))
    assert a.gt_to_pred.tolist() == [0, 1]
    c = build_match_cost((np.full(5, 0.5), np.tile([0, 0, 1, 1.0], (5, 1))), np.tile([0, 0, 1, 1.0], (2, 1)))
    assert solve_fast_km(c, k_candidates=5).gt_to_pred.tolist() == [0, 1]


box_st = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(1e-3, 0.5), st.floats(1e-3, 0.5)).map(
    lambda t: np.array([t[0], t[1], t[0] + t[2], t[1] + t[3]])
)


@settings(max_examples=500, deadline=None)
@given(box_st, box_st)
def test_l1_lower_bound_used_for_pruning(gt, pred):
    # |pred - gt|_1 >= (1 - GIoU) * min(gt width, gt height) / 2, which lets
    # certification skip rows whose k-th candidate is already far enough
    d = 1.0 - pairwise_giou(gt[None], pred[None])[0, 0]
    l1 = np.abs(gt - pred).sum()
    side = min(gt[2] - gt[0], gt[3] - gt[1])
    assert l1 >= d * side / 2 - 1e-12
