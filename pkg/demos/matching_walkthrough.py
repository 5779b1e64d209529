"""Walk through Fast-KM on one crowded instance and compare it with the exact solver."""
import time

import numpy as np

from crowddet.assignment import build_match_cost, solve_exact, solve_fast_km
from crowddet.bench import clustered_instance


def main():
    rng = np.random.default_rng(0)
    inst = clustered_instance(rng, 400, 100)
    cost = build_match_cost((inst.probs, inst.pred_boxes), inst.gt_boxes)
    print(f"cost matrix: {cost.values.shape[0]} predictions x {cost.values.shape[1]} ground truths")

    solve_exact(cost), solve_fast_km(cost)  # compile kernels before timing
    for k in (1, 4, 16, 64):
        t0 = time.perf_counter()
        fast = solve_fast_km(cost, k_candidates=k)
        t_fast = time.perf_counter() - t0
        t0 = time.perf_counter()
        exact = solve_exact(cost)
        t_exact = time.perf_counter() - t0
        print(
            f"k={k:>3}: certificate={fast.certificate:<18} cost diff={abs(fast.total_cost - exact.total_cost):.1e} "
            f"fast {t_fast * 1e6:7.0f}us exact {t_exact * 1e6:7.0f}us"
        )


if __name__ == "__main__":
    main()
