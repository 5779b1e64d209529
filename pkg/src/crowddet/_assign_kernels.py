"""Compiled kernels for the assignment solvers.

All kernels work on GT-major cost buffers ``cost[g, p]`` (one contiguous row per
ground truth). Potentials follow the rectangular LP dual: ``u`` per GT (free),
``v`` per prediction (``v <= 0``, zero on unmatched predictions), and
``cost[g, p] - u[g] - v[p] >= 0`` with equality on matched pairs.
"""
import numpy as np
from numba import njit

STATUS_CERTIFIED = 0
STATUS_INFEASIBLE = 1
STATUS_VIOLATED = 2


@njit(cache=True)
def dense_sap(cost):
    """Shortest-augmenting-path Kuhn-Munkres on a dense (n_gt, n_pred) matrix."""
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m)
    owner = np.full(m, -1, np.int64)
    minv = np.empty(m)
    way = np.empty(m, np.int64)
    used = np.empty(m, np.bool_)
    for root in range(n):
        minv[:] = np.inf
        way[:] = -1
        used[:] = False
        g = root
        prev = -1
        while True:
            row = cost[g]
            ug = u[g]
            delta = np.inf
            j1 = -1
            for j in range(m):
                if not used[j]:
                    r = row[j] - ug - v[j]
                    if r < minv[j]:
                        minv[j] = r
                        way[j] = prev
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            if j1 < 0:
                raise ValueError("assignment infeasible")
            u[root] += delta
            for j in range(m):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            used[j1] = True
            if owner[j1] < 0:
                break
            prev = j1
            g = owner[j1]
        j = j1
        while True:
            pj = way[j]
            if pj < 0:
                owner[j] = root
                break
            owner[j] = owner[pj]
            j = pj
    gt_to_pred = np.full(n, -1, np.int64)
    for j in range(m):
        if owner[j] >= 0:
            gt_to_pred[owner[j]] = j
    return gt_to_pred, u, v


@njit(cache=True)
def _count_below(row, t):
    c = 0
    for j in range(row.shape[0]):
        c += row[j] < t
    return c


@njit(cache=True)
def _swap(bd, bi, a, b):
    td = bd[a]
    ti = bi[a]
    bd[a] = bd[b]
    bi[a] = bi[b]
    bd[b] = td
    bi[b] = ti


@njit(cache=True)
def nearest_candidates(dist, k):
    """Exact k nearest predictions per GT row of ``dist`` (ties to lower index).

    Each row is bracketed by branch-free counting passes until a threshold
    has between ``k`` and ``k + slack`` entries below it (interpolation
    search). Those entries are gathered and the surplus is dropped by
    ``(distance, index)``. If tied values make the bracket unsplittable, all
    entries under the upper bracket are ranked instead.
    Returns ``(cand, kth)``: indices per GT and the k-th smallest distance.
    """
    n, m = dist.shape
    slack = max(2, k // 4)
    cand = np.empty((n, k), np.int64)
    kth = np.empty(n)
    bd = np.empty(m)
    bi = np.empty(m, np.int64)
    for g in range(n):
        row = dist[g]
        lo_t = 0.0
        lo_c = 0
        hi_t = 3.0  # 1 - GIoU never exceeds 2
        hi_c = m
        t = 1.0
        while k < m:
            c = _count_below(row, t)
            if c >= k:
                hi_t = t
                hi_c = c
                if c <= k + slack:
                    break
            else:
                lo_t = t
                lo_c = c
            nxt = lo_t + (k - lo_c + 0.5 * slack) * (hi_t - lo_t) / (hi_c - lo_c)
            margin = 0.05 * (hi_t - lo_t)
            if nxt < lo_t + margin or nxt > hi_t - margin:
                nxt = 0.5 * (lo_t + hi_t)
            if nxt <= lo_t or nxt >= hi_t:
                break  # only ties remain between the brackets
            t = nxt
        nt = 0
        for j in range(m):
            if row[j] < hi_t:
                bd[nt] = row[j]
                bi[nt] = j
                nt += 1
        if nt - k <= k:
            while nt > k:
                w = 0
                for r in range(1, nt):
                    if bd[r] > bd[w] or (bd[r] == bd[w] and bi[r] > bi[w]):
                        w = r
                nt -= 1
                bd[w] = bd[nt]
                bi[w] = bi[nt]
        else:
            for q in range(k):
                best = q
                for r in range(q + 1, nt):
                    if bd[r] < bd[best] or (bd[r] == bd[best] and bi[r] < bi[best]):
                        best = r
                _swap(bd, bi, q, best)
        mx = -np.inf
        for q in range(k):
            cand[g, q] = bi[q]
            if bd[q] > mx:
                mx = bd[q]
        kth[g] = mx
    return cand, kth


@njit(cache=True)
def sparse_sap(cost, cand):
    """Shortest-augmenting-path solve restricted to the candidate edges ``cand[g]``.

    Returns ``(gt_to_pred, u, v, feasible)``.
    """
    n, m = cost.shape
    k = cand.shape[1]
    u = np.zeros(n)
    v = np.zeros(m)
    owner = np.full(m, -1, np.int64)
    minv = np.full(m, np.inf)
    way = np.full(m, -1, np.int64)
    used = np.zeros(m, np.bool_)
    touched = np.empty(m, np.int64)
    gt_to_pred = np.full(n, -1, np.int64)
    for root in range(n):
        # common case: the cheapest candidate is still free
        best = np.inf
        jb = -1
        for t in range(k):
            j = cand[root, t]
            r = cost[root, j] - v[j]
            if r < best or (r == best and j < jb):
                best = r
                jb = j
        if owner[jb] < 0:
            owner[jb] = root
            u[root] = best
            continue
        nt = 0
        g = root
        prev = -1
        while True:
            ug = u[g]
            for t in range(k):
                j = cand[g, t]
                if used[j]:
                    continue
                r = cost[g, j] - ug - v[j]
                if minv[j] == np.inf:
                    touched[nt] = j
                    nt += 1
                if r < minv[j]:
                    minv[j] = r
                    way[j] = prev
            delta = np.inf
            j1 = -1
            for t in range(nt):
                j = touched[t]
                if not used[j]:
                    if minv[j] < delta or (minv[j] == delta and j < j1):
                        delta = minv[j]
                        j1 = j
            if j1 < 0:
                return gt_to_pred, u, v, False
            u[root] += delta
            for t in range(nt):
                j = touched[t]
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            used[j1] = True
            if owner[j1] < 0:
                break
            prev = j1
            g = owner[j1]
        j = j1
        while True:
            pj = way[j]
            if pj < 0:
                owner[j] = root
                break
            owner[j] = owner[pj]
            j = pj
        for t in range(nt):
            j = touched[t]
            minv[j] = np.inf
            used[j] = False
            way[j] = -1
    for j in range(m):
        if owner[j] >= 0:
            gt_to_pred[owner[j]] = j
    return gt_to_pred, u, v, True


@njit(cache=True)
def certify(cost, gt_to_pred, u, v, kth, use_bound, gt_scale, pred_offset):
    """Check dual feasibility and complementary slackness on the full matrix.

    With ``use_bound``, ``cost[g, p] >= dist[g, p] * gt_scale[g] + pred_offset[p]``
    holds for every entry and non-candidates have ``dist >= kth[g]``. As
    ``v <= 0``, rows where that bound already covers ``u[g]`` are cleared
    without a scan; all other rows are scanned in full.
    Returns ``(ok, n_rows_scanned)``.
    """
    n, m = cost.shape
    umax = 0.0
    for g in range(n):
        umax = max(umax, abs(u[g]))
    vmax = 0.0
    for j in range(m):
        vmax = max(vmax, abs(v[j]))
    tol = 1e-11 * (1.0 + umax + vmax)
    matched = np.zeros(m, np.bool_)
    for g in range(n):
        j = gt_to_pred[g]
        matched[j] = True
        if abs(cost[g, j] - u[g] - v[j]) > tol:
            return False, 0
    floor = np.inf
    for j in range(m):
        if v[j] > tol:
            return False, 0
        if not matched[j] and v[j] != 0.0:
            return False, 0
        floor = min(floor, pred_offset[j] - v[j])
    scanned = 0
    for g in range(n):
        if use_bound and kth[g] * gt_scale[g] + floor - u[g] >= tol:
            continue
        scanned += 1
        row = cost[g]
        low = np.inf
        for j in range(m):
            low = min(low, row[j] - v[j])
        if low - u[g] < -tol:
            return False, scanned
    return True, scanned


@njit(cache=True)
def fast_km(cost, dist, k, use_bound, gt_scale, pred_offset):
    cand, kth = nearest_candidates(dist, k)
    gt_to_pred, u, v, feasible = sparse_sap(cost, cand)
    if not feasible:
        return gt_to_pred, STATUS_INFEASIBLE, 0
    ok, scanned = certify(cost, gt_to_pred, u, v, kth, use_bound, gt_scale, pred_offset)
    if not ok:
        return gt_to_pred, STATUS_VIOLATED, scanned
    return gt_to_pred, STATUS_CERTIFIED, scanned
