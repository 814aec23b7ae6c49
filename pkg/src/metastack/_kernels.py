"""Compiled kernels for tree induction and forest prediction.

Design constraints the kernels guarantee:

* All randomness flows from splitmix64 states. Each node's feature subset is
  derived from its root-to-node path, not from a shared stream, so a tree
  capped at depth d is bit-identical to the top d levels of a deeper tree
  built from the same seed. Grid search exploits this to train one forest
  per fold and evaluate every (n_estimators, max_depth) cell exactly.
* Bootstrap resamples are deduplicated into (sample, weight) pairs; Gini
  arithmetic runs on summed weights, which reproduces the duplicated-sample
  tree exactly while shrinking every node by ~1/e.
* Training matrices are column-major so per-node value gathers stay inside
  one cached column.
* Split scanning avoids divisions through a reciprocal table, and (for the
  binary unweighted min_leaf=1 case) skips Gini evaluation at boundaries
  between value runs that are pure and share one class; such cuts can never
  beat the best class-boundary cut, so the scan stays exact.
* Sorting switches from quicksort to LSD radix above a size cutoff.
"""

from __future__ import annotations

import numpy as np
from numba import njit

U64 = np.uint64
_MASK = U64(0xFFFFFFFFFFFFFFFF)
_RADIX_CUTOFF = 2048


@njit(cache=True, inline="always")
def _mix_step(state):
    """splitmix64: advance the state and emit one 64-bit output."""
    state = (state + U64(0x9E3779B97F4A7C15)) & _MASK
    z = state
    z = ((z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)) & _MASK
    z = ((z ^ (z >> U64(27))) * U64(0x94D049BB133111EB)) & _MASK
    z = z ^ (z >> U64(31))
    return state, z


@njit(cache=True)
def mix64(a, b):
    """Deterministic combination of two 64-bit values into one."""
    state = (U64(a) ^ U64(0xA0761D6478BD642F)) & _MASK
    state, z1 = _mix_step(state)
    state = (state ^ U64(b)) & _MASK
    _, z2 = _mix_step(state)
    return z2


@njit(cache=True)
def _quick_pairs(vals, pay, n):
    """Ascending sort of vals[:n] carrying the uint16 payload."""
    stack = np.empty((64, 2), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = n - 1
    while top >= 0:
        lo = stack[top, 0]
        hi = stack[top, 1]
        top -= 1
        while hi - lo > 24:
            mid = (lo + hi) // 2
            if vals[lo] > vals[mid]:
                vals[lo], vals[mid] = vals[mid], vals[lo]
                pay[lo], pay[mid] = pay[mid], pay[lo]
            if vals[lo] > vals[hi]:
                vals[lo], vals[hi] = vals[hi], vals[lo]
                pay[lo], pay[hi] = pay[hi], pay[lo]
            if vals[mid] > vals[hi]:
                vals[mid], vals[hi] = vals[hi], vals[mid]
                pay[mid], pay[hi] = pay[hi], pay[mid]
            pivot = vals[mid]
            i = lo
            j = hi
            while i <= j:
                while vals[i] < pivot:
                    i += 1
                while vals[j] > pivot:
                    j -= 1
                if i <= j:
                    vals[i], vals[j] = vals[j], vals[i]
                    pay[i], pay[j] = pay[j], pay[i]
                    i += 1
                    j -= 1
            if j - lo < hi - i:
                if i < hi:
                    top += 1
                    stack[top, 0] = i
                    stack[top, 1] = hi
                hi = j
            else:
                if lo < j:
                    top += 1
                    stack[top, 0] = lo
                    stack[top, 1] = j
                lo = i
        for i in range(lo + 1, hi + 1):
            v = vals[i]
            p = pay[i]
            j = i - 1
            while j >= lo and vals[j] > v:
                vals[j + 1] = vals[j]
                pay[j + 1] = pay[j]
                j -= 1
            vals[j + 1] = v
            pay[j + 1] = p


@njit(cache=True)
def _radix_pairs(vals, pay, n, keys, tmp_k, tmp_v, tmp_p, bucket):
    """Ascending sort via order-preserving uint64 keys, 6 x 11-bit LSD passes."""
    SIGN = U64(0x8000000000000000)
    for i in range(n):
        b = np.float64(vals[i]).view(np.uint64)
        if b & SIGN:
            keys[i] = b ^ _MASK
        else:
            keys[i] = b | SIGN
    src_k, src_v, src_p = keys, vals, pay
    dst_k, dst_v, dst_p = tmp_k, tmp_v, tmp_p
    mask = U64(2047)
    for p in range(6):
        sh = U64(11 * p)
        for b in range(2048):
            bucket[b] = 0
        for i in range(n):
            bucket[(src_k[i] >> sh) & mask] += 1
        total = 0
        for b in range(2048):
            cnt = bucket[b]
            bucket[b] = total
            total += cnt
        for i in range(n):
            b = (src_k[i] >> sh) & mask
            pos = bucket[b]
            bucket[b] = pos + 1
            dst_k[pos] = src_k[i]
            dst_v[pos] = src_v[i]
            dst_p[pos] = src_p[i]
        src_k, dst_k = dst_k, src_k
        src_v, dst_v = dst_v, src_v
        src_p, dst_p = dst_p, src_p
    # 6 passes: data ends back in the original arrays


@njit(cache=True, fastmath=True)
def build_tree(
    Xc,
    y,
    sample_idx,
    n_classes,
    max_depth,
    min_leaf,
    mtry,
    tree_seed,
    bootstrap,
    weights,
):
    """Grow one CART tree with Gini splits on per-node random feature subsets.

    Xc is (d, n_all) column-major; sample_idx selects the training rows.
    Returns flat node arrays: feature (-1 for leaves), threshold, left, right,
    and per-node integer class counts (bootstrap multiplicities included).
    Split rule is x <= threshold -> left.
    """
    d = Xc.shape[0]
    n_draws = len(sample_idx)
    if n_draws == 0:
        return (
            np.full(1, -1, dtype=np.int32),
            np.zeros(1, dtype=np.float64),
            np.full(1, -1, dtype=np.int32),
            np.full(1, -1, dtype=np.int32),
            np.zeros((1, n_classes), dtype=np.int64),
        )

    # draw the bootstrap, then collapse duplicates into integer weights
    mult = np.zeros(n_draws, dtype=np.int64)
    if bootstrap:
        state = mix64(tree_seed, U64(0xB001))
        for i in range(n_draws):
            state, z = _mix_step(state)
            mult[z % U64(n_draws)] += 1
    else:
        for i in range(n_draws):
            mult[i] = 1
    n = 0
    for i in range(n_draws):
        if mult[i] > 0:
            n += 1
    idx = np.empty(n, dtype=np.int64)
    pay0 = np.empty(n, dtype=np.uint16)  # weight << 4 | label
    pos = 0
    for i in range(n_draws):
        if mult[i] > 0:
            idx[pos] = sample_idx[i]
            w = mult[i]
            if w > 4095:
                w = 4095  # unreachable in practice; keeps the packing safe
            pay0[pos] = np.uint16((w << 4) | y[sample_idx[i]])
            pos += 1

    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    counts = np.zeros((cap, n_classes), dtype=np.int64)

    inv = np.empty(n_draws + 1, dtype=np.float64)
    inv[0] = 0.0
    for i in range(1, n_draws + 1):
        inv[i] = 1.0 / i

    perm = np.empty(d, dtype=np.int64)
    vals = np.empty(n, dtype=np.float64)
    pay = np.empty(n, dtype=np.uint16)
    keys = np.empty(n, dtype=np.uint64)
    tmp_k = np.empty(n, dtype=np.uint64)
    tmp_v = np.empty(n, dtype=np.float64)
    tmp_p = np.empty(n, dtype=np.uint16)
    bucket = np.empty(2048, dtype=np.int64)
    lcnt = np.empty(n_classes, dtype=np.int64)
    pend_cnt = np.empty(n_classes, dtype=np.int64)

    weighted = False
    for c in range(n_classes):
        if weights[c] != 1.0:
            weighted = True
    fast = (not weighted) and min_leaf == 1

    stack = np.empty((2 * max_depth + 64, 4), dtype=np.int64)
    states = np.empty(2 * max_depth + 64, dtype=np.uint64)
    stack[0] = (0, n, 0, 0)
    states[0] = mix64(tree_seed, U64(0x0907))
    top = 0
    n_nodes = 1
    binary = n_classes == 2
    while top >= 0:
        start = stack[top, 0]
        end = stack[top, 1]
        depth = stack[top, 2]
        node = stack[top, 3]
        node_state = states[top]
        top -= 1
        m = end - start
        mw = np.int64(0)
        for c in range(n_classes):
            counts[node, c] = 0
        for i in range(start, end):
            p = pay0[i]
            counts[node, p & np.uint16(15)] += np.int64(p >> 4)
        w_max = np.int64(0)
        for c in range(n_classes):
            mw += counts[node, c]
            if counts[node, c] > w_max:
                w_max = counts[node, c]
        if depth >= max_depth or mw < 2 * min_leaf or w_max == mw:
            continue

        if weighted:
            wtot = 0.0
            parent = 0.0
            for c in range(n_classes):
                wc = counts[node, c] * weights[c]
                parent += wc * wc
                wtot += wc
            parent /= wtot
        else:
            psum = np.int64(0)
            for c in range(n_classes):
                psum += counts[node, c] * counts[node, c]
            parent = psum * inv[mw]

        best_gain = 1e-12
        best_f = -1
        best_thr = 0.0
        tot1 = counts[node, 1]
        state = node_state
        evaluated = 0
        for j in range(d):
            # mtry random candidates, constants included; if every candidate
            # was constant, keep drawing so a splittable node never stalls
            if j >= mtry and evaluated > 0:
                break
            state, z = _mix_step(state)
            k = j + np.int64(z % U64(d - j))
            if j == 0:
                for q in range(d):
                    perm[q] = q
            perm[j], perm[k] = perm[k], perm[j]
            f = perm[j]
            col = Xc[f]
            # constant columns (common under marker imputation) need no sort
            v0 = col[idx[start]]
            const = True
            for i in range(start + 1, end):
                if col[idx[i]] != v0:
                    const = False
                    break
            if const:
                continue
            evaluated += 1
            for i in range(m):
                vals[i] = col[idx[start + i]]
                pay[i] = pay0[start + i]
            if m > _RADIX_CUTOFF:
                _radix_pairs(vals, pay, m, keys, tmp_k, tmp_v, tmp_p, bucket)
            else:
                _quick_pairs(vals, pay, m)
            if vals[0] == vals[m - 1]:
                continue
            if fast and binary:
                # filtered scan: evaluate only at class-boundary cuts, with
                # one deferred candidate to catch runs that turn mixed
                l1 = np.int64(0)
                wl = np.int64(0)
                run_class = np.uint16(pay[0]) & np.uint16(15)
                run_pure = True
                pend = np.int64(-1)
                pend_l1 = np.int64(0)
                pend_wl = np.int64(0)
                pend_v = 0.0
                pend_v2 = 0.0
                for i in range(m - 1):
                    p = pay[i]
                    wt = np.int64(p >> 4)
                    lab = np.int64(p & np.uint16(15))
                    l1 += wt * lab
                    wl += wt
                    nxt = np.uint16(pay[i + 1]) & np.uint16(15)
                    if vals[i] != vals[i + 1]:
                        if (not run_pure) or np.int64(nxt) != np.int64(run_class):
                            nl = wl
                            nr = mw - wl
                            l0 = nl - l1
                            r1 = tot1 - l1
                            r0 = nr - r1
                            score = (l1 * l1 + l0 * l0) * inv[nl] + (
                                r1 * r1 + r0 * r0
                            ) * inv[nr]
                            gain = score - parent
                            if gain > best_gain:
                                best_gain = gain
                                best_f = f
                                mid = 0.5 * (vals[i] + vals[i + 1])
                                if mid == vals[i + 1]:
                                    mid = vals[i]
                                best_thr = mid
                            pend = -1
                        else:
                            pend = i
                            pend_l1 = l1
                            pend_wl = wl
                            pend_v = vals[i]
                            pend_v2 = vals[i + 1]
                        run_pure = True
                        run_class = nxt
                    elif np.int64(nxt) != np.int64(run_class):
                        if pend >= 0:
                            nl = pend_wl
                            nr = mw - pend_wl
                            l1p = pend_l1
                            l0 = nl - l1p
                            r1 = tot1 - l1p
                            r0 = nr - r1
                            score = (l1p * l1p + l0 * l0) * inv[nl] + (
                                r1 * r1 + r0 * r0
                            ) * inv[nr]
                            gain = score - parent
                            if gain > best_gain:
                                best_gain = gain
                                best_f = f
                                mid = 0.5 * (pend_v + pend_v2)
                                if mid == pend_v2:
                                    mid = pend_v
                                best_thr = mid
                            pend = -1
                        run_pure = False
            else:
                for c in range(n_classes):
                    lcnt[c] = 0
                wl = np.int64(0)
                for i in range(m - 1):
                    p = pay[i]
                    wt = np.int64(p >> 4)
                    lcnt[p & np.uint16(15)] += wt
                    wl += wt
                    if vals[i] == vals[i + 1]:
                        continue
                    nl = wl
                    nr = mw - wl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    if weighted:
                        sl = 0.0
                        sr = 0.0
                        wlf = 0.0
                        wrf = 0.0
                        for c in range(n_classes):
                            lw = lcnt[c] * weights[c]
                            rw = (counts[node, c] - lcnt[c]) * weights[c]
                            sl += lw * lw
                            sr += rw * rw
                            wlf += lw
                            wrf += rw
                        if wlf <= 0.0 or wrf <= 0.0:
                            continue
                        score = sl / wlf + sr / wrf
                    else:
                        sli = np.int64(0)
                        sri = np.int64(0)
                        for c in range(n_classes):
                            lc = lcnt[c]
                            rc = counts[node, c] - lc
                            sli += lc * lc
                            sri += rc * rc
                        score = sli * inv[nl] + sri * inv[nr]
                    gain = score - parent
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        mid = 0.5 * (vals[i] + vals[i + 1])
                        if mid == vals[i + 1]:
                            mid = vals[i]
                        best_thr = mid
        if best_f < 0:
            continue

        colf = Xc[best_f]
        i = start
        j = end - 1
        while i <= j:
            if colf[idx[i]] <= best_thr:
                i += 1
            else:
                idx[i], idx[j] = idx[j], idx[i]
                pay0[i], pay0[j] = pay0[j], pay0[i]
                j -= 1
        split = i
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lnode
        right[node] = rnode
        # children derive their rng state from the parent's path state
        top += 1
        stack[top] = (start, split, depth + 1, lnode)
        states[top] = mix64(node_state, U64(1))
        top += 1
        stack[top] = (split, end, depth + 1, rnode)
        states[top] = mix64(node_state, U64(2))

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        counts[:n_nodes].copy(),
    )


@njit(cache=True)
def forest_proba_at_cuts(
    X,
    offsets,
    feature,
    threshold,
    left,
    right,
    counts,
    cuts,
    depth_cap,
    n_classes,
    weights,
):
    """Mean per-tree leaf distributions, snapshotted after each tree-count cut.

    Trees are traversed at most depth_cap levels deep; an inner node at the
    cap acts as a leaf through its stored class counts, which makes the
    result identical to a forest trained with that max_depth.
    """
    n = X.shape[0]
    n_cuts = len(cuts)
    out = np.zeros((n_cuts, n, n_classes), dtype=np.float64)
    acc = np.zeros((n, n_classes), dtype=np.float64)
    dist = np.empty(n_classes, dtype=np.float64)
    cut_pos = 0
    n_trees = len(offsets) - 1
    for t in range(n_trees):
        base = offsets[t]
        for i in range(n):
            node = 0
            depth = 0
            while depth < depth_cap and feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
                depth += 1
            s = 0.0
            for c in range(n_classes):
                dist[c] = counts[base + node, c] * weights[c]
                s += dist[c]
            for c in range(n_classes):
                acc[i, c] += dist[c] / s
        while cut_pos < n_cuts and cuts[cut_pos] == t + 1:
            inv_t = 1.0 / (t + 1)
            for i in range(n):
                for c in range(n_classes):
                    out[cut_pos, i, c] = acc[i, c] * inv_t
            cut_pos += 1
        if cut_pos >= n_cuts:
            break
    return out


@njit(cache=True)
def tree_apply(X, feature, threshold, left, right, depth_cap):
    """Leaf (or cap-level node) index reached by each row of X."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        depth = 0
        while depth < depth_cap and feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
            depth += 1
        out[i] = node
    return out


def warm_up() -> None:
    """Trigger compilation of all kernels on tiny inputs."""
    Xc = np.ascontiguousarray(np.arange(8, dtype=np.float64).reshape(2, 4))
    y = np.array([0, 1, 0, 1], dtype=np.int8)
    sample = np.arange(4, dtype=np.int64)
    w = np.ones(2, dtype=np.float64)
    f, t, l, r, c = build_tree(Xc, y, sample, 2, 3, 1, 1, U64(1), True, w)
    offs = np.array([0, len(f)], dtype=np.int64)
    forest_proba_at_cuts(
        Xc.T.copy(), offs, f, t, l, r, c, np.array([1], dtype=np.int64), 3, 2, w
    )
    tree_apply(Xc.T.copy(), f, t, l, r, 3)
    mix64(U64(1), U64(2))
