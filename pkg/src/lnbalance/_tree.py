"""Compiled CART regression kernels.

Trees are stored flat: parallel arrays indexed by node id, with ``left == -1``
marking a leaf. Every node records its sample count and target variance so
impurity decreases can be recomputed from a stored model.
"""

import numpy as np
from numba import njit

LEAF = -1
TIE_EPS = 1e-12


@njit(cache=True, nogil=True)
def _choose_features(n_features, n_sub, scratch):
    # partial Fisher-Yates; the chosen subset is returned sorted so that ties
    # resolve towards the lowest feature index
    for i in range(n_features):
        scratch[i] = i
    if n_sub >= n_features:
        return scratch[:n_features].copy()
    for i in range(n_sub):
        j = i + np.random.randint(n_features - i)
        tmp = scratch[i]
        scratch[i] = scratch[j]
        scratch[j] = tmp
    return np.sort(scratch[:n_sub].copy())


@njit(cache=True, nogil=True)
def best_split(xs, ys, order, start, end, features, min_leaf):
    """Best (feature, threshold, gain) for the node occupying ``order[:, start:end]``.

    ``xs``/``ys`` hold the tree's sample values (feature-major) and each
    ``order[f]`` lists sample positions sorted by feature ``f``. Gain is the
    reduction in summed squared error; thresholds are midpoints of
    consecutive distinct values. Feature -1 means no admissible split.
    """
    n = end - start
    mean = 0.0
    for t in range(start, end):
        mean += ys[order[0, t]]
    mean /= n
    best_f = -1
    best_thr = 0.0
    best_gain = 0.0
    for f in features:
        sum_left = 0.0
        for t in range(start, end - 1):
            pos = order[f, t]
            sum_left += ys[pos] - mean
            n_left = t - start + 1
            if n_left < min_leaf:
                continue
            if n - n_left < min_leaf:
                break
            lo = xs[f, pos]
            hi = xs[f, order[f, t + 1]]
            if not lo < hi:
                continue
            gain = sum_left * sum_left * n / (n_left * (n - n_left))
            if gain > best_gain + TIE_EPS * (1.0 + best_gain):
                thr = 0.5 * (lo + hi)
                if thr >= hi:
                    thr = lo
                best_gain = gain
                best_f = f
                best_thr = thr
    return best_f, best_thr, best_gain


@njit(cache=True, nogil=True)
def grow_tree(X, y, global_order, sample_idx, n_sub, min_leaf, max_depth, seed):
    """Grow one tree on the rows listed in ``sample_idx`` (duplicates allowed).

    ``global_order[f]`` is ``argsort(X[:, f])`` over all rows, shared by every
    tree. ``max_depth < 0`` means unlimited. Returns the flat node arrays
    (feature, threshold, left, right, value, n_samples, impurity).
    """
    np.random.seed(seed)
    n = sample_idx.shape[0]
    d = X.shape[1]
    xs = np.empty((d, n))
    ys = np.empty(n)
    for t in range(n):
        ys[t] = y[sample_idx[t]]
        for f in range(d):
            xs[f, t] = X[sample_idx[t], f]
    # bucket sample positions by source row, then read them off in each
    # feature's global order: a linear-time per-tree presort
    n_rows = X.shape[0]
    row_start = np.zeros(n_rows + 1, np.int64)
    for t in range(n):
        row_start[sample_idx[t] + 1] += 1
    for r in range(n_rows):
        row_start[r + 1] += row_start[r]
    fill = row_start[:-1].copy()
    by_row = np.empty(n, np.int32)
    for t in range(n):
        r = sample_idx[t]
        by_row[fill[r]] = t
        fill[r] += 1
    order = np.empty((d, n), np.int32)
    for f in range(d):
        k = 0
        for r in global_order[f]:
            for j in range(row_start[r], row_start[r + 1]):
                order[f, k] = by_row[j]
                k += 1
    go_left = np.zeros(n, np.bool_)
    buf = np.empty(n, np.int32)

    cap = 2 * n + 1
    feature = np.full(cap, LEAF, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, LEAF, np.int64)
    right = np.full(cap, LEAF, np.int64)
    value = np.zeros(cap)
    n_samples = np.zeros(cap, np.int64)
    impurity = np.zeros(cap)
    scratch = np.empty(d, np.int64)

    # stack entries: node id, start, end, depth
    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        m = end - start
        s = 0.0
        for t in range(start, end):
            s += ys[order[0, t]]
        mean = s / m
        ss = 0.0
        for t in range(start, end):
            dv = ys[order[0, t]] - mean
            ss += dv * dv
        value[node] = mean
        n_samples[node] = m
        impurity[node] = ss / m
        if m < 2 * min_leaf or ss <= 0.0 or (max_depth >= 0 and depth >= max_depth):
            continue
        feats = _choose_features(d, n_sub, scratch)
        f, thr, gain = best_split(xs, ys, order, start, end, feats, min_leaf)
        if f < 0:
            continue
        n_left = 0
        for t in range(start, end):
            pos = order[f, t]
            go = xs[f, pos] <= thr
            go_left[pos] = go
            if go:
                n_left += 1
        # stable partition keeps every feature's segment sorted
        for g in range(d):
            li = start
            ri = 0
            for t in range(start, end):
                pos = order[g, t]
                if go_left[pos]:
                    order[g, li] = pos
                    li += 1
                else:
                    buf[ri] = pos
                    ri += 1
            for t in range(ri):
                order[g, li + t] = buf[t]
        mid = start + n_left
        feature[node] = f
        threshold[node] = thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # right pushed first so the left subtree is expanded first
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = mid
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        stack[top + 1, 0] = n_nodes
        stack[top + 1, 1] = start
        stack[top + 1, 2] = mid
        stack[top + 1, 3] = depth + 1
        top += 2
        n_nodes += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), n_samples[:n_nodes].copy(),
            impurity[:n_nodes].copy())


@njit(cache=True, nogil=True)
def predict_forest(X, offsets, feature, threshold, left, right, value):
    """Mean over trees of the leaf value reached by each row of ``X``."""
    n_trees = offsets.shape[0] - 1
    out = np.zeros(X.shape[0])
    for r in range(X.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while left[base + node] != LEAF:
                if X[r, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[r] = acc / n_trees
    return out


@njit(cache=True, nogil=True)
def impurity_decrease(feature, left, right, n_samples, impurity, n_features):
    """Per-feature summed ``n*imp - n_l*imp_l - n_r*imp_r`` over one tree."""
    out = np.zeros(n_features)
    for node in range(feature.shape[0]):
        if left[node] == LEAF:
            continue
        l = left[node]
        r = right[node]
        dec = (n_samples[node] * impurity[node] - n_samples[l] * impurity[l]
               - n_samples[r] * impurity[r])
        out[feature[node]] += dec
    return out
