"""Compiled kernels for CART growth and tree traversal.

Trees live in flat node arrays. ``feature[i] == -1`` marks a leaf. Every
node, internal or not, stores the weighted mean target of the training
samples that reached it, which is what makes depth truncation and the
bias/contribution walk possible.
"""

import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True, nogil=True)
def build_tree(codes, uniq, Z, Y, w, samples, max_depth, min_split, min_leaf,
               max_features, feat_seed):
    """Grow one regression tree.

    codes:   (n, k) int64 rank of each feature value among the sorted distinct
             values of that feature (``uniq[f, code]`` is the value).
    Z:       (n, o) standardized targets; the split criterion uses these.
    Y:       (n, o) raw targets; node values use these.
    w:       (n,) sample multiplicities (bootstrap counts, or ones).
    samples: ascending row indices with w > 0.
    """
    n_feat = codes.shape[1]
    n_out = Y.shape[1]
    n_samp = samples.shape[0]
    cap = 2 * n_samp + 1

    feature = np.full(cap, LEAF, np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, LEAF, np.int32)
    right = np.full(cap, LEAF, np.int32)
    depth = np.zeros(cap, np.int32)
    weight = np.zeros(cap)
    value = np.zeros((cap, n_out))

    idx = samples.copy()
    tmp = np.empty(n_samp, np.int64)

    max_bins = uniq.shape[1]
    cnt = np.zeros(max_bins)
    sums = np.zeros((max_bins, n_out))
    tot = np.zeros(n_out)
    sl = np.zeros(n_out)

    subsample = max_features < n_feat
    order = np.arange(n_feat)
    if subsample:
        np.random.seed(feat_seed)

    # stack of (node, start, end)
    stack = np.empty((cap, 3), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_samp
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]

        wsum = 0.0
        for o in range(n_out):
            tot[o] = 0.0
        for j in range(start, end):
            r = idx[j]
            wsum += w[r]
            for o in range(n_out):
                tot[o] += w[r] * Y[r, o]
        weight[node] = wsum
        for o in range(n_out):
            value[node, o] = tot[o] / wsum

        if wsum < min_split or (max_depth >= 0 and depth[node] >= max_depth):
            continue
        pure = True
        r0 = idx[start]
        for j in range(start + 1, end):
            r = idx[j]
            for o in range(n_out):
                if Y[r, o] != Y[r0, o]:
                    pure = False
                    break
            if not pure:
                break
        if pure:
            continue

        if subsample:
            for a in range(n_feat):
                order[a] = a
            for a in range(max_features):
                b = a + np.random.randint(0, n_feat - a)
                t = order[a]
                order[a] = order[b]
                order[b] = t
            feats = np.sort(order[:max_features])
        else:
            feats = order

        best_f = -1
        best_code = -1
        best_thr = 0.0
        best_proxy = 0.0
        for f in feats:
            bmin = codes[idx[start], f]
            bmax = bmin
            for j in range(start + 1, end):
                c = codes[idx[j], f]
                if c < bmin:
                    bmin = c
                elif c > bmax:
                    bmax = c
            if bmin == bmax:
                continue
            nb = bmax - bmin + 1
            for b in range(nb):
                cnt[b] = 0.0
                for o in range(n_out):
                    sums[b, o] = 0.0
            for o in range(n_out):
                tot[o] = 0.0
            for j in range(start, end):
                r = idx[j]
                b = codes[r, f] - bmin
                cnt[b] += w[r]
                for o in range(n_out):
                    sums[b, o] += w[r] * Z[r, o]
            for b in range(nb):
                for o in range(n_out):
                    tot[o] += sums[b, o]

            wl = 0.0
            for o in range(n_out):
                sl[o] = 0.0
            prev = -1
            for b in range(nb):
                if cnt[b] == 0.0:
                    continue
                if prev >= 0:
                    wr = wsum - wl
                    if wl >= min_leaf and wr >= min_leaf:
                        proxy = 0.0
                        for o in range(n_out):
                            sr = tot[o] - sl[o]
                            proxy += sl[o] * sl[o] / wl + sr * sr / wr
                        if best_f < 0 or proxy > best_proxy + 1e-12 * abs(best_proxy):
                            best_f = f
                            best_code = bmin + prev
                            best_proxy = proxy
                            lo = uniq[f, bmin + prev]
                            hi = uniq[f, bmin + b]
                            thr = (lo + hi) / 2.0
                            if thr >= hi:
                                thr = lo
                            best_thr = thr
                wl += cnt[b]
                for o in range(n_out):
                    sl[o] += sums[b, o]
                prev = b

        if best_f < 0:
            continue

        # stable partition: left keeps relative order, then right
        nl = start
        nr = 0
        for j in range(start, end):
            r = idx[j]
            if codes[r, best_f] <= best_code:
                idx[nl] = r
                nl += 1
            else:
                tmp[nr] = r
                nr += 1
        for j in range(nr):
            idx[nl + j] = tmp[j]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        # right pushed first so the left subtree is numbered depth-first next
        stack[top, 0] = rc
        stack[top, 1] = nl
        stack[top, 2] = end
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = start
        stack[top, 2] = nl
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), depth[:n_nodes].copy(), weight[:n_nodes].copy(),
            value[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _leaf(root, feature, threshold, left, right, depth, x, max_depth):
    node = root
    while feature[node] != LEAF and (max_depth < 0 or depth[node] < max_depth):
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True, nogil=True)
def apply(roots, feature, threshold, left, right, depth, X, max_depth):
    """Node index reached by each row in each tree: shape (n, trees)."""
    n = X.shape[0]
    out = np.empty((n, roots.shape[0]), np.int64)
    for i in range(n):
        for s in range(roots.shape[0]):
            out[i, s] = _leaf(roots[s], feature, threshold, left, right, depth, X[i], max_depth)
    return out


@njit(cache=True, nogil=True)
def predict(roots, feature, threshold, left, right, depth, value, X, n_trees, max_depth):
    """Mean over the first ``n_trees`` trees, summed in tree order."""
    n = X.shape[0]
    n_out = value.shape[1]
    out = np.zeros((n, n_out))
    for i in range(n):
        for s in range(n_trees):
            node = _leaf(roots[s], feature, threshold, left, right, depth, X[i], max_depth)
            for o in range(n_out):
                out[i, o] += value[node, o]
        for o in range(n_out):
            out[i, o] /= n_trees
    return out


@njit(cache=True, nogil=True)
def contributions(roots, feature, threshold, left, right, value, X, n_features):
    """Per-row bias, per-feature contributions and prediction, tree-averaged."""
    n = X.shape[0]
    n_trees = roots.shape[0]
    n_out = value.shape[1]
    bias = np.zeros((n, n_out))
    contrib = np.zeros((n, n_features, n_out))
    pred = np.zeros((n, n_out))
    for i in range(n):
        for s in range(n_trees):
            node = roots[s]
            for o in range(n_out):
                bias[i, o] += value[node, o]
            while feature[node] != LEAF:
                f = feature[node]
                if X[i, f] <= threshold[node]:
                    child = left[node]
                else:
                    child = right[node]
                for o in range(n_out):
                    contrib[i, f, o] += value[child, o] - value[node, o]
                node = child
            for o in range(n_out):
                pred[i, o] += value[node, o]
        for o in range(n_out):
            bias[i, o] /= n_trees
            pred[i, o] /= n_trees
            for f in range(n_features):
                contrib[i, f, o] /= n_trees
    return bias, contrib, pred
