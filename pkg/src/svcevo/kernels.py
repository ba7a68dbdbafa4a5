"""Hot numeric kernels.

Each kernel has a loop implementation that numba compiles when enabled and a
fallback used when ``SVCEVO_DISABLE_NUMBA`` is set. Where a vectorised numpy
formulation exists the fallback is that (``*_numpy``); otherwise it is the same
loop run by the interpreter. Both paths perform the floating point operations
in the same order, so results agree bit for bit.
"""
import numpy as np

from ._accel import NUMBA_ENABLED, jit

STABILITY = 0
AGING = 1
MUTATION = 2

SECONDS_PER_DAY = 86400.0


# ---------------------------------------------------------------------------
# snapshot weight accumulation


def _accumulate_weights_loop(pair, mech, impact, t, cutoff, n_pairs, period, horizon):
    w = np.zeros(n_pairs)
    for k in range(pair.shape[0]):
        if t[k] > cutoff:
            break
        p = pair[k]
        m = mech[k]
        if m == STABILITY:
            w[p] += impact[k]
        elif m == MUTATION:
            w[p] = impact[k]
        else:
            gap = (cutoff - t[k]) / SECONDS_PER_DAY
            if gap < horizon:
                ratio = gap / period
                if ratio < 1.0:
                    ratio = 1.0
                w[p] += impact[k] * (1.0 / ratio)
            else:
                w[p] += impact[k] * 0.0
    return w


def accumulate_weights_numpy(pair, mech, impact, t, cutoff, n_pairs, period, horizon):
    """Vectorised replay: a pair's weight is its last mutation plus later increments."""
    n = int(np.searchsorted(t, cutoff, side="right"))
    pair, mech, impact, t = pair[:n], mech[:n], impact[:n], t[:n]
    gap = (cutoff - t) / SECONDS_PER_DAY
    coeff = np.where(gap < horizon, 1.0 / np.maximum(gap / period, 1.0), 0.0)
    contrib = np.where(mech == AGING, impact * coeff, impact)

    idx = np.arange(n)
    is_mut = mech == MUTATION
    last_mut = np.full(n_pairs, -1, dtype=np.int64)
    np.maximum.at(last_mut, pair[is_mut], idx[is_mut])

    w = np.zeros(n_pairs)
    has_mut = last_mut >= 0
    w[has_mut] = impact[last_mut[has_mut]]
    keep = ~is_mut & (idx > last_mut[pair])
    np.add.at(w, pair[keep], contrib[keep])
    return w


accumulate_weights_jit = jit(_accumulate_weights_loop)
accumulate_weights = accumulate_weights_jit if NUMBA_ENABLED else accumulate_weights_numpy


# ---------------------------------------------------------------------------
# Louvain local moving


def _local_move(indptr, indices, weights, degree, comm, order, two_m, resolution, eps):
    """Move nodes between communities until a full sweep changes nothing.

    ``comm`` is updated in place. Labels live in ``[0, n)``; a node may also be
    moved to an unused label (isolation). Ties keep the current community.
    Returns the number of moves made.
    """
    n = degree.shape[0]
    tot = np.zeros(n)
    size = np.zeros(n, dtype=np.int64)
    for i in range(n):
        tot[comm[i]] += degree[i]
        size[comm[i]] += 1
    free = np.empty(n, dtype=np.int64)
    n_free = 0
    for c in range(n - 1, -1, -1):
        if size[c] == 0:
            free[n_free] = c
            n_free += 1

    link = np.zeros(n)
    stamp = np.full(n, -1, dtype=np.int64)
    seen = np.empty(n, dtype=np.int64)
    total_moves = 0
    sweep = 0
    while True:
        moves = 0
        for q in range(n):
            i = order[q]
            tag = sweep * n + q
            ci = comm[i]
            ki = degree[i]
            n_seen = 0
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                if j == i:
                    continue
                cj = comm[j]
                if stamp[cj] != tag:
                    stamp[cj] = tag
                    link[cj] = 0.0
                    seen[n_seen] = cj
                    n_seen += 1
                link[cj] += weights[e]

            tot[ci] -= ki
            size[ci] -= 1
            own_link = link[ci] if stamp[ci] == tag else 0.0
            best_gain = own_link - resolution * tot[ci] * ki / two_m
            best_c = ci
            for s in range(n_seen):
                c = seen[s]
                if c == ci:
                    continue
                gain = link[c] - resolution * tot[c] * ki / two_m
                if gain > best_gain + eps:
                    best_gain = gain
                    best_c = c
            if size[ci] > 0 and 0.0 > best_gain + eps:
                # isolation beats every neighbouring community
                n_free -= 1
                best_c = free[n_free]
            if size[ci] == 0 and best_c != ci:
                free[n_free] = ci
                n_free += 1

            tot[best_c] += ki
            size[best_c] += 1
            if best_c != ci:
                comm[i] = best_c
                moves += 1
        total_moves += moves
        sweep += 1
        if moves == 0:
            break
    return total_moves


local_move_py = _local_move
local_move = jit(_local_move)


# ---------------------------------------------------------------------------
# CART split search


def _best_split_loop(X, y, sw, idx, features, class_total, n_classes, min_leaf, max_features):
    n = idx.shape[0]
    w_total = 0.0
    for c in range(n_classes):
        w_total += class_total[c]
    best_score = -1.0
    best_feature = -1
    best_threshold = 0.0
    evaluated = 0
    left = np.zeros(n_classes)
    vals = np.empty(n)
    for fi in range(features.shape[0]):
        if evaluated >= max_features:
            break
        f = features[fi]
        for r in range(n):
            vals[r] = X[idx[r], f]
        order = np.argsort(vals, kind="mergesort")
        if vals[order[0]] == vals[order[n - 1]]:
            continue
        evaluated += 1
        for c in range(n_classes):
            left[c] = 0.0
        w_left = 0.0
        for r in range(n - 1):
            s = idx[order[r]]
            left[y[s]] += sw[s]
            w_left += sw[s]
            if vals[order[r]] == vals[order[r + 1]]:
                continue
            n_left = r + 1
            if n_left < min_leaf or n - n_left < min_leaf:
                continue
            w_right = w_total - w_left
            if w_left <= 0.0 or w_right <= 0.0:
                continue
            sq_left = 0.0
            sq_right = 0.0
            for c in range(n_classes):
                sq_left += left[c] * left[c]
                rc = class_total[c] - left[c]
                sq_right += rc * rc
            score = sq_left / w_left + sq_right / w_right
            if score > best_score:
                best_score = score
                best_feature = f
                best_threshold = vals[order[r]]
    return best_feature, best_threshold, best_score


def best_split_numpy(X, y, sw, idx, features, class_total, n_classes, min_leaf, max_features):
    """Vectorised split search; same candidate order and tie rule as the loop."""
    n = idx.shape[0]
    w_total = 0.0
    for c in range(n_classes):
        w_total += class_total[c]
    best = (-1, 0.0, -1.0)
    evaluated = 0
    y_idx = y[idx]
    sw_idx = sw[idx]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_idx] = sw_idx
    for f in features:
        if evaluated >= max_features:
            break
        vals = X[idx, f]
        order = np.argsort(vals, kind="mergesort")
        sv = vals[order]
        if sv[0] == sv[-1]:
            continue
        evaluated += 1
        left = np.cumsum(onehot[order], axis=0)[:-1]
        w_left = np.cumsum(sw_idx[order])[:-1]
        w_right = w_total - w_left
        n_left = np.arange(1, n)
        valid = (
            (sv[:-1] != sv[1:])
            & (n_left >= min_leaf)
            & (n - n_left >= min_leaf)
            & (w_left > 0.0)
            & (w_right > 0.0)
        )
        if not valid.any():
            continue
        right = class_total - left
        sq_left = np.zeros(n - 1)
        sq_right = np.zeros(n - 1)
        for c in range(n_classes):
            sq_left = sq_left + left[:, c] * left[:, c]
            sq_right = sq_right + right[:, c] * right[:, c]
        with np.errstate(divide="ignore", invalid="ignore"):
            score = sq_left / w_left + sq_right / w_right
        score = np.where(valid, score, -np.inf)
        r = int(np.argmax(score))
        if score[r] > best[2]:
            best = (int(f), float(sv[r]), float(score[r]))
    return best


best_split_jit = jit(_best_split_loop)
best_split = best_split_jit if NUMBA_ENABLED else best_split_numpy


# ---------------------------------------------------------------------------
# unweighted closeness / clustering on a CSR graph


def _closeness_loop(indptr, indices):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    dist = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    for s in range(n):
        for v in range(n):
            dist[v] = -1
        dist[s] = 0
        queue[0] = s
        head = 0
        tail = 1
        total = 0
        reach = 0
        while head < tail:
            u = queue[head]
            head += 1
            for e in range(indptr[u], indptr[u + 1]):
                v = indices[e]
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    total += dist[v]
                    reach += 1
                    queue[tail] = v
                    tail += 1
        if total > 0 and n > 1:
            out[s] = (reach / total) * (reach / (n - 1))
    return out


def closeness_numpy(indptr, indices):
    """All-source BFS by frontier expansion on a dense adjacency matrix."""
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    if n == 0:
        return out
    adj = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), np.diff(indptr))
    adj[rows, indices] = True
    reached = np.eye(n, dtype=bool)
    frontier = reached.copy()
    total = np.zeros(n, dtype=np.int64)
    reach = np.zeros(n, dtype=np.int64)
    depth = 0
    while frontier.any():
        depth += 1
        nxt = (frontier.astype(np.int64) @ adj.astype(np.int64) > 0) & ~reached
        counts = nxt.sum(axis=1)
        total += depth * counts
        reach += counts
        reached |= nxt
        frontier = nxt
    ok = (total > 0) & (n > 1)
    out[ok] = (reach[ok] / total[ok]) * (reach[ok] / (n - 1))
    return out


def _clustering_loop(indptr, indices):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    mark = np.full(n, -1, dtype=np.int64)
    for u in range(n):
        d = indptr[u + 1] - indptr[u]
        if d < 2:
            continue
        for e in range(indptr[u], indptr[u + 1]):
            mark[indices[e]] = u
        links = 0
        for e in range(indptr[u], indptr[u + 1]):
            v = indices[e]
            for e2 in range(indptr[v], indptr[v + 1]):
                if mark[indices[e2]] == u:
                    links += 1
        out[u] = links / (d * (d - 1))
    return out


def clustering_numpy(indptr, indices):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    if n == 0:
        return out
    adj = np.zeros((n, n), dtype=np.int64)
    rows = np.repeat(np.arange(n), np.diff(indptr))
    adj[rows, indices] = 1
    links = ((adj @ adj) * adj).sum(axis=1)
    d = adj.sum(axis=1)
    ok = d >= 2
    out[ok] = links[ok] / (d[ok] * (d[ok] - 1))
    return out


closeness_jit = jit(_closeness_loop)
clustering_jit = jit(_clustering_loop)
closeness = closeness_jit if NUMBA_ENABLED else closeness_numpy
clustering = clustering_jit if NUMBA_ENABLED else clustering_numpy


# ---------------------------------------------------------------------------
# path-dependent TreeSHAP


@jit
def _extend_path(pf, pz, po, pw, start, depth, zero, one, feature):
    pf[start + depth] = feature
    pz[start + depth] = zero
    po[start + depth] = one
    pw[start + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[start + i + 1] += one * pw[start + i] * (i + 1) / (depth + 1)
        pw[start + i] = zero * pw[start + i] * (depth - i) / (depth + 1)


@jit
def _unwind_path(pf, pz, po, pw, start, depth, path_index):
    one = po[start + path_index]
    zero = pz[start + path_index]
    next_one = pw[start + depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[start + i]
            pw[start + i] = next_one * (depth + 1) / ((i + 1) * one)
            next_one = tmp - pw[start + i] * zero * (depth - i) / (depth + 1)
        else:
            pw[start + i] = pw[start + i] * (depth + 1) / (zero * (depth - i))
    for i in range(path_index, depth):
        pf[start + i] = pf[start + i + 1]
        pz[start + i] = pz[start + i + 1]
        po[start + i] = po[start + i + 1]


@jit
def _unwound_path_sum(pz, po, pw, start, depth, path_index):
    one = po[start + path_index]
    zero = pz[start + path_index]
    next_one = pw[start + depth]
    total = 0.0
    if one != 0.0:
        for i in range(depth - 1, -1, -1):
            tmp = next_one / ((i + 1) * one)
            total += tmp
            next_one = pw[start + i] - tmp * zero * (depth - i)
    else:
        for i in range(depth - 1, -1, -1):
            total += pw[start + i] / (zero * (depth - i))
    return total * (depth + 1)


@jit(cache=False)
def _shap_recurse(node, left, right, feature, threshold, cover, values, x, phi,
                  pf, pz, po, pw, parent_start, depth, parent_zero, parent_one, parent_feature):
    start = parent_start + depth + 1
    for i in range(depth + 1):
        pf[start + i] = pf[parent_start + i]
        pz[start + i] = pz[parent_start + i]
        po[start + i] = po[parent_start + i]
        pw[start + i] = pw[parent_start + i]
    _extend_path(pf, pz, po, pw, start, depth, parent_zero, parent_one, parent_feature)

    if left[node] < 0:
        n_out = values.shape[1]
        for i in range(1, depth + 1):
            w = _unwound_path_sum(pz, po, pw, start, depth, i)
            scale = w * (po[start + i] - pz[start + i])
            f = pf[start + i]
            for c in range(n_out):
                phi[f, c] += scale * values[node, c]
        return

    split = feature[node]
    if x[split] <= threshold[node]:
        hot = left[node]
        cold = right[node]
    else:
        hot = right[node]
        cold = left[node]
    hot_zero = cover[hot] / cover[node]
    cold_zero = cover[cold] / cover[node]
    incoming_zero = 1.0
    incoming_one = 1.0

    path_index = 0
    while path_index <= depth:
        if pf[start + path_index] == split:
            break
        path_index += 1
    if path_index != depth + 1:
        incoming_zero = pz[start + path_index]
        incoming_one = po[start + path_index]
        _unwind_path(pf, pz, po, pw, start, depth, path_index)
        depth -= 1

    _shap_recurse(hot, left, right, feature, threshold, cover, values, x, phi,
                  pf, pz, po, pw, start, depth + 1, hot_zero * incoming_zero, incoming_one, split)
    _shap_recurse(cold, left, right, feature, threshold, cover, values, x, phi,
                  pf, pz, po, pw, start, depth + 1, cold_zero * incoming_zero, 0.0, split)


@jit(cache=False)
def tree_shap_kernel(left, right, feature, threshold, cover, values, x, phi, max_depth):
    """Accumulate path-dependent Shapley values of one tree into ``phi``.

    ``phi`` has shape (n_features, n_outputs). ``max_depth`` is the depth of the
    deepest leaf; the path buffers are sized from it.
    """
    size = (max_depth + 2) * (max_depth + 3) // 2 + max_depth + 2
    pf = np.full(size, -1, dtype=np.int64)
    pz = np.zeros(size)
    po = np.zeros(size)
    pw = np.zeros(size)
    # the root call copies from segment 0, so seed it with the empty path
    _shap_recurse(0, left, right, feature, threshold, cover, values, x, phi,
                  pf, pz, po, pw, 0, 0, 1.0, 1.0, -1)
