"""Numba kernels for the sum-of-trees sampler.

A forest is a struct-of-arrays, every array shaped (m, capacity):

    var     int32    split variable of an internal node, -1 for a leaf
    cut     float64  continuous threshold; rows with x > cut go right
    rmask   int64    categorical rule; rows whose code bit is set go right
    left, right, parent   int32 node links (-1 when absent)
    depth   int32
    mu      float64  leaf value
    used    bool     slot allocated

``leaf_of`` (m, n) maps each training row to its leaf in every tree.
Node 0 is always the root.
"""
import numpy as np
from numba import njit

GROW, PRUNE, CHANGE, SWAP = 0, 1, 2, 3
NULL_MOVE = -1
MAX_CAT = 16


@njit(cache=True)
def seed(s):
    np.random.seed(s)


@njit(cache=True)
def go_right(x, is_cat, cut, rmask):
    if is_cat:
        c = int(x)
        if c < 0 or c > 62:
            return False
        return ((rmask >> c) & 1) == 1
    return x > cut


@njit(cache=True)
def leaf_loglik(cnt, s, sigma2, tau2mu):
    # integrated normal likelihood of one leaf, terms common to all partitions dropped
    a = sigma2 + cnt * tau2mu
    return -0.5 * np.log(a / sigma2) + 0.5 * tau2mu * s * s / (sigma2 * a)


@njit(cache=True)
def p_split(d, base, power):
    return base * (1.0 + d) ** (-power)


@njit(cache=True)
def continuous_candidates(vals, nmin, max_cuts):
    """Distinct in-node values usable as thresholds (x <= c left), thinned
    to at most ``max_cuts`` equally spaced picks."""
    n = vals.shape[0]
    s = np.sort(vals)
    valid = np.empty(n, dtype=np.float64)
    nv = 0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        cum = j + 1
        if cum >= nmin and n - cum >= nmin:
            valid[nv] = s[i]
            nv += 1
        i = j + 1
    if nv <= max_cuts:
        return valid[:nv].copy()
    out = np.empty(max_cuts, dtype=np.float64)
    for k in range(max_cuts):
        idx = int(np.floor(k * (nv - 1) / (max_cuts - 1) + 0.5))
        out[k] = valid[idx]
    return out


@njit(cache=True)
def categorical_candidates(vals, nmin):
    """Right-going category subsets (bitmasks) that leave >= nmin rows on each side."""
    n = vals.shape[0]
    counts = np.zeros(63, dtype=np.int64)
    for i in range(n):
        c = int(vals[i])
        if 0 <= c < 63:
            counts[c] += 1
    present = np.empty(63, dtype=np.int64)
    npres = 0
    for c in range(63):
        if counts[c] > 0:
            present[npres] = c
            npres += 1
    if npres < 2 or npres > MAX_CAT:
        return np.empty(0, dtype=np.int64)
    total = 1 << npres
    out = np.empty(total, dtype=np.int64)
    nout = 0
    for sub in range(1, total - 1):
        right = 0
        mask = np.int64(0)
        for b in range(npres):
            if (sub >> b) & 1:
                right += counts[present[b]]
                mask |= np.int64(1) << present[b]
        if right >= nmin and n - right >= nmin:
            out[nout] = mask
            nout += 1
    return out[:nout].copy()


@njit(cache=True)
def n_candidates(vals, is_cat, nmin, max_cuts, cut, rmask):
    """Number of candidate rules for one variable at a node and whether the
    given rule is one of them."""
    if is_cat:
        cands = categorical_candidates(vals, nmin)
        member = False
        for k in range(cands.shape[0]):
            if cands[k] == rmask:
                member = True
                break
        return cands.shape[0], member
    cuts = continuous_candidates(vals, nmin, max_cuts)
    member = False
    for k in range(cuts.shape[0]):
        if cuts[k] == cut:
            member = True
            break
    return cuts.shape[0], member


@njit(cache=True)
def count_nog(var, left, right, used, h):
    cap = var.shape[1]
    k = 0
    for j in range(cap):
        if used[h, j] and var[h, j] >= 0:
            if var[h, left[h, j]] < 0 and var[h, right[h, j]] < 0:
                k += 1
    return k


@njit(cache=True)
def is_nog(var, left, right, h, j):
    return var[h, j] >= 0 and var[h, left[h, j]] < 0 and var[h, right[h, j]] < 0


@njit(cache=True)
def free_slots(used, h):
    cap = used.shape[1]
    a = -1
    b = -1
    for j in range(1, cap):
        if not used[h, j]:
            if a < 0:
                a = j
            else:
                b = j
                break
    return a, b


@njit(cache=True)
def rows_at(leaf_of, h, n1, n2, n3):
    n = leaf_of.shape[1]
    out = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        l = leaf_of[h, i]
        if l == n1 or l == n2 or l == n3:
            out[k] = i
            k += 1
    return out[:k]


@njit(cache=True)
def draw_rule(vals, is_cat, nmin, max_cuts):
    """Uniform draw of a rule for one variable; returns (ok, cut, rmask)."""
    if is_cat:
        cands = categorical_candidates(vals, nmin)
        if cands.shape[0] == 0:
            return False, 0.0, np.int64(0)
        return True, 0.0, cands[np.random.randint(cands.shape[0])]
    cuts = continuous_candidates(vals, nmin, max_cuts)
    if cuts.shape[0] == 0:
        return False, 0.0, np.int64(0)
    return True, cuts[np.random.randint(cuts.shape[0])], np.int64(0)


@njit(cache=True)
def partition_stats(rows, X, v, is_cat, cut, rmask, resid):
    nl = 0
    sl = 0.0
    nr = 0
    sr = 0.0
    for k in range(rows.shape[0]):
        i = rows[k]
        if go_right(X[i, v], is_cat, cut, rmask):
            nr += 1
            sr += resid[i]
        else:
            nl += 1
            sl += resid[i]
    return nl, sl, nr, sr


@njit(cache=True)
def draw_kind(stump, probs):
    if stump:
        return GROW
    u = np.random.random()
    acc = 0.0
    for k in range(4):
        acc += probs[k]
        if u < acc:
            return k
    return SWAP


@njit(cache=True)
def propose(h, var, cut, rmask, left, right, parent, depth, used, leaf_of,
            X, is_cat, resid, sigma2, tau2mu, base, power, nmin, max_cuts,
            probs, max_depth):
    """Draw one tree move for tree ``h``.

    Returns (kind, node, new_var, new_cut, new_mask, log_ratio). ``kind`` is
    NULL_MOVE when the drawn move kind has no valid candidate.
    """
    cap = var.shape[1]
    p = X.shape[1]
    stump = var[h, 0] < 0
    kind = draw_kind(stump, probs)
    pg = 1.0 if stump else probs[GROW]

    if kind == GROW:
        nleaf = 0
        for j in range(cap):
            if used[h, j] and var[h, j] < 0:
                nleaf += 1
        pick = np.random.randint(nleaf)
        leaf = -1
        for j in range(cap):
            if used[h, j] and var[h, j] < 0:
                if pick == 0:
                    leaf = j
                    break
                pick -= 1
        v = np.random.randint(p)
        a, b = free_slots(used, h)
        if b < 0 or depth[h, leaf] >= max_depth:
            return NULL_MOVE, leaf, v, 0.0, np.int64(0), -np.inf
        rows = rows_at(leaf_of, h, leaf, -2, -2)
        if rows.shape[0] < 2 * nmin:
            return NULL_MOVE, leaf, v, 0.0, np.int64(0), -np.inf
        ok, c, mask = draw_rule(X[rows, v], is_cat[v], nmin, max_cuts)
        if not ok:
            return NULL_MOVE, leaf, v, 0.0, np.int64(0), -np.inf
        nl, sl, nr, sr = partition_stats(rows, X, v, is_cat[v], c, mask, resid)
        nog = count_nog(var, left, right, used, h)
        nog_after = nog + 1
        par = parent[h, leaf]
        if par >= 0 and is_nog(var, left, right, h, par):
            nog_after -= 1
        d = depth[h, leaf]
        pd = p_split(d, base, power)
        pd1 = p_split(d + 1, base, power)
        lr = (leaf_loglik(nl, sl, sigma2, tau2mu) + leaf_loglik(nr, sr, sigma2, tau2mu)
              - leaf_loglik(nl + nr, sl + sr, sigma2, tau2mu))
        lr += np.log(pd) + 2.0 * np.log(1.0 - pd1) - np.log(1.0 - pd)
        lr += np.log(probs[PRUNE]) - np.log(nog_after) - np.log(pg) + np.log(nleaf)
        return GROW, leaf, v, c, mask, lr

    if kind == PRUNE or kind == CHANGE:
        nog = count_nog(var, left, right, used, h)
        pick = np.random.randint(nog)
        node = -1
        for j in range(cap):
            if used[h, j] and is_nog(var, left, right, h, j):
                if pick == 0:
                    node = j
                    break
                pick -= 1
        l = left[h, node]
        r = right[h, node]
        rows = rows_at(leaf_of, h, l, r, -2)
        nl = 0
        sl = 0.0
        for k in range(rows.shape[0]):
            if leaf_of[h, rows[k]] == l:
                nl += 1
                sl += resid[rows[k]]
        nr = rows.shape[0] - nl
        sr = 0.0
        for k in range(rows.shape[0]):
            sr += resid[rows[k]]
        sr -= sl
        old = leaf_loglik(nl, sl, sigma2, tau2mu) + leaf_loglik(nr, sr, sigma2, tau2mu)
        if kind == PRUNE:
            nleaf = 0
            for j in range(cap):
                if used[h, j] and var[h, j] < 0:
                    nleaf += 1
            d = depth[h, node]
            pd = p_split(d, base, power)
            pd1 = p_split(d + 1, base, power)
            pg_after = 1.0 if node == 0 else probs[GROW]
            lr = leaf_loglik(nl + nr, sl + sr, sigma2, tau2mu) - old
            lr += np.log(1.0 - pd) - np.log(pd) - 2.0 * np.log(1.0 - pd1)
            lr += np.log(pg_after) - np.log(nleaf - 1) - np.log(probs[PRUNE]) + np.log(nog)
            return PRUNE, node, -1, 0.0, np.int64(0), lr
        v = np.random.randint(p)
        ok, c, mask = draw_rule(X[rows, v], is_cat[v], nmin, max_cuts)
        if not ok:
            return NULL_MOVE, node, v, 0.0, np.int64(0), -np.inf
        nl2, sl2, nr2, sr2 = partition_stats(rows, X, v, is_cat[v], c, mask, resid)
        lr = (leaf_loglik(nl2, sl2, sigma2, tau2mu) + leaf_loglik(nr2, sr2, sigma2, tau2mu)) - old
        return CHANGE, node, v, c, mask, lr

    # SWAP: a nog child whose sibling is a leaf exchanges rules with its parent
    nsw = 0
    for j in range(1, cap):
        if used[h, j] and is_nog(var, left, right, h, j):
            pp = parent[h, j]
            sib = right[h, pp] if left[h, pp] == j else left[h, pp]
            if var[h, sib] < 0:
                nsw += 1
    if nsw == 0:
        return NULL_MOVE, -1, -1, 0.0, np.int64(0), -np.inf
    pick = np.random.randint(nsw)
    c_node = -1
    for j in range(1, cap):
        if used[h, j] and is_nog(var, left, right, h, j):
            pp = parent[h, j]
            sib = right[h, pp] if left[h, pp] == j else left[h, pp]
            if var[h, sib] < 0:
                if pick == 0:
                    c_node = j
                    break
                pick -= 1
    pnode = parent[h, c_node]
    c_is_right = right[h, pnode] == c_node
    sib = left[h, pnode] if c_is_right else right[h, pnode]
    cl = left[h, c_node]
    cr = right[h, c_node]
    rows = rows_at(leaf_of, h, sib, cl, cr)
    vp, cp, mp = var[h, pnode], cut[h, pnode], rmask[h, pnode]
    vc, cc, mc = var[h, c_node], cut[h, c_node], rmask[h, c_node]
    n_s = 0
    s_s = 0.0
    n_l = 0
    s_l = 0.0
    n_r = 0
    s_r = 0.0
    o_s = 0
    os_s = 0.0
    o_l = 0
    os_l = 0.0
    o_r = 0
    os_r = 0.0
    crows = np.empty(rows.shape[0], dtype=np.int64)
    nc = 0
    ocrows = np.empty(rows.shape[0], dtype=np.int64)
    noc = 0
    for k in range(rows.shape[0]):
        i = rows[k]
        li = leaf_of[h, i]
        if li == sib:
            o_s += 1
            os_s += resid[i]
        else:
            ocrows[noc] = i
            noc += 1
            if li == cl:
                o_l += 1
                os_l += resid[i]
            else:
                o_r += 1
                os_r += resid[i]
        if go_right(X[i, vc], is_cat[vc], cc, mc) == c_is_right:
            crows[nc] = i
            nc += 1
            if go_right(X[i, vp], is_cat[vp], cp, mp):
                n_r += 1
                s_r += resid[i]
            else:
                n_l += 1
                s_l += resid[i]
        else:
            n_s += 1
            s_s += resid[i]
    if n_s < nmin or n_l < nmin or n_r < nmin:
        return NULL_MOVE, c_node, -1, 0.0, np.int64(0), -np.inf
    crows = crows[:nc]
    ocrows = ocrows[:noc]
    k_pn, m_pn = n_candidates(X[rows, vc], is_cat[vc], nmin, max_cuts, cc, mc)
    k_cn, m_cn = n_candidates(X[crows, vp], is_cat[vp], nmin, max_cuts, cp, mp)
    if not (m_pn and m_cn):
        return NULL_MOVE, c_node, -1, 0.0, np.int64(0), -np.inf
    k_po, _ = n_candidates(X[rows, vp], is_cat[vp], nmin, max_cuts, cp, mp)
    k_co, _ = n_candidates(X[ocrows, vc], is_cat[vc], nmin, max_cuts, cc, mc)
    lr = (leaf_loglik(n_s, s_s, sigma2, tau2mu) + leaf_loglik(n_l, s_l, sigma2, tau2mu)
          + leaf_loglik(n_r, s_r, sigma2, tau2mu)
          - leaf_loglik(o_s, os_s, sigma2, tau2mu) - leaf_loglik(o_l, os_l, sigma2, tau2mu)
          - leaf_loglik(o_r, os_r, sigma2, tau2mu))
    lr += np.log(k_po) + np.log(k_co) - np.log(k_pn) - np.log(k_cn)
    return SWAP, c_node, -1, 0.0, np.int64(0), lr


@njit(cache=True)
def apply_move(h, kind, node, v, c, mask, var, cut, rmask, left, right, parent,
               depth, mu, used, leaf_of, X, is_cat):
    if kind == GROW:
        a, b = free_slots(used, h)
        var[h, node] = v
        cut[h, node] = c
        rmask[h, node] = mask
        for j in (a, b):
            used[h, j] = True
            var[h, j] = -1
            left[h, j] = -1
            right[h, j] = -1
            parent[h, j] = node
            depth[h, j] = depth[h, node] + 1
            mu[h, j] = mu[h, node]
        left[h, node] = a
        right[h, node] = b
        for i in range(leaf_of.shape[1]):
            if leaf_of[h, i] == node:
                leaf_of[h, i] = b if go_right(X[i, v], is_cat[v], c, mask) else a
    elif kind == PRUNE:
        l = left[h, node]
        r = right[h, node]
        for i in range(leaf_of.shape[1]):
            if leaf_of[h, i] == l or leaf_of[h, i] == r:
                leaf_of[h, i] = node
        used[h, l] = False
        used[h, r] = False
        var[h, l] = -1
        var[h, r] = -1
        var[h, node] = -1
        left[h, node] = -1
        right[h, node] = -1
        cut[h, node] = 0.0
        rmask[h, node] = 0
    elif kind == CHANGE:
        var[h, node] = v
        cut[h, node] = c
        rmask[h, node] = mask
        l = left[h, node]
        r = right[h, node]
        for i in range(leaf_of.shape[1]):
            li = leaf_of[h, i]
            if li == l or li == r:
                leaf_of[h, i] = r if go_right(X[i, v], is_cat[v], c, mask) else l
    elif kind == SWAP:
        pnode = parent[h, node]
        c_is_right = right[h, pnode] == node
        sib = left[h, pnode] if c_is_right else right[h, pnode]
        cl = left[h, node]
        cr = right[h, node]
        vp, cp, mp = var[h, pnode], cut[h, pnode], rmask[h, pnode]
        var[h, pnode], cut[h, pnode], rmask[h, pnode] = var[h, node], cut[h, node], rmask[h, node]
        var[h, node], cut[h, node], rmask[h, node] = vp, cp, mp
        vn, cn, mn = var[h, pnode], cut[h, pnode], rmask[h, pnode]
        for i in range(leaf_of.shape[1]):
            li = leaf_of[h, i]
            if li == sib or li == cl or li == cr:
                if go_right(X[i, vn], is_cat[vn], cn, mn) == c_is_right:
                    leaf_of[h, i] = cr if go_right(X[i, vp], is_cat[vp], cp, mp) else cl
                else:
                    leaf_of[h, i] = sib


@njit(cache=True)
def draw_leaves(h, var, mu, used, leaf_of, resid, sigma2, tau2mu):
    cap = var.shape[1]
    cnt = np.zeros(cap, dtype=np.int64)
    sm = np.zeros(cap)
    for i in range(leaf_of.shape[1]):
        cnt[leaf_of[h, i]] += 1
        sm[leaf_of[h, i]] += resid[i]
    for j in range(cap):
        if used[h, j] and var[h, j] < 0:
            prec = cnt[j] / sigma2 + 1.0 / tau2mu
            mean = (sm[j] / sigma2) / prec
            mu[h, j] = mean + np.random.standard_normal() / np.sqrt(prec)


@njit(cache=True)
def sweep(var, cut, rmask, left, right, parent, depth, mu, used, leaf_of,
          X, is_cat, r, F, sigma2, tau2mu, base, power, nmin, max_cuts,
          probs, max_depth, nu, lam, update_sigma, n_prop, n_acc):
    """One backfitting pass over all trees followed by the sigma^2 draw.

    ``F`` (current total fit) is updated in place; returns the new sigma^2.
    """
    m = var.shape[0]
    n = r.shape[0]
    resid = np.empty(n)
    for h in range(m):
        for i in range(n):
            resid[i] = r[i] - F[i] + mu[h, leaf_of[h, i]]
        kind, node, v, c, mask, lr = propose(
            h, var, cut, rmask, left, right, parent, depth, used, leaf_of,
            X, is_cat, resid, sigma2, tau2mu, base, power, nmin, max_cuts,
            probs, max_depth)
        if kind >= 0:
            n_prop[kind] += 1
            if np.log(np.random.random()) < lr:
                n_acc[kind] += 1
                apply_move(h, kind, node, v, c, mask, var, cut, rmask, left, right,
                           parent, depth, mu, used, leaf_of, X, is_cat)
        draw_leaves(h, var, mu, used, leaf_of, resid, sigma2, tau2mu)
        for i in range(n):
            F[i] = r[i] - resid[i] + mu[h, leaf_of[h, i]]
    if update_sigma:
        ss = 0.0
        for i in range(n):
            e = r[i] - F[i]
            ss += e * e
        sigma2 = (nu * lam + ss) / np.random.chisquare(nu + n)
    return sigma2


@njit(cache=True)
def predict(var, cut, rmask, left, right, mu, used, X, is_cat):
    m = var.shape[0]
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for h in range(m):
            j = 0
            while var[h, j] >= 0:
                v = var[h, j]
                if go_right(X[i, v], is_cat[v], cut[h, j], rmask[h, j]):
                    j = right[h, j]
                else:
                    j = left[h, j]
            s += mu[h, j]
        out[i] = s
    return out


@njit(cache=True)
def split_counts(var, used, p):
    out = np.zeros(p)
    for h in range(var.shape[0]):
        for j in range(var.shape[1]):
            if used[h, j] and var[h, j] >= 0:
                out[var[h, j]] += 1.0
    return out
