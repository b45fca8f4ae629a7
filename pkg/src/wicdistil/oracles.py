"""Slow reference computations used to cross-check the fast paths.

Everything here is written with plain Python loops over scalars and shares
no code with the modules it checks.
"""

from __future__ import annotations

import math
from functools import lru_cache


def matmul_loop(x, W, b):
    rows, inner, cols = len(x), len(W), len(W[0])
    return [[sum(x[r][k] * W[k][c] for k in range(inner)) + b[c] for c in range(cols)] for r in range(rows)]


def layer_norm_loop(row, gamma, beta, eps):
    n = len(row)
    mu = sum(row) / n
    var = sum((v - mu) ** 2 for v in row) / n
    return [(v - mu) / math.sqrt(var + eps) * g + bt for v, g, bt in zip(row, gamma, beta)]


def softmax_loop(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def attention_loop(x, p, heads):
    """Per-head explicit-loop self-attention; ``p`` maps names to nested lists."""
    L, d = len(x), len(x[0])
    hd = d // heads
    q = matmul_loop(x, p["wq"], p["bq"])
    k = matmul_loop(x, p["wk"], p["bk"])
    v = matmul_loop(x, p["wv"], p["bv"])
    ctx = [[0.0] * d for _ in range(L)]
    for h in range(heads):
        cols = range(h * hd, (h + 1) * hd)
        for i in range(L):
            scores = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(hd) for j in range(L)]
            w = softmax_loop(scores)
            for c in cols:
                ctx[i][c] = sum(w[j] * v[j][c] for j in range(L))
    return matmul_loop(ctx, p["wo"], p["bo"])


def cosine_loop(u, v):
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _sq(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def _pool(a, b):
    return [(x + y) / 2 for x, y in zip(a, b)]


def cross_mono_loop(y, p, n, hm, hc, pm, pc, nm, nc):
    d = len(y)
    p_hat, yp_hat = _pool(hm, pc), _pool(pm, hc)
    n_hat, yn_hat = _pool(nm, hc), _pool(hm, nc)
    return (_sq(p, p_hat) + _sq(y, yp_hat) + _sq(n, n_hat) + _sq(y, yn_hat)) / d


def cross_xl_loop(y, p, n, hm, hc, pm, pc, nm, nc):
    d = len(y)
    pp_hat, yp_hat = _pool(hm, pc), _pool(pm, hc)
    pn_hat, n_hat = _pool(hm, nc), _pool(nm, pc)
    return (_sq(p, pp_hat) + _sq(y, yp_hat) + _sq(p, pn_hat) + _sq(n, n_hat)) / d


def recon_total_loop(y, p, n, hm, hc, pm, pc, nm, nc):
    d = len(y)
    return (_sq(y, _pool(hm, hc)) + _sq(p, _pool(pm, pc)) + _sq(n, _pool(nm, nc))) / d


# --------------------------------------------------------------------------
# alignment
# --------------------------------------------------------------------------


def first_argmax(values):
    best, arg = -math.inf, None
    for i, v in enumerate(values):
        if v > best:
            best, arg = v, i
    return arg


def mutual_pairs_bruteforce(M, t):
    """All (i, j), i != t, where each is the other's first best match."""
    rows, cols = len(M), len(M[0])
    pairs = []
    for i in range(rows):
        if i == t:
            continue
        for j in range(cols):
            if M[i][j] == -math.inf:
                continue
            if first_argmax(M[i]) == j and first_argmax([M[r][j] for r in range(rows)]) == i:
                pairs.append((i, j))
    return pairs


def _mean_std(vals):
    n = len(vals)
    mu = sum(vals) / n
    return mu, math.sqrt(sum((v - mu) ** 2 for v in vals) / n)


def align_mono_bruteforce(M, t, sigma_mult=1.0):
    pairs = mutual_pairs_bruteforce(M, t)
    A = {j for _, j in pairs}
    finite = [v for row in M for v in row if v != -math.inf]
    if not finite:
        return None
    mu, sd = _mean_std(finite)
    ranked = sorted(range(len(M[t])), key=lambda j: (-M[t][j], j))
    for j in ranked:
        if j not in A and M[t][j] != -math.inf and M[t][j] > mu + sigma_mult * sd:
            return j
    return None


def align_xl_bruteforce(M, t, sigma_mult=1.282, z=0.674):
    pairs = mutual_pairs_bruteforce(M, t)
    A = {j for _, j in pairs}
    finite = [v for row in M for v in row if v != -math.inf]
    if not finite:
        return None
    mu, sd = _mean_std(finite)
    if pairs:
        mu_a, sd_a = _mean_std([M[i][j] for i, j in pairs])
        lower = mu_a - z * sd_a
    else:
        lower = -math.inf
    cands = [j for j in range(len(M[t]))
             if j not in A and M[t][j] != -math.inf and M[t][j] > mu + sigma_mult * sd and M[t][j] >= lower]
    if not cands:
        return None
    return min(cands, key=lambda j: (-M[t][j], j))


@lru_cache(maxsize=None)
def edit_distance_rec(a: str, b: str) -> int:
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(edit_distance_rec(a[1:], b) + 1, edit_distance_rec(a, b[1:]) + 1,
               edit_distance_rec(a[1:], b[1:]) + (a[0] != b[0]))


# --------------------------------------------------------------------------
# masked-prediction filters; ``preds`` is a list of (token, prob) sorted by prob
# --------------------------------------------------------------------------


def _eligible(tok):
    return tok.isalpha() and not tok.startswith("##")


def negative_mono_fullscan(preds, w_t, vec, lam, k, delta):
    zt = vec(w_t)
    if zt is None:
        return None
    hits = []
    for rank, (tok, prob) in enumerate(preds):
        if rank >= k or prob <= delta or tok.lower() == w_t.lower() or not _eligible(tok):
            continue
        z = vec(tok)
        if z is not None and cosine_loop(z, zt) < lam:
            hits.append((rank, tok))
    return min(hits)[1] if hits else None


def enhance_positive_fullscan(preds, w_p, w_t, vec, lam, k, delta, gate=3):
    if edit_distance_rec(w_t.lower(), w_p.lower()) > gate:
        return w_p
    zt = vec(w_t)
    if zt is None:
        return w_p
    hits = []
    for rank, (tok, prob) in enumerate(preds):
        if rank >= k or prob <= delta or not _eligible(tok):
            continue
        if tok.lower() in (w_t.lower(), w_p.lower()):
            continue
        if edit_distance_rec(tok.lower(), w_t.lower()) <= gate:
            continue
        z = vec(tok)
        if z is not None and cosine_loop(z, zt) >= lam:
            hits.append((rank, tok))
    return min(hits)[1] if hits else w_p


def negative_xl_fullscan(preds, w_t, w_p, vec, k, delta):
    zt, zp = vec(w_t), vec(w_p)
    if zt is None or zp is None:
        return None
    cands = [(rank, tok, vec(tok)) for rank, (tok, prob) in enumerate(preds)
             if rank < k and prob > delta and _eligible(tok) and vec(tok) is not None]
    if not cands:
        return None
    to_p = {rank: cosine_loop(z, zp) for rank, _, z in cands}
    mean = sum(to_p.values()) / len(to_p)
    ref = cosine_loop(zp, zt)
    ok = [(rank, tok) for rank, tok, z in cands if to_p[rank] < mean and cosine_loop(z, zt) < ref]
    return min(ok)[1] if ok else None


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def threshold_grid_oracle(sims, labels):
    best_acc, best_t = -1.0, None
    for i in range(101):
        thr = i / 100
        correct = sum(1 for s, l in zip(sims, labels) if (s >= thr) == (l == 1))
        acc = correct / len(sims)
        if acc > best_acc:
            best_acc, best_t = acc, thr
    return best_t


def average_ranks(x):
    ranks = [0.0] * len(x)
    for i, v in enumerate(x):
        less = sum(1 for w in x if w < v)
        equal = sum(1 for w in x if w == v)
        ranks[i] = less + (equal + 1) / 2
    return ranks


def pearson_two_pass(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def spearman_oracle(x, y):
    return pearson_two_pass(average_ranks(x), average_ranks(y))
