"""Straight-line loop re-implementations used as independent test oracles."""
import math

import numpy as np


def oracle_similarity(F, mixed=True, floor=1e-12):
    c, h, w = F.shape
    hw = h * w
    G = [[F[ch, p // w, p % w] for ch in range(c)] for p in range(hw)]
    if mixed:
        mx = [max(G[p][ch] for p in range(hw)) for ch in range(c)]
        top = max(mx)
        e = [math.exp(m - top) for m in mx]
        wts = [v / sum(e) for v in e]
    else:
        wts = [1.0] * c
    Gp = [[G[p][ch] * wts[ch] for ch in range(c)] for p in range(hw)]
    s = [math.sqrt(max(sum(Gp[p]), floor)) for p in range(hw)]
    M = np.zeros((hw, hw))
    for i in range(hw):
        for j in range(hw):
            M[i, j] = sum(Gp[i][ch] * Gp[j][ch] for ch in range(c)) / (s[i] * s[j])
    return M


def oracle_correlation(Ma, Mb):
    a, b = Ma.ravel().tolist(), Mb.ravel().tolist()
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / max(na * nb, 1e-12)


def oracle_pool(F, size):
    c, h, w = F.shape
    fh, fw = h // size[0], w // size[1]
    out = np.zeros((c,) + tuple(size))
    for ch in range(c):
        for i in range(size[0]):
            for j in range(size[1]):
                out[ch, i, j] = sum(F[ch, i * fh + a, j * fw + b] for a in range(fh) for b in range(fw)) / (fh * fw)
    return out


def oracle_coco(t_sh, t_dp, s_sh, s_dp):
    """Batched tap arrays (n, c, h, w); single pair."""
    size = min([x.shape[-2:] for x in (t_sh, t_dp, s_sh, s_dp)], key=lambda s: s[0] * s[1])
    total = 0.0
    n = t_sh.shape[0]
    for k in range(n):
        phis = []
        for a, b in ((t_sh[k], t_dp[k]), (s_sh[k], s_dp[k])):
            phis.append(oracle_correlation(oracle_similarity(oracle_pool(a, size)), oracle_similarity(oracle_pool(b, size))))
        total += (phis[1] - phis[0]) ** 2
    return total / n


def oracle_metrics(pred, true, k):
    counts = [[0] * k for _ in range(k)]
    for p, t in zip(pred.ravel().tolist(), true.ravel().tolist()):
        counts[t][p] += 1
    total = sum(map(sum, counts))
    acc = sum(counts[i][i] for i in range(k)) / total
    ious = []
    for c in range(k):
        tp = counts[c][c]
        fn = sum(counts[c][j] for j in range(k)) - tp
        fp = sum(counts[i][c] for i in range(k)) - tp
        ious.append(tp / (tp + fn + fp) if tp + fn + fp else 0.0)
    return acc, sum(ious) / k
