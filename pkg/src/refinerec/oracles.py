"""Scalar-loop reference implementations.

Plain Python loops over nested lists, sharing no code with the vectorised
tensor path. Used by the test-suite and the acceptance bench as independent
oracles at tiny sizes.
"""

from __future__ import annotations

import math


def _rows(M):
    return [list(map(float, r)) for r in M]


def matmul(A, B):
    A, B = _rows(A), _rows(B)
    return [[sum(A[i][k] * B[k][j] for k in range(len(B))) for j in range(len(B[0]))]
            for i in range(len(A))]


def transpose(A):
    A = _rows(A)
    return [[A[i][j] for i in range(len(A))] for j in range(len(A[0]))]


def softmax_row(row, allowed=None):
    allowed = allowed if allowed is not None else [True] * len(row)
    m = max(v for v, ok in zip(row, allowed) if ok)
    e = [math.exp(v - m) if ok else 0.0 for v, ok in zip(row, allowed)]
    s = sum(e)
    return [x / s for x in e]


def dot_scores(H, WQ, WK):
    """A[k][t] = <Q_k, K_t> / sqrt(d_head), triple loop."""
    H, WQ, WK = _rows(H), _rows(WQ), _rows(WK)
    n, d, dh = len(H), len(H[0]), len(WQ[0])
    Q = [[sum(H[k][i] * WQ[i][j] for i in range(d)) for j in range(dh)] for k in range(n)]
    K = [[sum(H[k][i] * WK[i][j] for i in range(d)) for j in range(dh)] for k in range(n)]
    return [[sum(Q[k][j] * K[t][j] for j in range(dh)) / math.sqrt(dh) for t in range(n)]
            for k in range(n)]


def elu_plus_one(x: float) -> float:
    return x + 1.0 if x > 0 else math.exp(x)


def w2(mu1, var1, mu2, var2) -> float:
    total = 0.0
    for a, b in zip(mu1, mu2):
        total += (a - b) ** 2
    for a, b in zip(var1, var2):
        total += (math.sqrt(a) - math.sqrt(b)) ** 2
    return math.sqrt(total)


def stochastic_scores(M, S, WQm, WKm, WQs, WKs):
    """A[k][t] = -W2 between projected query and key Gaussians (covariance via ELU+1)."""
    qm, km = matmul(M, WQm), matmul(M, WKm)
    qv = [[elu_plus_one(v) for v in r] for r in matmul(S, WQs)]
    kv = [[elu_plus_one(v) for v in r] for r in matmul(S, WKs)]
    n = len(qm)
    return [[-w2(qm[k], qv[k], km[t], kv[t]) for t in range(n)] for k in range(n)]


def refine_simp(A, WRQ, WRK, d):
    A = _rows(A)
    n = len(A)
    out = [[0.0] * n for _ in range(n)]
    for k in range(n):
        qk = [sum(A[k][i] * WRQ[i][j] for i in range(n)) for j in range(len(WRQ[0]))]
        for t in range(n):
            kt = [sum(A[t][i] * WRK[i][j] for i in range(n)) for j in range(len(WRK[0]))]
            out[k][t] = sum(a * b for a, b in zip(qk, kt)) / math.sqrt(d)
    return out


def refine_value(A, WRQ, WRK, WRV):
    left = matmul(WRV, A)
    inner = matmul(transpose(matmul(WRK, A)), matmul(WRQ, A))
    inner = [softmax_row(r) for r in inner]
    return matmul(left, inner)


def refine_value_causal(A, WRQ, WRK, WRV):
    """Row k of refine_value computed on A with rows after k set to zero."""
    A = _rows(A)
    n = len(A)
    out = []
    for k in range(n):
        Ak = [A[i] if i <= k else [0.0] * n for i in range(n)]
        out.append(refine_value(Ak, WRQ, WRK, WRV)[k])
    return out


def refine_add(A, WRQ, WRK, d):
    A = _rows(A)
    simp = refine_simp(A, WRQ, WRK, d)
    return [[(simp[k][t] + A[k][t]) / 2 for t in range(len(A))] for k in range(len(A))]


def refine_stoc(A, Wmu, Wsig):
    mu = matmul(A, Wmu)
    var = [[elu_plus_one(v) for v in r] for r in matmul(A, Wsig)]
    n = len(mu)
    return [[-w2(mu[k], var[k], mu[t], var[t]) for t in range(n)] for k in range(n)]


def metrics(ranks, N):
    hits = [1.0 if r <= N else 0.0 for r in ranks]
    gains = [1.0 / math.log2(r + 1) if r <= N else 0.0 for r in ranks]
    return sum(hits) / len(ranks), sum(gains) / len(ranks)


def rank_by_sort(scores, target):
    """Pessimistic rank via a full sort: ties are placed ahead of the target."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i == target))
    return order.index(target) + 1


def five_core(records, k=5, both=True):
    """Naive fixpoint: rescan everything after each single removal pass."""
    records = list(records)
    changed = True
    while changed:
        changed = False
        ucount, icount = {}, {}
        for u, i, _ in records:
            ucount[u] = ucount.get(u, 0) + 1
            icount[i] = icount.get(i, 0) + 1
        keep = []
        for r in records:
            if ucount[r[0]] < k or (both and icount[r[1]] < k):
                changed = True
            else:
                keep.append(r)
        records = keep
    return records
