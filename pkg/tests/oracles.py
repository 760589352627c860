"""Slow reference implementations written directly from the definitions.

They share no code with the package and use plain loops, exact fractions
where possible, and ``math`` instead of numpy.
"""

from __future__ import annotations

import math
from fractions import Fraction
from itertools import permutations


def ci(truth, pred):
    good = total = 0
    for i, j in permutations(range(len(truth)), 2):
        if truth[i] < truth[j]:
            total += 1
            good += pred[i] > pred[j]
    return Fraction(good, total) if total else None


def sci(truth, pred, sens):
    idx = [i for i, s in enumerate(sens) if s]
    if len(idx) < 2:
        return None
    return ci([truth[i] for i in idx], [pred[i] for i in idx])


def ap(hits, k):
    num, count = Fraction(0), 0
    for j in range(1, min(k, len(hits)) + 1):
        if hits[j - 1]:
            count += 1
            num += Fraction(sum(hits[:j]), j)
    return num / count if count else Fraction(0)


def ah(hits, k):
    return sum(1 for h in hits[:k] if h)


def true_top(ids, truth, k):
    # d is in the top k when fewer than k drugs come strictly before it
    out = set()
    for a in range(len(ids)):
        before = sum(1 for b in range(len(ids))
                     if truth[b] < truth[a] or (truth[b] == truth[a] and ids[b] < ids[a]))
        if before < k:
            out.add(ids[a])
    return out


def at(ranked, ids, truth, k):
    return Fraction(len(true_top(ids, truth, k) & set(ranked[:k])), k)


def nt(ranked, ids, truth, new, k):
    want = true_top(ids, truth, k) & set(new)
    if not want:
        return None
    return Fraction(len(want & set(ranked[:k])), len(want))


def _logistic(x):
    # log(1 + e^-x) without overflow
    return max(-x, 0.0) + math.log1p(math.exp(-abs(x)))


def loss(U, V, pos, neg, pairs, W, alpha, beta, gamma):
    """Weighted objective from lists of per-cell-line index sets and nested lists."""
    l, m, n = len(U), len(U[0]), len(V[0])

    def s(p, i):
        return sum(U[r][p] * V[r][i] for r in range(l))

    push = order = 0.0
    for p in range(m):
        if pos[p] and neg[p]:
            tot = sum(_logistic(s(p, i) - s(p, j)) for i in pos[p] for j in neg[p])
            push += tot / (len(pos[p]) * len(neg[p]))
        if pairs[p]:
            order += sum(_logistic(s(p, i) - s(p, j)) for i, j in pairs[p]) / len(pairs[p])
    r_uv = sum(U[r][p] ** 2 for r in range(l) for p in range(m)) / m
    r_uv += sum(V[r][i] ** 2 for r in range(l) for i in range(n)) / n
    r_sim = 0.0
    for p in range(m):
        for q in range(m):
            r_sim += W[p][q] * sum((U[r][p] - U[r][q]) ** 2 for r in range(l))
    r_sim /= m * m
    return (1 - alpha) * push + alpha * order + beta / 2 * r_uv + gamma / 2 * r_sim


def sensitive_pairs(values, sens_idx):
    """Ordered pairs (i, j) of sensitive drugs with response_i < response_j."""
    return [(i, j) for i, j in permutations(sens_idx, 2) if values[i] < values[j]]


def lstsq_normal(X, y):
    """Intercept + weights from the normal equations, solved by Gauss-Jordan on fractions."""
    rows = [[Fraction(1)] + [Fraction(v) for v in r] for r in X]
    y = [Fraction(v) for v in y]
    d = len(rows[0])
    A = [[sum(r[a] * r[b] for r in rows) for b in range(d)] for a in range(d)]
    b = [sum(r[a] * t for r, t in zip(rows, y)) for a in range(d)]
    for c in range(d):
        piv = next(r for r in range(c, d) if A[r][c] != 0)
        A[c], A[piv], b[c], b[piv] = A[piv], A[c], b[piv], b[c]
        for r in range(d):
            if r != c and A[r][c] != 0:
                f = A[r][c] / A[c][c]
                A[r] = [x - f * z for x, z in zip(A[r], A[c])]
                b[r] -= f * b[c]
    sol = [float(b[c] / A[c][c]) for c in range(d)]
    return sol[0], sol[1:]



def percentile(vals, theta):
    s = sorted(vals)
    r = theta / 100 * (len(s) - 1)
    lo = math.floor(r)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (r - lo) * (s[hi] - s[lo])


def label_sets(values, observed, theta):
    """Per cell line: sensitive indices, insensitive indices, ordered sensitive pairs."""
    pos, neg, pairs = [], [], []
    for row, obs in zip(values, observed):
        idx = [i for i in range(len(row)) if obs[i]]
        t = percentile([row[i] for i in idx], theta)
        sp = [i for i in idx if row[i] < t]
        pos.append(sp)
        neg.append([i for i in idx if not row[i] < t])
        pairs.append([(i, j) for i in sp for j in sp if row[i] < row[j]])
    return pos, neg, pairs
