"""Scalar-loop evaluation of the balancing losses with math.erf."""

import math


def cv_sq(v):
    n = len(v)
    mean = sum(v) / n
    var = sum((x - mean) ** 2 for x in v) / n
    return var / mean**2


def softmax_row(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def logits_of(X, W):
    return [[sum(x[d] * W[d][e] for d in range(len(x))) for e in range(len(W[0]))] for x in X]


def importance(X, W):
    probs = [softmax_row(r) for r in logits_of(X, W)]
    return cv_sq([sum(p[e] for p in probs) for e in range(len(W[0]))])


def load(X, W, noise, k):
    E = len(W[0])
    sd = 1 / math.sqrt(E)
    loads = [0.0] * E
    for row, eps in zip(logits_of(X, W), noise):
        noisy = sorted((row[e] + eps[e] for e in range(E)), reverse=True)
        thr = noisy[k - 1]
        for e in range(E):
            loads[e] += 0.5 * (1 + math.erf((row[e] - thr) / (sd * math.sqrt(2))))
    return cv_sq(loads)


def importance_descent(seed=0, tokens=64, dim=8, experts=4, steps=500, lr=0.5, skew=1.5):
    """Plain gradient descent on the importance loss alone from a gate skewed
    toward expert 0. Returns (cv_sq_before, cv_sq_after)."""
    from unimoe import tensor as tn
    from unimoe.affinity import GateParams
    from unimoe.losses import importance_loss

    r = tn.Rng(seed)
    X = r.normal((tokens, dim)) + 1.0
    W = r.normal((dim, experts))
    W[:, 0] += skew
    before = float(importance_loss(X, GateParams(W)).value)
    for _ in range(steps):
        w = tn.parameter(W)
        W = W - lr * tn.backward(importance_loss(X, GateParams(w)))[w]
    return before, float(importance_loss(X, GateParams(W)).value)
