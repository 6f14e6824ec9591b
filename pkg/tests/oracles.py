"""Independent reference implementations used only by the tests.

Everything here is written as explicit Python loops over scalars so that it
shares no code path with the vectorised library.
"""

import math


def gauss(a, b, sigma):
    d2 = sum((x - y) ** 2 for x, y in zip(a, b))
    return math.exp(-d2 / (2.0 * sigma * sigma))


def mk(a, b, bandwidths, weights):
    return sum(w * gauss(a, b, s) for s, w in zip(bandwidths, weights))


def mmd2_loop(S, T, bandwidths, weights):
    M, N = len(S), len(T)
    ss = 0.0
    for i in range(M):
        for j in range(M):
            ss += mk(S[i], S[j], bandwidths, weights)
    tt = 0.0
    for i in range(N):
        for j in range(N):
            tt += mk(T[i], T[j], bandwidths, weights)
    st = 0.0
    for i in range(M):
        for j in range(N):
            st += mk(S[i], T[j], bandwidths, weights)
    return max(ss / (M * M) + tt / (N * N) - 2.0 * st / (M * N), 0.0)


def multi_domain_loop(batches, bandwidths, weights):
    K = len(batches)
    total = 0.0
    for i in range(K):
        for j in range(K):
            if i != j:
                total += mmd2_loop(batches[i], batches[j], bandwidths, weights)
    return total / (K * K)


def metrics_loop(pred, truth, n_a):
    """Accuracy, weighted F1 and macro F1 from a hand-built confusion matrix."""
    cm = [[0] * n_a for _ in range(n_a)]
    for p, t in zip(pred, truth):
        cm[t][p] += 1
    n = len(truth)
    correct = sum(cm[k][k] for k in range(n_a))
    f1 = []
    support = []
    for k in range(n_a):
        tp = cm[k][k]
        fp = sum(cm[t][k] for t in range(n_a)) - tp
        fn = sum(cm[k]) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        support.append(sum(cm[k]))
    f_w = sum(f * s for f, s in zip(f1, support)) / n
    f_m = sum(f1) / n_a
    return correct / n, f_w, f_m


def adam_scalar(theta, grads, lr, b1, b2, eps):
    """Scalar Adam with bias correction, one float per step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
    return theta
