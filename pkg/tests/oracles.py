"""Independent reference computations used as test oracles.

Everything here is written directly from the definitions in plain float64
numpy or Python, sharing no code with the package.
"""

import itertools
import math

import numpy as np


def brute_auroc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    hits = 0.0
    for p, n in itertools.product(pos, neg):
        if p > n:
            hits += 1.0
        elif p == n:
            hits += 0.5
    return hits / (len(pos) * len(neg))


def softmax_anomaly_prob(a, n, tau):
    """Anomaly entry of softmax([a/tau, n/tau]) evaluated with explicit exps."""
    a, n = np.asarray(a, np.float64) / tau, np.asarray(n, np.float64) / tau
    m = np.maximum(a, n)
    ea, en = np.exp(a - m), np.exp(n - m)
    return ea / (ea + en)


def bernoulli_kl(p, q):
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def central_diff(f, x, h=1e-6):
    """Gradient of scalar f at float64 array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def neighbours(g, k):
    """Admissible (query, key) patch index pairs by direct enumeration."""
    out = set()
    for a in range(g * g):
        for b in range(g * g):
            (r1, c1), (r2, c2) = divmod(a, g), divmod(b, g)
            if math.hypot(r1 - r2, c1 - c2) <= k:
                out.add((a, b))
    return out


def bilinear(S, H, W):
    """Corner-aligned bilinear resize, one output pixel at a time."""
    gh, gw = len(S), len(S[0])
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            y = 0.0 if H == 1 or gh == 1 else i * (gh - 1) / (H - 1)
            x = 0.0 if W == 1 or gw == 1 else j * (gw - 1) / (W - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, gh - 1), min(x0 + 1, gw - 1)
            wy, wx = y - y0, x - x0
            out[i, j] = ((1 - wy) * ((1 - wx) * S[y0][x0] + wx * S[y0][x1])
                         + wy * ((1 - wx) * S[y1][x0] + wx * S[y1][x1]))
    return out
