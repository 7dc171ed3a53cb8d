"""Reference implementations that share no code with the package."""
import math
from collections import Counter

import numpy as np


def dense_gp(support, enc, query, sigma, length, noise):
    """Posterior mean/variance via an explicit float64 inverse."""
    s = np.asarray(support, np.float64)
    q = np.asarray(query, np.float64)

    def k(a, b):
        d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return sigma ** 2 * np.exp(-d / (2 * length ** 2))

    inv = np.linalg.inv(k(s, s) + noise ** 2 * np.eye(len(s)))
    k_sq = k(s, q)
    mean = k_sq.T @ inv @ np.asarray(enc, np.float64)
    var = np.diag(k(q, q) - k_sq.T @ inv @ k_sq)
    return mean, var


def loop_bce(probs, targets, eps=1e-7):
    """Two-term binary cross-entropy summed term by term and divided by C*H*W."""
    c, h, w = len(probs), len(probs[0]), len(probs[0][0])
    total = 0.0
    for j in range(c):
        for r in range(h):
            for s in range(w):
                p = min(max(float(probs[j][r][s]), eps), 1 - eps)
                t = float(targets[j][r][s])
                total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / (c * h * w)


def dict_confusion(truth, pred, c):
    counts = Counter(zip(np.ravel(truth).tolist(), np.ravel(pred).tolist()))
    return [[counts.get((i, j), 0) for j in range(1, c + 1)] for i in range(1, c + 1)]


def dict_report(cm):
    """Metrics from a row=truth, column=prediction count table, in plain Python."""
    c = len(cm)
    total = sum(map(sum, cm))
    row = [sum(cm[i]) for i in range(c)]
    col = [sum(cm[i][j] for i in range(c)) for j in range(c)]
    diag = [cm[i][i] for i in range(c)]
    acc = [diag[i] / row[i] if row[i] else None for i in range(c)]
    iou = [diag[i] / (row[i] + col[i] - diag[i]) if row[i] + col[i] - diag[i] else 0.0 for i in range(c)]
    f1 = [2 * diag[i] / (row[i] + col[i]) if row[i] + col[i] else 0.0 for i in range(c)]
    present = [a for a in acc if a is not None]
    return {
        "pa": sum(diag) / total,
        "mca": sum(present) / len(present),
        "fwiou": sum(row[i] / total * iou[i] for i in range(c)),
        "fwf1": sum(row[i] / total * f1[i] for i in range(c)),
        "acc": acc,
        "iou": iou,
        "f1": f1,
    }


def central_difference(fn, x, h=1e-6):
    """Gradient of scalar ``fn`` at float64 array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
