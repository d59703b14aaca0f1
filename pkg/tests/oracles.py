"""Independent slow reimplementations used as test oracles.

Everything here works on plain Python floats and lists, row by row, without
the autograd engine.
"""

import math

import numpy as np


def mlp_row(layers, row, sigmoid_out=False):
    h = [float(v) for v in row]
    for li, layer in enumerate(layers):
        w, b = layer.weight.data, layer.bias.data
        out = []
        for o in range(w.shape[0]):
            acc = float(b[o])
            for j, v in enumerate(h):
                acc += float(w[o, j]) * v
            out.append(acc)
        if li < len(layers) - 1:
            out = [max(v, 0.0) for v in out]
        h = out
    if sigmoid_out:
        h = [1.0 / (1.0 + math.exp(-v)) for v in h]
    return h


def bce(p, y):
    p = min(max(p, 1e-7), 1 - 1e-7)
    return -math.log(p) if y == 1 else -math.log(1.0 - p)


def score_row(model, row):
    z = mlp_row(model.encoder.layers, row)
    return mlp_row(model.discriminator.layers, z, sigmoid_out=True)[0]


def loss_ce(model, x, eps, labels):
    m = x.shape[0]
    n_pert = eps.shape[0]
    total = 0.0
    for i in range(m):
        z = mlp_row(model.encoder.layers, x[i])
        clean = bce(mlp_row(model.discriminator.layers, z, True)[0], 0)
        acc = 0.0
        for ell in range(n_pert):
            e = [float(v) for v in eps[ell, i]]
            if model.perturb_mode == "latent":
                zt = [a + b for a, b in zip(z, e)]
            else:
                zt = mlp_row(model.encoder.layers, [a + b for a, b in zip(x[i], e)])
            acc += bce(mlp_row(model.discriminator.layers, zt, True)[0], int(labels[ell, i]))
        total += clean + acc / n_pert
    return total / m


def loss_norm(eps):
    n_pert, m, _ = eps.shape
    total = 0.0
    for i in range(m):
        for ell in range(n_pert):
            total += math.sqrt(sum(float(v) ** 2 for v in eps[ell, i]))
    return total / (m * n_pert)


def cosine(a, b):
    dot = sum(float(u) * float(v) for u, v in zip(a, b))
    na = math.sqrt(sum(float(u) ** 2 for u in a))
    nb = math.sqrt(sum(float(v) ** 2 for v in b))
    return dot / (na * nb + 1e-12)


def loss_div(eps):
    n_pert, m, _ = eps.shape
    total = 0.0
    for i in range(m):
        acc = 0.0
        for ell in range(n_pert):
            for k in range(n_pert):
                if ell != k:
                    acc += cosine(eps[ell, i], eps[k, i])
        total += acc / (n_pert * (n_pert - 1))
    return total / m


def semi_sup(model, x_anom):
    return sum(bce(score_row(model, r), 1) for r in x_anom) / len(x_anom)


def pseudo_labels(norms, k):
    """Sort (norm, index) pairs and threshold at position k."""
    out = np.ones(norms.shape, dtype=np.int64)
    for ell, row in enumerate(norms):
        ranked = sorted(range(len(row)), key=lambda i: (row[i], i))
        for i in ranked[:k]:
            out[ell, i] = 0
    return out


def confusion_f1(scores, labels, k):
    """Flag k rows by repeatedly taking the max score (latest index on ties)."""
    remaining = list(range(len(scores)))
    flagged = set()
    for _ in range(k):
        best = remaining[0]
        for i in remaining:
            if scores[i] > scores[best] or (scores[i] == scores[best] and i > best):
                best = i
        flagged.add(best)
        remaining.remove(best)
    tp = sum(1 for i in flagged if labels[i] == 1)
    fp = len(flagged) - tp
    fn = sum(1 for i, y in enumerate(labels) if y == 1 and i not in flagged)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))
