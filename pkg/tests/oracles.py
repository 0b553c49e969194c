"""Slow, obviously-correct reference implementations used as test oracles."""
import itertools
import math
from collections import Counter


def partition_optimum(points, k):
    """Minimum k-means objective over every assignment with k non-empty clusters."""
    n = len(points)
    best = math.inf
    for labels in itertools.product(range(k), repeat=n):
        if labels[0] != 0 or len(set(labels)) != k:
            continue
        total = 0.0
        for c in range(k):
            members = [points[i] for i in range(n) if labels[i] == c]
            centre = [sum(col) / len(members) for col in zip(*members)]
            total += sum(sum((x - m) ** 2 for x, m in zip(p, centre)) for p in members)
        best = min(best, total)
    return best


def entropy(counts):
    n = sum(counts)
    return -sum(c / n * math.log(c / n) for c in counts if c)


def v_measure(gold, pred):
    n = len(gold)
    joint = Counter(zip(gold, pred))
    cg, cp = Counter(gold), Counter(pred)
    h_c, h_k = entropy(list(cg.values())), entropy(list(cp.values()))
    h_c_k = -sum(v / n * math.log(v / cp[p]) for (g, p), v in joint.items())
    h_k_c = -sum(v / n * math.log(v / cg[g]) for (g, p), v in joint.items())
    h = 1.0 if h_c == 0 else 1 - h_c_k / h_c
    c = 1.0 if h_k == 0 else 1 - h_k_c / h_k
    return 0.0 if h + c == 0 else 2 * h * c / (h + c)


def average_ranks(xs):
    ranks = [0.0] * len(xs)
    for i, x in enumerate(xs):
        below = sum(1 for y in xs if y < x)
        equal = sum(1 for y in xs if y == x)
        ranks[i] = below + (equal + 1) / 2
    return ranks


def pearson(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    return cov / math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))


def spearman(a, b):
    return pearson(average_ranks(a), average_ranks(b))


def cosine_distance(u, v):
    dot = sum(x * y for x, y in zip(u, v))
    return 1 - dot / (math.sqrt(sum(x * x for x in u)) * math.sqrt(sum(y * y for y in v)))


def all_triplets(labels):
    n = len(labels)
    return [(a, p, q) for a in range(n) for p in range(n) for q in range(n)
            if a != p and labels[a] == labels[p] and labels[q] != labels[a]]


def numeric_gradients(loss_of_model, model, h=1e-4):
    """Central finite differences of ``loss_of_model`` for every parameter of ``model``."""
    import numpy as np

    grads = {}
    for name, P in model.params().items():
        G = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            up = loss_of_model(model)
            P[idx] = old - h
            down = loss_of_model(model)
            P[idx] = old
            G[idx] = (up - down) / (2 * h)
        grads[name] = G
    return grads


def relative_error(analytic, numeric):
    import numpy as np

    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))
