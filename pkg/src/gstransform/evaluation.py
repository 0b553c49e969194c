"""Instruction-awareness evaluation: clustering V-measure, STS Spearman, triplet accuracy."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .cluster import best_of_seeds
from .errors import ContractError, DegenerateInput, MissingEmbedding
from .vectorlab import cosine_distance_rows

log = logging.getLogger(__name__)

TASKS = ("clustering", "sts", "triplet")


def _entropy(counts):
    counts = np.asarray(counts, dtype=np.float64)
    counts = counts[counts > 0]
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(-np.sum(p * np.log(p)))


def contingency(gold, pred):
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    if gold.shape != pred.shape or gold.ndim != 1:
        raise ContractError("gold and predicted labels must be 1-d and of equal length")
    if len(gold) == 0:
        raise ContractError("empty labelling")
    _, g = np.unique(gold, return_inverse=True)
    _, p = np.unique(pred, return_inverse=True)
    table = np.zeros((g.max() + 1, p.max() + 1), dtype=np.int64)
    np.add.at(table, (g, p), 1)
    return table


def homogeneity_completeness_v(gold, pred):
    """Natural-log homogeneity, completeness and V-measure."""
    table = contingency(gold, pred)
    n = table.sum()
    H_C = _entropy(table.sum(axis=1))
    H_K = _entropy(table.sum(axis=0))
    rows, cols = np.nonzero(table)
    cell = table[rows, cols].astype(np.float64)
    H_C_given_K = float(-np.sum(cell / n * np.log(cell / table.sum(axis=0)[cols])))
    H_K_given_C = float(-np.sum(cell / n * np.log(cell / table.sum(axis=1)[rows])))
    h = 1.0 if H_C == 0 else 1.0 - H_C_given_K / H_C
    c = 1.0 if H_K == 0 else 1.0 - H_K_given_C / H_K
    v = 0.0 if h + c == 0 else 2.0 * h * c / (h + c)
    return h, c, v


def v_measure(gold, pred):
    return homogeneity_completeness_v(gold, pred)[2]


def cluster_and_score(vectors, gold, seed=0, n_init=10, k=None):
    """k-means (best of ``n_init`` seeds by inertia) with k = #gold classes, scored by V-measure."""
    X = np.asarray(vectors, dtype=np.float64)
    gold = np.asarray(gold)
    if len(X) != len(gold):
        raise ContractError("one gold label per vector required")
    k = len(np.unique(gold)) if k is None else k
    k = min(k, len(X))
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n_init)]
    res = best_of_seeds(X, k, seeds)
    return v_measure(gold, res.labels)


def spearman(labels, sims):
    """Spearman correlation with average ranks for ties."""
    a = np.asarray(labels, dtype=np.float64)
    b = np.asarray(sims, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("inputs must be 1-d and of equal length")
    if len(a) < 2:
        raise ContractError("need at least two observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateInput("spearman correlation undefined for a constant series")
    ra = rankdata(a) - (len(a) + 1) / 2.0
    rb = rankdata(b) - (len(b) + 1) / 2.0
    r = float(np.dot(ra, rb) / math.sqrt(np.dot(ra, ra) * np.dot(rb, rb)))
    return max(-1.0, min(1.0, r))


def _row_start(i, n):
    return i * n - i * (i + 1) // 2


def pairs_from_ranks(ranks, n):
    """Map ranks in [0, n(n-1)/2) to pairs (i, j), i < j, enumerated row by row."""
    r = np.asarray(ranks, dtype=np.int64)
    i = np.floor(((2 * n - 1) - np.sqrt((2.0 * n - 1) ** 2 - 8.0 * r)) / 2.0).astype(np.int64)
    i = np.clip(i, 0, n - 2)
    # float rounding can leave i off by one either way
    i = np.where(_row_start(i, n) > r, i - 1, i)
    i = np.where((i + 1 <= n - 2) & (_row_start(i + 1, n) <= r), i + 1, i)
    j = r - _row_start(i, n) + i + 1
    return i, j


def sample_sts_pairs(ids, labels, n_pairs=50000, seed=0):
    """Unordered pairs drawn without replacement, labelled 1 when classes agree."""
    ids = list(ids)
    labels = list(labels)
    n = len(ids)
    if n == 0:
        raise ContractError("empty dataset")
    if n < 2:
        raise ContractError("need at least two records")
    total = n * (n - 1) // 2
    m = min(n_pairs, total)
    ranks = np.sort(np.random.default_rng(seed).choice(total, size=m, replace=False))
    I, J = pairs_from_ranks(ranks, n)
    return [(ids[i], ids[j], int(labels[i] == labels[j])) for i, j in zip(I.tolist(), J.tolist())]


def sample_triplets(ids, labels, n=50000, seed=0):
    """Anchor and positive share a label (anchor != positive); the negative does not.

    Anchors are drawn uniformly from records whose class has at least two
    members, the positive uniformly from the rest of that class, the
    negative uniformly from all other classes.
    """
    ids = list(ids)
    _, inv = np.unique(np.asarray(list(labels)), return_inverse=True)
    sizes = np.bincount(inv)
    if len(sizes) < 2:
        raise ContractError("need at least two classes")
    anchors = np.flatnonzero(sizes[inv] >= 2)
    if len(anchors) == 0:
        raise ContractError("no class has two members; no valid triplet exists")
    order = np.argsort(inv, kind="stable")
    start = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    rank_in_class = np.empty(len(inv), dtype=np.int64)
    rank_in_class[order] = np.arange(len(inv)) - start[inv[order]]

    rng = np.random.default_rng(seed)
    a = anchors[rng.integers(len(anchors), size=n)]
    c = inv[a]
    r = rng.integers(0, sizes[c] - 1)
    r = r + (r >= rank_in_class[a])
    p = order[start[c] + r]
    k = rng.integers(0, len(inv) - sizes[c])
    neg = order[np.where(k < start[c], k, k + sizes[c])]
    return [(ids[x], ids[y], ids[z]) for x, y, z in zip(a.tolist(), p.tolist(), neg.tolist())]


def triplet_accuracy(vectors_by_id, triplets):
    """Share of triplets with cosine distance(anchor, positive) strictly below (anchor, negative)."""
    if not triplets:
        raise ContractError("no triplets")
    missing = sorted({i for t in triplets for i in t if i not in vectors_by_id})
    if missing:
        raise MissingEmbedding(*missing[:10])
    A = np.asarray([vectors_by_id[a] for a, _, _ in triplets], dtype=np.float64)
    P = np.asarray([vectors_by_id[p] for _, p, _ in triplets], dtype=np.float64)
    N = np.asarray([vectors_by_id[n] for _, _, n in triplets], dtype=np.float64)
    dp = cosine_distance_rows(A, P)
    dn = cosine_distance_rows(A, N)
    return float(np.mean(dp < dn))


def sts_score(vectors_by_id, pairs):
    missing = sorted({i for a, b, _ in pairs for i in (a, b) if i not in vectors_by_id})
    if missing:
        raise MissingEmbedding(*missing[:10])
    A = np.asarray([vectors_by_id[a] for a, _, _ in pairs], dtype=np.float64)
    B = np.asarray([vectors_by_id[b] for _, b, _ in pairs], dtype=np.float64)
    sims = 1.0 - cosine_distance_rows(A, B)
    return spearman([l for _, _, l in pairs], sims)


def aggregate(task, scores):
    """Harmonic mean for clustering/triplet (0 if any score <= 0), arithmetic mean for STS."""
    scores = [float(s) for s in scores]
    if not scores:
        raise ContractError("no aspect scores to aggregate")
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    if len(scores) == 1:
        return scores[0]
    if task == "sts":
        return sum(scores) / len(scores)
    if any(s <= 0 for s in scores):
        log.info("non-positive aspect score in %s aggregate; harmonic mean set to 0", task)
        return 0.0
    return len(scores) / sum(1.0 / s for s in scores)


@dataclass
class EvalReport:
    task: str
    per_aspect_scores: dict
    aggregate: float
    seed: int
    sample_counts: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def evaluate(task, ids, vectors, gold_by_aspect, aspects=None, seed=0, n_samples=50000):
    """Run ``task`` for each aspect and aggregate.

    ``gold_by_aspect`` maps aspect name to a list of gold labels aligned
    with ``ids``/``vectors``.
    """
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}; expected one of {TASKS}")
    available = sorted(gold_by_aspect)
    aspects = list(aspects) if aspects else available
    unknown = [a for a in aspects if a not in gold_by_aspect]
    if unknown:
        raise ContractError(f"unknown aspect(s) {unknown}; available: {available}")
    V = np.asarray(vectors, dtype=np.float64)
    by_id = dict(zip(ids, V))
    scores, counts = {}, {}
    for aspect in aspects:
        gold = gold_by_aspect[aspect]
        if task == "clustering":
            scores[aspect] = cluster_and_score(V, gold, seed=seed)
            counts[aspect] = len(V)
        elif task == "sts":
            pairs = sample_sts_pairs(ids, gold, n_samples, seed)
            scores[aspect] = sts_score(by_id, pairs)
            counts[aspect] = len(pairs)
        else:
            trip = sample_triplets(ids, gold, n_samples, seed)
            scores[aspect] = triplet_accuracy(by_id, trip)
            counts[aspect] = len(trip)
    return EvalReport(task, scores, aggregate(task, [scores[a] for a in aspects]), seed, counts)
