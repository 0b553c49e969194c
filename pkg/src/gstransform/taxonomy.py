"""Instruction-specific label taxonomies and LLM annotation of sampled texts."""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .cluster import kmeans_pp
from .embed import embed_texts
from .errors import ConfigError, ContractError, GSTError
from .llm import normalize_label

log = logging.getLogger(__name__)


@dataclass
class TextRecord:
    id: str
    text: str
    labels: dict = field(default_factory=dict)


@dataclass
class Instruction:
    text: str
    aspect_name: str = "default"

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ConfigError("instruction text must be non-empty")


@dataclass
class Category:
    index: int
    label: str
    exemplar_ids: list = field(default_factory=list)
    centroid: Optional[list] = None


@dataclass
class LabelTaxonomy:
    instruction: Instruction
    categories: list
    provenance: str = "clustered"
    k: int = 0
    sampled_ids: list = field(default_factory=list)
    seed: int = 0
    options: dict = field(default_factory=dict)

    @property
    def labels(self):
        return [c.label for c in self.categories]

    def to_dict(self):
        return {
            "instruction": self.instruction.text,
            "aspect_name": self.instruction.aspect_name,
            "provenance": self.provenance,
            "k": self.k,
            "categories": [asdict(c) for c in self.categories],
            "sampled_ids": list(self.sampled_ids),
            "seed": self.seed,
            "options": dict(self.options),
        }

    @classmethod
    def from_dict(cls, d):
        cats = [Category(**c) for c in d["categories"]]
        return cls(
            instruction=Instruction(d["instruction"], d.get("aspect_name", "default")),
            categories=cats,
            provenance=d.get("provenance", "clustered"),
            k=d.get("k", len(cats)),
            sampled_ids=d.get("sampled_ids", []),
            seed=d.get("seed", 0),
            options=d.get("options", {}),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class AnnotatedSample:
    text_id: str
    embedding: np.ndarray
    label_index: int


@dataclass
class TaxonomyOptions:
    sample_size: int = 3000
    k: int = 50
    summarize: bool = True
    seed: int = 0
    positives_per_prompt: int = 10
    negatives_per_prompt: int = 10
    directed_labels: bool = False
    directed_sample_texts: int = 50


def load_corpus(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(TextRecord(str(row["id"]), row["text"], dict(row.get("labels") or {})))
            except (ValueError, KeyError) as exc:
                raise ContractError(f"{path}:{lineno}: bad corpus row ({exc})") from exc
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ContractError(f"{path}: duplicate record ids")
    return records


def save_corpus(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "text": r.text, "labels": r.labels}) + "\n")


def sample_corpus(corpus, sample_size, seed=0):
    """Uniform sample without replacement, deterministic under ``seed``."""
    corpus = list(corpus)
    if not corpus:
        raise ContractError("cannot sample from an empty corpus")
    if sample_size < 1:
        raise ContractError("sample_size must be positive")
    if sample_size >= len(corpus):
        if sample_size > len(corpus):
            log.warning("sample_size %d exceeds corpus size %d; using the whole corpus", sample_size, len(corpus))
        sample_size = len(corpus)
    idx = np.random.default_rng(seed).choice(len(corpus), size=sample_size, replace=False)
    return [corpus[i] for i in idx]


# -- label matching ----------------------------------------------------------


def edit_distance(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def match_category(reply, labels, max_ratio=0.2):
    """Index of the label ``reply`` refers to, or None.

    Tries an exact match, then a case/whitespace-insensitive match, then
    the closest label within an edit distance of ``max_ratio`` times the
    label length.
    """
    if reply in labels:
        return labels.index(reply)
    norm = normalize_label(reply)
    normed = [normalize_label(l) for l in labels]
    if norm in normed:
        return normed.index(norm)
    best, best_d = None, None
    for i, lab in enumerate(normed):
        d = edit_distance(norm, lab)
        if d <= max_ratio * len(lab) and (best_d is None or d < best_d):
            best, best_d = i, d
    return best


def _variant(label, used):
    """``label`` itself, or the first ``" (variant n)"`` form not yet in ``used``."""
    name, n = label, 1
    while normalize_label(name) in used:
        n += 1
        name = f"{label} (variant {n})"
    return name


def _dedupe(labels):
    used, out = set(), []
    for lab in labels:
        name = _variant(lab, used)
        used.add(normalize_label(name))
        out.append(name)
    return out


# -- construction --------------------------------------------------------------


def _distinct_count(X):
    return len(np.unique(X, axis=0))


def _cluster_examples(X, result, P, Q):
    """Positives nearest each centroid, negatives round-robin across the other clusters."""
    order = {}
    for c in range(result.k):
        members = np.flatnonzero(result.labels == c)
        d = np.einsum("ij,ij->i", X[members] - result.centroids[c], X[members] - result.centroids[c])
        order[c] = members[np.argsort(d, kind="stable")]
    examples = []
    for c in range(result.k):
        positives = list(order[c][:P])
        others = [(c + j) % result.k for j in range(1, result.k)]
        negatives, depth = [], 0
        while len(negatives) < Q and any(depth < len(order[o]) for o in others):
            for o in others:
                if depth < len(order[o]) and len(negatives) < Q:
                    negatives.append(order[o][depth])
            depth += 1
        examples.append((positives, negatives))
    return examples


def build_taxonomy(instruction, corpus, store, gateway, embedder_cfg=None, options=None):
    """Sample, summarize, embed, cluster and label.

    Returns ``(taxonomy, sampled_records)``. With ``options.summarize``
    false the original-text embeddings from ``store`` are clustered.
    """
    opts = options or TaxonomyOptions()
    sampled = sample_corpus(corpus, opts.sample_size, opts.seed)
    if opts.directed_labels:
        return directed_label_generation(instruction, sampled, gateway, opts.k, opts), sampled

    if opts.summarize:
        if embedder_cfg is None or embedder_cfg.backend == "store_only":
            raise ConfigError("summaries need an embedder that can encode new text (remote_api or mock_hash)")
        results = gateway.batch_execute(
            gateway.summarize_request(instruction.text, r.text, r.id) for r in sampled
        )
        kept = [(r, res.value) for r, res in zip(sampled, results) if res.ok]
        if not kept:
            raise GSTError("every summarization request failed")
        if len(kept) < len(sampled):
            log.warning("%d of %d summaries failed and were skipped", len(sampled) - len(kept), len(sampled))
        ids = [r.id for r, _ in kept]
        strings = [s for _, s in kept]
        X = np.asarray(embed_texts(embedder_cfg, list(zip(ids, strings))), dtype=np.float64)
    else:
        ids = [r.id for r in sampled]
        strings = [r.text for r in sampled]
        X = store.read(ids).astype(np.float64)

    k = opts.k
    distinct = _distinct_count(X)
    if distinct < k:
        log.warning("reducing k from %d to %d distinct embeddings", k, distinct)
        k = distinct
    if k < 1:
        raise GSTError("nothing to cluster")
    result = kmeans_pp(X, k, seed=opts.seed)
    examples = _cluster_examples(X, result, opts.positives_per_prompt, opts.negatives_per_prompt)

    def request(c, extra_negatives=()):
        pos, neg = examples[c]
        return gateway.label_request(
            instruction.text,
            [strings[i] for i in pos],
            [strings[i] for i in neg] + list(extra_negatives),
            key=c,
            context={"positive_ids": [ids[i] for i in pos], "negative_ids": [ids[i] for i in neg]},
        )

    active = [c for c in range(k) if examples[c][0]]
    first = gateway.batch_execute(request(c) for c in active)
    labels, used = {}, set()
    for c, res in zip(active, first):
        if not res.ok:
            log.warning("label generation failed for cluster %d; cluster dropped", c)
            continue
        label = res.value
        if normalize_label(label) in used:
            retry = gateway.batch_execute([request(c, [label])])[0]
            if retry.ok and normalize_label(retry.value) not in used:
                label = retry.value
            else:
                label = _variant(label, used)
        used.add(normalize_label(label))
        labels[c] = label

    categories = [
        Category(index=i, label=labels[c], exemplar_ids=[ids[j] for j in examples[c][0]],
                 centroid=[float(v) for v in result.centroids[c]])
        for i, c in enumerate(sorted(labels))
    ]
    if len(categories) < 2:
        raise GSTError(f"taxonomy has {len(categories)} categories; at least 2 are needed")
    tax = LabelTaxonomy(
        instruction=instruction, categories=categories, provenance="clustered", k=k,
        sampled_ids=[r.id for r in sampled], seed=opts.seed, options=asdict(opts),
    )
    return tax, sampled


def directed_label_generation(instruction, sampled, gateway, k, options=None):
    """Ablation baseline: ask the model for ``k`` category names in one prompt."""
    opts = options or TaxonomyOptions(k=k)
    texts = [r.text for r in sampled[: opts.directed_sample_texts]]
    names = gateway.execute(gateway.directed_request(instruction.text, texts, k))
    names = _dedupe(names)
    if len(names) < 2:
        raise GSTError(f"directed label generation produced {len(names)} label(s); at least 2 are needed")
    return LabelTaxonomy(
        instruction=instruction,
        categories=[Category(index=i, label=n) for i, n in enumerate(names)],
        provenance="directed_llm", k=k, sampled_ids=[r.id for r in sampled], seed=opts.seed,
        options=asdict(opts),
    )


@dataclass
class DropReport:
    total: int
    dropped_ids: list

    @property
    def dropped(self):
        return len(self.dropped_ids)


def annotate_samples(taxonomy, sampled, store, gateway, max_drop_fraction=0.5):
    """Classify each original sampled text into the taxonomy.

    Returns ``(samples, drop_report)``. An unmatched reply gets one more
    classification attempt; texts still unmatched are dropped.
    """
    labels = taxonomy.labels
    if len(labels) < 2:
        raise ContractError("taxonomy needs at least two categories")
    text = taxonomy.instruction.text
    matched = {}
    pending = list(sampled)
    for _round in range(2):
        if not pending:
            break
        results = gateway.batch_execute(gateway.classify_request(text, labels, r.text, r.id) for r in pending)
        nxt = []
        for r, res in zip(pending, results):
            idx = match_category(res.value, labels) if res.ok else None
            if idx is None:
                nxt.append(r)
            else:
                matched[r.id] = idx
        pending = nxt
    report = DropReport(total=len(sampled), dropped_ids=[r.id for r in pending])
    if report.dropped > max_drop_fraction * report.total:
        raise GSTError(f"{report.dropped} of {report.total} samples could not be matched to the taxonomy")
    if report.dropped:
        log.warning("dropped %d of %d samples with unmatched classifications", report.dropped, report.total)
    kept = [r.id for r in sampled if r.id in matched]
    X = store.read(kept)
    samples = [AnnotatedSample(i, X[n], matched[i]) for n, i in enumerate(kept)]
    return samples, report


def samples_to_arrays(samples):
    if not samples:
        raise ContractError("no annotated samples")
    X = np.stack([np.asarray(s.embedding, dtype=np.float64) for s in samples])
    y = np.asarray([s.label_index for s in samples], dtype=np.int64)
    return X, y


def save_annotations(path, samples, taxonomy):
    labels = taxonomy.labels
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"text_id": s.text_id, "label_index": s.label_index, "label": labels[s.label_index]}) + "\n")


def load_annotations(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
