"""Synthetic multi-aspect corpora with known ground truth.

Each record has two independent hidden aspects. Its generic embedding
places the aspect-A class centre in one block of coordinates and the
aspect-B centre in another, plus isotropic noise, so a generic clustering
is dominated by whichever aspect is spread wider.
"""
import numpy as np

from .taxonomy import TextRecord

ASPECT_A_NAMES = ("sports", "politics", "science", "finance", "travel", "health", "music", "food")
ASPECT_B_NAMES = ("joyful", "angry", "sad", "neutral", "fearful", "hopeful", "bored", "proud")


def class_centres(n_classes, dim, separation, rng):
    """Random centres rescaled so the closest pair is ``separation`` apart."""
    C = rng.standard_normal((n_classes, dim))
    C -= C.mean(axis=0)
    d = np.sqrt(((C[:, None] - C[None]) ** 2).sum(-1))
    d[np.diag_indices(n_classes)] = np.inf
    return C * (separation / d.min())


def make_multi_aspect_corpus(n=2000, dim=32, n_classes=4, a_separation=3.0, b_separation=8.0, sigma=0.35,
                             seed=0, aspect_names=("a", "b")):
    """Return ``(records, vectors)``.

    Aspect A lives in the first ``dim // 2`` coordinates, aspect B in the
    rest. With the defaults B is spread wider than A, so generic k-means
    recovers B rather than A.
    """
    rng = np.random.default_rng(seed)
    half = dim // 2
    ca = class_centres(n_classes, half, a_separation, rng)
    cb = class_centres(n_classes, dim - half, b_separation, rng)
    ya = rng.integers(n_classes, size=n)
    yb = rng.integers(n_classes, size=n)
    X = np.concatenate([ca[ya], cb[yb]], axis=1) + sigma * rng.standard_normal((n, dim))
    an, bn = aspect_names
    records = []
    width = len(str(n - 1))
    for i in range(n):
        a, b = ASPECT_A_NAMES[ya[i]], ASPECT_B_NAMES[yb[i]]
        records.append(TextRecord(
            id=f"t{i:0{width}d}",
            text=f"Note {i}: a {b} piece about {a}.",
            labels={an: a, bn: b},
        ))
    return records, X.astype(np.float32)


def write_fixture(out_dir, n=2000, seed=0, **corpus_kw):
    """Write ``corpus.jsonl``, a generic ``store/`` and a runnable ``config.toml``.

    The config drives the pipeline with the gold-label oracle for aspect
    ``a``. The margin is set on the scale of the class separation, which is
    what the default of 1.0 assumes for unit-norm embeddings.
    """
    from pathlib import Path

    from .config import EvalConfig, PipelineConfig, TrainSection
    from .embed import EmbedderConfig, store_write
    from .llm import LlmProviderConfig
    from .taxonomy import Instruction, TaxonomyOptions, save_corpus

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, X = make_multi_aspect_corpus(n=n, seed=seed, **corpus_kw)
    save_corpus(out / "corpus.jsonl", records)
    store_write(out / "store", [r.id for r in records], X, model_name="synthetic", overwrite=True)
    cfg = PipelineConfig(
        corpus_path="corpus.jsonl",
        store_path="store",
        output_dir="run",
        instruction=Instruction("Which topic does the text discuss?", "a"),
        seed=seed,
        embedder=EmbedderConfig(backend="mock_hash", model_name="synthetic", dim=X.shape[1]),
        llm=LlmProviderConfig(provider_kind="mock_oracle", oracle_aspect="a", backoff_base=0.0),
        taxonomy=TaxonomyOptions(sample_size=600),
        train=TrainSection(learning_rate=1e-2, margin=5.0),
        eval=EvalConfig(task="clustering", aspects=["a", "b"]),
    )
    cfg.save(out / "config.toml")
    return out / "config.toml"
