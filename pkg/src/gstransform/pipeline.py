"""Stage commands and the resumable end-to-end run.

Artifacts inside ``output_dir``::

    taxonomy.json  annotations.jsonl  model.json  transformed/  report.json
    manifest.json  (config, per-stage fingerprints, artifact hashes, ledgers)
    timings.json   (wall-clock per stage; kept apart so the manifest is reproducible)
"""
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .embed import StoreWriter, VectorStore, embed_texts, store_write
from .errors import ContractError, GSTError, ProviderError
from .evaluation import evaluate
from .fda import fda_model
from .llm import LlmCallLedger, LlmGateway, make_provider
from .taxonomy import annotate_samples, build_taxonomy, load_annotations, load_corpus, save_annotations
from .transform import hash_file, model_load, model_save, train_arrays, transform_batch
from .vectorlab import cosine_distance

log = logging.getLogger(__name__)

STAGES = ("embed", "build_taxonomy", "train", "transform", "evaluate")
TRANSFORM_BATCH = 4096
MANIFEST_VERSION = 1


def _sha(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _hash_path(path):
    path = Path(path)
    if path.is_dir():
        return VectorStore(path).content_hash()
    return hash_file(path)


class Pipeline:
    """Runs stages against one :class:`~gstransform.config.PipelineConfig`.

    ``ledger`` is shared by every LLM call made through this object, so a
    caller can snapshot it around any command.
    """

    def __init__(self, cfg, ledger=None, llm_transport=None, embed_transport=None, echo=print):
        self.cfg = cfg
        self.ledger = ledger if ledger is not None else LlmCallLedger()
        self.out = Path(cfg.output_dir)
        self._llm_transport = llm_transport
        self._embed_transport = embed_transport
        self._echo = echo
        self._corpus = None
        self._gateway = None

    # paths
    taxonomy_path = property(lambda self: self.out / "taxonomy.json")
    annotations_path = property(lambda self: self.out / "annotations.jsonl")
    model_path = property(lambda self: self.out / "model.json")
    transformed_path = property(lambda self: self.out / "transformed")
    manifest_path = property(lambda self: self.out / "manifest.json")
    timings_path = property(lambda self: self.out / "timings.json")

    def report_path(self, which="transformed"):
        return self.out / ("report.json" if which == "transformed" else f"report_{which}.json")

    @property
    def corpus(self):
        if self._corpus is None:
            self._corpus = load_corpus(self.cfg.corpus_path)
        return self._corpus

    @property
    def gateway(self):
        if self._gateway is None:
            llm = self.cfg.llm
            oracle = None
            if llm.provider_kind == "mock_oracle":
                aspect = llm.oracle_aspect or self.cfg.instruction.aspect_name
                oracle = {r.id: r.labels[aspect] for r in self.corpus if aspect in r.labels}
                if not oracle:
                    raise ContractError(f"mock_oracle: no corpus record has a label for aspect {aspect!r}")
            self._gateway = LlmGateway(make_provider(llm, oracle, self._llm_transport), llm, self.ledger)
        return self._gateway

    def _say(self, msg):
        if self._echo is not None:
            self._echo(msg)

    def store(self):
        return VectorStore(self.cfg.store_path)

    # -- commands ----------------------------------------------------------

    def embed(self):
        """Embed corpus records missing from the store. Returns ``{cached, embedded}``."""
        ecfg = self.cfg.embedder
        path = Path(self.cfg.store_path)
        store = VectorStore(path) if path.exists() and any(path.iterdir()) else None
        if store is not None and store.model_name != ecfg.model_name:
            raise ContractError(f"store at {path} holds {store.model_name!r} embeddings, "
                                f"config asks for {ecfg.model_name!r}")
        todo = [(r.id, r.text) for r in self.corpus if store is None or r.id not in store]
        counts = {"cached": len(self.corpus) - len(todo), "embedded": 0}
        if todo:
            if ecfg.backend == "store_only":
                raise ContractError(f"{len(todo)} corpus ids are missing from the store and the "
                                    f"store_only backend cannot embed them")
            ids, V, failed = embed_texts(ecfg, todo, transport=self._embed_transport, on_error="collect")
            if len(ids):
                if store is None:
                    store_write(path, ids, V, model_name=ecfg.model_name)
                else:
                    store.append(ids, V)
            counts["embedded"] = len(ids)
            if failed:
                self._say(json.dumps(counts, sort_keys=True))
                raise ProviderError(f"{len(failed)} texts failed to embed: {', '.join(failed[:10])}")
        self._say(json.dumps(counts, sort_keys=True))
        return counts

    def build_taxonomy(self):
        """Build the taxonomy and annotate the sample. Returns the ledger delta."""
        before = self.ledger.as_dict()
        store = self.store()
        tax, sampled = build_taxonomy(self.cfg.instruction, self.corpus, store, self.gateway,
                                      self.cfg.embedder, self.cfg.taxonomy)
        samples, report = annotate_samples(tax, sampled, store, self.gateway)
        self.out.mkdir(parents=True, exist_ok=True)
        tax.save(self.taxonomy_path)
        save_annotations(self.annotations_path, samples, tax)
        delta = self.ledger.snapshot_delta(before)
        self._say(f"taxonomy: {len(tax.categories)} categories ({tax.provenance}); "
                  f"{len(samples)} annotated, {report.dropped} dropped")
        self._say("llm calls: " + json.dumps(delta, sort_keys=True))
        return delta

    def train(self):
        """Fit the transform on annotations + stored embeddings. Returns model metadata."""
        for p in (self.taxonomy_path, self.annotations_path):
            if not p.exists():
                raise ContractError(f"{p} not found; run build-taxonomy first")
        rows = load_annotations(self.annotations_path)
        y = np.asarray([r["label_index"] for r in rows], dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise ContractError(f"annotations hold {len(np.unique(y))} distinct label(s); training needs at least 2")
        X = self.store().read([r["text_id"] for r in rows]).astype(np.float64)
        tax_hash = hash_file(self.taxonomy_path)
        tcfg = self.cfg.train
        if tcfg.method == "fda":
            model = fda_model(X, y, tcfg.d_out, tcfg.eigen_solver, taxonomy_hash=tax_hash)
            self._say(f"fda: {model.d_in} -> {model.d_out} dims")
        else:
            model, history = train_arrays(X, y, tcfg.train_config(), taxonomy_hash=tax_hash)
            m = model.metadata
            self._say(f"train: {m['epochs_run']} epochs, best epoch {m['best_epoch']}; "
                      f"val loss {m['initial_val_loss']:.6g} -> {m['final_val_loss']:.6g}")
            step = max(1, len(history) // 10)
            for h in history[::step]:
                self._say(f"  epoch {h['epoch']:4d}  val {h['val_loss']:.6g}")
        self.out.mkdir(parents=True, exist_ok=True)
        model_save(model, self.model_path)
        return model.metadata

    def transform(self, report_distances=None):
        """Stream the generic store through the encoder into ``transformed/``. No LLM calls."""
        if not self.model_path.exists():
            raise ContractError(f"{self.model_path} not found; run train first")
        model = model_load(self.model_path)
        src = self.store()
        name = f"{model.metadata.get('method', 'gst')}:{hash_file(self.model_path)[:16]}"
        with StoreWriter(self.transformed_path, model.d_out, model_name=name) as w:
            for ids, V in src.iter_batches(TRANSFORM_BATCH):
                w.write(ids, transform_batch(model, V))
        self._say(f"transformed {w.count} vectors: {model.d_in} -> {model.d_out} dims")
        if report_distances:
            return self.report_distances(report_distances)
        return None

    def report_distances(self, ids):
        """Pairwise cosine distances among ``ids`` before and after the transform."""
        ids = [str(i) for i in ids]
        out = {}
        for which, store in (("generic", self.store()), ("transformed", VectorStore(self.transformed_path))):
            V = store.read(ids).astype(np.float64)
            out[which] = {f"{ids[i]}~{ids[j]}": cosine_distance(V[i], V[j])
                          for i in range(len(ids)) for j in range(i + 1, len(ids))}
        for pair in out["generic"]:
            self._say(f"{pair}: {out['generic'][pair]:.4f} -> {out['transformed'][pair]:.4f}")
        return out

    def evaluate(self, which="transformed"):
        """Score the transformed (or generic) store on the configured task; writes the report."""
        path = self.transformed_path if which == "transformed" else Path(self.cfg.store_path)
        store = VectorStore(path)
        ecfg = self.cfg.eval
        by_id = {r.id: r.labels for r in self.corpus}
        available = sorted({a for r in self.corpus for a in r.labels})
        aspects = list(ecfg.aspects) or available
        unknown = [a for a in aspects if a not in available]
        if unknown:
            raise ContractError(f"unknown aspect(s) {unknown}; available: {available}")
        ids = [i for i in store.ids if i in by_id and all(a in by_id[i] for a in aspects)]
        if not ids:
            raise ContractError("no stored vector has gold labels for the requested aspects")
        gold = {a: [by_id[i][a] for i in ids] for a in aspects}
        report = evaluate(ecfg.task, ids, store.read(ids), gold, aspects, self.cfg.seed, ecfg.n_samples)
        self.out.mkdir(parents=True, exist_ok=True)
        report.save(self.report_path(which))
        self._say(report.to_json().rstrip())
        return report

    # -- resumable run -----------------------------------------------------

    def _stage_outputs(self, stage):
        return {
            "embed": [],
            "build_taxonomy": [self.taxonomy_path, self.annotations_path],
            "train": [self.model_path],
            "transform": [self.transformed_path],
            "evaluate": [self.report_path()],
        }[stage]

    def _stage_inputs(self, stage, hashes):
        c = self.cfg.to_dict()
        llm = {k: v for k, v in c["llm"].items() if k not in ("max_in_flight", "request_timeout", "backoff_base")}
        spec = {
            "embed": {"embedder": c["embedder"], "corpus": hashes["corpus"]},
            "build_taxonomy": {"instruction": c["instruction"], "llm": llm, "taxonomy": c["taxonomy"],
                               "embedder": c["embedder"], "corpus": hashes["corpus"], "store": hashes["store"]},
            "train": {"train": c["train"], "taxonomy": hashes.get("taxonomy.json"),
                      "annotations": hashes.get("annotations.jsonl"), "store": hashes["store"]},
            "transform": {"model": hashes.get("model.json"), "store": hashes["store"]},
            "evaluate": {"eval": c["eval"], "seed": c["seed"], "corpus": hashes["corpus"],
                         "transformed": hashes.get("transformed")},
        }[stage]
        return _sha(spec)

    def _manifest_config(self):
        c = self.cfg.to_dict()
        for k in ("corpus_path", "store_path", "output_dir"):
            c.pop(k)
        c["llm"].pop("fixture_path", None)
        return c

    def _load_manifest(self):
        try:
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except (FileNotFoundError, ValueError):
            return {}

    def run(self):
        """Run every stage, skipping those whose inputs and outputs are unchanged.

        A stage reruns when its fingerprint changed, an output is missing
        or altered, or an earlier stage reran. Returns the manifest dict.
        """
        self.out.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(self.out / ".gst.lock"))
        try:
            lock.acquire(timeout=0)
        except Timeout:
            raise GSTError(f"{self.out} is in use by another pipeline") from None
        try:
            return self._run()
        finally:
            lock.release()

    def _run(self):
        old = self._load_manifest().get("stages", {})
        hashes = {"corpus": hash_file(self.cfg.corpus_path)}
        stages, timings, upstream_ran = {}, {}, False
        for stage in STAGES:
            t0 = time.perf_counter()
            if stage == "embed":
                before_store = _hash_path(self.cfg.store_path) if Path(self.cfg.store_path).exists() else None
                self.embed()
                hashes["store"] = _hash_path(self.cfg.store_path)
                ran = hashes["store"] != before_store
                stages[stage] = {"fingerprint": self._stage_inputs(stage, hashes),
                                 "outputs": {"store": hashes["store"]}, "ledger": {}}
                upstream_ran = ran
                timings[stage] = {"seconds": time.perf_counter() - t0, "ran": ran}
                continue
            fp = self._stage_inputs(stage, hashes)
            prev = old.get(stage, {})
            outputs = self._stage_outputs(stage)
            current = {p.name: _hash_path(p) for p in outputs if p.exists()}
            fresh = (not upstream_ran and prev.get("fingerprint") == fp
                     and len(current) == len(outputs) and prev.get("outputs") == current)
            if fresh:
                self._say(f"[{stage}] up to date")
                ledger = prev.get("ledger", {})
            else:
                self._say(f"[{stage}]")
                before = self.ledger.as_dict()
                getattr(self, stage)()
                ledger = {k: v for k, v in self.ledger.snapshot_delta(before).items() if v}
                current = {p.name: _hash_path(p) for p in outputs}
                upstream_ran = True
            hashes.update(current)
            stages[stage] = {"fingerprint": fp, "outputs": current, "ledger": ledger}
            timings[stage] = {"seconds": time.perf_counter() - t0, "ran": not fresh}

        totals = {}
        for s in stages.values():
            for k, v in s["ledger"].items():
                totals[k] = totals.get(k, 0) + v
        manifest = {
            "format_version": MANIFEST_VERSION,
            "config": self._manifest_config(),
            "corpus": hashes["corpus"],
            "stages": stages,
            "ledger_totals": dict(sorted(totals.items())),
        }
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.timings_path.write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest
