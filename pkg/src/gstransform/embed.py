"""Generic embeddings: the on-disk vector store and the embedders that fill it.

A store is a directory with three files::

    meta.json    {"magic": "GSTV1", "dim", "count", "dtype": "f32le", "model_name", "crc32"}
    ids.jsonl    one JSON string per line, line order == vector order
    vectors.bin  count * dim little-endian float32, row-major

``meta.json`` is written in canonical compact form with a CRC over its
other fields; any byte change to it makes the store refuse to open.
"""
import hashlib
import json
import logging
import os
import shutil
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import httpx
import numpy as np
from filelock import FileLock

from .errors import ConfigError, ContractError, DuplicateId, MissingEmbedding, ProviderError, StoreCorrupt

log = logging.getLogger(__name__)

MAGIC = "GSTV1"
DTYPE = np.dtype("<f4")
META, IDS, VECTORS, LOCK = "meta.json", "ids.jsonl", "vectors.bin", ".lock"


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _meta_bytes(dim, count, model_name):
    body = {"magic": MAGIC, "dim": int(dim), "count": int(count), "dtype": "f32le", "model_name": model_name}
    body["crc32"] = zlib.crc32(_canonical(body).encode())
    return (_canonical(body) + "\n").encode()


def _check_vectors(vectors, dim=None):
    V = np.asarray(vectors)
    if V.ndim != 2:
        raise ContractError("vectors must be a 2-d array")
    if dim is not None and V.shape[1] != dim:
        raise ContractError(f"vector dim {V.shape[1]} does not match store dim {dim}")
    if V.shape[1] < 1:
        raise ContractError("vector dim must be >= 1")
    V = V.astype(DTYPE, copy=False)
    if not np.all(np.isfinite(V)):
        raise ContractError("vectors contain non-finite values")
    return np.ascontiguousarray(V)


def _check_ids(ids):
    ids = [str(i) for i in ids]
    seen = set()
    dups = sorted({i for i in ids if i in seen or seen.add(i)})
    if dups:
        raise DuplicateId(f"duplicate ids: {', '.join(dups[:10])}")
    return ids


class VectorStore:
    """Read access to a sealed store directory, plus locked append."""

    def __init__(self, path, opener=open):
        self.path = Path(path)
        self._open = opener
        self._load_header()

    def _load_header(self):
        meta_path = self.path / META
        if not meta_path.exists():
            raise StoreCorrupt(f"{self.path} is not a vector store (no {META})")
        raw = meta_path.read_bytes()
        try:
            meta = json.loads(raw.decode("ascii"))
            body = {k: meta[k] for k in ("magic", "dim", "count", "dtype", "model_name")}
            crc = meta["crc32"]
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise StoreCorrupt(f"{meta_path}: unreadable header ({exc})") from exc
        if body["magic"] != MAGIC or body["dtype"] != "f32le":
            raise StoreCorrupt(f"{meta_path}: bad magic or dtype")
        if not isinstance(body["dim"], int) or not isinstance(body["count"], int) or body["dim"] < 1 or body["count"] < 0:
            raise StoreCorrupt(f"{meta_path}: bad dim/count")
        if crc != zlib.crc32(_canonical(body).encode()) or raw != _meta_bytes(body["dim"], body["count"], body["model_name"]):
            raise StoreCorrupt(f"{meta_path}: header checksum mismatch")
        self.dim, self.count, self.model_name = body["dim"], body["count"], body["model_name"]

        with open(self.path / IDS, encoding="utf-8") as fh:
            try:
                self.ids = [json.loads(line) for line in fh if line.strip()]
            except ValueError as exc:
                raise StoreCorrupt(f"{self.path / IDS}: {exc}") from exc
        if len(self.ids) != self.count:
            raise StoreCorrupt(f"{self.path}: header count {self.count} but {len(self.ids)} ids")
        self._index = {i: n for n, i in enumerate(self.ids)}
        if len(self._index) != self.count:
            raise StoreCorrupt(f"{self.path}: duplicate ids in {IDS}")
        size = (self.path / VECTORS).stat().st_size
        if size != self.count * self.dim * DTYPE.itemsize:
            raise StoreCorrupt(f"{self.path / VECTORS}: {size} bytes, expected {self.count * self.dim * DTYPE.itemsize}")

    def __len__(self):
        return self.count

    def __contains__(self, text_id):
        return str(text_id) in self._index

    def positions(self, ids):
        ids = [str(i) for i in ids]
        missing = [i for i in ids if i not in self._index]
        if missing:
            raise MissingEmbedding(*missing)
        return np.fromiter((self._index[i] for i in ids), dtype=np.int64, count=len(ids))

    def read(self, ids=None):
        """Vectors for ``ids`` in the requested order, or every vector in stored order."""
        row = self.dim * DTYPE.itemsize
        if ids is None:
            with self._open(self.path / VECTORS, "rb") as fh:
                data = fh.read(self.count * row)
            return np.frombuffer(data, dtype=DTYPE).reshape(self.count, self.dim).copy()
        pos = self.positions(ids)
        out = np.empty((len(pos), self.dim), dtype=DTYPE)
        if len(pos) == 0:
            return out
        order = np.argsort(pos, kind="stable")
        with self._open(self.path / VECTORS, "rb") as fh:
            start = 0
            sorted_pos = pos[order]
            # read contiguous runs of rows with one seek each
            while start < len(sorted_pos):
                end = start + 1
                while end < len(sorted_pos) and sorted_pos[end] <= sorted_pos[end - 1] + 1:
                    end += 1
                first, last = sorted_pos[start], sorted_pos[end - 1]
                fh.seek(int(first) * row)
                block = np.frombuffer(fh.read(int(last - first + 1) * row), dtype=DTYPE).reshape(-1, self.dim)
                out[order[start:end]] = block[sorted_pos[start:end] - first]
                start = end
        return out

    def iter_batches(self, batch_size):
        """Yield ``(ids, vectors)`` blocks in stored order, reading O(batch) bytes at a time."""
        row = self.dim * DTYPE.itemsize
        with self._open(self.path / VECTORS, "rb") as fh:
            for s in range(0, self.count, batch_size):
                n = min(batch_size, self.count - s)
                block = np.frombuffer(fh.read(n * row), dtype=DTYPE).reshape(n, self.dim)
                yield self.ids[s:s + n], block

    def append(self, ids, vectors):
        ids = _check_ids(ids)
        V = _check_vectors(vectors, self.dim)
        if len(ids) != len(V):
            raise ContractError("ids and vectors differ in length")
        clash = [i for i in ids if i in self._index]
        if clash:
            raise DuplicateId(f"ids already in store: {', '.join(clash[:10])}")
        with FileLock(str(self.path / LOCK)):
            with open(self.path / VECTORS, "ab") as fh:
                fh.write(V.tobytes())
            with open(self.path / IDS, "a", encoding="utf-8") as fh:
                fh.writelines(json.dumps(i) + "\n" for i in ids)
            _write_atomic(self.path / META, _meta_bytes(self.dim, self.count + len(ids), self.model_name))
        self._load_header()
        return self

    def content_hash(self):
        h = hashlib.sha256()
        for name in (META, IDS, VECTORS):
            h.update((self.path / name).read_bytes())
        return h.hexdigest()


def _write_atomic(path, data):
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def store_write(path, ids, vectors, model_name="", overwrite=False):
    """Create a store at ``path`` holding ``vectors`` under ``ids``."""
    path = Path(path)
    ids = _check_ids(ids)
    V = _check_vectors(vectors) if len(ids) else np.zeros((0, np.asarray(vectors).shape[-1]), DTYPE)
    if len(ids) != len(V):
        raise ContractError(f"{len(ids)} ids but {len(V)} vectors")
    if (path / META).exists():
        if not overwrite:
            raise ContractError(f"store already exists at {path}")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path / LOCK)):
        (path / VECTORS).write_bytes(V.tobytes())
        with open(path / IDS, "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps(i) + "\n" for i in ids)
        _write_atomic(path / META, _meta_bytes(V.shape[1], len(ids), model_name))
    return VectorStore(path)


def store_read(path, ids=None):
    return VectorStore(path).read(ids)


class StoreWriter:
    """Streaming writer for stores too large to hold in memory."""

    def __init__(self, path, dim, model_name="", overwrite=True):
        self.path = Path(path)
        if (self.path / META).exists():
            if not overwrite:
                raise ContractError(f"store already exists at {path}")
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.dim, self.model_name = dim, model_name
        self._lock = FileLock(str(self.path / LOCK))
        self._seen = set()
        self.count = 0

    def __enter__(self):
        self._lock.acquire()
        self._vec = open(self.path / VECTORS, "wb")
        self._ids = open(self.path / IDS, "w", encoding="utf-8")
        return self

    def write(self, ids, vectors):
        V = _check_vectors(vectors, self.dim)
        ids = [str(i) for i in ids]
        for i in ids:
            if i in self._seen:
                raise DuplicateId(f"duplicate id {i!r}")
            self._seen.add(i)
        self._vec.write(V.tobytes())
        self._ids.writelines(json.dumps(i) + "\n" for i in ids)
        self.count += len(ids)

    def __exit__(self, exc_type, exc, tb):
        self._vec.close()
        self._ids.close()
        if exc_type is None:
            _write_atomic(self.path / META, _meta_bytes(self.dim, self.count, self.model_name))
        self._lock.release()
        return False


# -- embedders ---------------------------------------------------------------

BACKENDS = ("remote_api", "store_only", "mock_hash")


@dataclass
class EmbedderConfig:
    backend: str = "mock_hash"
    endpoint_url: str = "https://api.openai.com/v1/embeddings"
    model_name: str = "mock-hash"
    api_key_env: str = "GST_EMBED_API_KEY"
    batch_size: int = 64
    dim: int = 32
    seed: int = 0
    max_retries: int = 2
    request_timeout: float = 60.0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown embedder backend {self.backend!r}; expected one of {BACKENDS}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def mock_hash_vector(text, dim, seed=0):
    """Seeded pseudo-random expansion of the text bytes; equal text gives equal vectors."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, *words]))
    return rng.standard_normal(dim).astype(DTYPE)


class RemoteEmbedder:
    def __init__(self, cfg, transport=None):
        key = os.environ.get(cfg.api_key_env, "").strip()
        if not key:
            raise ConfigError(f"environment variable {cfg.api_key_env} is not set")
        self.cfg = cfg
        self._client = httpx.Client(
            timeout=cfg.request_timeout, transport=transport, headers={"Authorization": f"Bearer {key}"}
        )

    def embed_batch(self, texts):
        last = None
        for _ in range(self.cfg.max_retries + 1):
            try:
                resp = self._client.post(self.cfg.endpoint_url, json={"model": self.cfg.model_name, "input": texts})
                resp.raise_for_status()
                data = resp.json()["data"]
                if len(data) != len(texts):
                    raise ValueError(f"{len(data)} vectors for {len(texts)} inputs")
                if all("index" in d for d in data):
                    data = sorted(data, key=lambda d: d["index"])
                return np.asarray([d["embedding"] for d in data], dtype=np.float64)
            except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
                last = exc
        raise ProviderError(f"embedding request failed: {last!r}")


def embed_texts(cfg, texts, store=None, transport=None, on_error="raise"):
    """Embed ``(id, text)`` pairs in order.

    With ``on_error="collect"`` failed remote batches are skipped and the
    result is ``(ids, vectors, failed_ids)``; otherwise a
    :class:`ProviderError` is raised and the result is the vector array.
    """
    texts = list(texts)
    if not texts:
        raise ContractError("nothing to embed")
    ids = _check_ids(i for i, _ in texts)
    if cfg.backend == "store_only":
        if store is None:
            raise ConfigError("store_only backend needs a store")
        V = store.read(ids)
        return (ids, V, []) if on_error == "collect" else V
    if cfg.backend == "mock_hash":
        V = np.stack([mock_hash_vector(t, cfg.dim, cfg.seed) for _, t in texts])
        return (ids, V, []) if on_error == "collect" else V

    embedder = RemoteEmbedder(cfg, transport=transport)
    ok_ids, blocks, failed = [], [], []
    dim = None
    for s in range(0, len(texts), cfg.batch_size):
        chunk = texts[s:s + cfg.batch_size]
        try:
            V = embedder.embed_batch([t for _, t in chunk])
        except ProviderError as exc:
            log.error("embedding batch at %d failed: %s", s, exc)
            failed.extend(i for i, _ in chunk)
            continue
        if dim is None:
            dim = V.shape[1]
        elif V.shape[1] != dim:
            raise ContractError(f"embedding dim drifted from {dim} to {V.shape[1]}")
        ok_ids.extend(i for i, _ in chunk)
        blocks.append(_check_vectors(V))
    V = np.concatenate(blocks) if blocks else np.zeros((0, dim or 1), DTYPE)
    if on_error == "collect":
        return ok_ids, V, failed
    if failed:
        raise ProviderError(f"{len(failed)} texts failed to embed: {', '.join(failed[:10])}")
    return V
