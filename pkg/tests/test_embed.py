import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gstransform.embed import (
    EmbedderConfig, StoreWriter, VectorStore, embed_texts, mock_hash_vector, store_read, store_write,
)
from gstransform.errors import (
    ConfigError, ContractError, DuplicateId, MissingEmbedding, ProviderError, StoreCorrupt,
)


def test_round_trip_example(tmp_path, rng):
    V = rng.standard_normal((3, 4)).astype(np.float32)
    store_write(tmp_path / "s", ["a", "b", "c"], V)
    np.testing.assert_array_equal(store_read(tmp_path / "s"), V)
    np.testing.assert_array_equal(store_read(tmp_path / "s", ["c", "a"]), V[[2, 0]])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 9)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_round_trip_is_bitwise(tmp_path_factory, V):
    path = tmp_path_factory.mktemp("rt") / "s"
    ids = [f"id{i}" for i in range(len(V))]
    store_write(path, ids, V)
    assert store_read(path).tobytes() == V.tobytes()


def test_layout_on_disk(tmp_path):
    V = np.arange(6, dtype=np.float32).reshape(2, 3)
    store_write(tmp_path / "s", ["x", "y"], V, model_name="m")
    meta = json.loads((tmp_path / "s" / "meta.json").read_text())
    assert (meta["magic"], meta["dim"], meta["count"], meta["dtype"], meta["model_name"]) == ("GSTV1", 3, 2, "f32le", "m")
    assert (tmp_path / "s" / "ids.jsonl").read_text() == '"x"\n"y"\n'
    assert (tmp_path / "s" / "vectors.bin").read_bytes() == V.astype("<f4").tobytes()


def test_missing_id_lists_it(tmp_path):
    store_write(tmp_path / "s", ["a"], np.ones((1, 2)))
    with pytest.raises(MissingEmbedding) as info:
        store_read(tmp_path / "s", ["a", "zzz"])
    assert info.value.ids == ["zzz"]


def test_duplicate_id_on_write(tmp_path):
    with pytest.raises(DuplicateId):
        store_write(tmp_path / "s", ["a", "a"], np.ones((2, 2)))


def test_write_refuses_to_clobber(tmp_path):
    store_write(tmp_path / "s", ["a"], np.ones((1, 2)))
    with pytest.raises(ContractError):
        store_write(tmp_path / "s", ["b"], np.ones((1, 2)))
    store_write(tmp_path / "s", ["b"], np.zeros((1, 2)), overwrite=True)
    assert VectorStore(tmp_path / "s").ids == ["b"]


def test_non_finite_vectors_rejected(tmp_path):
    with pytest.raises(ContractError):
        store_write(tmp_path / "s", ["a"], [[np.inf, 0.0]])


class CountingFile:
    def __init__(self, fh, counter):
        self._fh, self._counter = fh, counter

    def read(self, n=-1):
        data = self._fh.read(n)
        self._counter[0] += len(data)
        return data

    def __getattr__(self, name):
        return getattr(self._fh, name)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._fh.close()


def test_read_touches_only_requested_rows(tmp_path, rng):
    n, dim = 5000, 16
    store_write(tmp_path / "s", [str(i) for i in range(n)], rng.standard_normal((n, dim)))
    counter = [0]
    store = VectorStore(tmp_path / "s", opener=lambda p, mode: CountingFile(open(p, mode), counter))
    wanted = ["17", "4000", "18", "2500", "999"]
    out = store.read(wanted)
    assert counter[0] <= len(wanted) * dim * 4
    np.testing.assert_array_equal(out, store_read(tmp_path / "s")[[17, 4000, 18, 2500, 999]])


def test_every_header_byte_corruption_fails_loudly(tmp_path):
    store_write(tmp_path / "s", ["a", "b"], np.ones((2, 3)), model_name="mdl")
    meta = tmp_path / "s" / "meta.json"
    original = meta.read_bytes()
    for i in range(len(original)):
        for delta in (1, 0x20):
            corrupt = bytearray(original)
            corrupt[i] = (corrupt[i] + delta) % 256
            meta.write_bytes(bytes(corrupt))
            with pytest.raises(StoreCorrupt):
                VectorStore(tmp_path / "s").read()
    meta.write_bytes(original)
    assert VectorStore(tmp_path / "s").count == 2


def test_truncated_payload(tmp_path):
    store_write(tmp_path / "s", ["a", "b"], np.ones((2, 3)))
    vb = tmp_path / "s" / "vectors.bin"
    vb.write_bytes(vb.read_bytes()[:-1])
    with pytest.raises(StoreCorrupt):
        store_read(tmp_path / "s")


def test_ids_and_count_disagree(tmp_path):
    store_write(tmp_path / "s", ["a", "b"], np.ones((2, 3)))
    (tmp_path / "s" / "ids.jsonl").write_text('"a"\n')
    with pytest.raises(StoreCorrupt):
        VectorStore(tmp_path / "s")


def test_not_a_store(tmp_path):
    with pytest.raises(StoreCorrupt):
        VectorStore(tmp_path)


def test_append_and_iter_batches(tmp_path, rng):
    A, B = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    store = store_write(tmp_path / "s", ["a0", "a1", "a2"], A)
    store.append(["b0", "b1", "b2", "b3"], B)
    reopened = VectorStore(tmp_path / "s")
    assert reopened.count == 7 and "b3" in reopened
    np.testing.assert_array_equal(reopened.read(), np.concatenate([A, B]).astype(np.float32))
    batches = list(reopened.iter_batches(3))
    assert [len(ids) for ids, _ in batches] == [3, 3, 1]
    np.testing.assert_array_equal(np.concatenate([v for _, v in batches]), reopened.read())
    with pytest.raises(DuplicateId):
        reopened.append(["a1"], A[:1])
    with pytest.raises(ContractError):
        reopened.append(["c"], np.ones((1, 5)))


def test_streaming_writer(tmp_path, rng):
    V = rng.standard_normal((10, 3))
    with StoreWriter(tmp_path / "s", 3, model_name="w") as w:
        w.write([str(i) for i in range(6)], V[:6])
        w.write([str(i) for i in range(6, 10)], V[6:])
    np.testing.assert_array_equal(store_read(tmp_path / "s"), V.astype(np.float32))
    with pytest.raises(DuplicateId):
        with StoreWriter(tmp_path / "t", 3) as w:
            w.write(["a", "a"], V[:2])
    with pytest.raises(StoreCorrupt):
        VectorStore(tmp_path / "t")


def test_mock_hash_determinism():
    cfg = EmbedderConfig(dim=16, seed=3)
    V = embed_texts(cfg, [("1", "same text"), ("2", "same text"), ("3", "other")])
    np.testing.assert_array_equal(V[0], V[1])
    assert not np.array_equal(V[0], V[2])
    np.testing.assert_array_equal(V[0], mock_hash_vector("same text", 16, 3))
    assert not np.array_equal(mock_hash_vector("same text", 16, 3), mock_hash_vector("same text", 16, 4))


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=30), st.text(max_size=30))
def test_mock_hash_separates_distinct_texts(a, b):
    if a != b:
        assert not np.array_equal(mock_hash_vector(a, 8), mock_hash_vector(b, 8))


def test_store_only_backend(tmp_path):
    store = store_write(tmp_path / "s", ["a"], np.ones((1, 2)))
    cfg = EmbedderConfig(backend="store_only")
    np.testing.assert_array_equal(embed_texts(cfg, [("a", "ignored")], store=store), [[1, 1]])
    with pytest.raises(MissingEmbedding):
        embed_texts(cfg, [("zzz", "text")], store=store)


def test_embed_preconditions():
    with pytest.raises(ContractError):
        embed_texts(EmbedderConfig(), [])
    with pytest.raises(DuplicateId):
        embed_texts(EmbedderConfig(), [("a", "x"), ("a", "y")])
    with pytest.raises(ConfigError):
        EmbedderConfig(backend="local")
    with pytest.raises(ConfigError):
        EmbedderConfig(batch_size=0)


def _remote(handler, **kw):
    return EmbedderConfig(backend="remote_api", endpoint_url="https://emb.test/v1/embeddings", **kw), \
        httpx.MockTransport(handler)


def test_remote_embedder_order_and_batches(monkeypatch):
    monkeypatch.setenv("GST_EMBED_API_KEY", "k")
    sizes = []

    def handler(request):
        texts = json.loads(request.content)["input"]
        sizes.append(len(texts))
        data = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in enumerate(texts)]
        return httpx.Response(200, json={"data": data[::-1]})

    cfg, transport = _remote(handler, batch_size=2)
    V = embed_texts(cfg, [("a", "x"), ("b", "yy"), ("c", "zzz")], transport=transport)
    np.testing.assert_array_equal(V[:, 0], [1, 2, 3])
    assert sizes == [2, 1]


def test_remote_embedder_failures(monkeypatch):
    monkeypatch.setenv("GST_EMBED_API_KEY", "k")

    def handler(request):
        texts = json.loads(request.content)["input"]
        if "bad" in texts:
            return httpx.Response(500)
        return httpx.Response(200, json={"data": [{"embedding": [1.0, 2.0]} for _ in texts]})

    cfg, transport = _remote(handler, batch_size=1, max_retries=0)
    items = [("a", "ok"), ("b", "bad"), ("c", "ok")]
    ids, V, failed = embed_texts(cfg, items, transport=transport, on_error="collect")
    assert ids == ["a", "c"] and failed == ["b"] and V.shape == (2, 2)
    with pytest.raises(ProviderError):
        embed_texts(cfg, items, transport=transport)


def test_remote_dim_drift_is_fatal(monkeypatch):
    monkeypatch.setenv("GST_EMBED_API_KEY", "k")

    def handler(request):
        texts = json.loads(request.content)["input"]
        return httpx.Response(200, json={"data": [{"embedding": [0.5] * (1 + len(texts[0]))} for _ in texts]})

    cfg, transport = _remote(handler, batch_size=1)
    with pytest.raises(ContractError):
        embed_texts(cfg, [("a", "x"), ("b", "yy")], transport=transport)


def test_remote_embedder_needs_key(monkeypatch):
    monkeypatch.delenv("GST_EMBED_API_KEY", raising=False)
    with pytest.raises(ConfigError):
        embed_texts(EmbedderConfig(backend="remote_api"), [("a", "x")])
