"""Chat-completion gateway with retries, bounded concurrency and call accounting.

Three provider kinds are available:

* ``remote_openai_compatible``: POSTs to an OpenAI-style ``/chat/completions``
  endpoint with bearer auth.
* ``mock_fixture``: canned replies from a JSONL file of
  ``{"kind", "key", "response"}`` rows. A missing key is a hard error.
* ``mock_oracle``: answers from gold labels of one corpus aspect. Used to
  drive the pipeline end to end on synthetic corpora.
"""
import json
import logging
import os
import random
import threading
import time
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import httpx

from . import prompts
from .errors import ConfigError, FixtureMissing, ParseFailure, ProviderError

log = logging.getLogger(__name__)

CALL_KINDS = ("summarize", "generate_label", "classify", "directed_labels")
PROVIDER_KINDS = ("remote_openai_compatible", "mock_fixture", "mock_oracle")


@dataclass
class LlmProviderConfig:
    provider_kind: str = "remote_openai_compatible"
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4o-mini"
    api_key_env: str = "GST_LLM_API_KEY"
    max_in_flight: int = 8
    max_retries: int = 2
    request_timeout: float = 60.0
    temperature: float = 0.0
    backoff_base: float = 1.0
    fixture_path: Optional[str] = None
    oracle_aspect: Optional[str] = None

    def __post_init__(self):
        if self.provider_kind not in PROVIDER_KINDS:
            raise ConfigError(f"unknown provider_kind {self.provider_kind!r}; expected one of {PROVIDER_KINDS}")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")


class LlmCallLedger:
    """Exact per-kind request counters; one increment per physical request."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = Counter({k: 0 for k in CALL_KINDS + ("retry",)})

    def record(self, kind, retry=False):
        with self._lock:
            self._counts[kind] += 1
            if retry:
                self._counts["retry"] += 1

    def __getitem__(self, kind):
        return self._counts[kind]

    def as_dict(self):
        with self._lock:
            return dict(sorted(self._counts.items()))

    def total(self):
        with self._lock:
            return sum(v for k, v in self._counts.items() if k != "retry")

    def snapshot_delta(self, before):
        now = self.as_dict()
        return {k: now.get(k, 0) - before.get(k, 0) for k in now}


@dataclass
class LlmRequest:
    kind: str
    key: str
    prompt: str
    parser: Callable[[str], Any]
    context: dict = field(default_factory=dict)


@dataclass
class LlmResult:
    value: Any = None
    error: Optional[Exception] = None
    raw: Optional[str] = None
    attempts: int = 0

    @property
    def ok(self):
        return self.error is None


# -- providers ---------------------------------------------------------------


class RemoteChatProvider:
    def __init__(self, cfg, transport=None):
        key = os.environ.get(cfg.api_key_env, "").strip()
        if not key:
            raise ConfigError(f"environment variable {cfg.api_key_env} is not set")
        self.cfg = cfg
        self._client = httpx.Client(
            timeout=cfg.request_timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {key}"},
        )

    def complete(self, request):
        payload = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": self.cfg.temperature,
        }
        try:
            resp = self._client.post(self.cfg.endpoint_url, json=payload)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"chat completion failed: {exc!r}") from exc


class FixtureProvider:
    """Replies looked up by ``(kind, key)``.

    A response may be a list; successive calls walk the list and then keep
    returning its last element.
    """

    def __init__(self, table):
        self._table = {(k, str(key)): v for (k, key), v in table.items()}
        self._calls = Counter()
        self._lock = threading.Lock()

    @classmethod
    def from_jsonl(cls, path):
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    table[(row["kind"], str(row["key"]))] = row["response"]
                except (ValueError, KeyError) as exc:
                    raise ConfigError(f"{path}:{lineno}: bad fixture row ({exc})") from exc
        return cls(table)

    def complete(self, request):
        k = (request.kind, str(request.key))
        if k not in self._table:
            raise FixtureMissing(f"no fixture response for kind={k[0]!r} key={k[1]!r}")
        response = self._table[k]
        if isinstance(response, list):
            with self._lock:
                i = self._calls[k]
                self._calls[k] += 1
            response = response[min(i, len(response) - 1)]
        return response


class OracleProvider:
    """Answers every call from the gold label of one aspect.

    Summaries are the label itself, generated category names are the
    majority label of the positive examples, and classification returns
    the gold label when it is among the offered categories, otherwise the
    first category offered (the model is forced to pick one).
    """

    def __init__(self, labels_by_id):
        self.labels = dict(labels_by_id)

    def _label(self, text_id):
        try:
            return self.labels[str(text_id)]
        except KeyError:
            raise FixtureMissing(f"oracle has no label for text id {text_id!r}") from None

    def complete(self, request):
        ctx = request.context
        if request.kind == "summarize":
            return f"Summary: {self._label(request.key)}"
        if request.kind == "generate_label":
            votes = Counter(self._label(i) for i in ctx["positive_ids"])
            best = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
            return f"Category: {best}"
        if request.kind == "classify":
            gold = self._label(request.key)
            cats = ctx["categories"]
            norm = {normalize_label(c): c for c in cats}
            return f"Classification: {norm.get(normalize_label(gold), cats[0])}"
        if request.kind == "directed_labels":
            names = sorted(set(self.labels.values()))
            return "\n".join(f"{i}. {n}" for i, n in enumerate(names, 1))
        raise FixtureMissing(f"oracle cannot answer kind {request.kind!r}")


def normalize_label(label):
    return " ".join(str(label).casefold().split())


def make_provider(cfg, oracle_labels=None, transport=None):
    if cfg.provider_kind == "remote_openai_compatible":
        return RemoteChatProvider(cfg, transport=transport)
    if cfg.provider_kind == "mock_fixture":
        if not cfg.fixture_path:
            raise ConfigError("mock_fixture provider needs fixture_path")
        return FixtureProvider.from_jsonl(cfg.fixture_path)
    if oracle_labels is None:
        raise ConfigError("mock_oracle provider needs gold labels")
    return OracleProvider(oracle_labels)


# -- gateway -----------------------------------------------------------------


class LlmGateway:
    def __init__(self, provider, cfg=None, ledger=None, sleep=time.sleep):
        self.provider = provider
        self.cfg = cfg or LlmProviderConfig(provider_kind="mock_fixture")
        self.ledger = ledger if ledger is not None else LlmCallLedger()
        self._sleep = sleep
        self._lock = threading.Lock()
        self._in_flight = 0
        self.peak_in_flight = 0

    def _backoff(self, request, attempt):
        if self.cfg.backoff_base <= 0:
            return
        seed = zlib.crc32(f"{request.kind}:{request.key}:{attempt}".encode())
        jitter = random.Random(seed).uniform(0.0, 0.5)
        self._sleep(self.cfg.backoff_base * 2 ** (attempt - 1) * (1.0 + jitter))

    def _run(self, request):
        result = LlmResult()
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._backoff(request, attempt)
            self.ledger.record(request.kind, retry=attempt > 0)
            result.attempts = attempt + 1
            with self._lock:
                self._in_flight += 1
                self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
            try:
                raw = self.provider.complete(request)
            except FixtureMissing:
                raise
            except ProviderError as exc:
                result.error = exc
                continue
            finally:
                with self._lock:
                    self._in_flight -= 1
            result.raw = raw
            try:
                result.value = request.parser(raw)
                result.error = None
                return result
            except ParseFailure as exc:
                result.error = exc
        log.warning("%s[%s] failed after %d attempts: %s", request.kind, request.key, result.attempts, result.error)
        return result

    def batch_execute(self, requests):
        """Run requests with at most ``max_in_flight`` outstanding; results keep input order."""
        requests = list(requests)
        if not requests:
            return []
        if self.cfg.max_in_flight == 1 or len(requests) == 1:
            return [self._run(r) for r in requests]
        with ThreadPoolExecutor(max_workers=self.cfg.max_in_flight) as pool:
            return list(pool.map(self._run, requests))

    def execute(self, request):
        result = self._run(request)
        if result.error is not None:
            raise result.error
        return result.value

    # request builders; ``key`` is the fixture lookup key

    def summarize_request(self, instruction, text, key):
        if not instruction or not text:
            raise ValueError("summarize needs a non-empty instruction and text")
        return LlmRequest("summarize", str(key), prompts.render_summarize(instruction, text), prompts.parse_summary)

    def label_request(self, instruction, positive_texts, negative_texts, key, context=None):
        if not positive_texts:
            raise ValueError("label generation needs at least one positive text")
        prompt = prompts.render_generate_label(instruction, positive_texts, negative_texts)
        return LlmRequest("generate_label", str(key), prompt, prompts.parse_category, dict(context or {}))

    def classify_request(self, instruction, categories, text, key):
        if len(categories) < 2:
            raise ValueError("classification needs at least two categories")
        if not text:
            raise ValueError("cannot classify empty text")
        prompt = prompts.render_classify(instruction, categories, text)
        return LlmRequest("classify", str(key), prompt, prompts.parse_classification, {"categories": list(categories)})

    def directed_request(self, instruction, texts, k, key="directed"):
        prompt = prompts.render_directed_labels(instruction, texts, k)
        return LlmRequest("directed_labels", str(key), prompt, prompts.parse_numbered_list, {"k": k})

    def summarize(self, instruction, text, key="0"):
        return self.execute(self.summarize_request(instruction, text, key))

    def generate_label(self, instruction, positive_texts, negative_texts, key="0", context=None):
        return self.execute(self.label_request(instruction, positive_texts, negative_texts, key, context))

    def classify(self, instruction, categories, text, key="0"):
        return self.execute(self.classify_request(instruction, categories, text, key))
