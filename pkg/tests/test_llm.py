import json
import threading
import time

import httpx
import pytest

from gstransform.errors import ConfigError, FixtureMissing, ParseFailure, ProviderError
from gstransform.llm import (
    FixtureProvider, LlmCallLedger, LlmGateway, LlmProviderConfig, LlmRequest, OracleProvider, RemoteChatProvider,
    make_provider,
)
from gstransform.prompts import parse_summary

INSTR = "What is the topic?"


def gateway(table, **cfg):
    cfg.setdefault("backoff_base", 0.0)
    return LlmGateway(FixtureProvider(table), LlmProviderConfig(provider_kind="mock_fixture", **cfg))


def test_summarize_through_fixture():
    gw = gateway({("summarize", "t1"): "Summary: UK school funding policy"})
    assert gw.summarize(INSTR, "some text", key="t1") == "UK school funding policy"
    assert gw.ledger["summarize"] == 1 and gw.ledger["retry"] == 0


def test_parse_failure_after_retries():
    gw = gateway({("summarize", "t1"): "I cannot summarize"}, max_retries=2)
    with pytest.raises(ParseFailure) as info:
        gw.summarize(INSTR, "text", key="t1")
    assert info.value.raw == "I cannot summarize"
    assert gw.ledger["summarize"] == 3
    assert gw.ledger["retry"] == 2


def test_label_and_classify_failures():
    gw = gateway({("generate_label", "0"): "Sports", ("classify", "x"): "Classif"}, max_retries=0)
    with pytest.raises(ParseFailure):
        gw.generate_label(INSTR, ["a"], ["b"])
    with pytest.raises(ParseFailure):
        gw.classify(INSTR, ["A", "B"], "text", key="x")


def test_fail_twice_then_succeed_counts_two_retries():
    gw = gateway({("summarize", "t"): ["garbled", "garbled", "Summary: fine"]}, max_retries=2)
    assert gw.summarize(INSTR, "text", key="t") == "fine"
    assert gw.ledger["retry"] == 2
    assert gw.ledger["summarize"] == 3


class SlowProvider:
    def __init__(self):
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()

    def complete(self, request):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.02 * (10 - int(request.key)) / 10)
        with self.lock:
            self.active -= 1
        return f"Summary: reply {request.key}"


def test_bounded_concurrency_and_order():
    prov = SlowProvider()
    gw = LlmGateway(prov, LlmProviderConfig(provider_kind="mock_fixture", max_in_flight=3, backoff_base=0))
    reqs = [gw.summarize_request(INSTR, "t", str(i)) for i in range(10)]
    results = gw.batch_execute(reqs)
    assert [r.value for r in results] == [f"reply {i}" for i in range(10)]
    assert prov.peak <= 3 and gw.peak_in_flight <= 3
    assert prov.peak >= 2
    assert gw.ledger["summarize"] == 10


def test_batch_is_deterministic():
    table = {("classify", str(i)): f"Classification: {'AB'[i % 2]}" for i in range(20)}
    runs = []
    for _ in range(2):
        gw = gateway(table, max_in_flight=4)
        res = gw.batch_execute(gw.classify_request(INSTR, ["A", "B"], "t", i) for i in range(20))
        runs.append([r.value for r in res])
    assert runs[0] == runs[1] == ["A", "B"] * 10


def test_one_failure_does_not_abort_batch():
    gw = gateway({("summarize", "0"): "Summary: ok", ("summarize", "1"): "nope"}, max_retries=1)
    res = gw.batch_execute([gw.summarize_request(INSTR, "t", 0), gw.summarize_request(INSTR, "t", 1)])
    assert res[0].ok and res[0].value == "ok"
    assert not res[1].ok and isinstance(res[1].error, ParseFailure) and res[1].attempts == 2


def test_missing_fixture_is_a_hard_error():
    gw = gateway({})
    with pytest.raises(FixtureMissing):
        gw.batch_execute([gw.summarize_request(INSTR, "t", "absent")])
    assert gw.ledger["retry"] == 0


def test_exponential_backoff_with_jitter():
    delays = []
    gw = LlmGateway(FixtureProvider({("summarize", "k"): "bad"}),
                    LlmProviderConfig(provider_kind="mock_fixture", max_retries=3, backoff_base=1.0),
                    sleep=delays.append)
    gw.batch_execute([gw.summarize_request(INSTR, "t", "k")])
    assert len(delays) == 3
    for attempt, d in enumerate(delays, 1):
        base = 2 ** (attempt - 1)
        assert base <= d <= 1.5 * base


def test_ledger_delta_and_total():
    led = LlmCallLedger()
    before = led.as_dict()
    led.record("summarize")
    led.record("summarize", retry=True)
    led.record("classify")
    delta = led.snapshot_delta(before)
    assert delta["summarize"] == 2 and delta["retry"] == 1 and delta["classify"] == 1
    assert led.total() == 3


def test_fixture_from_jsonl(tmp_path):
    p = tmp_path / "fx.jsonl"
    p.write_text(json.dumps({"kind": "summarize", "key": 7, "response": "Summary: seven"}) + "\n\n")
    gw = LlmGateway(FixtureProvider.from_jsonl(p), LlmProviderConfig(provider_kind="mock_fixture"))
    assert gw.summarize(INSTR, "t", key=7) == "seven"
    p.write_text('{"kind": "summarize"}\n')
    with pytest.raises(ConfigError):
        FixtureProvider.from_jsonl(p)


def test_oracle_provider():
    prov = OracleProvider({"a": "sports", "b": "sports", "c": "music"})
    gw = LlmGateway(prov, LlmProviderConfig(provider_kind="mock_oracle"))
    assert gw.summarize(INSTR, "x", key="c") == "music"
    assert gw.generate_label(INSTR, ["x", "y", "z"], [], context={"positive_ids": ["a", "c", "b"]}) == "sports"
    assert gw.classify(INSTR, ["Music", "Sports"], "x", key="a") == "Sports"
    assert gw.classify(INSTR, ["politics", "food"], "x", key="a") == "politics"
    with pytest.raises(FixtureMissing):
        gw.summarize(INSTR, "x", key="zzz")


@pytest.mark.parametrize("kw", [
    {"provider_kind": "local"}, {"max_in_flight": 0}, {"max_retries": -1}, {"temperature": -0.1},
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        LlmProviderConfig(**kw)


def test_request_preconditions():
    gw = gateway({})
    with pytest.raises(ValueError):
        gw.summarize_request("", "text", 0)
    with pytest.raises(ValueError):
        gw.label_request(INSTR, [], ["n"], 0)
    with pytest.raises(ValueError):
        gw.classify_request(INSTR, ["only"], "text", 0)


def test_remote_provider_wire_format(monkeypatch):
    monkeypatch.setenv("GST_LLM_API_KEY", "sk-test")
    seen = []

    def handler(request):
        seen.append(request)
        body = json.loads(request.content)
        assert body["model"] == "gpt-4o-mini" and body["temperature"] == 0.0
        assert body["messages"][0]["role"] == "user"
        return httpx.Response(200, json={"choices": [{"message": {"content": "Summary: remote ok"}}]})

    cfg = LlmProviderConfig(endpoint_url="https://llm.test/v1/chat/completions", backoff_base=0)
    gw = LlmGateway(make_provider(cfg, transport=httpx.MockTransport(handler)), cfg)
    assert gw.summarize(INSTR, "text") == "remote ok"
    assert seen[0].headers["authorization"] == "Bearer sk-test"


def test_remote_provider_retries_server_errors(monkeypatch):
    monkeypatch.setenv("GST_LLM_API_KEY", "sk-test")
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"choices": [{"message": {"content": "Summary: third"}}]})

    cfg = LlmProviderConfig(backoff_base=0, max_retries=2)
    gw = LlmGateway(RemoteChatProvider(cfg, transport=httpx.MockTransport(handler)), cfg)
    assert gw.summarize(INSTR, "t") == "third"
    assert gw.ledger["retry"] == 2


def test_remote_provider_exhausts_retries(monkeypatch):
    monkeypatch.setenv("GST_LLM_API_KEY", "sk-test")
    cfg = LlmProviderConfig(backoff_base=0, max_retries=1)
    gw = LlmGateway(RemoteChatProvider(cfg, transport=httpx.MockTransport(lambda r: httpx.Response(500))), cfg)
    with pytest.raises(ProviderError):
        gw.summarize(INSTR, "t")


def test_remote_provider_needs_key(monkeypatch):
    monkeypatch.delenv("GST_LLM_API_KEY", raising=False)
    with pytest.raises(ConfigError):
        RemoteChatProvider(LlmProviderConfig())


def test_custom_request_parser():
    gw = gateway({("summarize", "q"): "Summary: custom"})
    req = LlmRequest("summarize", "q", "prompt", parse_summary)
    assert gw.execute(req) == "custom"
