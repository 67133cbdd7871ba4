"""Provider tests with a fake HTTP session: caching, retry schedule, auth
handling, reply-path traversal, and the scripted mock."""

from __future__ import annotations

import json
import threading

import pytest
import requests

from genjudge.providers import (
    AuthError,
    CompletionClient,
    ExhaustedRetries,
    MalformedResponse,
    ModelEndpoint,
    ResponseCache,
    ScriptMiss,
    cache_key,
    mock_from_script,
)


class FakeResponse:
    def __init__(self, status_code, body=None, text_body=None):
        self.status_code = status_code
        self._body = body
        self._text_body = text_body

    def json(self):
        if self._body is None:
            raise ValueError("not json")
        return self._body


class FakeSession:
    """Plays back a queue of responses/exceptions and records calls."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def ok_response(text="hello"):
    return FakeResponse(200, {"choices": [{"message": {"content": text}}]})


def http_endpoint(**kwargs):
    defaults = dict(model_id="m1", base_url="http://example.test/v1/chat")
    defaults.update(kwargs)
    return ModelEndpoint(**defaults)


def make_client(outcomes, cache_dir=None):
    session = FakeSession(outcomes)
    sleeps = []
    client = CompletionClient(cache_dir=cache_dir, session=session, sleep=sleeps.append)
    return client, session, sleeps


def test_cache_key_sensitivity():
    base = cache_key("m", "prompt", 0.0, 2048)
    assert cache_key("m2", "prompt", 0.0, 2048) != base
    assert cache_key("m", "prompt2", 0.0, 2048) != base
    assert cache_key("m", "prompt", 0.5, 2048) != base
    assert cache_key("m", "prompt", 0.0, 1024) != base
    assert cache_key("m", "prompt", 0.0, 2048) == base


def test_response_cache_first_write_wins(tmp_path):
    cache = ResponseCache(tmp_path)
    cache.put("m", "k1", "first")
    cache.put("m", "k1", "second")
    assert cache.get("m", "k1") == "first"
    assert cache.get("m", "other") is None


def test_cache_handles_awkward_model_ids(tmp_path):
    cache = ResponseCache(tmp_path)
    cache.put("org/model:v1", "k", "text")
    assert cache.get("org/model:v1", "k") == "text"
    assert (tmp_path / "org_model_v1").is_dir()


def test_complete_success_and_payload_shape():
    client, session, _ = make_client([ok_response("out")])
    result = client.complete(http_endpoint(), "the prompt")
    assert result.text == "out"
    assert result.attempts == 1
    assert not result.from_cache
    payload = session.calls[0]["json"]
    assert payload["model"] == "m1"
    assert payload["messages"] == [{"role": "user", "content": "the prompt"}]
    assert payload["temperature"] == 0.0
    assert payload["max_tokens"] == 2048


def test_cache_hit_skips_network(tmp_path):
    client, session, _ = make_client([ok_response("cached-text")], cache_dir=tmp_path)
    first = client.complete(http_endpoint(), "p")
    assert not first.from_cache
    second = client.complete(http_endpoint(), "p")
    assert second.from_cache
    assert second.text == "cached-text"
    assert second.attempts == 0
    assert len(session.calls) == 1
    assert client.stats.cache_hits == 1


def test_retry_on_429_then_success():
    client, session, sleeps = make_client(
        [FakeResponse(429), FakeResponse(429), ok_response("done")]
    )
    result = client.complete(http_endpoint(), "p")
    assert result.text == "done"
    assert result.attempts == 3
    assert sleeps == [1.0, 2.0]
    assert client.stats.network_requests == 3


def test_retries_exhausted_on_5xx():
    client, _, sleeps = make_client([FakeResponse(500)] * 5)
    with pytest.raises(ExhaustedRetries) as excinfo:
        client.complete(http_endpoint(), "p")
    assert excinfo.value.last_status == 500
    assert excinfo.value.attempts == 5
    assert sleeps == [1.0, 2.0, 4.0, 8.0]


def test_timeouts_are_transient():
    client, _, sleeps = make_client(
        [requests.Timeout("slow"), requests.ConnectionError("down"), ok_response("ok")]
    )
    result = client.complete(http_endpoint(), "p")
    assert result.attempts == 3
    assert sleeps == [1.0, 2.0]


def test_auth_status_never_retried():
    client, session, sleeps = make_client([FakeResponse(401)])
    with pytest.raises(AuthError):
        client.complete(http_endpoint(), "p")
    assert len(session.calls) == 1
    assert sleeps == []


def test_other_4xx_fails_fast():
    client, session, _ = make_client([FakeResponse(404)])
    with pytest.raises(ExhaustedRetries) as excinfo:
        client.complete(http_endpoint(), "p")
    assert excinfo.value.last_status == 404
    assert excinfo.value.attempts == 1
    assert len(session.calls) == 1


def test_missing_api_key_env(monkeypatch):
    monkeypatch.delenv("GENJUDGE_TEST_KEY", raising=False)
    client, session, _ = make_client([ok_response()])
    with pytest.raises(AuthError):
        client.complete(http_endpoint(api_key_env="GENJUDGE_TEST_KEY"), "p")
    assert session.calls == []


def test_api_key_attached_as_bearer(monkeypatch):
    monkeypatch.setenv("GENJUDGE_TEST_KEY", "sk-test-123")
    client, session, _ = make_client([ok_response()])
    client.complete(http_endpoint(api_key_env="GENJUDGE_TEST_KEY"), "p")
    assert session.calls[0]["headers"] == {"Authorization": "Bearer sk-test-123"}


def test_malformed_reply_path():
    client, _, _ = make_client([FakeResponse(200, {"choices": []})])
    with pytest.raises(MalformedResponse):
        client.complete(http_endpoint(), "p")
    client, _, _ = make_client([FakeResponse(200, body=None)])
    with pytest.raises(MalformedResponse):
        client.complete(http_endpoint(), "p")


def test_custom_reply_path():
    body = {"output": {"parts": ["ignored", "the reply"]}}
    client, _, _ = make_client([FakeResponse(200, body)])
    endpoint = http_endpoint(reply_path="output.parts.1")
    assert client.complete(endpoint, "p").text == "the reply"


def write_script(path, models):
    path.write_text(json.dumps({"models": models}), encoding="utf-8")


def test_mock_script_contains_and_digest(tmp_path):
    script = tmp_path / "script.json"
    write_script(script, {
        "solver": [
            {"contains": ["apples", "pie"], "response": "The answer is 17."},
            {"contains": ["apples"], "response": "The answer is 20."},
        ]
    })
    endpoint = mock_from_script(script)
    assert endpoint.model_id == "solver"
    client = CompletionClient()
    # Both snippets present: first rule wins over the weaker one.
    result = client.complete(endpoint, "Count apples used for the pie.")
    assert result.text == "The answer is 17."
    assert client.complete(endpoint, "Just apples.").text == "The answer is 20."
    assert client.stats.script_calls == 2
    assert client.stats.network_requests == 0


def test_mock_script_miss_carries_digest(tmp_path):
    script = tmp_path / "script.json"
    write_script(script, {"solver": [{"contains": ["magic-token"], "response": "x"}]})
    client = CompletionClient()
    with pytest.raises(ScriptMiss) as excinfo:
        client.complete(mock_from_script(script), "unscripted prompt")
    assert len(excinfo.value.digest) == 64
    assert excinfo.value.model_id == "solver"


def test_mock_from_script_multi_model_needs_explicit_id(tmp_path):
    script = tmp_path / "script.json"
    write_script(script, {"a": [], "b": []})
    with pytest.raises(ValueError):
        mock_from_script(script)
    endpoint = mock_from_script(script, model_id="a")
    assert endpoint.model_id == "a"
    assert endpoint.is_mock


def test_mock_with_cache_counts_single_call(tmp_path):
    script = tmp_path / "script.json"
    write_script(script, {"solver": [{"contains": ["q"], "response": "r"}]})
    client = CompletionClient(cache_dir=tmp_path / "cache")
    endpoint = mock_from_script(script)
    first = client.complete(endpoint, "q1")
    second = client.complete(endpoint, "q1")
    assert not first.from_cache and second.from_cache
    assert client.stats.script_calls == 1
    assert client.stats.provider_calls == 1


def test_bounded_in_flight(tmp_path):
    script = tmp_path / "script.json"
    write_script(script, {"solver": [{"contains": [], "response": "r"}]})
    endpoint = mock_from_script(script)

    active = []
    peak = []
    lock = threading.Lock()

    class SlowScript:
        def respond(self, model_id, prompt_text):
            with lock:
                active.append(1)
                peak.append(len(active))
            import time as time_module

            time_module.sleep(0.01)
            with lock:
                active.pop()
            return "r"

    client = CompletionClient()
    client._scripts[str(script)] = SlowScript()
    bounded = ModelEndpoint(model_id="solver", script_path=str(script), max_in_flight=2)
    threads = [
        threading.Thread(target=client.complete, args=(bounded, f"p{i}")) for i in range(8)
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert max(peak) <= 2
