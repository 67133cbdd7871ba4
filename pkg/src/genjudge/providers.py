"""Model access: HTTP chat-completion endpoints, an on-disk response cache,
and deterministic scripted mocks for offline runs.

The cache is content-addressed by (model, prompt, temperature, max_tokens),
so a warm cache replays a run byte-for-byte without touching the network.
API keys come only from environment variables named in the endpoint config;
they are never read from config values or written to disk.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .prompts import RenderedPrompt


class ProviderError(Exception):
    pass


class AuthError(ProviderError):
    """Authentication failures; never retried."""


class ExhaustedRetries(ProviderError):
    def __init__(self, last_status, attempts: int):
        super().__init__(f"gave up after {attempts} attempt(s); last status {last_status}")
        self.last_status = last_status
        self.attempts = attempts


class MalformedResponse(ProviderError):
    pass


class ScriptMiss(ProviderError):
    def __init__(self, digest: str, model_id: str):
        super().__init__(
            f"mock script has no rule for model {model_id!r}, prompt digest {digest}"
        )
        self.digest = digest
        self.model_id = model_id


@dataclass(frozen=True)
class ModelEndpoint:
    """How to reach one model.  A set script_path makes it a scripted mock."""

    model_id: str
    base_url: str = ""
    api_key_env: str = ""
    temperature: float = 0.0
    max_tokens: int = 2048
    timeout: float = 60.0
    # Dotted path into the response JSON; integer segments index into lists.
    reply_path: str = "choices.0.message.content"
    max_in_flight: int = 4
    script_path: str | None = None

    @property
    def is_mock(self) -> bool:
        return self.script_path is not None


@dataclass(frozen=True)
class CompletionResult:
    text: str
    from_cache: bool
    attempts: int
    latency: float


def cache_key(model_id: str, prompt_text: str, temperature: float, max_tokens: int) -> str:
    digest = hashlib.sha256()
    for part in (model_id, repr(float(temperature)), str(int(max_tokens))):
        digest.update(part.encode("utf-8"))
        digest.update(b"\x00")
    digest.update(prompt_text.encode("utf-8"))
    return digest.hexdigest()


def _fs_safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name) or "_"


class ResponseCache:
    """Content-addressed completion store: <root>/<model>/<key>.txt.

    First write wins; identical rewrites are no-ops, so concurrent writers
    cannot corrupt an entry.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, model_id: str, key: str) -> Path:
        return self.root / _fs_safe(model_id) / f"{key}.txt"

    def get(self, model_id: str, key: str) -> str | None:
        path = self.path_for(model_id, key)
        if not path.exists():
            return None
        return path.read_text(encoding="utf-8")

    def put(self, model_id: str, key: str, text: str) -> None:
        path = self.path_for(model_id, key)
        if path.exists():
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)


@dataclass
class _Rule:
    response: str
    contains: tuple[str, ...] = ()
    digest: str | None = None

    def matches(self, prompt_text: str, prompt_digest: str) -> bool:
        if self.digest is not None:
            return self.digest == prompt_digest
        return all(snippet in prompt_text for snippet in self.contains)


class MockScript:
    """Canned responses for offline runs.

    The script JSON maps model ids to ordered rules; a rule fires when its
    exact prompt digest matches or when every "contains" snippet appears in
    the prompt.  First match wins.  A prompt no rule covers raises ScriptMiss
    carrying the digest, ready to paste into the script.
    """

    def __init__(self, rules_by_model: dict[str, list[_Rule]]):
        self._rules = rules_by_model

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules_by_model: dict[str, list[_Rule]] = {}
        for model_id, rules in data["models"].items():
            parsed = []
            for rule in rules:
                parsed.append(
                    _Rule(
                        response=rule["response"],
                        contains=tuple(rule.get("contains", ())),
                        digest=rule.get("digest"),
                    )
                )
            rules_by_model[model_id] = parsed
        return cls(rules_by_model)

    @property
    def model_ids(self) -> list[str]:
        return sorted(self._rules)

    def respond(self, model_id: str, prompt_text: str) -> str:
        digest = hashlib.sha256(prompt_text.encode("utf-8")).hexdigest()
        for rule in self._rules.get(model_id, ()):
            if rule.matches(prompt_text, digest):
                return rule.response
        raise ScriptMiss(digest, model_id)


def mock_from_script(path: str | Path, model_id: str | None = None) -> ModelEndpoint:
    """Endpoint backed by a script file instead of the network."""
    script = MockScript.load(path)
    if model_id is None:
        if len(script.model_ids) != 1:
            raise ValueError(
                f"script {path} defines models {script.model_ids}; pass model_id explicitly"
            )
        model_id = script.model_ids[0]
    return ModelEndpoint(model_id=model_id, script_path=str(path))


BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0
MAX_ATTEMPTS = 5


@dataclass
class ClientStats:
    cache_hits: int = 0
    network_requests: int = 0
    script_calls: int = 0
    failures: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    @property
    def provider_calls(self) -> int:
        return self.network_requests + self.script_calls

    def snapshot(self) -> dict:
        return {
            "cache_hits": self.cache_hits,
            "network_requests": self.network_requests,
            "script_calls": self.script_calls,
            "provider_calls": self.provider_calls,
            "failures": self.failures,
        }


class CompletionClient:
    """complete() with caching, bounded in-flight requests, and retries.

    Transient failures (timeouts, connection errors, 429, 5xx) back off
    exponentially from 1s, doubling, for at most 5 attempts.  Auth failures
    and other 4xx fail immediately.  The sleep function is injectable so
    tests can observe the schedule without waiting it out.
    """

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        session=None,
        sleep=time.sleep,
    ):
        self.cache = ResponseCache(cache_dir) if cache_dir else None
        self._session = session
        self._sleep = sleep
        self._scripts: dict[str, MockScript] = {}
        self._semaphores: dict[str, threading.Semaphore] = {}
        self._lock = threading.Lock()
        self.stats = ClientStats()

    def _semaphore(self, endpoint: ModelEndpoint) -> threading.Semaphore:
        with self._lock:
            if endpoint.model_id not in self._semaphores:
                self._semaphores[endpoint.model_id] = threading.Semaphore(
                    max(1, endpoint.max_in_flight)
                )
            return self._semaphores[endpoint.model_id]

    def _script(self, endpoint: ModelEndpoint) -> MockScript:
        with self._lock:
            if endpoint.script_path not in self._scripts:
                self._scripts[endpoint.script_path] = MockScript.load(endpoint.script_path)
            return self._scripts[endpoint.script_path]

    def _post(self, endpoint: ModelEndpoint, payload: dict, headers: dict):
        if self._session is None:
            self._session = requests.Session()
        return self._session.post(
            endpoint.base_url, json=payload, headers=headers, timeout=endpoint.timeout
        )

    def complete(self, endpoint: ModelEndpoint, prompt: RenderedPrompt | str) -> CompletionResult:
        text = prompt.text if isinstance(prompt, RenderedPrompt) else str(prompt)
        key = cache_key(endpoint.model_id, text, endpoint.temperature, endpoint.max_tokens)
        if self.cache is not None:
            cached = self.cache.get(endpoint.model_id, key)
            if cached is not None:
                self.stats.bump("cache_hits")
                return CompletionResult(cached, from_cache=True, attempts=0, latency=0.0)
        started = time.monotonic()
        with self._semaphore(endpoint):
            try:
                if endpoint.is_mock:
                    self.stats.bump("script_calls")
                    reply = self._script(endpoint).respond(endpoint.model_id, text)
                    attempts = 1
                else:
                    reply, attempts = self._http_complete(endpoint, text)
            except ProviderError:
                self.stats.bump("failures")
                raise
        latency = time.monotonic() - started
        if self.cache is not None:
            self.cache.put(endpoint.model_id, key, reply)
        return CompletionResult(reply, from_cache=False, attempts=attempts, latency=latency)

    def _http_complete(self, endpoint: ModelEndpoint, text: str) -> tuple[str, int]:
        api_key = os.environ.get(endpoint.api_key_env) if endpoint.api_key_env else None
        if endpoint.api_key_env and not api_key:
            raise AuthError(f"environment variable {endpoint.api_key_env!r} is not set")
        payload = {
            "model": endpoint.model_id,
            "messages": [{"role": "user", "content": text}],
            "temperature": endpoint.temperature,
            "max_tokens": endpoint.max_tokens,
        }
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        delay = BACKOFF_BASE
        last_status: int | str | None = None
        for attempt in range(1, MAX_ATTEMPTS + 1):
            self.stats.bump("network_requests")
            try:
                response = self._post(endpoint, payload, headers)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_status = type(exc).__name__
            else:
                status = response.status_code
                if status in (401, 403):
                    raise AuthError(f"status {status} from {endpoint.base_url}")
                if 200 <= status < 300:
                    return _reply_text(response, endpoint.reply_path), attempt
                last_status = status
                if not (status == 429 or status >= 500):
                    # Non-transient client error: retrying cannot help.
                    raise ExhaustedRetries(last_status, attempts=attempt)
            if attempt < MAX_ATTEMPTS:
                self._sleep(delay)
                delay *= BACKOFF_FACTOR
        raise ExhaustedRetries(last_status, attempts=MAX_ATTEMPTS)


def _reply_text(response, reply_path: str) -> str:
    try:
        data = response.json()
    except ValueError as exc:
        raise MalformedResponse(f"response body is not JSON: {exc}") from None
    node = data
    for segment in reply_path.split("."):
        try:
            if isinstance(node, list):
                node = node[int(segment)]
            elif isinstance(node, dict):
                node = node[segment]
            else:
                raise KeyError(segment)
        except (KeyError, IndexError, ValueError, TypeError):
            raise MalformedResponse(
                f"no text at reply path {reply_path!r} (failed at {segment!r})"
            ) from None
    if not isinstance(node, str):
        raise MalformedResponse(f"reply path {reply_path!r} does not hold text")
    return node
