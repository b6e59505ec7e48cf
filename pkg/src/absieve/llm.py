"""Chat-completion backends and strict parsing of decision responses.

Two backends satisfy the same ``complete(request)`` contract: an HTTP client
speaking the OpenAI-compatible chat-completions protocol, and a deterministic
scripted mock for offline runs and tests. Neither retries internally; retry
policy belongs to the runner.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .corpus import Decision
from .prompts import PromptText

API_KEY_ENV = "ABSIEVE_API_KEY"


class BackendError(Exception):
    pass


class TransientBackendError(BackendError):
    """Rate limits, 5xx responses, timeouts: safe to retry."""


class FatalBackendError(BackendError):
    """Client errors and malformed responses: retrying will not help."""


class AuthMissing(BackendError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    """One backend call. ``dataset_name``/``row_index`` identify the row so
    the scripted mock can replay a response for it; the HTTP backend ignores
    them."""

    model: str
    prompt: PromptText
    temperature: float = 0.0
    max_output_tokens: int = 8
    dataset_name: str | None = None
    row_index: int | None = None

    def __post_init__(self) -> None:
        if not self.prompt.body:
            raise ValueError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    input_tokens: int
    output_tokens: int
    latency_ms: float


def count_tokens_estimate(text: str) -> int:
    """Heuristic token count: one token per four characters, rounded up.

    Used for cost projection and as a fallback when a backend does not report
    true usage; real usage counts always win when available.
    """
    return math.ceil(len(text) / 4)


_LABEL_WORD = re.compile(r"\b(included|excluded)\b")
_QUOTE_CHARS = "\"'`"
_TRAILING_PUNCT = ".,:;!"


def parse_decision(text: str) -> Decision:
    """Map a raw model response to a :class:`Decision`.

    The response is normalized (trimmed, lowercased, surrounding quotes and
    trailing punctuation stripped, repeatedly until stable) and accepted if
    it then equals one of the two labels. Otherwise the text is scanned for
    whole-word label occurrences; exactly one distinct label wins, anything
    else is ``UNPARSEABLE``. Never raises: an unusable response is a value,
    not a failure.
    """
    s = text.lower()
    prev = None
    while s != prev:
        prev = s
        s = s.strip().strip(_QUOTE_CHARS).rstrip(_TRAILING_PUNCT)
    if s == "included":
        return Decision.INCLUDED
    if s == "excluded":
        return Decision.EXCLUDED
    found = set(_LABEL_WORD.findall(text.lower()))
    if found == {"included"}:
        return Decision.INCLUDED
    if found == {"excluded"}:
        return Decision.EXCLUDED
    return Decision.UNPARSEABLE


class HttpBackend:
    """OpenAI-compatible chat-completions client.

    POSTs to ``{base_url}/v1/chat/completions`` with the prompt as a single
    user message. The bearer token comes from the environment (never from a
    config file); a missing credential fails construction, before any
    network traffic.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = API_KEY_ENV,
        timeout_s: float = 120.0,
        session: requests.Session | None = None,
    ):
        key = os.environ.get(api_key_env, "")
        if not key:
            raise AuthMissing(f"environment variable {api_key_env} is not set")
        self._url = base_url.rstrip("/") + "/v1/chat/completions"
        self._key = key
        self._timeout = timeout_s
        self._session = session or requests.Session()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        payload = {
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt.body}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        started = time.monotonic()
        try:
            response = self._session.post(
                self._url,
                headers={"Authorization": f"Bearer {self._key}"},
                json=payload,
                timeout=self._timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(str(exc)) from exc
        latency_ms = (time.monotonic() - started) * 1000.0

        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"HTTP {response.status_code}")
        if response.status_code != 200:
            raise FatalBackendError(f"HTTP {response.status_code}: {response.text[:200]}")

        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise FatalBackendError(f"malformed response body: {exc}") from exc
        if not isinstance(text, str):
            raise FatalBackendError("response content is not a string")

        usage = body.get("usage") or {}
        input_tokens = usage.get("prompt_tokens")
        output_tokens = usage.get("completion_tokens")
        return CompletionResult(
            text=text,
            input_tokens=input_tokens
            if isinstance(input_tokens, int)
            else count_tokens_estimate(request.prompt.body),
            output_tokens=output_tokens
            if isinstance(output_tokens, int)
            else count_tokens_estimate(text),
            latency_ms=latency_ms,
        )


@dataclass(frozen=True)
class InjectedFailure:
    status: int
    count: int


@dataclass(frozen=True)
class MockScript:
    """Scripted responses keyed by ``(dataset_name, row_index)``.

    The file form is a JSON object whose keys are ``"dataset/row"`` strings
    mapping to response text, with two reserved keys: ``"default"`` (the
    response for unscripted rows) and ``"failures"`` (mapping ``"dataset/row"``
    to ``{"status": ..., "count": ...}``, errors injected before the scripted
    response is served).
    """

    responses: dict[tuple[str, int], str] = field(default_factory=dict)
    default: str = ""
    failures: dict[tuple[str, int], InjectedFailure] = field(default_factory=dict)

    @staticmethod
    def _parse_key(key: str) -> tuple[str, int]:
        dataset, _, row = key.rpartition("/")
        if not dataset:
            raise ValueError(f"mock script key {key!r} is not of the form 'dataset/row'")
        return dataset, int(row)

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        responses: dict[tuple[str, int], str] = {}
        failures: dict[tuple[str, int], InjectedFailure] = {}
        default = ""
        for key, value in data.items():
            if key == "default":
                default = str(value)
            elif key == "failures":
                for fkey, details in value.items():
                    failures[cls._parse_key(fkey)] = InjectedFailure(
                        status=int(details["status"]), count=int(details["count"])
                    )
            else:
                responses[cls._parse_key(key)] = str(value)
        return cls(responses=responses, default=default, failures=failures)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockScript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class MockCall:
    dataset_name: str | None
    row_index: int | None
    started_at: float
    in_flight: int


class MockBackend:
    """Deterministic scripted stand-in for the HTTP backend.

    Identical scripts and call sequences yield identical results, which is
    what makes end-to-end reruns byte-identical. The backend also instruments
    itself: call start times and concurrent in-flight counts are recorded so
    tests can assert rate-limit spacing and concurrency bounds.
    """

    def __init__(self, script: MockScript, delay_s: float = 0.0):
        self._script = script
        self._delay = delay_s
        self._lock = threading.Lock()
        self._failures_left = {key: f.count for key, f in script.failures.items()}
        self._in_flight = 0
        self.calls: list[MockCall] = []
        self.max_in_flight_observed = 0

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self.calls)

    def start_times(self) -> list[float]:
        with self._lock:
            return [c.started_at for c in self.calls]

    def complete(self, request: CompletionRequest) -> CompletionResult:
        key = (request.dataset_name, request.row_index)
        with self._lock:
            self._in_flight += 1
            self.max_in_flight_observed = max(self.max_in_flight_observed, self._in_flight)
            self.calls.append(
                MockCall(request.dataset_name, request.row_index, time.monotonic(), self._in_flight)
            )
            fail_status = None
            if self._failures_left.get(key, 0) > 0:
                self._failures_left[key] -= 1
                fail_status = self._script.failures[key].status
        try:
            if fail_status is not None:
                if fail_status == 429 or fail_status >= 500:
                    raise TransientBackendError(f"injected HTTP {fail_status}")
                raise FatalBackendError(f"injected HTTP {fail_status}")
            if self._delay:
                time.sleep(self._delay)
            text = self._script.responses.get(key, self._script.default)
            return CompletionResult(
                text=text,
                input_tokens=count_tokens_estimate(request.prompt.body),
                output_tokens=count_tokens_estimate(text),
                latency_ms=self._delay * 1000.0,
            )
        finally:
            with self._lock:
                self._in_flight -= 1
