"""Text-generation backend clients.

One abstraction serves extraction (LLM-as-annotator), response generation,
and optional target scoring for perplexity. Two kinds ship in-repo: a
JSON-over-HTTP chat-completion client and deterministic mocks for offline
runs and tests. Logprobs are natural-log units throughout; a remote that
reports another base must be converted at ingestion.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field

import httpx

from .errors import BackendAuthError, BackendError

ENV_BACKEND_URL = "MIND2_BACKEND_URL"
ENV_API_KEY = "MIND2_API_KEY"

# Echo marker understood by the mock: everything after it is returned
# verbatim. Used by the scoring path to obtain per-token logprobs of a known
# target without a real model.
ECHO_MARKER = "<<echo>>"


@dataclass(frozen=True)
class GenerationConfig:
    """Decoding configuration; defaults follow the reference setup
    (nucleus p=0.3, top-k 30, temperature 0.7, unit repetition penalty,
    256/40 input/output budgets)."""

    top_p: float = 0.3
    top_k: int = 30
    temperature: float = 0.7
    repetition_penalty: float = 1.0
    max_input_tokens: int = 256
    max_output_tokens: int = 40

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    def to_dict(self) -> dict:
        return {
            "top_p": self.top_p,
            "top_k": self.top_k,
            "temperature": self.temperature,
            "repetition_penalty": self.repetition_penalty,
            "max_input_tokens": self.max_input_tokens,
            "max_output_tokens": self.max_output_tokens,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationConfig":
        return cls(**{k: data[k] for k in cls().to_dict() if k in data})


@dataclass
class BackendResponse:
    text: str
    token_logprobs: list[tuple[str, float]] | None = None
    usage: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.token_logprobs is not None:
            bad = [lp for _, lp in self.token_logprobs if lp > 0]
            if bad:
                raise ValueError(f"logprobs must be <= 0, got {bad[:3]}")


class Backend:
    """Interface: complete(prompt, config, want_logprobs) -> BackendResponse."""

    name = "backend"

    def complete(self, prompt: str, config: GenerationConfig,
                 want_logprobs: bool = False) -> BackendResponse:
        raise NotImplementedError


def _stable_digest(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


class MockBackend(Backend):
    """Deterministic rule-table backend.

    Rules are ``(substring, response)`` pairs checked in order against the
    prompt; the first match wins. Unmatched prompts fall through to the
    ``default`` callable (a pure function of the prompt) or, absent that, to
    a short digest-derived string. Identical prompts always produce
    identical responses. Every call is appended to ``call_log``.
    """

    name = "mock"

    def __init__(self, rules=None, default=None, logprob: float = None):
        self.rules: list[tuple[str, str]] = list(rules or [])
        self.default = default
        self.logprob = logprob  # per-token logprob attached when requested
        self.call_log: list[str] = []

    def add_rule(self, contains: str, response: str) -> None:
        self.rules.append((contains, response))

    def complete(self, prompt, config, want_logprobs=False):
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self.call_log.append(prompt)
        text = self._respond(prompt)
        logprobs = None
        flags = []
        if want_logprobs:
            value = self.logprob if self.logprob is not None else -1.0
            logprobs = [(tok, value) for tok in text.split()]
        return BackendResponse(
            text=text,
            token_logprobs=logprobs,
            usage={"backend": self.name, "prompt_chars": len(prompt)},
            flags=flags,
        )

    def _respond(self, prompt: str) -> str:
        if ECHO_MARKER in prompt:
            return prompt.split(ECHO_MARKER, 1)[1].strip()
        for contains, response in self.rules:
            if contains in prompt:
                return response
        if self.default is not None:
            return self.default(prompt)
        return f"mock-{_stable_digest(prompt) % 100000:05d}"

    @property
    def call_count(self) -> int:
        return len(self.call_log)


_INPUT_SECTION = re.compile(r"Input:\n(.*?)\nOutput:", re.DOTALL)


def _window_words(prompt: str) -> list[str]:
    """Pull candidate words out of the window text embedded in a prompt."""
    match = _INPUT_SECTION.search(prompt)
    section = match.group(1) if match else prompt
    lines = [re.sub(r"^(System|User): ", "", ln) for ln in section.splitlines()]
    return re.findall(r"[A-Za-z']+", " ".join(lines))


def _extraction_behavior(prompt: str) -> str:
    """Pick up to two window words deterministically, as a JSON array.

    Word choice is keyed on a digest of the whole prompt, so distinct
    subtasks over the same window select different terms while reruns stay
    identical. Prompts whose window holds no word of >= 4 characters get the
    "none" sentinel.
    """
    words = [w for w in _window_words(prompt) if len(w) >= 4]
    if not words:
        return "none"
    digest = _stable_digest(prompt)
    picks = []
    for i in range(2):
        picks.append(words[(digest // (i + 1)) % len(words)])
    seen = []
    for w in picks:
        if w.lower() not in [s.lower() for s in seen]:
            seen.append(w)
    return json.dumps(seen)


_MOCK_STRATEGIES = (
    "Question", "Restatement or Paraphrasing", "Reflection of Feelings",
    "Self-disclosure", "Affirmation and Reassurance", "Providing Suggestions",
    "Information", "Others",
)


def _generation_behavior(prompt: str) -> str:
    """Emit a deterministic '[str] ... [rsp] ...' reply built from the prompt."""
    digest = _stable_digest(prompt)
    strategy = _MOCK_STRATEGIES[digest % len(_MOCK_STRATEGIES)]
    words = [w for w in _window_words(prompt) if len(w) >= 3]
    if words:
        picked = " ".join(words[(digest // (i + 3)) % len(words)] for i in range(3))
        response = f"I hear you about {picked}."
    else:
        response = "I am here with you."
    return f"[str] {strategy} [rsp] {response}"


def mock_extraction_backend() -> MockBackend:
    """Offline annotator: deterministic verbatim term picks from the window."""
    backend = MockBackend(default=_extraction_behavior)
    backend.name = "mock"
    return backend


def mock_generation_backend(logprob: float = None) -> MockBackend:
    """Offline generator: deterministic strategy + response in target format."""
    backend = MockBackend(default=_generation_behavior, logprob=logprob)
    backend.name = "mock"
    return backend


class RemoteChatCompletion(Backend):
    """JSON-over-HTTP chat-completion client.

    Request body (documented schema, golden examples in tests/data):
    ``{model, messages: [{role, content}], temperature, top_p, top_k,
    repetition_penalty, max_tokens, logprobs}``. ``top_k`` and
    ``repetition_penalty`` sit outside the common chat-completion core;
    they are always sent and echoed in usage metadata so a report can tell
    whether the remote could have honored them.
    """

    # Fields a minimal chat-completion server may silently ignore.
    NONSTANDARD_PARAMS = ("top_k", "repetition_penalty")

    MAX_ATTEMPTS = 3
    BACKOFF_BASE = 0.5

    def __init__(self, url: str, model: str = "default", api_key: str = None,
                 timeout: float = 30.0, client: httpx.Client = None):
        self.url = url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY)
        self.timeout = timeout
        self._client = client or httpx.Client(timeout=timeout)
        self.name = f"remote:{self.model}@{self.url}"

    def build_request_body(self, prompt: str, config: GenerationConfig,
                           want_logprobs: bool) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "top_p": config.top_p,
            "top_k": config.top_k,
            "repetition_penalty": config.repetition_penalty,
            "max_tokens": config.max_output_tokens,
            "logprobs": bool(want_logprobs),
        }

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, prompt, config, want_logprobs=False):
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body = self.build_request_body(prompt, config, want_logprobs)
        last_error = None
        for attempt in range(self.MAX_ATTEMPTS):
            try:
                resp = self._client.post(self.url, json=body, headers=self._headers())
            except httpx.HTTPError as exc:
                last_error = BackendError(f"transport failure: {exc}")
                time.sleep(self.BACKOFF_BASE * (2 ** attempt))
                continue
            if resp.status_code in (401, 403):
                raise BackendAuthError(
                    f"backend rejected credentials (HTTP {resp.status_code}); "
                    f"check {ENV_API_KEY}"
                )
            if resp.status_code >= 500 or resp.status_code == 429:
                last_error = BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                time.sleep(self.BACKOFF_BASE * (2 ** attempt))
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse_response(resp.json(), want_logprobs)
        raise last_error or BackendError("backend unreachable")

    def _parse_response(self, payload: dict, want_logprobs: bool) -> BackendResponse:
        try:
            choice = payload["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unrecognized response shape: {exc}") from exc
        logprobs = None
        flags = []
        if want_logprobs:
            content = (choice.get("logprobs") or {}).get("content")
            if content:
                logprobs = [(item["token"], float(item["logprob"])) for item in content]
            else:
                flags.append("logprobs_unavailable")
        usage = dict(payload.get("usage") or {})
        usage["backend"] = self.name
        usage["nonstandard_params"] = list(self.NONSTANDARD_PARAMS)
        return BackendResponse(text=text, token_logprobs=logprobs,
                               usage=usage, flags=flags)


def resolve_backend(spec: str, role: str = "generation") -> Backend:
    """Map a CLI backend id to an instance: 'mock' or an http(s) URL."""
    if spec == "mock":
        return mock_extraction_backend() if role == "extraction" \
            else mock_generation_backend()
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemoteChatCompletion(spec)
    raise ValueError(f"unknown backend spec: {spec!r} (use 'mock' or a URL)")
