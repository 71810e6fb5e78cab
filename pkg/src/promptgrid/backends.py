"""Text-generation backends: a scripted mock and an OpenAI-compatible HTTP client."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx

from .prompts import CATEGORY_PREFIX, derive_seed

log = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length", "error")


class BackendError(Exception):
    """Base for failures of the backend itself, as opposed to unparseable output."""


class TransportError(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendResponseError(BackendError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ScoringUnsupported(BackendError):
    pass


@dataclass(frozen=True)
class DecodeParams:
    max_new_tokens: int = 32
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")


def default_params(parse_mode: str, seed: int | None = None) -> DecodeParams:
    budget = 1024 if parse_mode == "tagged_reasoning" else 32
    return DecodeParams(max_new_tokens=budget, temperature=0.0, seed=seed)


@dataclass(frozen=True)
class GenerationResult:
    text: str
    token_logprobs: tuple[tuple[str, float], ...] | None = None
    finish_reason: str = "stop"

    def __post_init__(self) -> None:
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"bad finish_reason {self.finish_reason!r}")
        if self.token_logprobs is not None and any(lp > 0 for _, lp in self.token_logprobs):
            raise ValueError("token log-probabilities must be <= 0")


class Backend(Protocol):
    name: str

    def generate(self, prompt: str, params: DecodeParams) -> GenerationResult: ...

    def score_continuation(self, prompt: str, continuation: str) -> list[float]: ...


# -- mock ---------------------------------------------------------------------

_RAISES = {
    "transport": TransportError,
    "timeout": BackendTimeout,
    "backend": BackendResponseError,
}
_TOKEN_RE = re.compile(r"\s*\S+")


@dataclass(frozen=True)
class MockRule:
    if_contains: str
    reply: str | tuple[str, ...] = ""
    logprobs: Mapping[str, Sequence[float]] | None = None
    raises: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MockRule":
        reply = data.get("reply", "")
        if isinstance(reply, list):
            reply = tuple(reply)
        raises = data.get("raise")
        if raises is not None and raises not in _RAISES:
            raise ValueError(f"unknown mock failure kind {raises!r}")
        return cls(data["if_contains"], reply, data.get("logprobs"), raises)


@dataclass(frozen=True)
class MockBackend:
    """Scripted backend; output is a pure function of (prompt, seed).

    The first rule whose ``if_contains`` occurs in the prompt wins. A rule whose
    reply is a list picks one entry by hashing the prompt with the seed. When no
    scripted log-probabilities apply, scoring falls back to a uniform model over
    ``vocab_size`` tokens with whitespace tokenization.
    """

    rules: tuple[MockRule, ...] = ()
    default_reply: str = ""
    vocab_size: int = 2
    name: str = "mock"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], name: str = "mock") -> "MockBackend":
        return cls(
            rules=tuple(MockRule.from_dict(r) for r in data.get("rules", [])),
            default_reply=data.get("default_reply", ""),
            vocab_size=int(data.get("vocab_size", 2)),
            name=data.get("name", name),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), name=f"mock:{Path(path).name}")

    def _match(self, prompt: str) -> MockRule | None:
        for rule in self.rules:
            if rule.if_contains in prompt:
                return rule
        return None

    @staticmethod
    def _fail(rule: MockRule) -> None:
        if rule.raises is not None:
            raise _RAISES[rule.raises](f"scripted {rule.raises} failure ({rule.if_contains!r})")

    def generate(self, prompt: str, params: DecodeParams = DecodeParams()) -> GenerationResult:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        rule = self._match(prompt)
        if rule is None:
            return GenerationResult(self.default_reply)
        self._fail(rule)
        reply = rule.reply
        if isinstance(reply, tuple):
            reply = reply[derive_seed(params.seed or 0, prompt) % len(reply)]
        return GenerationResult(reply, self._reply_logprobs(reply, rule.logprobs))

    @staticmethod
    def _reply_logprobs(
        reply: str, scripted: Mapping[str, Sequence[float]] | None
    ) -> tuple[tuple[str, float], ...] | None:
        if not scripted:
            return None
        span = None
        for key in sorted(scripted, key=len, reverse=True):
            pos = reply.rfind(key)
            if key and pos >= 0:
                span = (pos, pos + len(key), list(scripted[key]))
                break
        if span is None:
            return None
        start, end, lps = span
        tokens = [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(reply)]
        inside = [i for i, (_, s, e) in enumerate(tokens) if s < end and e > start]
        if len(lps) != len(inside):
            lps = [math.fsum(lps) / len(lps)] * len(inside)
        assigned = dict(zip(inside, lps))
        return tuple((tok, float(assigned.get(i, 0.0))) for i, (tok, _, _) in enumerate(tokens))

    def score_continuation(self, prompt: str, continuation: str) -> list[float]:
        if not continuation:
            raise ValueError("continuation must be non-empty")
        rule = self._match(prompt)
        if rule is not None:
            self._fail(rule)
            if rule.logprobs:
                key = continuation.strip()
                if key.startswith(CATEGORY_PREFIX):
                    key = key[len(CATEGORY_PREFIX):].strip()
                if key in rule.logprobs:
                    return [float(x) for x in rule.logprobs[key]]
        n = max(1, len(continuation.split()))
        return [-math.log(self.vocab_size)] * n


# -- HTTP ---------------------------------------------------------------------


@dataclass
class HTTPBackend:
    """OpenAI-compatible chat-completions client with echo-logprob scoring.

    Transport failures and timeouts are retried with exponential backoff; error
    payloads from the server are not.
    """

    base_url: str
    model: str
    chat_path: str = "/v1/chat/completions"
    completions_path: str = "/v1/completions"
    api_key_env: str | None = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    name: str = ""
    _client: httpx.Client | None = field(default=None, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)
    _scoring: bool | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.name:
            self.name = f"http:{self.model}@{self.base_url}"

    @property
    def client(self) -> httpx.Client:
        with self._lock:
            if self._client is None:
                headers = {"Content-Type": "application/json"}
                token = os.environ.get(self.api_key_env) if self.api_key_env else None
                if token:
                    headers["Authorization"] = f"Bearer {token}"
                self._client = httpx.Client(
                    base_url=self.base_url.rstrip("/"), headers=headers, timeout=self.timeout
                )
            return self._client

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> "HTTPBackend":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _post(self, path: str, payload: Mapping[str, Any]) -> dict[str, Any]:
        last: BackendError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(f"{path}: {exc}")
            except httpx.TransportError as exc:
                last = TransportError(f"{path}: {exc}")
            else:
                return self._decode(path, resp)
            log.warning("attempt %d/%d failed: %s", attempt + 1, self.max_retries + 1, last)
        assert last is not None
        raise last

    @staticmethod
    def _decode(path: str, resp: httpx.Response) -> dict[str, Any]:
        try:
            data = resp.json()
        except ValueError:
            data = None
        if resp.status_code >= 400 or not isinstance(data, dict) or "error" in data:
            detail = data.get("error") if isinstance(data, dict) else resp.text[:200]
            raise BackendResponseError(
                f"{path}: HTTP {resp.status_code}: {detail}", status=resp.status_code
            )
        return data

    def generate(self, prompt: str, params: DecodeParams = DecodeParams()) -> GenerationResult:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "logprobs": True,
        }
        if params.stop_sequences:
            payload["stop"] = list(params.stop_sequences)
        if params.seed is not None:
            payload["seed"] = params.seed
        data = self._post(self.chat_path, payload)
        try:
            choice = data["choices"][0]
            text = choice["message"].get("content") or ""
        except (KeyError, IndexError, TypeError, AttributeError) as exc:
            raise BackendResponseError(f"malformed chat response: {exc}") from exc
        finish = choice.get("finish_reason") or "stop"
        if finish not in FINISH_REASONS:
            finish = "error"
        token_logprobs = None
        content = (choice.get("logprobs") or {}).get("content")
        if content:
            token_logprobs = tuple(
                (item["token"], min(0.0, float(item["logprob"]))) for item in content
            )
        return GenerationResult(text, token_logprobs, finish)

    def score_continuation(self, prompt: str, continuation: str) -> list[float]:
        if not continuation:
            raise ValueError("continuation must be non-empty")
        full = prompt + continuation
        payload = {
            "model": self.model,
            "prompt": full,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": True,
            "logprobs": 0,
        }
        try:
            data = self._post(self.completions_path, payload)
        except BackendResponseError as exc:
            if exc.status in (400, 404, 405, 422, 501):
                raise ScoringUnsupported(str(exc)) from exc
            raise
        try:
            lp = data["choices"][0]["logprobs"]
            tokens, values, offsets = lp["tokens"], lp["token_logprobs"], lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ScoringUnsupported("completion response carries no echoed logprobs") from exc
        start, end = len(prompt), len(full)
        picked = []
        for tok, value, off in zip(tokens, values, offsets):
            if off < end and off + len(tok) > start:
                if value is None:
                    raise ScoringUnsupported("echoed logprob missing for a continuation token")
                picked.append(min(0.0, float(value)))
        if not picked:
            raise ScoringUnsupported("no echoed tokens align with the continuation")
        return picked

    def supports_scoring(self) -> bool:
        """Probe the completions endpoint once; cached afterwards."""
        if self._scoring is None:
            try:
                self.score_continuation("Category:", " probe")
                self._scoring = True
            except ScoringUnsupported:
                self._scoring = False
        return self._scoring


def build_backend(spec: Mapping[str, Any], base_dir: str | Path = ".") -> Backend:
    """Construct a backend from a config mapping (``kind``: ``mock`` or ``http``)."""
    kind = spec.get("kind", "mock")
    if kind == "mock":
        if "script" in spec:
            backend = MockBackend.from_file(Path(base_dir) / spec["script"])
            if "name" in spec:
                backend = MockBackend(backend.rules, backend.default_reply, backend.vocab_size, spec["name"])
            return backend
        return MockBackend.from_dict(spec, name=spec.get("name", "mock"))
    if kind == "http":
        return HTTPBackend(
            base_url=spec["base_url"],
            model=spec["model"],
            chat_path=spec.get("chat_path", "/v1/chat/completions"),
            completions_path=spec.get("completions_path", "/v1/completions"),
            api_key_env=spec.get("api_key_env", "OPENAI_API_KEY"),
            timeout=float(spec.get("timeout", 60.0)),
            max_retries=int(spec.get("max_retries", 3)),
            backoff=float(spec.get("backoff", 0.5)),
            name=spec.get("name", ""),
        )
    raise ValueError(f"unknown backend kind {kind!r}")
