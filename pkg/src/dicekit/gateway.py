"""Chat-completion backends behind one interface, plus prompt assembly.

Two backends ship: :class:`OpenAIChatBackend` speaks the OpenAI-compatible
``/chat/completions`` wire format (vLLM, OpenAI, ...), and
:class:`ScriptedMock` replays canned completions keyed by a request
fingerprint so whole pipeline runs are reproducible offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence, TypeVar

import httpx

log = logging.getLogger("dicekit.gateway")

T = TypeVar("T")
R = TypeVar("R")

LLM_FREEFORM = "llm-freeform"
SLM_ANALYZE = "slm-analyze"
HINT_PREFIX = "Reference answer: "


class GatewayError(RuntimeError):
    """Base class for backend failures."""


class AuthError(GatewayError):
    pass


class BackendError(GatewayError):
    def __init__(self, status: int | str, message: str = ""):
        self.status = status
        super().__init__(f"backend returned {status}" + (f": {message}" if message else ""))


class ExhaustedRetries(GatewayError):
    def __init__(self, last_status: int | str, attempts: int):
        self.last_status = last_status
        self.attempts = attempts
        super().__init__(f"gave up after {attempts} attempts (last status {last_status})")


class ScriptMiss(GatewayError):
    def __init__(self, fingerprint: str, model_name: str = ""):
        self.fingerprint = fingerprint
        super().__init__(f"no scripted completion for {model_name} request {fingerprint[:16]}")


class ScriptExhausted(GatewayError):
    def __init__(self, fingerprint: str, wanted: int, left: int):
        self.fingerprint = fingerprint
        super().__init__(
            f"script entry {fingerprint[:16]} exhausted: wanted {wanted}, {left} left"
        )


@dataclass(frozen=True)
class BackendConfig:
    model_name: str
    base_url: str = ""
    # name of the environment variable holding the key; None sends no auth header
    api_key_env_var: str | None = None
    temperature: float = 0.8
    max_tokens: int = 1024
    n_samples: int = 1
    timeout: float = 60.0
    max_retries: int = 3
    concurrency_limit: int = 4
    backoff_base: float = 0.5
    backoff_max: float = 30.0
    # False: never send n>1, always issue n sequential requests
    native_n: bool = True

    def __post_init__(self) -> None:
        if not self.model_name:
            raise ValueError("model_name is required")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        for name in ("max_tokens", "n_samples", "concurrency_limit"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.max_retries < 0 or self.timeout <= 0:
            raise ValueError("max_retries must be >= 0 and timeout > 0")


@dataclass(frozen=True)
class PromptRecipe:
    system_text: str = ""
    demonstrations: tuple[tuple[str, str], ...] = ()
    hint: str | None = None
    mode: str = LLM_FREEFORM

    def __post_init__(self) -> None:
        demos = tuple((str(q), str(a)) for q, a in self.demonstrations)
        object.__setattr__(self, "demonstrations", demos)
        if self.mode not in (LLM_FREEFORM, SLM_ANALYZE):
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if len(demos) not in (0, 2):
            raise ValueError(f"use 0 or 2 demonstrations, got {len(demos)}")
        if self.hint is not None and self.mode != SLM_ANALYZE:
            raise ValueError("a gold-answer hint is only allowed in slm-analyze mode")


def analyze_turn(question: str, llm_output: str, hint: str | None = None) -> str:
    text = f"Question:\n{question}\n\nLLM response:\n{llm_output}"
    if hint is not None:
        text += f"\n\n{HINT_PREFIX}{hint}"
    return text


def build_prompt(
    recipe: PromptRecipe, question: str, context: str | None = None
) -> list[dict[str, str]]:
    """System turn, demonstration pairs, then the user turn.

    In slm-analyze mode the user turn carries the question, the LLM output
    (``context``) and, when set, the reference-answer hint.
    """
    messages = [{"role": "system", "content": recipe.system_text}]
    for q, a in recipe.demonstrations:
        messages.append({"role": "user", "content": q})
        messages.append({"role": "assistant", "content": a})
    if recipe.mode == SLM_ANALYZE:
        if context is None:
            raise ValueError("slm-analyze prompts need the LLM output as context")
        user = analyze_turn(question, context, recipe.hint)
    else:
        user = question
    messages.append({"role": "user", "content": user})
    return messages


def fingerprint(model_name: str, messages: Sequence[dict[str, str]], n: int) -> str:
    blob = json.dumps([model_name, list(messages), int(n)], ensure_ascii=False, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def chat(
        self, config: BackendConfig, messages: list[dict[str, str]], n: int, seed: int | None
    ) -> list[str]: ...


class ScriptedMock:
    """Deterministic fake backend.

    ``script`` maps request fingerprints to an ordered list of completions;
    each request consumes ``n`` of them. Unknown fingerprints and exhausted
    entries raise instead of recycling. ``down_models`` makes every request
    for those model names fail, for fault-injection runs.

    Requests with identical fingerprints consume their entry in arrival
    order, so concurrent runs are only reproducible when such requests are
    distinct or the concurrency limit is 1.
    """

    def __init__(
        self,
        script: dict[str, list[str]] | None = None,
        delay_seconds: float = 0.0,
        down_models: Iterable[str] = (),
    ):
        self.script: dict[str, list[str]] = {k: list(v) for k, v in (script or {}).items()}
        self.delay_seconds = delay_seconds
        self.down_models = set(down_models)
        self._pos: dict[str, int] = {}
        self._lock = threading.Lock()
        self.calls: list[str] = []

    def register(
        self, model_name: str, messages: Sequence[dict[str, str]], completions: Sequence[str]
    ) -> str:
        fp = fingerprint(model_name, messages, len(completions))
        self.script.setdefault(fp, []).extend(completions)
        return fp

    def chat(self, config, messages, n, seed=None):
        if self.delay_seconds:
            time.sleep(self.delay_seconds)
        if config.model_name in self.down_models:
            raise BackendError("unavailable", f"{config.model_name} is down (scripted)")
        fp = fingerprint(config.model_name, messages, n)
        with self._lock:
            self.calls.append(fp)
            if fp not in self.script:
                raise ScriptMiss(fp, config.model_name)
            pos = self._pos.get(fp, 0)
            left = len(self.script[fp]) - pos
            if left < n:
                raise ScriptExhausted(fp, n, left)
            self._pos[fp] = pos + n
            return self.script[fp][pos : pos + n]

    def reset(self) -> None:
        with self._lock:
            self._pos.clear()
            self.calls.clear()

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"entries": [{"fingerprint": k, "completions": v} for k, v in self.script.items()]}
        if self.delay_seconds:
            d["delay_seconds"] = self.delay_seconds
        if self.down_models:
            d["down_models"] = sorted(self.down_models)
        return d

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ScriptedMock:
        unknown = set(d) - {"entries", "delay_seconds", "down_models"}
        if unknown:
            raise ValueError(f"unknown mock script field(s): {sorted(unknown)}")
        mock = cls(delay_seconds=float(d.get("delay_seconds", 0.0)), down_models=d.get("down_models", ()))
        for entry in d.get("entries", []):
            completions = entry["completions"]
            if "fingerprint" in entry:
                mock.script.setdefault(entry["fingerprint"], []).extend(completions)
            else:
                mock.register(entry["model"], entry["messages"], completions)
        return mock

    @classmethod
    def load(cls, path: str | Path) -> ScriptedMock:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


_TRANSIENT = {429, 500, 502, 503, 504}


class OpenAIChatBackend:
    """HTTP backend for ``POST {base_url}/chat/completions``.

    Retries 429/5xx responses and timeouts with exponential backoff. The API
    key is read from the configured environment variable and never logged.
    """

    def __init__(
        self,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._client = client or httpx.Client()
        self._sleep = sleep
        self.retry_count = 0

    def close(self) -> None:
        self._client.close()

    def _headers(self, config: BackendConfig) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if config.api_key_env_var:
            key = os.environ.get(config.api_key_env_var)
            if not key:
                raise AuthError(f"environment variable {config.api_key_env_var} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, config: BackendConfig, payload: dict[str, Any], headers: dict[str, str]) -> dict:
        url = config.base_url.rstrip("/") + "/chat/completions"
        last: int | str = "none"
        for attempt in range(config.max_retries + 1):
            if attempt:
                delay = min(config.backoff_base * 2 ** (attempt - 1), config.backoff_max)
                self.retry_count += 1
                log.warning(
                    "retrying request",
                    extra={"model": config.model_name, "attempt": attempt, "last_status": last, "delay": delay},
                )
                self._sleep(delay)
            try:
                resp = self._client.post(url, json=payload, headers=headers, timeout=config.timeout)
            except httpx.TimeoutException:
                last = "timeout"
                continue
            except httpx.TransportError as exc:
                last = f"transport:{type(exc).__name__}"
                continue
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError:
                    raise BackendError(200, "response is not JSON") from None
            if resp.status_code in (401, 403):
                raise AuthError(f"backend rejected credentials ({resp.status_code})")
            if resp.status_code in _TRANSIENT:
                last = resp.status_code
                continue
            raise BackendError(resp.status_code, resp.text[:200])
        raise ExhaustedRetries(last, config.max_retries + 1)

    def _request(self, config, messages, n, seed, headers) -> list[str]:
        payload: dict[str, Any] = {
            "model": config.model_name,
            "messages": messages,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
            "n": n,
        }
        if seed is not None:
            payload["seed"] = seed
        body = self._post(config, payload, headers)
        try:
            choices = sorted(body["choices"], key=lambda c: c.get("index", 0))
            return [c["message"]["content"] or "" for c in choices]
        except (KeyError, TypeError) as exc:
            raise BackendError(200, f"malformed completion body ({exc})") from None

    def chat(self, config, messages, n, seed=None):
        headers = self._headers(config)
        out: list[str] = []
        if config.native_n and n > 1:
            out = self._request(config, messages, n, seed, headers)[:n]
        while len(out) < n:
            # servers that ignore n return one choice; top up one request at a time
            s = None if seed is None else seed + len(out)
            out.extend(self._request(config, messages, 1, s, headers)[:1])
        return out


class Gateway:
    """A backend bound to one model config, with bounded in-flight requests.

    Safe to call from many threads; at most ``config.concurrency_limit``
    requests are outstanding at once.
    """

    def __init__(self, config: BackendConfig, backend: Backend, seed: int | None = None):
        self.config = config
        self.backend = backend
        self.seed = seed
        self._sem = threading.BoundedSemaphore(config.concurrency_limit)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0
        self.n_calls = 0

    def chat(self, messages: list[dict[str, str]], n: int | None = None) -> list[str]:
        n = self.config.n_samples if n is None else n
        with self._sem:
            with self._lock:
                self.in_flight += 1
                self.n_calls += 1
                self.max_in_flight = max(self.max_in_flight, self.in_flight)
            try:
                return list(self.backend.chat(self.config, messages, n, self.seed))
            finally:
                with self._lock:
                    self.in_flight -= 1

    def complete(
        self,
        recipe: PromptRecipe,
        question: str,
        context: str | None = None,
        n: int | None = None,
    ) -> list[str]:
        return self.chat(build_prompt(recipe, question, context), n)

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply ``fn`` over ``items`` with ``concurrency_limit`` workers, keeping order.

        The first exception is re-raised after in-progress work finishes.
        """
        if self.config.concurrency_limit == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.config.concurrency_limit) as pool:
            futures = [pool.submit(fn, x) for x in items]
            return [f.result() for f in futures]


def complete(
    config: BackendConfig,
    recipe: PromptRecipe,
    question: str,
    context: str | None = None,
    backend: Backend | None = None,
) -> list[str]:
    """One-shot convenience: ``config.n_samples`` completions for ``question``."""
    return Gateway(config, backend or OpenAIChatBackend()).complete(recipe, question, context)
