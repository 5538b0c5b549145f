"""Minimal chat-completions HTTP client shared by paraphrasing and judging."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import requests

log = logging.getLogger(__name__)


class NetworkError(RuntimeError):
    pass


class MalformedResponse(ValueError):
    pass


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str
    api_key_env: str = "LLM_API_KEY"
    timeout: float = 30.0
    max_retries: int = 2
    temperature: float = 0.0
    model: str = "default"
    backoff: float = 0.5

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, obj: dict, default_env: str = "LLM_API_KEY") -> "LlmClientConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        known.setdefault("api_key_env", default_env)
        return cls(**known)


def chat(cfg: LlmClientConfig, messages: list[dict], session: requests.Session | None = None) -> str:
    """POST *messages* and return the first choice's content.

    Connection errors, timeouts, 429 and 5xx responses are retried with
    exponential backoff; anything else fails immediately.
    """
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(cfg.api_key_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = {"model": cfg.model, "messages": messages, "temperature": cfg.temperature}
    http = session or requests

    last_error: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            time.sleep(cfg.backoff * 2 ** (attempt - 1))
        try:
            resp = http.post(cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout)
        except requests.RequestException as exc:
            last_error = exc
            log.warning("LLM request to %s failed (attempt %d): %s", cfg.endpoint, attempt + 1, exc)
            continue
        if resp.status_code == 429 or resp.status_code >= 500:
            last_error = NetworkError(f"HTTP {resp.status_code}")
            log.warning("LLM endpoint returned %d (attempt %d)", resp.status_code, attempt + 1)
            continue
        if resp.status_code >= 400:
            raise NetworkError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response shape: {resp.text[:200]}") from exc
        if not isinstance(content, str):
            raise MalformedResponse("message content is not text")
        log.debug("LLM request %r -> %r", messages[-1]["content"][:120], content[:120])
        return content
    raise NetworkError(f"{cfg.endpoint} unreachable after {cfg.max_retries + 1} attempts: {last_error}")
