"""Minimal chat-completions client with exponential-backoff retries."""

from __future__ import annotations

import logging
import os
import time
from typing import Callable

import httpx

API_KEY_ENV = "GO1_API_KEY"

log = logging.getLogger(__name__)


class EndpointError(RuntimeError):
    """The remote endpoint could not produce a usable response."""


class ChatEndpoint:
    """POSTs ``{"model", "messages", "temperature", "n", "stop"}`` to ``url``.

    The bearer token is read from the ``GO1_API_KEY`` environment variable.
    Transport errors, 429 and 5xx responses are retried up to ``max_retries``
    times with delays ``backoff, 2*backoff, 4*backoff, ...``.
    """

    def __init__(self, url: str, model: str = "default", *, timeout: float = 60.0,
                 max_retries: int = 3, backoff: float = 1.0,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] | None = None):
        self.url = url
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep or time.sleep
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._client.close()

    def complete(self, messages: list[dict], *, n: int = 1, temperature: float = 1.0,
                 stop: list[str] | None = None) -> list[str]:
        body = {"model": self.model, "messages": messages, "temperature": temperature, "n": n}
        if stop:
            body["stop"] = stop
        delay = self.backoff
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(self.url, json=body)
            except httpx.TransportError as exc:
                err = f"transport error: {exc}"
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    err = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        choices = resp.json()["choices"]
                        return [c["message"]["content"] or "" for c in choices]
                    except (ValueError, KeyError, TypeError) as exc:
                        raise EndpointError(f"unexpected response shape: {exc}") from None
            if attempt == self.max_retries:
                raise EndpointError(f"giving up after {attempt + 1} attempts ({err})")
            log.warning("chat endpoint failed (%s); retrying in %.1fs", err, delay)
            self._sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")
