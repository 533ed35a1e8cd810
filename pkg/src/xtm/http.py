"""Minimal JSON-over-HTTP helper shared by the remote LLM and encoder providers."""

from __future__ import annotations

import logging
import time

import httpx

from .errors import ProviderError

log = logging.getLogger(__name__)

RETRY_STATUSES = (429, 500, 502, 503, 504)


def post_json(client: httpx.Client, url: str, payload: dict, *, headers=None,
              max_retries: int = 2, backoff: float = 1.0, timeout: float = 60.0) -> dict:
    """POST ``payload`` and return the decoded JSON body.

    Transient failures (connection errors, 429 and 5xx) are retried with
    exponential backoff; 401/403 fail immediately as ``ProviderError("auth")``.
    """
    attempt = 0
    while True:
        try:
            resp = client.post(url, json=payload, headers=headers, timeout=timeout)
        except httpx.HTTPError as err:
            if attempt >= max_retries:
                raise ProviderError("network", str(err)) from err
        else:
            if resp.status_code in (401, 403):
                raise ProviderError("auth", f"HTTP {resp.status_code}")
            if resp.status_code in RETRY_STATUSES and attempt < max_retries:
                log.warning("HTTP %d from %s, retrying", resp.status_code, url)
            elif resp.status_code >= 400:
                raise ProviderError("http", f"HTTP {resp.status_code}")
            else:
                try:
                    body = resp.json()
                except ValueError as err:
                    raise ProviderError("protocol", "response is not JSON") from err
                if not isinstance(body, dict):
                    raise ProviderError("protocol", "response is not a JSON object")
                return body
        if backoff > 0:
            time.sleep(backoff * 2 ** attempt)
        attempt += 1
