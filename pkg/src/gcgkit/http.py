"""Minimal JSON-over-HTTP POST with retries (stdlib only)."""
import json
import logging
import time
import urllib.error
import urllib.request

from .errors import ClientUnavailable

log = logging.getLogger(__name__)


def post_json(url, payload, timeout=30.0, max_retries=2, backoff=0.5, error_cls=ClientUnavailable):
    body = json.dumps(payload, sort_keys=True).encode("utf-8")
    last = None
    for attempt in range(max_retries + 1):
        req = urllib.request.Request(
            url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            last = exc
            log.warning("POST %s failed (attempt %d/%d): %s", url, attempt + 1, max_retries + 1, exc)
            if attempt < max_retries and backoff > 0:
                time.sleep(backoff * (2 ** attempt))
    raise error_cls(f"{url} unavailable after {max_retries + 1} attempts: {last}")
