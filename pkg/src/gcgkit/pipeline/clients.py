"""External model clients: HTTP services and hash-keyed mock replays.

Every client is a callable ``client(request: dict) -> dict``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

from ..errors import ClientUnavailable
from ..http import post_json

ROLES = (
    "detector",
    "region_captioner",
    "image_captioner",
    "landmark_classifier",
    "phrase_grounder",
    "depth_estimator",
    "segmenter",
    "text_llm",
    "embedder",
)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def request_key(role: str, request: dict) -> str:
    return content_hash({"role": role, "request": request})


class ServiceClient:
    """POST ``{endpoint}/{role}`` with a JSON body; retried on failure."""

    def __init__(self, role: str, endpoint: str, timeout: float = 60.0, max_retries: int = 2,
                 backoff: float = 0.5, max_concurrency: Optional[int] = None,
                 error_cls=ClientUnavailable):
        if role not in ROLES:
            raise ValueError(f"unknown client role {role!r}")
        self.role = role
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.error_cls = error_cls
        self._sem = threading.BoundedSemaphore(max_concurrency) if max_concurrency else None

    def __call__(self, request: dict) -> dict:
        url = f"{self.endpoint}/{self.role}"
        if self._sem is None:
            return post_json(url, request, self.timeout, self.max_retries, self.backoff, self.error_cls)
        with self._sem:
            return post_json(url, request, self.timeout, self.max_retries, self.backoff, self.error_cls)


class MockClient:
    """Replays canned responses keyed by the content hash of the request.

    Unknown requests go to ``responder`` when given, otherwise the call fails
    with ``ClientUnavailable``.  Every answered request is remembered so the
    exchange can be written back out as a fixture file.
    """

    def __init__(self, role: str, table: Optional[Dict[str, dict]] = None,
                 responder: Optional[Callable[[dict], dict]] = None):
        self.role = role
        self.table = dict(table or {})
        self.responder = responder
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, request: dict) -> dict:
        key = request_key(self.role, request)
        with self._lock:
            self.calls += 1
            hit = self.table.get(key)
        if hit is not None:
            return copy.deepcopy(hit)
        if self.responder is None:
            raise ClientUnavailable(f"mock {self.role}: no canned response for request {key[:12]}")
        resp = self.responder(request)
        with self._lock:
            self.table[key] = copy.deepcopy(resp)
        return resp

    @classmethod
    def from_fixture(cls, role: str, path, responder=None) -> "MockClient":
        table = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    row = json.loads(line)
                    if row.get("role", role) == role:
                        table[row["key"]] = row["response"]
        return cls(role, table, responder)

    def dump(self, path):
        """Write the table, keeping entries already recorded in ``path``."""
        table = {}
        if Path(path).exists():
            table = MockClient.from_fixture(self.role, path).table
        table.update(self.table)
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(table):
                fh.write(canonical_json({"role": self.role, "key": key,
                                         "response": table[key]}) + "\n")


@dataclass
class Clients:
    """One client per role; ``detectors`` maps model id to client."""

    detectors: Dict[str, Callable] = field(default_factory=dict)
    region_captioner: Optional[Callable] = None
    image_captioner: Optional[Callable] = None
    landmark_classifier: Optional[Callable] = None
    phrase_grounder: Optional[Callable] = None
    depth_estimator: Optional[Callable] = None
    segmenter: Optional[Callable] = None
    text_llm: Optional[Callable] = None

    def all(self):
        out = {f"detector/{k}": v for k, v in sorted(self.detectors.items())}
        for role in ROLES[1:-1]:
            c = getattr(self, role)
            if c is not None:
                out[role] = c
        return out

    def dump_fixtures(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, c in self.all().items():
            if isinstance(c, MockClient):
                c.dump(d / (name.replace("/", "__") + ".jsonl"))

    @classmethod
    def from_fixtures(cls, directory) -> "Clients":
        d = Path(directory)
        out = cls()
        for f in sorted(d.glob("*.jsonl")):
            name = f.stem
            if name.startswith("detector__"):
                out.detectors[name[len("detector__"):]] = MockClient.from_fixture("detector", f)
            elif name in ROLES:
                setattr(out, name, MockClient.from_fixture(name, f))
        return out


def clients_from_env(timeout: float = 60.0, max_retries: int = 2, backoff: float = 0.5,
                     max_concurrency: Optional[int] = None, env=None) -> Clients:
    """Build HTTP clients from ``GCGKIT_{ROLE}_ENDPOINT`` variables.

    ``GCGKIT_DETECTOR_ENDPOINT`` holds ``model_id=url`` pairs separated by commas.
    """
    env = os.environ if env is None else env
    out = Clients()
    det = env.get("GCGKIT_DETECTOR_ENDPOINT", "")
    for part in filter(None, (p.strip() for p in det.split(","))):
        if "=" not in part:
            raise ValueError("GCGKIT_DETECTOR_ENDPOINT entries must look like model_id=url")
        mid, url = part.split("=", 1)
        out.detectors[mid.strip()] = ServiceClient("detector", url.strip(), timeout, max_retries,
                                                   backoff, max_concurrency)
    for role in ROLES[1:-1]:
        url = env.get(f"GCGKIT_{role.upper()}_ENDPOINT")
        if url:
            setattr(out, role, ServiceClient(role, url, timeout, max_retries, backoff, max_concurrency))
    return out
