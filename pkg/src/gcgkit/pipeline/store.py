"""Checkpoint store: per-image state files plus append-only JSONL record shards.

Commit order is shard line first (flushed and fsynced), then an atomic
replace of the image's state file.  A crash between the two leaves an
orphaned shard line that no state references; the state files therefore
always describe a downward-closed set of completed levels.
"""
from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from .clients import canonical_json, content_hash


@dataclass
class StageState:
    image_id: str
    completed_levels: list = field(default_factory=list)
    record_hash: Optional[str] = None
    updated_at: float = 0.0
    level_hashes: Dict[str, str] = field(default_factory=dict)
    input_hashes: Dict[str, str] = field(default_factory=dict)
    failed: Optional[dict] = None

    def is_complete(self, level: int) -> bool:
        return level in self.completed_levels

    def check(self):
        lv = sorted(self.completed_levels)
        if lv != list(range(1, len(lv) + 1)):
            raise ValueError(f"{self.image_id}: completed levels {lv} are not downward closed")

    def to_json(self):
        return {
            "image_id": self.image_id,
            "completed_levels": sorted(self.completed_levels),
            "record_hash": self.record_hash,
            "updated_at": self.updated_at,
            "level_hashes": self.level_hashes,
            "input_hashes": self.input_hashes,
            "failed": self.failed,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["image_id"], list(obj.get("completed_levels", [])), obj.get("record_hash"),
                   obj.get("updated_at", 0.0), dict(obj.get("level_hashes", {})),
                   dict(obj.get("input_hashes", {})), obj.get("failed"))


def _safe_name(image_id: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9._-]", "_", image_id)[:80]
    return f"{slug}-{content_hash(image_id)[:10]}"


class CheckpointStore:
    def __init__(self, root):
        self.root = Path(root)
        self.state_dir = self.root / "state"
        self.shard_dir = self.root / "shards"
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.shard_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._records: Dict[str, dict] = {}
        self._load_shards()

    def _load_shards(self):
        for f in sorted(self.shard_dir.glob("level*.jsonl")):
            with open(f, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        row = json.loads(line)
                    except json.JSONDecodeError:
                        continue  # torn final line after a crash
                    self._records[row["hash"]] = row["record"]

    def _state_path(self, image_id: str) -> Path:
        return self.state_dir / (_safe_name(image_id) + ".json")

    def state(self, image_id: str) -> StageState:
        p = self._state_path(image_id)
        if not p.exists():
            return StageState(image_id)
        return StageState.from_json(json.loads(p.read_text(encoding="utf-8")))

    def _write_state(self, st: StageState):
        st.check()
        st.updated_at = time.time()
        p = self._state_path(st.image_id)
        tmp = p.with_name(p.name + f".tmp{threading.get_ident()}")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(st.to_json(), sort_keys=True))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, p)

    def record_at(self, image_id: str, level: int) -> Optional[dict]:
        st = self.state(image_id)
        h = st.level_hashes.get(str(level))
        if h is None or not st.is_complete(level):
            return None
        return json.loads(canonical_json(self._records[h]))

    def latest(self, image_id: str) -> Optional[dict]:
        st = self.state(image_id)
        if not st.completed_levels:
            return None
        return self.record_at(image_id, max(st.completed_levels))

    def commit(self, image_id: str, level: int, record: dict, input_hash: str):
        """Persist ``record`` as the output of ``level``; higher levels are invalidated."""
        h = content_hash(record)
        line = canonical_json({"image_id": image_id, "level": level, "hash": h, "record": record})
        with self._lock:
            with open(self.shard_dir / f"level{level}.jsonl", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._records[h] = json.loads(canonical_json(record))
            st = self.state(image_id)
            st.completed_levels = list(range(1, level + 1))
            st.level_hashes = {k: v for k, v in st.level_hashes.items() if int(k) < level}
            st.input_hashes = {k: v for k, v in st.input_hashes.items() if int(k) < level}
            st.level_hashes[str(level)] = h
            st.input_hashes[str(level)] = input_hash
            st.record_hash = h
            st.failed = None
            self._write_state(st)

    def mark_failed(self, image_id: str, level: int, error: str):
        with self._lock:
            st = self.state(image_id)
            st.failed = {"level": level, "error": error}
            self._write_state(st)
