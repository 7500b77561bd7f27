"""Deterministic synthetic scenes and mock responders for every client role.

Everything is derived from ``(seed, image_id)`` or from the request content,
never from call order, so runs are reproducible across worker counts and
across interrupted-then-resumed executions.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ..errors import ClientUnavailable
from ..masks import BBox, mask_from_box
from ..scene_graph import LANDMARK_TAXONOMY, extract_checklist
from .clients import Clients, MockClient
from .levels import encode_depth

VOCAB = ("dog", "cat", "person", "car", "tree", "bench", "bicycle", "umbrella", "bird", "boat",
         "lamp", "table")
COLORS = ("red", "blue", "green", "white", "black", "yellow", "brown")
PREDICATES = ("next to", "behind", "in front of", "near")
MODEL_IDS = ("det_a", "det_b", "det_c", "det_d")
HALLUCINATION = "A unicorn watches from afar."


def _rng(*parts) -> np.random.Generator:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


@dataclass(frozen=True)
class SceneObject:
    label: str
    bbox: BBox
    depth: float
    seen_by: tuple


def synthetic_manifest(n: int, seed: int = 0, width: int = 64, height: int = 48) -> List[dict]:
    return [{"image_id": f"img{seed}_{k:05d}", "path": f"img{seed}_{k:05d}.ppm",
             "width": width, "height": height} for k in range(n)]


class SyntheticWorld:
    """A few labelled boxes per image; each is seen by a random subset of detectors."""

    def __init__(self, seed: int = 0, hallucinate: float = 0.0,
                 failing_detector: Optional[Dict[str, str]] = None):
        self.seed = seed
        self.hallucinate = hallucinate
        # image_id -> model id that always fails for that image
        self.failing_detector = dict(failing_detector or {})
        self._cache: Dict[str, List[SceneObject]] = {}

    def scene(self, image: dict) -> List[SceneObject]:
        key = image["image_id"]
        if key not in self._cache:
            self._cache[key] = self._make_scene(image)
        return self._cache[key]

    def _make_scene(self, image) -> List[SceneObject]:
        rng = _rng(self.seed, "scene", image["image_id"])
        w, h = image["width"], image["height"]
        n = int(rng.integers(2, 6))
        labels = rng.choice(len(VOCAB), size=n, replace=False)
        objs = []
        for k in range(n):
            bw = int(rng.integers(max(4, w // 6), max(5, w // 2)))
            bh = int(rng.integers(max(4, h // 6), max(5, h // 2)))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            # the first two objects are always fully corroborated
            if k < 2:
                seen = MODEL_IDS
            else:
                m = int(rng.integers(1, len(MODEL_IDS) + 1))
                seen = tuple(sorted(rng.choice(MODEL_IDS, size=m, replace=False).tolist()))
            objs.append(SceneObject(VOCAB[labels[k]], BBox(x0, y0, x0 + bw, y0 + bh),
                                    round(float(rng.uniform(0.05, 0.95)), 4), seen))
        return objs

    # -- responders ---------------------------------------------------------

    def detector(self, req):
        model = req["model_id"]
        if self.failing_detector.get(req["image_id"]) == model:
            raise ClientUnavailable(f"detector {model} unavailable for {req['image_id']}")
        rng = _rng(self.seed, "det", model, req["image_id"])
        w, h = req["width"], req["height"]
        dets = []
        for o in self.scene(req):
            if model not in o.seen_by:
                continue
            j = rng.integers(-1, 2, size=4)
            b = o.bbox
            x0 = int(np.clip(b.x_min + j[0], 0, w - 2))
            y0 = int(np.clip(b.y_min + j[1], 0, h - 2))
            x1 = int(np.clip(b.x_max + j[2], x0 + 1, w))
            y1 = int(np.clip(b.y_max + j[3], y0 + 1, h))
            dets.append({"bbox": [x0, y0, x1, y1], "score": round(float(rng.uniform(0.3, 1.0)), 4),
                         "label": o.label})
        # one spurious low-score box per model
        x0 = int(rng.integers(0, w - 3))
        y0 = int(rng.integers(0, h - 3))
        dets.append({"bbox": [x0, y0, x0 + 2, y0 + 2], "score": 0.05, "label": "clutter"})
        return {"detections": dets}

    def segmenter(self, req):
        w, h = req["width"], req["height"]
        return {"masks": [mask_from_box(BBox.from_list(b), w, h).to_json() for b in req["boxes"]]}

    def region_captioner(self, req):
        out = {}
        for r in req["regions"]:
            rng = _rng(self.seed, "attr", req["image_id"], r["bbox"])
            out[str(r["id"])] = [str(rng.choice(COLORS))]
        return {"descriptions": out}

    def depth_estimator(self, req):
        w, h = req["width"], req["height"]
        vals = np.tile(np.linspace(0.0, 0.04, h, dtype=np.float64)[:, None], (1, w))
        # paint far objects first so nearer ones occlude them
        for o in sorted(self.scene(req), key=lambda o: o.depth):
            b = o.bbox
            vals[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = o.depth
        return encode_depth(vals)

    def image_captioner(self, req):
        objs = self.scene(req)
        rng = _rng(self.seed, "cap", req["image_id"])
        caps = [f"a {objs[0].label} {PREDICATES[int(rng.integers(len(PREDICATES)))]} a {objs[1].label}",
                f"a {objs[-1].label} in the scene"]
        return {"captions": caps}

    def phrase_grounder(self, req):
        phrases = []
        for o in self.scene(req):
            p = f"a {o.label}"
            if re.search(r"\b" + re.escape(p) + r"\b", req["caption"]):
                phrases.append((req["caption"].find(p), {"phrase": p, "bbox": o.bbox.as_list()}))
        phrases.sort(key=lambda t: t[0])
        return {"phrases": [p for _, p in phrases]}

    def landmark_classifier(self, req):
        rng = _rng(self.seed, "landmark", req["image_id"])
        primary = sorted(LANDMARK_TAXONOMY)[int(rng.integers(len(LANDMARK_TAXONOMY)))]
        fine = LANDMARK_TAXONOMY[primary][int(rng.integers(len(LANDMARK_TAXONOMY[primary])))]
        return {"primary": primary, "fine": fine}

    def text_llm(self, req):
        task = req.get("task")
        prompt = req["prompt"]
        if task == "checklist":
            desc = prompt.split("Description:", 1)[-1]
            return {"text": "\n".join(extract_checklist(desc))}
        if task == "extra_context":
            m = re.search(r"^Landmark: (.+)$", prompt, re.M)
            where = m.group(1).split(" / ")[-1].lower() if m else "place"
            return {"text": f"This looks like a typical {where}. People pass through it every day."}
        return {"text": dense_caption_from_prompt(prompt, self.seed, self.hallucinate)}

    def clients(self) -> Clients:
        c = Clients()
        for m in MODEL_IDS:
            c.detectors[m] = MockClient("detector", responder=self.detector)
        for role in ("segmenter", "region_captioner", "depth_estimator", "image_captioner",
                     "phrase_grounder", "landmark_classifier", "text_llm"):
            setattr(c, role, MockClient(role, responder=getattr(self, role)))
        return c


_OBJ_LINE = re.compile(r"^  (\d+): ([^\[(,\n]+)", re.M)


def dense_caption_from_prompt(prompt: str, seed: int = 0, hallucinate: float = 0.0) -> str:
    """Tag every listed object once; optionally add an ungrounded object the
    first time (no feedback in the prompt yet)."""
    head = re.split(r"^(?:Relationships|Landmark|Scene descriptions|Examples):", prompt, 1, re.M)[0]
    objs = [(int(m.group(1)), m.group(2).strip()) for m in _OBJ_LINE.finditer(head)]
    if not objs:
        text = "An empty scene."
    else:
        parts = [f"[[{i}|a {label}]]" for i, label in objs]
        text = parts[0][:2] + parts[0][2:].replace("|a ", "|A ", 1)
        if len(parts) > 1:
            text += " is nearest, with " + ", ".join(parts[1:]) + " further back."
        else:
            text += " fills the view."
    if hallucinate > 0 and "Feedback:" not in prompt:
        if _rng(seed, "halluc", head).uniform() < hallucinate:
            text += " " + HALLUCINATION
    return text
