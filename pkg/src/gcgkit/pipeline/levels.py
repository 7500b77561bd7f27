"""The four annotation levels and the corpus runner."""
from __future__ import annotations

import base64
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..errors import ClientUnavailable, GcgError, PreconditionViolated, SchemaError
from ..fusion import (
    LAYERS,
    DepthMap,
    FusedObject,
    ModelDetections,
    assign_layers,
    attach_attributes,
    attach_depth,
    fuse,
)
from ..gcg_format import GroundedCaption
from ..masks import BBox, BinaryMask, ScoredDetection, mask_from_box
from ..scene_graph import (
    Landmark,
    Relationship,
    SceneGraph,
    bind_dense_caption,
    build_graph,
    caption_from_json,
    caption_to_json,
    extract_checklist,
    ground_caption_phrases,
    regeneration_feedback,
    render_prompt,
    verify_caption,
)
from .clients import Clients, canonical_json, content_hash
from .store import CheckpointStore

log = logging.getLogger(__name__)

LEVEL_FIELDS = {
    1: ("objects", "level1_notes"),
    2: ("relationships", "landmark", "short_captions", "level2_notes"),
    3: ("dense_caption", "verification", "verification_status"),
    4: ("extra_context",),
}
META_FIELDS = ("image_id", "path", "width", "height")

CHECKLIST_PROMPT = (
    "List, one per line, every physical object mentioned in the following image description. "
    "Think step by step, then output only the list.\nDescription: "
)


class LevelFailed(GcgError, RuntimeError):
    """A level could not produce a valid result for one image."""


@dataclass
class PipelineConfig:
    tau_nms: float = 0.5
    tau_match: float = 0.5
    tau_phrase: float = 0.5
    max_caption_retries: int = 2
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    checklist: str = "llm"  # or "chunker"
    box_mask_fallback: bool = True

    def level_key(self, level: int) -> dict:
        # only the settings that change a level's output enter its input hash
        if level == 1:
            return {"tau_nms": self.tau_nms, "tau_match": self.tau_match,
                    "box_mask_fallback": self.box_mask_fallback}
        if level == 2:
            return {"tau_phrase": self.tau_phrase}
        if level == 3:
            return {"max_caption_retries": self.max_caption_retries, "checklist": self.checklist}
        return {}


# ---------------------------------------------------------------------------
# helpers


def _image_request(rec: dict) -> dict:
    return {k: rec[k] for k in META_FIELDS if k in rec}


def decode_depth(resp: dict, width: int, height: int) -> DepthMap:
    if "depth_file" in resp:
        values = np.load(resp["depth_file"])
    else:
        raw = base64.b64decode(resp["depth"])
        dtype = np.dtype(resp.get("dtype", "float32")).newbyteorder("<")
        shape = resp.get("shape", [height, width])
        values = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return DepthMap(width, height, np.asarray(values, dtype=np.float64))


def encode_depth(values: np.ndarray) -> dict:
    v = np.ascontiguousarray(values, dtype="<f4")
    return {"depth": base64.b64encode(v.tobytes()).decode("ascii"),
            "shape": list(v.shape), "dtype": "float32"}


def _objects(rec) -> List[FusedObject]:
    return [FusedObject.from_json(o) for o in rec.get("objects", [])]


def graph_of(rec: dict) -> SceneGraph:
    lm = rec.get("landmark")
    g = build_graph(
        _objects(rec),
        [Relationship.from_json(r) for r in rec.get("relationships", [])],
        None if lm is None else Landmark(lm["primary"], lm["fine"]),
        rec.get("short_captions", []),
        _image_request(rec),
    )
    dense = rec.get("dense_caption")
    if dense is not None:
        g = replace(g, dense_caption=caption_from_json(dense))
    return g


# ---------------------------------------------------------------------------
# levels


def level1(rec: dict, clients: Clients, cfg: PipelineConfig) -> dict:
    req = _image_request(rec)
    w, h = rec["width"], rec["height"]
    per_model = []
    for model_id in sorted(clients.detectors):
        resp = clients.detectors[model_id](dict(req, model_id=model_id))
        dets = []
        for d in resp.get("detections", []):
            mask = d.get("mask")
            dets.append(ScoredDetection(BBox.from_list(d["bbox"]), float(d["score"]), model_id,
                                        d["label"], None if mask is None else BinaryMask.from_json(mask)))
        per_model.append(ModelDetections(model_id, dets))
    notes = []
    objects = fuse(per_model, cfg.tau_nms, cfg.tau_match, diagnostics=notes)

    if objects:
        need = [o for o in objects if o.mask is None]
        masks = {}
        if need and clients.segmenter is not None:
            resp = clients.segmenter(dict(req, boxes=[o.bbox.as_list() for o in need]))
            got = resp.get("masks", [])
            if len(got) != len(need):
                raise SchemaError("segmenter returned the wrong number of masks")
            masks = {o.object_id: BinaryMask.from_json(m) for o, m in zip(need, got)}
        elif need:
            if not cfg.box_mask_fallback:
                raise ClientUnavailable("no segmenter configured and box fallback disabled")
            notes.append("masks derived from boxes (no segmenter)")
            masks = {o.object_id: mask_from_box(o.bbox, w, h) for o in need}
        objects = [o if o.mask is not None else replace(o, mask=masks[o.object_id]) for o in objects]

        if clients.region_captioner is not None:
            resp = clients.region_captioner(dict(req, regions=[
                {"id": o.object_id, "bbox": o.bbox.as_list()} for o in objects]))
            objects = attach_attributes(objects, resp.get("descriptions", {}))
        if clients.depth_estimator is None:
            raise ClientUnavailable("no depth estimator configured")
        depth = decode_depth(clients.depth_estimator(req), w, h)
        objects = assign_layers(attach_depth(objects, depth))

    out = dict(rec)
    out["objects"] = [o.to_json() for o in objects]
    out["level1_notes"] = notes
    return out


def level2(rec: dict, clients: Clients, cfg: PipelineConfig) -> dict:
    req = _image_request(rec)
    objects = _objects(rec)
    if clients.image_captioner is None or clients.landmark_classifier is None:
        raise ClientUnavailable("level 2 needs an image captioner and a landmark classifier")
    captions = [c.strip() for c in clients.image_captioner(req).get("captions", []) if c.strip()]
    rels = []
    notes = []
    for k, cap in enumerate(captions):
        if clients.phrase_grounder is None:
            break
        resp = clients.phrase_grounder(dict(req, caption=cap))
        pairs = [(p["phrase"], BBox.from_list(p["bbox"])) for p in resp.get("phrases", [])]
        rels.extend(ground_caption_phrases(cap, pairs, objects, cfg.tau_phrase, k, notes))
    lm = clients.landmark_classifier(req)
    landmark = Landmark(lm["primary"], lm["fine"])
    out = dict(rec)
    out["relationships"] = [r.to_json() for r in rels]
    out["landmark"] = landmark.to_json()
    out["short_captions"] = captions
    out["level2_notes"] = notes
    return out


def _checklist(caption: GroundedCaption, clients: Clients, cfg: PipelineConfig) -> List[str]:
    if cfg.checklist == "chunker" or clients.text_llm is None:
        return extract_checklist(caption.plain_text)
    resp = clients.text_llm({"task": "checklist", "prompt": CHECKLIST_PROMPT + caption.plain_text})
    items = []
    for line in resp.get("text", "").splitlines():
        line = line.strip().lstrip("-*0123456789.) ").strip()
        if line:
            items.append(line)
    return items


def level3(rec: dict, clients: Clients, cfg: PipelineConfig) -> dict:
    """Dense caption with verify-and-regenerate; keeps the last caption when
    every attempt is rejected."""
    if clients.text_llm is None:
        raise ClientUnavailable("level 3 needs a text LLM")
    graph = graph_of(rec)
    base = render_prompt(graph, "dense_caption")
    prompt = base
    attempts = []
    caption = None
    status = None
    for attempt in range(cfg.max_caption_retries + 1):
        text = clients.text_llm({"task": "dense_caption", "prompt": prompt}).get("text", "")
        try:
            cand = bind_dense_caption(text, graph)
        except (GcgError, ValueError) as exc:
            attempts.append({"attempt": attempt + 1, "status": "Malformed", "missing": [],
                             "caption": text, "error": str(exc)})
            prompt = base + "\nFeedback:\nThe previous answer did not follow the [[ids|phrase]] " \
                            "tag syntax with valid object ids. Regenerate it.\n"
            continue
        caption = cand
        outcome = verify_caption(_checklist(cand, clients, cfg), graph)
        status = outcome.status
        attempts.append({"attempt": attempt + 1, "status": outcome.status,
                         "missing": list(outcome.missing), "caption": cand.plain_text})
        if outcome.status == "Verified":
            break
        prompt = base + "\nFeedback:\n" + regeneration_feedback(outcome) + "\n"
    if caption is None:
        raise LevelFailed("no attempt produced a well-formed dense caption")
    out = dict(rec)
    out["dense_caption"] = caption_to_json(caption)
    out["verification"] = attempts
    out["verification_status"] = status
    return out


def level4(rec: dict, clients: Clients, cfg: PipelineConfig) -> dict:
    if clients.text_llm is None:
        raise ClientUnavailable("level 4 needs a text LLM")
    prompt = render_prompt(graph_of(rec), "extra_context")
    text = clients.text_llm({"task": "extra_context", "prompt": prompt}).get("text", "")
    out = dict(rec)
    out["extra_context"] = text.strip()
    return out


LEVELS = {1: level1, 2: level2, 3: level3, 4: level4}


# ---------------------------------------------------------------------------
# validation


def validate_grand_record(rec: dict) -> None:
    """Schema and invariant check of a (possibly partial) GranD record."""
    for k in META_FIELDS:
        if k == "path":
            continue
        if k not in rec:
            raise SchemaError(f"record missing {k!r}")
    objs = _objects(rec)
    ids = {o.object_id for o in objs}
    for o in objs:
        if len(o.corroborators) < 3:
            raise SchemaError(f"object {o.object_id} has fewer than 3 corroborating models")
        if not 0.0 <= o.score <= 1.0:
            raise SchemaError(f"object {o.object_id} score out of range")
        if o.layer is not None and o.layer not in LAYERS:
            raise SchemaError(f"object {o.object_id} has bad layer")
        if o.mask is not None and (o.mask.width, o.mask.height) != (rec["width"], rec["height"]):
            raise SchemaError(f"object {o.object_id} mask size mismatch")
    for r in rec.get("relationships", []):
        rel = Relationship.from_json(r)
        for i in rel.subject_ids + rel.object_ids:
            if i not in ids:
                raise SchemaError(f"relationship references unknown object {i}")
    if rec.get("landmark") is not None:
        try:
            Landmark(rec["landmark"]["primary"], rec["landmark"]["fine"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad landmark: {exc}") from exc
    dense = rec.get("dense_caption")
    log_ = rec.get("verification") or []
    if (dense is not None) != bool(log_):
        raise SchemaError("verification log must be non-empty exactly when a dense caption exists")
    if dense is not None:
        try:
            cap = caption_from_json(dense).validate()
        except ValueError as exc:
            raise SchemaError(f"bad dense caption: {exc}") from exc
        for m in cap.masks:
            if (m.width, m.height) != (rec["width"], rec["height"]):
                raise SchemaError("dense caption mask size mismatch")


# ---------------------------------------------------------------------------
# running


def read_manifest(path) -> List[dict]:
    out = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entry = {"image_id": str(obj["image_id"]), "path": obj.get("path", ""),
                         "width": int(obj["width"]), "height": int(obj["height"])}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad manifest entry: {exc}") from exc
            if entry["width"] <= 0 or entry["height"] <= 0:
                raise SchemaError(f"{path}:{lineno}: image size must be positive")
            if entry["image_id"] in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate image_id {entry['image_id']!r}")
            seen.add(entry["image_id"])
            out.append(entry)
    return out


def _input_for(level: int, image: dict, store: CheckpointStore):
    if level == 1:
        return {k: image[k] for k in META_FIELDS}
    return store.record_at(image["image_id"], level - 1)


def _run_one(level, image, clients, store, cfg):
    image_id = image["image_id"]
    prev = _input_for(level, image, store)
    in_hash = content_hash({"level": level, "input": prev, "config": cfg.level_key(level)})
    st = store.state(image_id)
    if st.is_complete(level) and st.input_hashes.get(str(level)) == in_hash:
        return "skipped", store.record_at(image_id, level), None
    try:
        rec = LEVELS[level](prev, clients, cfg)
        rec = json.loads(canonical_json(rec))
        validate_grand_record(rec)
    except (GcgError, ValueError, KeyError, TypeError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
        log.warning("image %s failed at level %d: %s", image_id, level, msg)
        store.mark_failed(image_id, level, msg)
        return "failed", None, msg
    store.commit(image_id, level, rec, in_hash)
    return "done", rec, None


def run_level(level: int, images: Sequence[dict], clients: Clients, store: CheckpointStore,
              config: Optional[PipelineConfig] = None) -> List[Optional[dict]]:
    """Run one level over a batch; returns the level-``level`` record per image
    (``None`` for images that failed).

    Re-running a completed level with unchanged inputs is a no-op.
    """
    res = _run_level(level, images, clients, store, config or PipelineConfig())
    return [r[1] for r in res]


def _run_level(level, images, clients, store, cfg):
    if level not in LEVELS:
        raise ValueError(f"level must be 1..4, got {level}")
    if level > 1:
        for im in images:
            if not store.state(im["image_id"]).is_complete(level - 1):
                raise PreconditionViolated(
                    f"level {level} requested for {im['image_id']!r} before level {level - 1} completed")
    workers = max(1, int(cfg.workers))
    if workers == 1 or len(images) <= 1:
        return [_run_one(level, im, clients, store, cfg) for im in images]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(_run_one, level, im, clients, store, cfg) for im in images]
        return [f.result() for f in futs]


@dataclass
class RunReport:
    levels: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    n_images: int = 0
    n_complete: int = 0

    def to_json(self):
        return asdict(self)


def run_all(manifest: Sequence[dict], clients: Clients, store: CheckpointStore,
            config: Optional[PipelineConfig] = None, out_path=None) -> tuple:
    """Run levels 1..4 over the manifest; failures stay isolated per image.

    Writes the corpus (complete records, manifest order) to ``out_path`` when
    given and returns ``(records, report)``.
    """
    cfg = config or PipelineConfig()
    report = RunReport(n_images=len(manifest))
    active = list(manifest)
    for level in (1, 2, 3, 4):
        res = _run_level(level, active, clients, store, cfg)
        counts = {"done": 0, "skipped": 0, "failed": 0}
        nxt = []
        for im, (status, _, err) in zip(active, res):
            counts[status] += 1
            if status == "failed":
                report.failures.append({"image_id": im["image_id"], "level": level, "error": err})
            else:
                nxt.append(im)
        report.levels[str(level)] = counts
        active = nxt
    records = []
    for im in manifest:
        rec = store.record_at(im["image_id"], 4)
        if rec is not None:
            records.append(rec)
    report.n_complete = len(records)
    if out_path is not None:
        write_corpus(records, out_path)
    return records, report


def write_corpus(records, path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(canonical_json(r) + "\n")
