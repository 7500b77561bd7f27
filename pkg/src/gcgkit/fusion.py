"""Level-1 object fusion: per-model NMS, cross-model corroboration voting,
attributes, depth and spatial layers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyRegion, MissingDepth, SchemaError, UnknownObjectId
from .masks import BBox, BinaryMask, ScoredDetection, box_iou_matrix, greedy_nms_indices

log = logging.getLogger(__name__)

LAYERS = ("immediate_foreground", "foreground", "midground", "background")
MIN_OTHER_MODELS = 2


@dataclass(frozen=True)
class ModelDetections:
    model_id: str
    detections: Sequence[ScoredDetection]


@dataclass(frozen=True)
class DepthMap:
    """Relative depth per pixel, larger = nearer. ``values`` has shape (height, width)."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.height, self.width):
            raise ValueError(f"depth values shape {v.shape} != ({self.height}, {self.width})")
        if not np.all(np.isfinite(v)):
            raise ValueError("depth values must be finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class FusedObject:
    object_id: int
    bbox: BBox
    labels: tuple
    score: float
    corroborators: tuple
    mask: Optional[BinaryMask] = None
    attributes: tuple = ()
    depth_med: Optional[float] = None
    layer: Optional[str] = None
    members: tuple = field(default=(), compare=False)

    def to_json(self) -> dict:
        return {
            "id": self.object_id,
            "bbox": list(self.bbox.as_list()),
            "mask": None if self.mask is None else self.mask.to_json(),
            "labels": list(self.labels),
            "attributes": list(self.attributes),
            "score": self.score,
            "corroborators": list(self.corroborators),
            "depth": self.depth_med,
            "layer": self.layer,
        }

    @classmethod
    def from_json(cls, obj) -> "FusedObject":
        try:
            layer = obj.get("layer")
            if layer is not None and layer not in LAYERS:
                raise SchemaError(f"unknown layer {layer!r}")
            return cls(
                object_id=int(obj["id"]),
                bbox=BBox.from_list(obj["bbox"]),
                labels=tuple(obj["labels"]),
                score=float(obj["score"]),
                corroborators=tuple(obj["corroborators"]),
                mask=None if obj.get("mask") is None else BinaryMask.from_json(obj["mask"]),
                attributes=tuple(obj.get("attributes", ())),
                depth_med=obj.get("depth"),
                layer=layer,
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad object record: {exc}") from exc


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def fuse(all_models: Sequence[ModelDetections], tau_nms: float = 0.5, tau_match: float = 0.5,
         diagnostics: Optional[list] = None) -> List[FusedObject]:
    """Fuse detections from several models.

    A post-NMS detection survives iff detections from at least two *other*
    models overlap it with box IoU >= ``tau_match``.  Survivors linked by such
    cross-model overlaps form one object, represented by its highest-scoring
    member; labels are unioned.
    """
    for name, v in (("tau_nms", tau_nms), ("tau_match", tau_match)):
        if not 0.0 < v <= 1.0:
            raise ValueError(f"{name} must lie in (0, 1]")
    ids = [m.model_id for m in all_models]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model ids: {ids}")
    if len(ids) < MIN_OTHER_MODELS + 1:
        msg = f"fusion needs at least {MIN_OTHER_MODELS + 1} models, got {len(ids)}"
        log.warning(msg)
        if diagnostics is not None:
            diagnostics.append(msg)
        return []

    # survivors keyed by (model_id, index in the model's input list)
    surv = []
    for md in sorted(all_models, key=lambda m: m.model_id):
        dets = list(md.detections)
        for k in greedy_nms_indices(dets, tau_nms):
            surv.append((md.model_id, k, dets[k]))
    if not surv:
        return []
    ious = box_iou_matrix([s[2].bbox for s in surv], [s[2].bbox for s in surv])
    models = np.array([s[0] for s in surv], dtype=object)
    match = (ious >= tau_match) & (models[:, None] != models[None, :])

    kept = []
    for i in range(len(surv)):
        others = {models[j] for j in np.flatnonzero(match[i])}
        if len(others) >= MIN_OTHER_MODELS:
            kept.append(i)
    if not kept:
        return []
    uf = _UnionFind(len(kept))
    for a in range(len(kept)):
        for b in range(a + 1, len(kept)):
            if match[kept[a], kept[b]]:
                uf.union(a, b)
    clusters = {}
    for a, i in enumerate(kept):
        clusters.setdefault(uf.find(a), []).append(i)

    def rank(i):
        model_id, idx, d = surv[i]
        return (-d.score, model_id, idx)

    reps = []
    for members in clusters.values():
        members.sort(key=rank)
        reps.append(members)
    reps.sort(key=lambda ms: rank(ms[0]))

    out = []
    for oid, members in enumerate(reps):
        model_id, idx, rep = surv[members[0]]
        out.append(FusedObject(
            object_id=oid,
            bbox=rep.bbox,
            labels=tuple(sorted({surv[i][2].label for i in members})),
            score=float(rep.score),
            corroborators=tuple(sorted({surv[i][0] for i in members}
                                       | {models[j] for i in members for j in np.flatnonzero(match[i])})),
            mask=rep.mask,
            members=tuple((surv[i][0], surv[i][1]) for i in members),
        ))
    return out


def _dedup_ci(items):
    seen = set()
    out = []
    for it in items:
        key = it.strip().lower()
        if key and key not in seen:
            seen.add(key)
            out.append(it.strip())
    return out


def attach_attributes(objects: Sequence[FusedObject],
                      region_descriptions: Mapping) -> List[FusedObject]:
    """Append attribute strings per object, dropping case-insensitive repeats."""
    by_key = {str(o.object_id): o for o in objects}
    for k in region_descriptions:
        if str(k) not in by_key:
            raise UnknownObjectId(f"no object with id {k!r}")
    extra = {}
    for k, v in region_descriptions.items():
        extra.setdefault(str(k), []).extend(v)
    return [replace(o, attributes=tuple(_dedup_ci(list(o.attributes) + extra.get(str(o.object_id), []))))
            for o in objects]


def attach_depth(objects: Sequence[FusedObject], depth: DepthMap) -> List[FusedObject]:
    """Median depth over each object's mask, or over its box when it has none."""
    out = []
    for o in objects:
        if o.mask is not None:
            if (o.mask.width, o.mask.height) != (depth.width, depth.height):
                raise ValueError("object mask and depth map sizes differ")
            region = depth.values[o.mask.to_dense().astype(bool)]
        else:
            x0 = max(0, int(np.ceil(o.bbox.x_min)))
            y0 = max(0, int(np.ceil(o.bbox.y_min)))
            x1 = min(depth.width, int(np.ceil(o.bbox.x_max)))
            y1 = min(depth.height, int(np.ceil(o.bbox.y_max)))
            region = depth.values[y0:y1, x0:x1] if x0 < x1 and y0 < y1 else np.zeros(0)
        if region.size == 0:
            raise EmptyRegion(f"object {o.object_id} covers no depth pixels")
        out.append(replace(o, depth_med=float(np.median(region))))
    return out


def assign_layers(objects: Sequence[FusedObject]) -> List[FusedObject]:
    """Rank-quartile layering: nearest quarter is the immediate foreground.

    Objects with equal depth share the layer of the nearest rank in their tie group.
    """
    for o in objects:
        if o.depth_med is None:
            raise MissingDepth(f"object {o.object_id} has no depth")
    n = len(objects)
    order = sorted(range(n), key=lambda i: (-objects[i].depth_med, i))
    layer_of = {}
    first_rank = 0
    for r, i in enumerate(order):
        if r == 0 or objects[i].depth_med != objects[order[r - 1]].depth_med:
            first_rank = r
        layer_of[i] = LAYERS[min(3, (4 * first_rank) // n)]
    return [replace(o, layer=layer_of[i]) for i, o in enumerate(objects)]
