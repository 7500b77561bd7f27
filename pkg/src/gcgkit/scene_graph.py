"""Levels 2-4: phrase grounding to fused objects, the hierarchical scene graph,
LLM prompt rendering, dense-caption verification and mask binding."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

from .caption_metrics import tokenize
from .errors import (
    DanglingReference,
    MalformedTag,
    NotRejected,
    ParseError,
    SchemaError,
    UnknownObjectId,
)
from .fusion import LAYERS, FusedObject
from .gcg_format import GroundedCaption, bind_masks, parse_grounded, render_grounded
from .masks import BBox, BinaryMask, box_iou_matrix, mask_from_box, mask_union

log = logging.getLogger(__name__)

LANDMARK_TAXONOMY = {
    "Indoor scene": ("Living space", "Work space", "Public space", "Industrial space"),
    "Outdoor scene": ("Urban landscape", "Rural landscape", "Natural landscape"),
    "Transportation scene": ("Road", "Airport", "Train station", "Port and harbor"),
    "Sports and recreation scene": ("Sporting venue", "Recreational area", "Gym and fitness center"),
}


@dataclass(frozen=True)
class Landmark:
    primary: str
    fine: str

    def __post_init__(self):
        if self.primary not in LANDMARK_TAXONOMY:
            raise ValueError(f"unknown landmark category {self.primary!r}")
        if self.fine not in LANDMARK_TAXONOMY[self.primary]:
            raise ValueError(f"{self.fine!r} is not a sub-category of {self.primary!r}")

    def to_json(self):
        return {"primary": self.primary, "fine": self.fine}


@dataclass(frozen=True)
class Relationship:
    """Subject/object link from one short caption.

    ``object_ids`` is empty for the single-object "role" form.
    """

    subject_ids: tuple
    object_ids: tuple
    predicate: str
    source_caption: int = 0
    subject_phrase: str = ""
    object_phrase: str = ""

    def to_json(self):
        return {
            "subject_ids": list(self.subject_ids),
            "object_ids": list(self.object_ids),
            "predicate": self.predicate,
            "source_caption": self.source_caption,
            "subject_phrase": self.subject_phrase,
            "object_phrase": self.object_phrase,
        }

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(tuple(int(i) for i in obj["subject_ids"]),
                       tuple(int(i) for i in obj["object_ids"]),
                       obj["predicate"], int(obj.get("source_caption", 0)),
                       obj.get("subject_phrase", ""), obj.get("object_phrase", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad relationship: {exc}") from exc


# ---------------------------------------------------------------------------
# Level 2: phrases -> objects -> relationships

_EDGE_PUNCT = " ,.;:!?"


def _bind_box(box: BBox, objects: Sequence[FusedObject], tau: float):
    if not objects:
        return None
    ious = box_iou_matrix([box], [o.bbox for o in objects])[0]
    best = None
    for k, v in enumerate(ious):
        if v >= tau and (best is None or v > ious[best]):
            best = k
    return None if best is None else objects[best].object_id


def ground_caption_phrases(caption: str, grounded_phrases: Sequence[tuple],
                           objects: Sequence[FusedObject], tau: float = 0.5,
                           caption_index: int = 0,
                           diagnostics: Optional[list] = None) -> List[Relationship]:
    """Bind ``(phrase, box)`` pairs to fused objects and link neighbours.

    Each phrase goes to the object of highest box IoU >= ``tau``.  Consecutive
    entries with the same phrase text are one group (several boxes, several
    ids).  Adjacent bound groups become subject -> object relationships whose
    predicate is the caption text between them; a caption with a single bound
    group yields a role relationship with no object ids.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    diag = diagnostics if diagnostics is not None else []

    groups = []  # [phrase, [boxes]]
    for phrase, box in grounded_phrases:
        if groups and groups[-1][0] == phrase:
            groups[-1][1].append(box)
        else:
            groups.append([phrase, [box]])

    lower = caption.lower()
    cursor = 0
    bound = []  # (start, end, phrase, ids)
    for phrase, boxes in groups:
        start = lower.find(phrase.lower(), cursor)
        if start < 0:
            diag.append(f"phrase {phrase!r} not found in caption {caption_index}")
            continue
        end = start + len(phrase)
        ids = []
        for box in boxes:
            oid = _bind_box(box, objects, tau)
            if oid is not None and oid not in ids:
                ids.append(oid)
        if not ids:
            diag.append(f"phrase {phrase!r} matched no object at IoU >= {tau}")
            continue
        bound.append((start, end, caption[start:end], tuple(ids)))
        cursor = end

    rels = []
    if len(bound) == 1:
        s, e, phrase, ids = bound[0]
        rest = caption[e:].strip(_EDGE_PUNCT)
        if rest:
            rels.append(Relationship(ids, (), rest, caption_index, phrase, ""))
    for a, b in zip(bound, bound[1:]):
        predicate = caption[a[1]:b[0]].strip(_EDGE_PUNCT)
        if not predicate:
            diag.append(f"no predicate between {a[2]!r} and {b[2]!r}")
            continue
        rels.append(Relationship(a[3], b[3], predicate, caption_index, a[2], b[2]))
    for msg in diag:
        log.debug(msg)
    return rels


# ---------------------------------------------------------------------------
# Level 3: the graph


@dataclass(frozen=True)
class SceneGraph:
    image: dict
    objects: tuple
    relationships: tuple
    landmark: Optional[Landmark]
    short_captions: tuple
    layers: dict
    dense_caption: Optional[GroundedCaption] = None
    extra_context: Optional[str] = None

    def object(self, oid: int) -> FusedObject:
        for o in self.objects:
            if o.object_id == oid:
                return o
        raise UnknownObjectId(f"no object with id {oid}")

    def to_json(self) -> dict:
        return {
            "objects": [o.to_json() for o in self.objects],
            "relationships": [r.to_json() for r in self.relationships],
            "landmark": None if self.landmark is None else self.landmark.to_json(),
            "short_captions": list(self.short_captions),
            "layers": {k: list(v) for k, v in self.layers.items()},
            "dense_caption": None if self.dense_caption is None else caption_to_json(self.dense_caption),
            "extra_context": self.extra_context,
        }


def caption_to_json(caption: GroundedCaption) -> dict:
    return {"caption_raw": render_grounded(caption), "masks": [m.to_json() for m in caption.masks]}


def caption_from_json(obj: dict) -> GroundedCaption:
    try:
        parsed = parse_grounded(obj["caption_raw"])
        masks = [BinaryMask.from_json(m) for m in obj.get("masks", [])]
    except (KeyError, TypeError, ParseError) as exc:
        raise SchemaError(f"bad dense caption: {exc}") from exc
    return bind_masks(parsed, masks)


def build_graph(objects: Sequence[FusedObject], relationships: Sequence[Relationship],
                landmark: Optional[Landmark], short_captions: Sequence[str],
                image: Optional[dict] = None) -> SceneGraph:
    """Assemble the graph; object ids are re-indexed to 0..n-1 in id order."""
    ids = [o.object_id for o in objects]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate object ids")
    known = set(ids)
    for r in relationships:
        for oid in tuple(r.subject_ids) + tuple(r.object_ids):
            if oid not in known:
                raise DanglingReference(f"relationship {r.predicate!r} names unknown object {oid}")
        if not r.subject_ids:
            raise DanglingReference("relationship without a subject")
    for o in objects:
        if o.layer is None:
            raise ValueError(f"object {o.object_id} has no spatial layer")
    remap = {old: new for new, old in enumerate(sorted(ids))}
    objs = tuple(replace(o, object_id=remap[o.object_id])
                 for o in sorted(objects, key=lambda o: o.object_id))
    rels = tuple(replace(r, subject_ids=tuple(remap[i] for i in r.subject_ids),
                         object_ids=tuple(remap[i] for i in r.object_ids))
                 for r in relationships)
    layers = {name: [] for name in LAYERS}
    for o in sorted(objs, key=lambda o: (-(o.depth_med or 0.0), o.object_id)):
        layers[o.layer].append(o.object_id)
    return SceneGraph(dict(image or {}), objs, rels, landmark, tuple(short_captions),
                      {k: tuple(v) for k, v in layers.items()})


def graph_from_json(obj: dict, image: Optional[dict] = None) -> SceneGraph:
    objects = [FusedObject.from_json(o) for o in obj.get("objects", [])]
    rels = [Relationship.from_json(r) for r in obj.get("relationships", [])]
    lm = obj.get("landmark")
    landmark = None if lm is None else Landmark(lm["primary"], lm["fine"])
    g = build_graph(objects, rels, landmark, obj.get("short_captions", []), image)
    dense = obj.get("dense_caption")
    return replace(g, dense_caption=None if dense is None else caption_from_json(dense),
                   extra_context=obj.get("extra_context"))


# ---------------------------------------------------------------------------
# prompts

DENSE_INSTRUCTION = (
    "Using only the objects, attributes, relationships and scene descriptions above, "
    "write one detailed paragraph describing the image. Mention objects from the nearest "
    "layer first. Wrap every mention of a listed object as [[ids|phrase]], where ids are "
    "the comma-separated object ids the phrase refers to. Do not mention objects that are "
    "not listed."
)
CONTEXT_INSTRUCTION = (
    "Using the scene information above, write a short paragraph of additional context that "
    "goes beyond what is visible: what kind of place this is, its possible history or "
    "purpose, how people typically interact with such a scene, and what might happen next."
)

DEFAULT_DENSE_EXAMPLES = (
    "Objects:\n  0: man [smiling] (depth 0.910, immediate_foreground)\n"
    "  1: tennis racket [black] (depth 0.880, immediate_foreground)\n"
    "  2: fence [green] (depth 0.200, background)\n"
    "Relationships:\n  0 -> 1: holding\n"
    "Caption: [[0|A smiling man]] holds [[1|a black tennis racket]] in the foreground, "
    "while [[2|a green fence]] runs along the back of the court.",
)
DEFAULT_CONTEXT_EXAMPLES = (
    "Objects:\n  0: boat [wooden] (depth 0.700, foreground)\n  1: pier (depth 0.300, midground)\n"
    "Landmark: Transportation scene / Port and harbor\n"
    "Context: Small harbors like this one often serve local fishermen. Early mornings are "
    "busiest, when boats leave for the day and return before the afternoon wind picks up.",
)


def _fmt_object(o: FusedObject) -> str:
    s = f"{o.object_id}: {', '.join(o.labels)}"
    if o.attributes:
        s += f" [{', '.join(o.attributes)}]"
    depth = "n/a" if o.depth_med is None else f"{o.depth_med:.3f}"
    return s + f" (depth {depth}, {o.layer})"


def render_prompt(graph: SceneGraph, kind: str = "dense_caption",
                  in_context_examples: Optional[Sequence[str]] = None) -> str:
    """Deterministic text rendering of the graph followed by examples and the task."""
    if kind not in ("dense_caption", "extra_context"):
        raise ValueError(f"unknown prompt kind {kind!r}")
    if in_context_examples is None:
        in_context_examples = DEFAULT_DENSE_EXAMPLES if kind == "dense_caption" else DEFAULT_CONTEXT_EXAMPLES
    lines = []
    if graph.objects:
        lines.append("Objects by layer (nearest first):")
        for name in LAYERS:
            ids = graph.layers.get(name, ())
            if not ids:
                continue
            lines.append(f"[{name}]")
            for oid in ids:
                lines.append("  " + _fmt_object(graph.object(oid)))
    if graph.relationships:
        lines.append("Relationships:")
        for r in graph.relationships:
            subj = ",".join(str(i) for i in r.subject_ids)
            if r.object_ids:
                obj = ",".join(str(i) for i in r.object_ids)
                lines.append(f"  {subj} -> {obj}: {r.predicate}")
            else:
                lines.append(f"  {subj}: {r.predicate}")
    if graph.landmark is not None:
        lines.append(f"Landmark: {graph.landmark.primary} / {graph.landmark.fine}")
    if graph.short_captions:
        lines.append("Scene descriptions:")
        for c in graph.short_captions:
            lines.append(f"  - {c}")
    if kind == "extra_context" and graph.dense_caption is not None:
        lines.append(f"Detailed description: {graph.dense_caption.plain_text}")
    if in_context_examples:
        lines.append("Examples:")
        for k, ex in enumerate(in_context_examples, 1):
            lines.append(f"### Example {k}")
            lines.append(ex)
    lines.append("Task:")
    lines.append(DENSE_INSTRUCTION if kind == "dense_caption" else CONTEXT_INSTRUCTION)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class VerificationOutcome:
    status: str  # "Verified" | "Rejected"
    missing: tuple = ()

    def __post_init__(self):
        if self.status not in ("Verified", "Rejected"):
            raise ValueError(f"bad status {self.status!r}")
        if (self.status == "Verified") != (not self.missing):
            raise ValueError("status must be Verified exactly when nothing is missing")

    def to_json(self):
        return {"status": self.status, "missing": list(self.missing)}


_DETERMINERS = frozenset(
    "a an the this that these those some several many two three four five six one "
    "his her their its my our your".split()
)
_BREAKERS = frozenset(
    "in on at of with near next to by and or while is are was were be being been has have "
    "had under over behind beside besides between from into onto for as which who that "
    "there it they he she we around above below across along against among".split()
)


def _norm_words(text: str) -> List[str]:
    out = []
    for w in tokenize(text):
        if len(w) > 2 and w.endswith("s"):
            w = w[:-1]
        out.append(w)
    return out


def _contains(hay: List[str], needle: List[str]) -> bool:
    n = len(needle)
    if n == 0 or n > len(hay):
        return False
    return any(hay[i:i + n] == needle for i in range(len(hay) - n + 1))


def graph_terms(graph: SceneGraph) -> List[str]:
    terms = []
    for o in graph.objects:
        terms.extend(o.labels)
    for r in graph.relationships:
        if r.subject_phrase:
            terms.append(r.subject_phrase)
        if r.object_phrase:
            terms.append(r.object_phrase)
    return terms


def verify_caption(checklist: Sequence[str], graph: SceneGraph) -> VerificationOutcome:
    """Reject the caption if any checklist object is absent from the graph.

    Items and graph terms (object labels, grounded relationship phrases) are
    lowercased, stripped of leading determiners and of a plural trailing
    's'; an item matches when either word sequence contains the other at
    word boundaries.
    """
    terms = [_norm_words(t) for t in graph_terms(graph)]
    missing = []
    for item in checklist:
        words = _norm_words(item)
        while words and words[0] in _DETERMINERS:
            words = words[1:]
        if not words:
            continue
        if not any(_contains(t, words) or _contains(words, t) for t in terms):
            missing.append(item)
    return VerificationOutcome("Rejected" if missing else "Verified", tuple(missing))


def extract_checklist(text: str) -> List[str]:
    """Offline noun-phrase chunker: a determiner followed by the words up to the
    next function word, participle or determiner."""
    toks = tokenize(text)
    out = []
    i = 0
    while i < len(toks):
        if toks[i] in _DETERMINERS:
            j = i + 1
            chunk = []
            while j < len(toks) and toks[j] not in _DETERMINERS and toks[j] not in _BREAKERS \
                    and not toks[j].endswith("ing") and not toks[j].endswith("ed"):
                chunk.append(toks[j])
                j += 1
            if chunk:
                item = " ".join(chunk)
                if item not in out:
                    out.append(item)
            i = j
        else:
            i += 1
    return out


def regeneration_feedback(outcome: VerificationOutcome) -> str:
    if outcome.status != "Rejected":
        raise NotRejected("feedback is only produced for rejected captions")
    names = ", ".join(f'"{m}"' for m in outcome.missing)
    return (
        f"The previous caption mentions objects that are not in the scene graph: {names}. "
        "Remove or correct these mentions and describe only the listed objects."
    )


# ---------------------------------------------------------------------------
# dense caption -> grounded caption

_TAG = re.compile(r"\[\[([^\[\]|]*)\|([^\[\]]*)\]\]")


def bind_dense_caption(llm_output: str, graph: SceneGraph) -> GroundedCaption:
    """Turn ``[[ids|phrase]]`` tags into phrase spans whose mask is the union of
    the referenced objects' masks (box masks for objects without one)."""
    id_lists = []

    def sub(m):
        ids_txt, phrase = m.group(1), m.group(2).strip()
        try:
            ids = [int(t) for t in ids_txt.split(",")]
        except ValueError:
            raise MalformedTag(f"bad object ids {ids_txt!r} at offset {m.start()}") from None
        if not phrase or "<" in phrase:
            raise MalformedTag(f"bad phrase in tag at offset {m.start()}")
        id_lists.append(ids)
        return f"<p>{phrase}</p><SEG>"

    if re.search(r"<p>|</p>|<SEG>", llm_output):
        raise MalformedTag("caption already contains grounding tokens")
    raw = _TAG.sub(sub, llm_output)
    leftover = re.search(r"\[\[|\]\]", raw)
    if leftover:
        raise MalformedTag(f"unterminated or malformed tag near offset {leftover.start()}")
    parsed = parse_grounded(raw)
    width = graph.image.get("width")
    height = graph.image.get("height")
    masks = []
    for ids in id_lists:
        parts = []
        for oid in ids:
            o = graph.object(oid)
            if o.mask is not None:
                parts.append(o.mask)
            else:
                if width is None or height is None:
                    raise ValueError("graph has no image size for box masks")
                parts.append(mask_from_box(o.bbox, width, height))
        masks.append(parts[0] if len(parts) == 1 else mask_union(parts))
    return bind_masks(parsed, masks).validate()
