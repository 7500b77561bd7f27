"""Convert referring-expression, scene-graph and phrase-box datasets into
grounded-caption records.

LLM-rewritten captions are accepted only when every source phrase appears
verbatim; each phrase binds to its first free occurrence.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence

from ..errors import (
    ClientUnavailable,
    GcgError,
    LlmUnavailable,
    SchemaError,
    SegmenterUnavailable,
    ValidationExhausted,
)
from ..gcg_format import GCGRecord, caption_from_phrases, normalize_ws, parse_grounded
from ..masks import BBox, BinaryMask, mask_from_box, mask_union

log = logging.getLogger(__name__)

CONVERSION_INSTRUCTION = (
    "Write one fluent caption for the image. It must contain every phrase listed below exactly "
    "as written, character for character, and may use the context captions for extra detail."
)
KINDS = ("refcocog", "psg", "flickr")


def conversion_prompt(phrases: Sequence[str], captions: Sequence[str],
                      feedback: Optional[str] = None) -> str:
    lines = ["Phrases:"]
    lines += [f"  {p}" for p in phrases]
    lines.append("")
    if captions:
        lines.append("Context captions:")
        lines += [f"  {c}" for c in captions]
        lines.append("")
    lines.append("Task:")
    lines.append(CONVERSION_INSTRUCTION)
    if feedback:
        lines.append("Feedback:")
        lines.append(feedback)
    return "\n".join(lines) + "\n"


def phrases_from_prompt(prompt: str) -> List[str]:
    """Inverse of the phrase block in ``conversion_prompt`` (used by mock LLMs)."""
    out = []
    lines = prompt.splitlines()
    if not lines or lines[0] != "Phrases:":
        return out
    for line in lines[1:]:
        if not line.startswith("  "):
            break
        out.append(line[2:])
    return out


def _occurrences(text: str, phrase: str) -> List[int]:
    out = []
    i = text.find(phrase)
    while i >= 0:
        out.append(i)
        i = text.find(phrase, i + 1)
    return out


def locate_phrases(text: str, phrases: Sequence[str], diagnostics: Optional[list] = None):
    """Return ``(spans, missing)``; spans are ``(start, end)`` per phrase (None when missing).

    Each phrase binds to its first occurrence that does not overlap a span
    already claimed by an earlier phrase.
    """
    taken = []
    spans = []
    missing = []
    for p in phrases:
        occ = _occurrences(text, p)
        free = [s for s in occ if all(s + len(p) <= a or s >= b for a, b in taken)]
        if not free:
            spans.append(None)
            missing.append(p)
            continue
        if len(occ) > 1 and diagnostics is not None:
            diagnostics.append(f"phrase {p!r} occurs {len(occ)} times; bound the first free one at {free[0]}")
        taken.append((free[0], free[0] + len(p)))
        spans.append(taken[-1])
    return spans, missing


def _call_llm(llm, prompt):
    try:
        return llm({"task": "gcg_conversion", "prompt": prompt}).get("text", "")
    except LlmUnavailable:
        raise
    except ClientUnavailable as exc:
        raise LlmUnavailable(str(exc)) from exc


def _rewrite(image_id, width, height, phrases, masks, captions, llm, max_retries, split, extra):
    if llm is None:
        raise LlmUnavailable("conversion needs a text LLM")
    feedback = None
    missing = []
    for attempt in range(max_retries + 1):
        diags = []
        text = normalize_ws(_call_llm(llm, conversion_prompt(phrases, captions, feedback)))
        spans, missing = locate_phrases(text, phrases, diags)
        if not missing:
            cap = caption_from_phrases(text, [(s, e, m) for (s, e), m in zip(spans, masks)])
            for d in diags:
                log.info("%s: %s", image_id, d)
            ex = dict(extra)
            if diags:
                ex["diagnostics"] = diags
            ex["attempts"] = attempt + 1
            return GCGRecord(image_id, width, height, cap, split, extra=ex)
        feedback = ("These phrases were not reproduced verbatim: "
                    + "; ".join(repr(p) for p in missing) + ". Include each exactly as written.")
    raise ValidationExhausted(
        f"{image_id}: phrases never reproduced verbatim after {max_retries + 1} attempts: {missing}")


def _meta(item):
    try:
        return str(item["image_id"]), int(item["width"]), int(item["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"conversion input missing image fields: {exc}") from exc


def _mask(obj, width, height) -> BinaryMask:
    m = BinaryMask.from_json(obj)
    if (m.width, m.height) != (width, height):
        raise SchemaError(f"mask size {m.width}x{m.height} != image size {width}x{height}")
    return m


def _phrase(text) -> str:
    p = normalize_ws(str(text))
    if not p:
        raise SchemaError("empty phrase")
    return p


def convert_refcocog(item: dict, llm: Callable, max_retries: int = 2) -> GCGRecord:
    """``item``: image_id, width, height, expressions [{text, mask}], captions."""
    image_id, w, h = _meta(item)
    exprs = item.get("expressions") or []
    if not exprs:
        raise SchemaError(f"{image_id}: no referring expressions")
    phrases, masks = [], []
    for e in exprs:
        if e.get("mask") is None:
            raise SchemaError(f"{image_id}: expression {e.get('text')!r} has no mask")
        phrases.append(_phrase(e["text"]))
        masks.append(_mask(e["mask"], w, h))
    return _rewrite(image_id, w, h, phrases, masks, item.get("captions", []), llm, max_retries,
                    item.get("split"), {"source": "refcocog"})


def convert_psg(item: dict, llm: Callable, max_retries: int = 2) -> GCGRecord:
    """``item``: image_id, width, height, segments [{id, mask}],
    triplets [{subject: {phrase, segment}, predicate, object: {phrase, segment}}], captions."""
    image_id, w, h = _meta(item)
    segs = {}
    for s in item.get("segments", []):
        segs[str(s["id"])] = _mask(s["mask"], w, h)
    seen = set()
    phrases, masks = [], []
    for t in item.get("triplets", []):
        for role in ("subject", "object"):
            end = t.get(role)
            if end is None:
                raise SchemaError(f"{image_id}: triplet without {role}")
            seg = str(end.get("segment"))
            if seg not in segs:
                raise SchemaError(f"{image_id}: triplet {role} references unknown segment {seg}")
            key = (_phrase(end["phrase"]), seg)
            if key in seen:
                continue
            seen.add(key)
            phrases.append(key[0])
            masks.append(segs[seg])
    if not phrases:
        raise SchemaError(f"{image_id}: no triplets")
    return _rewrite(image_id, w, h, phrases, masks, item.get("captions", []), llm, max_retries,
                    item.get("split"), {"source": "psg"})


def convert_flickr(item: dict, segmenter: Optional[Callable] = None,
                   fallback: bool = True) -> GCGRecord:
    """``item``: image_id, width, height, caption, phrases [{phrase, start?, boxes}].

    Masks come from the segmenter (one per box, unioned per phrase); without
    one, box masks are used and the record is flagged ``low_quality``.
    """
    image_id, w, h = _meta(item)
    text = normalize_ws(item.get("caption", ""))
    entries = item.get("phrases") or []
    phrases = []
    boxes = []
    for p in entries:
        bxs = [BBox.from_list(b) for b in p.get("boxes", [])]
        if not bxs:
            raise SchemaError(f"{image_id}: phrase {p.get('phrase')!r} has no boxes")
        phrases.append(_phrase(p["phrase"]))
        boxes.append(bxs)

    explicit = [p.get("start") for p in entries]
    if all(s is not None for s in explicit) and entries:
        spans = [(int(s), int(s) + len(ph)) for s, ph in zip(explicit, phrases)]
        for (s, e), ph in zip(spans, phrases):
            if text[s:e] != ph:
                raise SchemaError(f"{image_id}: phrase {ph!r} not at offset {s}")
    else:
        diags = []
        spans, missing = locate_phrases(text, phrases, diags)
        if missing:
            raise SchemaError(f"{image_id}: phrases not in caption: {missing}")

    low_quality = False
    masks = []
    if segmenter is not None:
        flat = [b.as_list() for bxs in boxes for b in bxs]
        try:
            resp = segmenter({"image_id": image_id, "width": w, "height": h, "boxes": flat})
        except ClientUnavailable as exc:
            if not fallback:
                raise SegmenterUnavailable(str(exc)) from exc
            log.warning("%s: segmenter failed (%s); using box masks", image_id, exc)
            segmenter = None
        else:
            got = [_mask(m, w, h) for m in resp.get("masks", [])]
            if len(got) != len(flat):
                raise SchemaError(f"{image_id}: segmenter returned {len(got)} masks for {len(flat)} boxes")
            k = 0
            for bxs in boxes:
                part = got[k:k + len(bxs)]
                k += len(bxs)
                masks.append(part[0] if len(part) == 1 else mask_union(part))
    if segmenter is None:
        if not fallback:
            raise SegmenterUnavailable(f"{image_id}: no segmenter configured and fallback disabled")
        low_quality = True
        for bxs in boxes:
            part = [mask_from_box(b, w, h) for b in bxs]
            masks.append(part[0] if len(part) == 1 else mask_union(part))

    cap = caption_from_phrases(text, [(s, e, m) for (s, e), m in zip(spans, masks)])
    extra = {"source": "flickr"}
    if low_quality:
        extra["low_quality"] = True
    return GCGRecord(image_id, w, h, cap, item.get("split"), extra=extra)


def expected_phrases(kind: str, item: dict) -> List[str]:
    """Source phrases of one input item, as the validator expects them."""
    if kind == "refcocog":
        return [normalize_ws(e["text"]) for e in item["expressions"]]
    if kind == "psg":
        seen, out = set(), []
        for t in item["triplets"]:
            for role in ("subject", "object"):
                key = (normalize_ws(t[role]["phrase"]), str(t[role]["segment"]))
                if key not in seen:
                    seen.add(key)
                    out.append(key[0])
        return out
    if kind == "flickr":
        return [normalize_ws(p["phrase"]) for p in item["phrases"]]
    raise ValueError(f"unknown conversion kind {kind!r}")


def validate_conversion(record_json: dict, expected: Sequence[str]) -> List[str]:
    """Independent check of an emitted record: re-parse its serialized form
    strictly and confirm each span slices to a source phrase.  Returns the
    list of problems (empty when the record is sound)."""
    problems = []
    try:
        parsed = parse_grounded(record_json["caption_raw"], strict=True)
    except (GcgError, KeyError) as exc:
        return [f"unparseable record: {exc}"]
    got = []
    for sp in parsed.spans:
        sliced = parsed.plain_text[sp.char_start:sp.char_end]
        if sliced != sp.phrase:
            problems.append(f"span {sp.char_start}:{sp.char_end} slices to {sliced!r}, not {sp.phrase!r}")
        got.append(sliced)
    if sorted(got) != sorted(expected):
        problems.append(f"phrases {sorted(got)} != expected {sorted(expected)}")
    if len(record_json.get("masks", [])) != len(parsed.spans):
        problems.append("mask count differs from phrase count")
    return problems


def convert_many(kind: str, items: Sequence[dict], llm=None, segmenter=None, max_retries: int = 2,
                 fallback: bool = True, workers: int = 1):
    """Convert a batch; returns ``(records, rejected)`` in input order where
    ``rejected`` holds ``(image_id, message)`` for ValidationExhausted items."""
    if kind not in KINDS:
        raise ValueError(f"unknown conversion kind {kind!r}")

    def one(item):
        try:
            if kind == "refcocog":
                return convert_refcocog(item, llm, max_retries), None
            if kind == "psg":
                return convert_psg(item, llm, max_retries), None
            return convert_flickr(item, segmenter, fallback), None
        except ValidationExhausted as exc:
            return None, (str(item.get("image_id")), str(exc))

    if workers <= 1:
        results = [one(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, items))
    records = [r for r, _ in results if r is not None]
    rejected = [e for _, e in results if e is not None]
    return records, rejected


def echo_llm(request: dict) -> dict:
    """Mock LLM that strings the requested phrases together verbatim."""
    phrases = phrases_from_prompt(request["prompt"])
    return {"text": " next to ".join(phrases) + "."}


def paraphrase_llm(request: dict) -> dict:
    """Mock LLM that never keeps the phrases verbatim."""
    phrases = phrases_from_prompt(request["prompt"])
    return {"text": " and ".join(p.upper() + "!" for p in phrases) + "."}
