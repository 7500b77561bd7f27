"""Grounded-output text format: ``<p>phrase</p><SEG>`` tokens interleaved with caption text.

Offsets are Python string (code point) offsets into the whitespace-normalised
plain text, so slicing ``plain_text[start:end]`` always reproduces the phrase.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from .errors import (
    CountMismatch,
    DanglingSeg,
    DimensionMismatch,
    NestedPhrase,
    ParseError,
    SchemaError,
    UnclosedPhrase,
)
from .masks import BinaryMask

P_OPEN = "<p>"
P_CLOSE = "</p>"
SEG = "<SEG>"
_TOKEN = re.compile(r"<p>|</p>|<SEG>")
_WS = re.compile(r"\s+")
SPLITS = ("train", "val", "test")


class StrayClose(ParseError):
    """``</p>`` without a matching ``<p>``."""


class EmptyPhrase(ParseError):
    pass


@dataclass(frozen=True)
class PhraseSpan:
    char_start: int
    char_end: int
    phrase: str
    seg_index: int


@dataclass(frozen=True)
class ParsedGrounded:
    plain_text: str
    spans: tuple
    seg_count: int
    # ordinal of the <SEG> token behind each span, among all <SEG> tokens seen
    seg_ordinals: tuple = ()
    total_seg_tokens: int = 0

    @property
    def phrases(self):
        return [s.phrase for s in self.spans]


def normalize_ws(text: str) -> str:
    return _WS.sub(" ", text).strip()


class _PlainBuilder:
    def __init__(self):
        self.parts: List[str] = []
        self.length = 0
        self.trailing_space = False
        self.pending = False
        self.start: Optional[int] = None

    def add(self, text: str):
        text = _WS.sub(" ", text)
        if text.startswith(" ") and (self.length == 0 or self.trailing_space):
            text = text[1:]
        if not text:
            return
        if self.pending and self.start is None:
            lead = len(text) - len(text.lstrip(" "))
            if lead < len(text):
                self.start = self.length + lead
        self.parts.append(text)
        self.length += len(text)
        self.trailing_space = text.endswith(" ")

    def open_phrase(self):
        self.pending = True
        self.start = None

    def close_phrase(self):
        end = self.length - (1 if self.trailing_space else 0)
        start = end if self.start is None else self.start
        self.pending = False
        self.start = None
        return start, end

    def text(self) -> str:
        out = "".join(self.parts)
        return out[:-1] if out.endswith(" ") else out


def parse_grounded(raw: str, strict: bool = True) -> ParsedGrounded:
    """Split grounded text into plain text and phrase spans.

    A ``<p>...</p>`` pair followed (whitespace aside) by ``<SEG>`` yields one
    span.  Whitespace runs are collapsed to one space and trimmed at the edges.
    In strict mode malformed token sequences raise a ``ParseError`` naming the
    offset in ``raw``; in tolerant mode the offending tokens are dropped and
    their inner text kept.
    """
    b = _PlainBuilder()
    spans = []
    ordinals = []
    open_at = None
    closed = None  # (start, end) of a closed phrase still waiting for <SEG>
    seg_tokens = 0
    pos = 0
    for m in _TOKEN.finditer(raw):
        text = raw[pos:m.start()]
        if text:
            if closed is not None and text.strip():
                closed = None
            b.add(text)
        tok = m.group()
        if tok == P_OPEN:
            if open_at is not None and strict:
                raise NestedPhrase("<p> inside an open phrase", m.start())
            open_at = m.start()
            closed = None
            b.open_phrase()
        elif tok == P_CLOSE:
            if open_at is None:
                if strict:
                    raise StrayClose("</p> without an open phrase", m.start())
            else:
                start, end = b.close_phrase()
                if end <= start:
                    if strict:
                        raise EmptyPhrase("empty phrase", open_at)
                    closed = None
                else:
                    closed = (start, end)
                open_at = None
        else:
            seg_tokens += 1
            if open_at is not None:
                if strict:
                    raise DanglingSeg("<SEG> inside an open phrase", m.start())
            elif closed is None:
                if strict:
                    raise DanglingSeg("<SEG> not preceded by a closed phrase", m.start())
            else:
                spans.append(closed)
                ordinals.append(seg_tokens - 1)
                closed = None
        pos = m.end()
    if pos < len(raw):
        b.add(raw[pos:])
    if open_at is not None and strict:
        raise UnclosedPhrase("<p> without </p>", open_at)
    plain = b.text()
    out = tuple(
        PhraseSpan(s, e, plain[s:e], i) for i, (s, e) in enumerate(spans)
    )
    return ParsedGrounded(plain, out, len(out), tuple(ordinals), seg_tokens)


def strip_to_plain(raw: str) -> str:
    """Plain caption text with every grounding token removed (never raises)."""
    return parse_grounded(raw, strict=False).plain_text


@dataclass(frozen=True)
class GroundedCaption:
    plain_text: str
    spans: tuple = ()
    masks: tuple = ()
    scores: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        object.__setattr__(self, "masks", tuple(self.masks))
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))

    @property
    def phrases(self):
        return [s.phrase for s in self.spans]

    @property
    def size(self):
        """(width, height) shared by the masks, or None without masks."""
        if not self.masks:
            return None
        return (self.masks[0].width, self.masks[0].height)

    def validate(self):
        """Raise ``ValueError`` if any caption invariant is broken."""
        text = self.plain_text
        if text != normalize_ws(text):
            raise ValueError("plain_text must be whitespace-normalised")
        if _TOKEN.search(text):
            raise ValueError("plain_text contains grounding tokens")
        if len(self.masks) != len(self.spans):
            raise CountMismatch(f"{len(self.spans)} spans but {len(self.masks)} masks")
        if self.scores is not None:
            if len(self.scores) != len(self.spans):
                raise CountMismatch("scores must align with spans")
            if any(not 0.0 <= s <= 1.0 for s in self.scores):
                raise ValueError("scores must lie in [0, 1]")
        if len({(m.width, m.height) for m in self.masks}) > 1:
            raise DimensionMismatch("all masks of a caption must share dimensions")
        prev_end = 0
        for i, s in enumerate(self.spans):
            if not 0 <= s.char_start < s.char_end <= len(text):
                raise ValueError(f"span {s} out of range")
            if s.char_start < prev_end:
                raise ValueError("spans overlap or are unsorted")
            if text[s.char_start:s.char_end] != s.phrase:
                raise ValueError(f"span {s} does not slice to its phrase")
            if s.phrase != s.phrase.strip():
                raise ValueError("phrases must not carry edge whitespace")
            if s.seg_index != i:
                raise ValueError("seg indices must be 0..n-1 in order of appearance")
            prev_end = s.char_end
        return self


def render_grounded(caption: GroundedCaption) -> str:
    """Canonical grounded text: every span becomes ``<p>phrase</p><SEG>``."""
    text = caption.plain_text
    out = []
    pos = 0
    for s in sorted(caption.spans, key=lambda s: s.char_start):
        out.append(text[pos:s.char_start])
        out.append(P_OPEN + text[s.char_start:s.char_end] + P_CLOSE + SEG)
        pos = s.char_end
    out.append(text[pos:])
    return "".join(out)


def bind_masks(parsed: ParsedGrounded, masks: Sequence[BinaryMask], scores=None,
               strict: bool = True) -> GroundedCaption:
    """Attach masks (and optional scores) to parsed spans in ``<SEG>`` order.

    With ``strict=False`` a mask list sized to *all* ``<SEG>`` tokens
    (dangling ones included) is accepted and the dangling slots are skipped.
    """
    masks = list(masks)
    scores = None if scores is None else list(scores)
    n = parsed.seg_count
    if len(masks) != n:
        if not strict and len(masks) == parsed.total_seg_tokens:
            masks = [masks[k] for k in parsed.seg_ordinals]
            if scores is not None and len(scores) == parsed.total_seg_tokens:
                scores = [scores[k] for k in parsed.seg_ordinals]
        else:
            raise CountMismatch(f"{n} grounded phrases but {len(masks)} masks")
    if scores is not None and len(scores) != len(masks):
        raise CountMismatch(f"{len(masks)} masks but {len(scores)} scores")
    if len({(m.width, m.height) for m in masks}) > 1:
        raise DimensionMismatch("all masks of a caption must share dimensions")
    return GroundedCaption(parsed.plain_text, parsed.spans, tuple(masks),
                           None if scores is None else tuple(scores))


def caption_from_phrases(plain_text: str, located: Sequence[tuple]) -> GroundedCaption:
    """Build a caption from ``(char_start, char_end, mask)`` triples in any order."""
    located = sorted(located, key=lambda t: t[0])
    spans = []
    masks = []
    for i, (s, e, mask) in enumerate(located):
        spans.append(PhraseSpan(s, e, plain_text[s:e], i))
        masks.append(mask)
    return GroundedCaption(plain_text, tuple(spans), tuple(masks)).validate()


# ---------------------------------------------------------------------------
# JSONL records


@dataclass(frozen=True)
class GCGRecord:
    image_id: str
    width: int
    height: int
    caption: GroundedCaption
    split: Optional[str] = None
    caption_raw: str = field(default="", compare=False)
    extra: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> dict:
        obj = {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "caption_raw": self.caption_raw or render_grounded(self.caption),
            "masks": [m.to_json() for m in self.caption.masks],
        }
        if self.caption.scores is not None:
            obj["scores"] = list(self.caption.scores)
        if self.split is not None:
            obj["split"] = self.split
        obj.update(self.extra)
        return obj

    @classmethod
    def from_json(cls, obj: dict, strict: bool = True) -> "GCGRecord":
        try:
            image_id = obj["image_id"]
            width = int(obj["width"])
            height = int(obj["height"])
            raw = obj["caption_raw"]
            mask_objs = obj.get("masks", [])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"GCG record missing or bad field: {exc}") from exc
        if not isinstance(raw, str) or not isinstance(mask_objs, list):
            raise SchemaError("caption_raw must be a string and masks a list")
        split = obj.get("split")
        if split is not None and split not in SPLITS:
            raise SchemaError(f"unknown split {split!r}")
        masks = [BinaryMask.from_json(m) for m in mask_objs]
        for m in masks:
            if (m.width, m.height) != (width, height):
                raise SchemaError(
                    f"{image_id}: mask size {m.width}x{m.height} != record size {width}x{height}"
                )
        parsed = parse_grounded(raw, strict=strict)
        caption = bind_masks(parsed, masks, obj.get("scores"), strict=strict)
        known = {"image_id", "width", "height", "caption_raw", "masks", "scores", "split"}
        extra = {k: v for k, v in obj.items() if k not in known}
        return cls(str(image_id), width, height, caption, split, raw, extra)
