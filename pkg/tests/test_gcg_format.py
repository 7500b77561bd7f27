import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcgkit.errors import CountMismatch, DanglingSeg, DimensionMismatch, NestedPhrase, ParseError, \
    SchemaError, UnclosedPhrase
from gcgkit.gcg_format import (
    GCGRecord,
    GroundedCaption,
    bind_masks,
    caption_from_phrases,
    normalize_ws,
    parse_grounded,
    render_grounded,
    strip_to_plain,
)
from gcgkit.masks import BinaryMask

EXAMPLE = ("<p>A man</p><SEG> and <p>a boy</p><SEG> sit on <p>a bench</p><SEG> next to "
           "<p>an old white car</p><SEG>.")
EXAMPLE_PLAIN = "A man and a boy sit on a bench next to an old white car."


def masks(n, w=4, h=3):
    return [BinaryMask.empty(w, h) for _ in range(n)]


@st.composite
def captions(draw):
    """Valid grounded captions: normalized text plus non-overlapping spans
    whose ends are not whitespace."""
    text = normalize_ws(draw(st.text(alphabet="ab zé,.-'", max_size=40)))
    cuts = sorted(set(draw(st.lists(st.integers(0, len(text)), max_size=8))))
    spans = []
    for a, b in zip(cuts[::2], cuts[1::2]):
        while a < b and text[a] == " ":
            a += 1
        while b > a and text[b - 1] == " ":
            b -= 1
        if a < b:
            spans.append((a, b, BinaryMask.empty(2, 2)))
    return caption_from_phrases(text, spans)


class TestParse:
    def test_four_phrase_example(self):
        p = parse_grounded(EXAMPLE)
        assert p.plain_text == EXAMPLE_PLAIN
        assert p.phrases == ["A man", "a boy", "a bench", "an old white car"]
        assert p.seg_count == 4
        for s in p.spans:
            assert p.plain_text[s.char_start:s.char_end] == s.phrase

    def test_trivial(self):
        assert parse_grounded("").plain_text == "" and parse_grounded("").seg_count == 0
        p = parse_grounded("no tags at all")
        assert p.plain_text == "no tags at all" and not p.spans

    def test_whitespace_before_seg(self):
        p = parse_grounded("<p>sky</p>  <SEG> over")
        assert p.phrases == ["sky"] and p.plain_text == "sky over"

    def test_whitespace_collapse_inside_and_edges(self):
        p = parse_grounded("  <p>  a   dog </p><SEG>   runs  ")
        assert p.plain_text == "a dog runs"
        assert p.phrases == ["a dog"]

    @pytest.mark.parametrize("raw,err,offset", [
        ("<p>dog", UnclosedPhrase, 0),
        ("x <SEG>", DanglingSeg, 2),
        ("<p>a <p>b</p><SEG>", NestedPhrase, 5),
        ("<p>a</p> text <SEG>", DanglingSeg, 14),
    ])
    def test_strict_errors_name_offset(self, raw, err, offset):
        with pytest.raises(err) as info:
            parse_grounded(raw)
        assert info.value.offset == offset

    def test_tolerant(self):
        assert strip_to_plain("<p>dog") == "dog"
        assert strip_to_plain(EXAMPLE) == EXAMPLE_PLAIN
        assert strip_to_plain("tag-free text") == "tag-free text"
        p = parse_grounded("x <SEG> <p>cat</p><SEG>", strict=False)
        assert p.phrases == ["cat"] and p.total_seg_tokens == 2 and p.seg_ordinals == (1,)

    def test_phrase_without_seg_is_plain_text(self):
        p = parse_grounded("<p>a cat</p> sits")
        assert p.plain_text == "a cat sits" and p.seg_count == 0

    def test_unicode_offsets(self):
        p = parse_grounded("café <p>crème brûlée</p><SEG> ok")
        s = p.spans[0]
        assert p.plain_text[s.char_start:s.char_end] == "crème brûlée"


class TestRender:
    def test_four_phrase_example_roundtrips_bytes(self):
        cap = bind_masks(parse_grounded(EXAMPLE), masks(4))
        assert render_grounded(cap) == EXAMPLE

    def test_no_spans(self):
        assert render_grounded(GroundedCaption("just text")) == "just text"

    @given(captions())
    def test_roundtrip_property(self, cap):
        p = parse_grounded(render_grounded(cap))
        assert p.plain_text == cap.plain_text
        assert p.spans == cap.spans
        assert strip_to_plain(render_grounded(cap)) == cap.plain_text

    @given(st.text(alphabet="ab <>/pSEG", max_size=30))
    def test_tolerant_never_raises_and_spans_slice(self, raw):
        p = parse_grounded(raw, strict=False)
        prev = 0
        for s in p.spans:
            assert s.char_start >= prev
            assert p.plain_text[s.char_start:s.char_end] == s.phrase
            prev = s.char_end


class TestBind:
    def test_counts(self):
        parsed = parse_grounded(EXAMPLE)
        assert len(bind_masks(parsed, masks(4)).masks) == 4
        with pytest.raises(CountMismatch):
            bind_masks(parsed, masks(3))
        assert bind_masks(parse_grounded("plain"), []).validate().spans == ()

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            bind_masks(parse_grounded("<p>a</p><SEG> <p>b</p><SEG>"),
                       [BinaryMask.empty(2, 2), BinaryMask.empty(3, 2)])

    def test_tolerant_skips_dangling_mask_slots(self):
        parsed = parse_grounded("x <SEG> <p>cat</p><SEG>", strict=False)
        m = [BinaryMask.empty(2, 2), BinaryMask(2, 2, [0, 4])]
        cap = bind_masks(parsed, m, strict=False)
        assert cap.masks == (m[1],)

    def test_scores(self):
        cap = bind_masks(parse_grounded("<p>a</p><SEG>"), masks(1), [0.3])
        assert cap.scores == (0.3,)
        with pytest.raises(CountMismatch):
            bind_masks(parse_grounded("<p>a</p><SEG>"), masks(1), [0.3, 0.4])


class TestRecord:
    def obj(self, **kw):
        base = {"image_id": "i1", "width": 4, "height": 3, "caption_raw": EXAMPLE,
                "masks": [m.to_json() for m in masks(4)], "split": "val"}
        base.update(kw)
        return base

    def test_roundtrip(self):
        rec = GCGRecord.from_json(self.obj())
        assert rec.to_json() == self.obj()
        assert rec.caption.phrases[3] == "an old white car"

    def test_schema_errors(self):
        with pytest.raises(SchemaError):
            GCGRecord.from_json({"image_id": "x"})
        with pytest.raises(SchemaError):
            GCGRecord.from_json(self.obj(split="dev"))
        with pytest.raises(SchemaError):
            GCGRecord.from_json(self.obj(width=5))
        with pytest.raises(ParseError):
            GCGRecord.from_json(self.obj(caption_raw="<p>dog"))
