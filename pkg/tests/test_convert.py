import numpy as np
import pytest

from builders import H, W, flickr_item, psg_item, random_items, rect_json, refcocog_item
from gcgkit.errors import LlmUnavailable, SchemaError, SegmenterUnavailable, ValidationExhausted
from gcgkit.masks import BBox, BinaryMask, mask_from_box
from gcgkit.pipeline.clients import MockClient
from gcgkit.pipeline.convert import (
    conversion_prompt,
    convert_flickr,
    convert_many,
    convert_psg,
    convert_refcocog,
    echo_llm,
    expected_phrases,
    locate_phrases,
    paraphrase_llm,
    phrases_from_prompt,
    validate_conversion,
)


def spans_of(rec):
    return [rec.caption.plain_text[s.char_start:s.char_end] for s in rec.caption.spans]


class TestRefcocog:
    def test_echo(self):
        item = refcocog_item("a", ["the man", "the red car"])
        rec = convert_refcocog(item, echo_llm)
        assert rec.caption.plain_text == "the man next to the red car."
        assert spans_of(rec) == ["the man", "the red car"]
        assert rec.caption.masks == tuple(BinaryMask.from_json(e["mask"]) for e in item["expressions"])
        assert validate_conversion(rec.to_json(), expected_phrases("refcocog", item)) == []

    def test_paraphrase_exhausts(self):
        calls = []

        def llm(req):
            calls.append(req["prompt"])
            return paraphrase_llm(req)

        with pytest.raises(ValidationExhausted):
            convert_refcocog(refcocog_item("a", ["the man"]), llm, max_retries=2)
        assert len(calls) == 3 and "Feedback:" in calls[1]

    def test_retry_then_success(self):
        answers = iter(["a gentleman stands.", "the man stands."])
        rec = convert_refcocog(refcocog_item("a", ["the man"]), lambda req: {"text": next(answers)})
        assert rec.extra["attempts"] == 2

    def test_duplicate_first_match(self):
        rec = convert_refcocog(refcocog_item("a", ["the man", "a dog"]),
                               lambda req: {"text": "the man waves at the man with a dog."})
        assert rec.caption.spans[0].char_start == 0
        assert rec.extra["diagnostics"] and "the man" in rec.extra["diagnostics"][0]

    def test_errors(self):
        with pytest.raises(LlmUnavailable):
            convert_refcocog(refcocog_item("a", ["x"]), None)
        with pytest.raises(LlmUnavailable):
            convert_refcocog(refcocog_item("a", ["x"]), MockClient("text_llm"))
        bad = refcocog_item("a", ["x"])
        bad["expressions"][0]["mask"] = None
        with pytest.raises(SchemaError):
            convert_refcocog(bad, echo_llm)


class TestPsg:
    def test_echo(self):
        item = psg_item("p", [("a man", 1, "rides", "a horse", 4)])
        rec = convert_psg(item, echo_llm)
        assert spans_of(rec) == ["a man", "a horse"]
        assert validate_conversion(rec.to_json(), expected_phrases("psg", item)) == []

    def test_paraphrase(self):
        with pytest.raises(ValidationExhausted):
            convert_psg(psg_item("p", [("a man", 1, "rides", "a horse", 4)]), paraphrase_llm)

    def test_duplicate_first_match(self):
        item = psg_item("p", [("a man", 1, "rides", "a horse", 4)])
        rec = convert_psg(item, lambda req: {"text": "a horse carries a man, a horse indeed."})
        # spans are kept in caption order, so the horse comes first
        assert [(s.char_start, s.phrase) for s in rec.caption.spans] == [(0, "a horse"), (16, "a man")]
        assert rec.caption.masks[0] == BinaryMask.from_json(item["segments"][1]["mask"])
        assert rec.extra["diagnostics"]

    def test_unknown_segment(self):
        item = psg_item("p", [("a man", 1, "rides", "a horse", 4)])
        item["triplets"][0]["object"]["segment"] = 77
        with pytest.raises(SchemaError):
            convert_psg(item, echo_llm)


def box_segmenter(req):
    return {"masks": [mask_from_box(BBox.from_list(b), req["width"], req["height"]).to_json()
                      for b in req["boxes"]]}


class TestFlickr:
    def test_single_box(self):
        rec = convert_flickr(flickr_item("f", "A dog runs.", [("A dog", [[1, 2, 9, 8]])]), box_segmenter)
        assert rec.caption.masks[0] == mask_from_box(BBox(1, 2, 9, 8), W, H)
        assert "low_quality" not in rec.extra

    def test_two_box_union(self):
        rec = convert_flickr(flickr_item("f", "Two dogs play.", [("Two dogs", [[0, 0, 4, 4], [10, 6, 14, 12]])]),
                             box_segmenter)
        expect = np.maximum(mask_from_box(BBox(0, 0, 4, 4), W, H).to_dense(),
                            mask_from_box(BBox(10, 6, 14, 12), W, H).to_dense())
        np.testing.assert_array_equal(rec.caption.masks[0].to_dense(), expect)

    def test_fallback(self):
        item = flickr_item("f", "A dog runs.", [("A dog", [[1, 2, 9, 8]])])
        rec = convert_flickr(item, None, fallback=True)
        assert rec.extra["low_quality"] is True
        with pytest.raises(SegmenterUnavailable):
            convert_flickr(item, None, fallback=False)
        with pytest.raises(SegmenterUnavailable):
            convert_flickr(item, MockClient("segmenter"), fallback=False)

    def test_explicit_offsets(self):
        item = flickr_item("f", "A dog and a dog.", [("a dog", [[1, 2, 9, 8]])])
        item["phrases"][0]["start"] = 10
        assert convert_flickr(item, box_segmenter).caption.spans[0].char_start == 10
        item["phrases"][0]["start"] = 3
        with pytest.raises(SchemaError):
            convert_flickr(item, box_segmenter)

    def test_no_boxes(self):
        with pytest.raises(SchemaError):
            convert_flickr(flickr_item("f", "A dog.", [("A dog", [])]), box_segmenter)


def test_locate_phrases_overlap():
    spans, missing = locate_phrases("the red car and the car", ["the red car", "the car"])
    assert spans == [(0, 11), (16, 23)] and missing == []
    spans, missing = locate_phrases("a dog", ["a cat"])
    assert spans == [None] and missing == ["a cat"]


def test_prompt_round_trip():
    p = conversion_prompt(["the man", "a dog"], ["ctx"], "fix it")
    assert phrases_from_prompt(p) == ["the man", "a dog"]


def test_validator_catches_bad_records():
    rec = convert_refcocog(refcocog_item("a", ["the man"]), echo_llm).to_json()
    assert validate_conversion(rec, ["the woman"])
    rec["caption_raw"] = "<p>the man"
    assert validate_conversion(rec, ["the man"])


def test_convert_many_worker_invariance():
    ref, psg = random_items(0, 20)
    items = ref + [refcocog_item("bad", ["the zeppelin"])]
    flaky = lambda req: paraphrase_llm(req) if "zeppelin" in req["prompt"] else echo_llm(req)
    a = convert_many("refcocog", items, flaky, workers=1)
    b = convert_many("refcocog", items, flaky, workers=4)
    assert [r.to_json() for r in a[0]] == [r.to_json() for r in b[0]] and a[1] == b[1]
    assert [x[0] for x in a[1]] == ["bad"] and len(a[0]) == 20
    with pytest.raises(ValueError):
        convert_many("coco", [])
