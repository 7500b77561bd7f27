import json

import numpy as np
import pytest

from conftest import rect_grid
from gcgkit.cli import main
from gcgkit.gcg_format import GCGRecord, GroundedCaption, caption_from_phrases
from gcgkit.masks import BinaryMask
from gcgkit.render import read_ppm, render_record, seg_color, write_ppm

W, H = 12, 8


@pytest.fixture
def image_dir(tmp_path):
    d = tmp_path / "img"
    d.mkdir()
    img = (np.arange(W * H * 3).reshape(H, W, 3) % 251).astype(np.uint8)
    write_ppm(d / "pic.ppm", img)
    return d, img


def two_mask_record():
    m1 = BinaryMask.from_dense(rect_grid(H, W, 0, 0, 4, 4))
    m2 = BinaryMask.from_dense(rect_grid(H, W, 6, 2, 12, 8))
    cap = caption_from_phrases("A cat and a box.", [(0, 5, m1), (10, 15, m2)])
    return GCGRecord("pic", W, H, cap).to_json()


def test_ppm_round_trip(tmp_path, image_dir):
    d, img = image_dir
    np.testing.assert_array_equal(read_ppm(d / "pic.ppm"), img)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes(6))
    assert read_ppm(tmp_path / "c.ppm").shape == (1, 2, 3)


def test_zero_masks_copies(tmp_path, image_dir):
    d, _ = image_dir
    rec = GCGRecord("pic", W, H, GroundedCaption("Nothing here.")).to_json()
    dst, legend = render_record(rec, d, tmp_path / "out")
    assert dst.read_bytes() == (d / "pic.ppm").read_bytes()
    assert json.loads(legend.read_text())["legend"] == []


def test_two_masks(tmp_path, image_dir):
    d, img = image_dir
    dst, legend = render_record(two_mask_record(), d, tmp_path / "out")
    entries = json.loads(legend.read_text())["legend"]
    assert [e["phrase"] for e in entries] == ["A cat", "a box"] and len(entries) == 2
    out = read_ppm(dst)
    # blended pixel inside the first mask, untouched pixel outside both
    expect = np.rint(0.5 * img[0, 0].astype(float) + 0.5 * np.array(seg_color(0)))
    np.testing.assert_array_equal(out[0, 0], expect)
    np.testing.assert_array_equal(out[7, 0], img[7, 0])


def test_deterministic(tmp_path, image_dir):
    d, _ = image_dir
    a = render_record(two_mask_record(), d, tmp_path / "a")
    b = render_record(two_mask_record(), d, tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_colors_distinct():
    cols = [seg_color(i) for i in range(8)]
    assert len(set(cols)) == 8


def test_cli(tmp_path, image_dir):
    d, _ = image_dir
    recs = tmp_path / "r.jsonl"
    recs.write_text(json.dumps(two_mask_record()) + "\n")
    assert main(["render", "--records", str(recs), "--images", str(d), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "pic.ppm").exists()
    (d / "pic.ppm").write_bytes(b"garbage")
    assert main(["render", "--records", str(recs), "--images", str(d), "--out", str(tmp_path / "o")]) == 1
    assert main(["render", "--records", str(recs), "--images", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 1
