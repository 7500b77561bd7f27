"""Mask overlays for inspecting grounded captions.

Images are read and written as binary PPM so no codec is needed; Pillow is
used only when present, for other input formats and for PNG output.
"""
from __future__ import annotations

import colorsys
import json
import shutil
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .gcg_format import GCGRecord, GroundedCaption

ALPHA = 0.5
IMAGE_EXTS = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")


def seg_color(seg_index: int) -> Tuple[int, int, int]:
    """Well separated colors from golden-ratio hue steps."""
    h = (0.13 + 0.6180339887498949 * seg_index) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.85, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _ppm_tokens(data: bytes, n: int):
    out = []
    i = 0
    while len(out) < n:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        out.append(data[i:j])
        i = j
    return out, i + 1  # one whitespace byte ends the header


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _ppm_tokens(data, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(w), int(h)
    px = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off)
    return px.reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def read_image(path) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".ppm":
        return read_ppm(p)
    try:
        from PIL import Image
    except ImportError as exc:
        raise ValueError(f"{p}: reading {p.suffix} needs Pillow (install the 'png' extra)") from exc
    with Image.open(p) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, img: np.ndarray):
    p = Path(path)
    if p.suffix.lower() == ".ppm":
        return write_ppm(p, img)
    from PIL import Image
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), "RGB").save(p)


def overlay(img: np.ndarray, caption: GroundedCaption, alpha: float = ALPHA):
    """Alpha-blend each phrase mask in its own color; returns ``(image, legend)``."""
    out = img.astype(np.float64)
    legend = []
    for span, mask in zip(caption.spans, caption.masks):
        if (mask.width, mask.height) != (img.shape[1], img.shape[0]):
            raise ValueError(f"mask {mask.width}x{mask.height} does not match image "
                             f"{img.shape[1]}x{img.shape[0]}")
        color = seg_color(span.seg_index)
        sel = mask.to_dense().astype(bool)
        out[sel] = (1.0 - alpha) * out[sel] + alpha * np.array(color, dtype=np.float64)
        legend.append({"seg_index": span.seg_index, "phrase": span.phrase, "color": list(color),
                       "area": mask.area})
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), legend


def find_image(image_dir, record: dict) -> Optional[Path]:
    d = Path(image_dir)
    for key in ("path", "file_name"):
        if record.get(key):
            p = d / record[key]
            if p.exists():
                return p
    for ext in IMAGE_EXTS:
        p = d / f"{record['image_id']}{ext}"
        if p.exists():
            return p
    return None


def _caption_of(record: dict) -> Tuple[str, GroundedCaption]:
    if "dense_caption" in record and "caption_raw" not in record:
        from .scene_graph import caption_from_json
        return str(record["image_id"]), caption_from_json(record["dense_caption"])
    rec = GCGRecord.from_json(record)
    return rec.image_id, rec.caption


def render_record(record: dict, image_dir, out_dir, png: bool = False,
                  alpha: float = ALPHA) -> List[Path]:
    """Write the overlay and its ``.legend.json`` sidecar; returns the written paths.

    A record without masks is copied through unchanged.
    """
    image_id, caption = _caption_of(record)
    src = find_image(image_dir, record)
    if src is None:
        raise FileNotFoundError(f"no image for {image_id!r} in {image_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = "".join(c if c.isalnum() or c in "._-" else "_" for c in image_id)
    legend_path = out / f"{stem}.legend.json"
    if not caption.masks:
        dst = out / f"{stem}{src.suffix.lower()}"
        shutil.copyfile(src, dst)
        legend = []
    else:
        img, legend = overlay(read_image(src), caption, alpha)
        dst = out / f"{stem}.{'png' if png else 'ppm'}"
        write_image(dst, img)
    with open(legend_path, "w", encoding="utf-8") as fh:
        json.dump({"image_id": image_id, "caption": caption.plain_text, "legend": legend}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")
    return [dst, legend_path]
