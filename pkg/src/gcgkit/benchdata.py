"""Synthetic ground-truth / prediction pairs for benchmarking the evaluator."""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .gcg_format import GCGRecord, caption_from_phrases
from .masks import BinaryMask

NOUNS = ("man", "woman", "dog", "cat", "car", "tree", "bench", "kite", "horse", "boat", "table",
         "chair", "umbrella", "bicycle", "bird", "clock", "lamp", "window", "door", "sign")
ADJ = ("red", "small", "large", "wooden", "white", "old", "young", "black", "green", "tall")
VERBS = ("stands near", "sits beside", "is behind", "rests on", "faces", "is next to")


def _blob(rng, w, h) -> np.ndarray:
    """A random filled ellipse, never empty."""
    cx, cy = rng.uniform(0.15 * w, 0.85 * w), rng.uniform(0.15 * h, 0.85 * h)
    rx, ry = rng.uniform(0.05 * w, 0.3 * w), rng.uniform(0.05 * h, 0.3 * h)
    yy, xx = np.mgrid[0:h, 0:w]
    grid = (((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0).astype(np.uint8)
    if not grid.any():
        grid[int(cy), int(cx)] = 1
    return grid


def _shift(grid: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(grid)
    h, w = grid.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = grid[ys, xs]
    return out


def _caption(rng, n_phr) -> Tuple[str, list]:
    """Sentence with ``n_phr`` noun phrases; returns text and phrase offsets."""
    text = ""
    spans = []
    for k in range(n_phr):
        phrase = f"a {ADJ[rng.integers(len(ADJ))]} {NOUNS[rng.integers(len(NOUNS))]}"
        if k == 0:
            phrase = phrase[0].upper() + phrase[1:]
        start = len(text)
        text += phrase
        spans.append((start, len(text)))
        text += f" {VERBS[rng.integers(len(VERBS))]} " if k < n_phr - 1 else " in the scene."
    if n_phr == 0:
        text = "An empty scene."
    return text, spans


def synthetic_gcg_pairs(n: int, seed: int = 0, width: int = 96, height: int = 72,
                        max_phrases: int = 4) -> Tuple[List[GCGRecord], List[GCGRecord]]:
    """``n`` ground-truth records and noisy predictions of them.

    Predictions shift masks by a few pixels, sometimes drop or add a phrase
    and rewrite some words, so every metric lands strictly between 0 and 1.
    """
    rng = np.random.default_rng(seed)
    gts, preds = [], []
    for i in range(n):
        image_id = f"syn{seed}_{i:06d}"
        k = int(rng.integers(1, max_phrases + 1))
        grids = [_blob(rng, width, height) for _ in range(k)]
        text, spans = _caption(rng, k)
        gt_cap = caption_from_phrases(
            text, [(s, e, BinaryMask.from_dense(g)) for (s, e), g in zip(spans, grids)])
        gts.append(GCGRecord(image_id, width, height, gt_cap, "test"))

        keep = [j for j in range(k) if rng.uniform() > 0.15] or [0]
        p_grids = [_shift(grids[j], int(rng.integers(-4, 5)), int(rng.integers(-4, 5))) for j in keep]
        if rng.uniform() < 0.2:
            p_grids.append(_blob(rng, width, height))
        p_text, p_spans = _caption(rng, len(p_grids))
        # reuse most gt phrase texts so phrase similarity is meaningful
        if rng.uniform() < 0.7:
            p_text, p_spans = _reuse(text, spans, keep, p_text, p_spans)
        scores = [round(float(rng.uniform(0.2, 1.0)), 4) for _ in p_grids]
        located = [(s, e, BinaryMask.from_dense(g)) for (s, e), g in zip(p_spans, p_grids)]
        p_cap = caption_from_phrases(p_text, located)
        p_cap = type(p_cap)(p_cap.plain_text, p_cap.spans, p_cap.masks, tuple(scores))
        preds.append(GCGRecord(image_id, width, height, p_cap, "test"))
    return gts, preds


def _reuse(text, spans, keep, p_text, p_spans):
    phrases = [text[spans[j][0]:spans[j][1]] for j in keep]
    extra = [p_text[s:e] for s, e in p_spans[len(keep):]]
    out = ""
    new_spans = []
    allp = phrases + extra
    for k, ph in enumerate(allp):
        start = len(out)
        out += ph
        new_spans.append((start, len(out)))
        out += " with " if k < len(allp) - 1 else "."
    return out, new_spans
