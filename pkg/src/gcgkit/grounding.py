"""Mask-grounding metrics: one-to-one assignment, mask recall, mIoU, AP50, cIoU/gIoU."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import kernels
from .caption_metrics import stem, tokenize
from .errors import DimensionMismatch
from .gcg_format import GroundedCaption
from .http import post_json
from .masks import BinaryMask, mask_iou_matrix

# ---------------------------------------------------------------------------
# assignment


@dataclass(frozen=True)
class AssignmentResult:
    pairs: tuple  # (pred_index, gt_index, iou), sorted by pred_index
    unmatched_pred: tuple
    unmatched_gt: tuple

    @property
    def total(self) -> float:
        return math.fsum(p[2] for p in self.pairs)


def _solve(mat: np.ndarray, rows: Sequence[int], cols: Sequence[int]):
    """Max-weight matching of size min(|rows|, |cols|) on a sub-matrix."""
    if not rows or not cols:
        return []
    sub = mat[np.ix_(rows, cols)]
    if len(rows) <= len(cols):
        col_of_row = kernels.min_cost_assignment(np.ascontiguousarray(-sub))
        return [(rows[r], cols[int(c)]) for r, c in enumerate(col_of_row)]
    row_of_col = kernels.min_cost_assignment(np.ascontiguousarray(-sub.T))
    return sorted((rows[int(r)], cols[c]) for c, r in enumerate(row_of_col))


def optimal_assignment(iou_matrix, tol: float = 1e-12) -> AssignmentResult:
    """One-to-one matching of predictions (rows) to ground truth (columns)
    maximising total IoU.

    Among optimal matchings the lexicographically smallest pair sequence wins:
    lower prediction indices are matched first, each to the lowest ground-truth
    index that still admits an optimal completion.
    """
    mat = np.asarray(iou_matrix, dtype=np.float64)
    if mat.ndim != 2:
        mat = mat.reshape(0, 0)
    n, m = mat.shape
    if n == 0 or m == 0:
        return AssignmentResult((), tuple(range(n)), tuple(range(m)))
    k = min(n, m)
    current = dict(_solve(mat, list(range(n)), list(range(m))))
    opt = math.fsum(mat[i, j] for i, j in current.items())

    fixed: Dict[int, int] = {}
    cols_left = set(range(m))
    for i in range(n):
        rows_rest = [r for r in range(i + 1, n)]
        cur_j = current.get(i)
        trial = sorted(c for c in cols_left if cur_j is None or c < cur_j)
        chosen = None
        for j in trial:
            cols_rest = sorted(cols_left - {j})
            if len(fixed) + 1 + min(len(rows_rest), len(cols_rest)) != k:
                continue
            sub = _solve(mat, rows_rest, cols_rest)
            cand = {**fixed, i: j, **dict(sub)}
            if math.fsum(mat[a, b] for a, b in cand.items()) >= opt - tol:
                chosen = j
                current = cand
                break
        if chosen is None:
            chosen = cur_j
        if chosen is None:
            continue
        fixed[i] = chosen
        cols_left.discard(chosen)

    pairs = tuple((i, j, float(mat[i, j])) for i, j in sorted(fixed.items()))
    matched_g = set(fixed.values())
    return AssignmentResult(
        pairs,
        tuple(i for i in range(n) if i not in fixed),
        tuple(j for j in range(m) if j not in matched_g),
    )


# ---------------------------------------------------------------------------
# text similarity providers


def lexical_sim(a: str, b: str) -> float:
    """Token-set F1 over stemmed tokens; two empty strings score 1."""
    sa = {stem(t) for t in tokenize(a)}
    sb = {stem(t) for t in tokenize(b)}
    if not sa and not sb:
        return 1.0
    if not sa or not sb:
        return 0.0
    common = len(sa & sb)
    if common == 0:
        return 0.0
    p = common / len(sa)
    r = common / len(sb)
    return 2 * p * r / (p + r)


class LexicalSimilarity:
    name = "lexical"

    def __call__(self, a: str, b: str) -> float:
        return lexical_sim(a, b)


class EmbeddingSimilarity:
    """Cosine similarity of sentence embeddings from a remote ``/embed`` service.

    Request ``{"texts": [...]}``, response ``{"vectors": [[...], ...]}``.
    Negative cosines are clipped to 0.
    """

    name = "embedding"

    def __init__(self, endpoint: Optional[str] = None, timeout: float = 30.0,
                 max_retries: int = 2, backoff: float = 0.5):
        endpoint = endpoint or os.environ.get("GCGKIT_EMBEDDER_ENDPOINT")
        if not endpoint:
            raise ValueError("no embedding endpoint configured (GCGKIT_EMBEDDER_ENDPOINT)")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._cache: Dict[str, np.ndarray] = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def embed(self, texts: Sequence[str]) -> List[np.ndarray]:
        missing = sorted({t for t in texts if t not in self._cache})
        if missing:
            resp = post_json(self.endpoint + "/embed", {"texts": missing},
                             self.timeout, self.max_retries, self.backoff)
            vecs = resp.get("vectors")
            if not isinstance(vecs, list) or len(vecs) != len(missing):
                raise ValueError("embedding service returned a malformed response")
            for t, v in zip(missing, vecs):
                self._cache[t] = np.asarray(v, dtype=np.float64)
        return [self._cache[t] for t in texts]

    def __call__(self, a: str, b: str) -> float:
        va, vb = self.embed([a, b])
        na = float(np.linalg.norm(va))
        nb = float(np.linalg.norm(vb))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return float(min(1.0, max(0.0, float(va @ vb) / (na * nb))))


TextSim = Callable[[str, str], float]


# ---------------------------------------------------------------------------
# per-caption metrics


def _iou_for(pred: GroundedCaption, gt: GroundedCaption) -> np.ndarray:
    if pred.masks and gt.masks and pred.size != gt.size:
        raise DimensionMismatch(f"prediction masks {pred.size} vs ground truth {gt.size}")
    iou, _, _ = mask_iou_matrix(list(pred.masks), list(gt.masks))
    return iou


def recall_from_assignment(assign: AssignmentResult, pred_phrases, gt_phrases, sim: TextSim,
                           iou_thresh: float = 0.5, sim_thresh: float = 0.5):
    tp = 0
    fp = 0
    details = []
    for p, g, iou in assign.pairs:
        s = None
        ok = False
        if iou > iou_thresh:
            s = float(sim(pred_phrases[p], gt_phrases[g]))
            ok = s > sim_thresh
        if ok:
            tp += 1
        else:
            fp += 1
        details.append({"pred": p, "gt": g, "iou": iou, "sim": s, "tp": ok})
    return tp, fp, details


def _empty_convention(n_pred: int) -> float:
    return 1.0 if n_pred == 0 else 0.0


def mask_recall(pred: GroundedCaption, gt: GroundedCaption, sim: TextSim = lexical_sim,
                iou_thresh: float = 0.5, sim_thresh: float = 0.5):
    """Fraction of ground-truth masks recovered by an optimally assigned
    prediction whose IoU *and* phrase similarity both exceed their thresholds.

    Returns ``(recall, diagnostics)``.
    """
    assign = optimal_assignment(_iou_for(pred, gt))
    tp, fp, details = recall_from_assignment(assign, pred.phrases, gt.phrases, sim,
                                             iou_thresh, sim_thresh)
    n_gt = len(gt.masks)
    recall = tp / n_gt if n_gt else _empty_convention(len(pred.masks))
    return recall, {"tp": tp, "fp": fp, "n_gt": n_gt, "n_pred": len(pred.masks),
                    "pairs": details}


def miou_from_assignment(assign: AssignmentResult, n_gt: int, n_pred: int) -> float:
    if n_gt == 0:
        return _empty_convention(n_pred)
    return math.fsum(p[2] for p in assign.pairs) / n_gt


def miou_gcg(pred: GroundedCaption, gt: GroundedCaption) -> float:
    """Mean over ground-truth masks of the IoU of the assigned prediction
    (0 for unassigned ground truth)."""
    assign = optimal_assignment(_iou_for(pred, gt))
    return miou_from_assignment(assign, len(gt.masks), len(pred.masks))


# ---------------------------------------------------------------------------
# AP50

REC_THRESHOLDS = np.linspace(0.0, 1.0, 101)


def greedy_match(iou: np.ndarray, scores: Sequence[float], iou_thresh: float = 0.5) -> List[bool]:
    """Per-image TP flags: predictions in (score desc, index) order each take
    the unmatched ground truth of highest IoU >= ``iou_thresh``."""
    n_pred = len(scores)
    order = sorted(range(n_pred), key=lambda i: (-scores[i], i))
    taken = set()
    flags = [False] * n_pred
    n_gt = iou.shape[1] if iou.ndim == 2 else 0
    for i in order:
        best_j = -1
        best = -1.0
        for j in range(n_gt):
            if j in taken:
                continue
            v = iou[i, j]
            if v >= iou_thresh and v > best:
                best = v
                best_j = j
        if best_j >= 0:
            taken.add(best_j)
            flags[i] = True
    return flags


def ap_from_matches(per_image: Sequence[tuple], n_gt_total: int) -> float:
    """101-point interpolated AP from per-image ``(scores, tp_flags)``.

    Predictions are ranked corpus-wide by score, ties by image order then
    index within the image.
    """
    entries = []
    for img, (scores, flags) in enumerate(per_image):
        for k, (s, f) in enumerate(zip(scores, flags)):
            entries.append((-float(s), img, k, bool(f)))
    if n_gt_total == 0:
        return _empty_convention(len(entries))
    if not entries:
        return 0.0
    entries.sort()
    tps = np.array([e[3] for e in entries], dtype=np.float64)
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(1.0 - tps)
    rec = tp_cum / n_gt_total
    prec = tp_cum / (tp_cum + fp_cum)
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    idx = np.searchsorted(rec, REC_THRESHOLDS, side="left")
    q = np.where(idx < len(prec), prec[np.minimum(idx, len(prec) - 1)], 0.0)
    return float(np.mean(q))


def ap50(pred_masks: Sequence[Sequence[BinaryMask]], gt_masks: Sequence[Sequence[BinaryMask]],
         pred_scores: Optional[Sequence[Optional[Sequence[float]]]] = None,
         iou_thresh: float = 0.5) -> float:
    """Class-agnostic mask AP at IoU 0.5 over a list of images.

    Missing scores default to 1.0, so ranking then falls back to image order
    and mask order.
    """
    if len(pred_masks) != len(gt_masks):
        raise ValueError("need one prediction list per ground-truth image")
    per_image = []
    n_gt = 0
    for k, (pm, gm) in enumerate(zip(pred_masks, gt_masks)):
        scores = None if pred_scores is None else pred_scores[k]
        if scores is None:
            scores = [1.0] * len(pm)
        iou, _, _ = mask_iou_matrix(list(pm), list(gm))
        per_image.append((list(scores), greedy_match(iou, scores, iou_thresh)))
        n_gt += len(gm)
    return ap_from_matches(per_image, n_gt)


# ---------------------------------------------------------------------------
# referring segmentation


def refseg_eval(pairs: Sequence[tuple]) -> dict:
    """cIoU (sum of intersections over sum of unions) and gIoU (mean IoU)."""
    inter_sum = 0
    union_sum = 0
    ious = []
    for pred, gt in pairs:
        if (pred.width, pred.height) != (gt.width, gt.height):
            raise DimensionMismatch("prediction and ground-truth mask sizes differ")
        _, inter, union = mask_iou_matrix([pred], [gt])
        i = int(inter[0, 0])
        u = int(union[0, 0])
        inter_sum += i
        union_sum += u
        ious.append(i / u if u else 0.0)
    ciou = inter_sum / union_sum if union_sum else 0.0
    giou = math.fsum(ious) / len(ious) if ious else 0.0
    return {"ciou": ciou, "giou": giou, "n": len(ious)}
