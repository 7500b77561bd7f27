"""Corpus-level GCG evaluation: METEOR, CIDEr, AP50, mIoU and mask recall in one pass."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from .caption_metrics import build_idf, cider_image, meteor
from .errors import CountMismatch, SchemaError, UnknownImageId
from .gcg_format import GCGRecord, GroundedCaption, bind_masks, parse_grounded
from .grounding import (
    LexicalSimilarity,
    ap_from_matches,
    greedy_match,
    miou_from_assignment,
    optimal_assignment,
    recall_from_assignment,
)
from .masks import BinaryMask, mask_iou_matrix

log = logging.getLogger(__name__)

ALL_METRICS = ("meteor", "cider", "ap50", "miou", "recall")


@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    sim_thresh: float = 0.5
    ap_iou_thresh: float = 0.5
    metrics: Sequence[str] = ALL_METRICS
    workers: int = 1
    text_sim: object = field(default_factory=LexicalSimilarity)

    def __post_init__(self):
        for name in ("iou_thresh", "sim_thresh", "ap_iou_thresh"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        unknown = set(self.metrics) - set(ALL_METRICS)
        if unknown:
            raise ValueError(f"unknown metrics: {sorted(unknown)}")


@dataclass
class GCGEvalReport:
    meteor: Optional[float]
    cider: Optional[float]
    ap50: Optional[float]
    miou: Optional[float]
    recall: Optional[float]
    n_images: int
    per_image: dict

    def to_json(self) -> dict:
        return {
            "meteor": self.meteor,
            "cider": self.cider,
            "ap50": self.ap50,
            "miou": self.miou,
            "recall": self.recall,
            "n_images": self.n_images,
            "per_image": self.per_image,
        }

    def to_text(self) -> str:
        rows = [("METEOR", self.meteor), ("CIDEr", self.cider), ("AP50", self.ap50),
                ("mIoU", self.miou), ("Recall", self.recall)]
        lines = [f"{'metric':<8} {'value':>10}", "-" * 19]
        for name, v in rows:
            lines.append(f"{name:<8} {'-' if v is None else format(v, '.4f'):>10}")
        lines.append(f"{'images':<8} {self.n_images:>10}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# loading


def read_jsonl(path) -> List[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object")
            out.append(obj)
    return out


def prediction_from_json(obj: dict) -> GCGRecord:
    """Tolerant parse of a model prediction.

    Malformed token runs are dropped; when the mask count still disagrees
    with the grounded phrases the first ``min`` of each are paired.
    """
    try:
        return GCGRecord.from_json(obj, strict=False)
    except CountMismatch:
        pass
    parsed = parse_grounded(obj["caption_raw"], strict=False)
    masks = [BinaryMask.from_json(m) for m in obj.get("masks", [])]
    scores = obj.get("scores")
    k = min(len(masks), parsed.seg_count)
    log.warning("%s: %d grounded phrases vs %d masks; pairing the first %d",
                obj.get("image_id"), parsed.seg_count, len(masks), k)
    trimmed = type(parsed)(parsed.plain_text, parsed.spans[:k], k, parsed.seg_ordinals[:k], k)
    caption = bind_masks(trimmed, masks[:k], None if scores is None else scores[:k])
    return GCGRecord(str(obj["image_id"]), int(obj["width"]), int(obj["height"]), caption,
                     obj.get("split"), obj["caption_raw"])


def load_records(path, prediction: bool = False) -> List[GCGRecord]:
    recs = []
    for lineno, obj in enumerate(read_jsonl(path), 1):
        try:
            recs.append(prediction_from_json(obj) if prediction else GCGRecord.from_json(obj))
        except (SchemaError, ValueError, KeyError) as exc:
            raise SchemaError(f"{path}: record {lineno}: {exc}") from exc
    return recs


# ---------------------------------------------------------------------------
# per-image scoring (runs in worker processes)


def _score_image(args):
    gt, pred, cfg = args
    g = gt.caption
    p = pred.caption if pred is not None else GroundedCaption("")
    if p.masks and (pred.width, pred.height) != (gt.width, gt.height):
        raise SchemaError(f"{gt.image_id}: prediction size differs from ground truth")
    iou, _, _ = mask_iou_matrix(list(p.masks), list(g.masks))
    n_gt = len(g.masks)
    n_pred = len(p.masks)
    out = {"n_gt": n_gt, "n_pred": n_pred}
    if "recall" in cfg.metrics or "miou" in cfg.metrics:
        assign = optimal_assignment(iou)
        out["matched_ious"] = [[a, b, v] for a, b, v in assign.pairs]
        if "recall" in cfg.metrics:
            tp, fp, _ = recall_from_assignment(assign, p.phrases, g.phrases, cfg.text_sim,
                                               cfg.iou_thresh, cfg.sim_thresh)
            out["tp"] = tp
            out["fp"] = fp
            out["missed"] = n_gt - tp
        if "miou" in cfg.metrics:
            out["miou"] = miou_from_assignment(assign, n_gt, n_pred)
    if "ap50" in cfg.metrics:
        scores = list(p.scores) if p.scores is not None else [1.0] * n_pred
        out["ap_scores"] = scores
        out["ap_tp"] = greedy_match(iou, scores, cfg.ap_iou_thresh)
    if "meteor" in cfg.metrics:
        out["meteor"] = meteor(p.plain_text, [g.plain_text])
    return out


def _pairs(gt: Sequence[GCGRecord], pred: Iterable[GCGRecord]):
    index = {}
    for r in gt:
        if r.image_id in index:
            raise SchemaError(f"duplicate ground-truth image_id {r.image_id!r}")
        index[r.image_id] = r
    by_id = {}
    for r in pred:
        if r.image_id not in index:
            raise UnknownImageId(f"prediction for unknown image_id {r.image_id!r}")
        if r.image_id in by_id:
            raise SchemaError(f"duplicate prediction for image_id {r.image_id!r}")
        by_id[r.image_id] = r
    return [(r, by_id.get(r.image_id)) for r in gt]


def evaluate_gcg(gt: Iterable[GCGRecord], pred: Iterable[GCGRecord],
                 config: Optional[EvalConfig] = None) -> GCGEvalReport:
    """Score predictions against ground truth; images without a prediction
    count as empty captions with no masks.

    Per-image work is spread over ``config.workers`` processes; results are
    folded in ground-truth order, so the report does not depend on the
    worker count.
    """
    cfg = config or EvalConfig()
    gt = list(gt)
    pairs = _pairs(gt, pred)
    jobs = [(g, p, cfg) for g, p in pairs]
    if cfg.workers > 1 and len(jobs) > 1:
        chunk = max(1, len(jobs) // (cfg.workers * 4))
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_score_image, jobs, chunksize=chunk))
    else:
        results = [_score_image(j) for j in jobs]

    per_image = {}
    for (g, _), res in zip(pairs, results):
        diag = {k: v for k, v in res.items() if k not in ("ap_scores",)}
        per_image[g.image_id] = diag

    n = len(pairs)
    report = GCGEvalReport(None, None, None, None, None, n, per_image)
    if n == 0:
        return report
    m = cfg.metrics
    if "meteor" in m:
        report.meteor = math.fsum(r["meteor"] for r in results) / n
    if "cider" in m:
        refs = {g.image_id: [g.caption.plain_text] for g, _ in pairs}
        idf = build_idf(refs)
        total = []
        for g, p in pairs:
            cand = p.caption.plain_text if p is not None else ""
            score = cider_image(cand, refs[g.image_id], idf)
            per_image[g.image_id]["cider"] = score
            total.append(score)
        report.cider = math.fsum(total) / n
    if "miou" in m:
        report.miou = math.fsum(r["miou"] for r in results) / n
    if "recall" in m:
        n_gt = sum(r["n_gt"] for r in results)
        tp = sum(r["tp"] for r in results)
        n_pred = sum(r["n_pred"] for r in results)
        report.recall = tp / n_gt if n_gt else (1.0 if n_pred == 0 else 0.0)
    if "ap50" in m:
        report.ap50 = ap_from_matches([(r["ap_scores"], r["ap_tp"]) for r in results],
                                      sum(r["n_gt"] for r in results))
    return report


def write_report(report: GCGEvalReport, out_dir) -> tuple:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / "report.json"
    tpath = out / "report.txt"
    jpath.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tpath.write_text(report.to_text(), encoding="utf-8")
    return jpath, tpath
