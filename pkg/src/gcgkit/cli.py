"""Command-line entry point: ``gcgkit <command> ...``.

Exit codes: 0 ok, 1 I/O problem, 2 schema problem, 3 validation exhausted.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ClientUnavailable, GcgError, SchemaError, ValidationExhausted

EXIT_OK, EXIT_IO, EXIT_SCHEMA, EXIT_EXHAUSTED = 0, 1, 2, 3

log = logging.getLogger("gcgkit")


class CliIOError(Exception):
    pass


def _unit(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1]")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _need_file(path):
    if path is None or not Path(path).is_file():
        raise CliIOError(f"cannot read {path}")
    return path


def _write_reports(out, obj: dict, text: str):
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (d / "report.txt").write_text(text, encoding="utf-8")


def _text_table(rows):
    lines = [f"{'metric':<8} {'value':>10}", "-" * 19]
    for name, v in rows:
        lines.append(f"{name:<8} {v:>10.4f}" if isinstance(v, float) else f"{name:<8} {v:>10}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_eval_gcg(args) -> int:
    from .evaluate import EvalConfig, evaluate_gcg, load_records, write_report
    from .grounding import EmbeddingSimilarity, LexicalSimilarity

    _need_file(args.gt)
    _need_file(args.pred)
    sim = EmbeddingSimilarity(args.embed_endpoint) if args.text_sim == "embedding" else LexicalSimilarity()
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    cfg = EvalConfig(args.iou_thresh, args.sim_thresh, args.ap_iou_thresh, metrics, args.workers, sim)
    report = evaluate_gcg(load_records(args.gt), load_records(args.pred, prediction=True), cfg)
    write_report(report, args.out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _mask_field(obj, *names):
    from .masks import BinaryMask

    for n in names:
        if n in obj:
            return BinaryMask.from_json(obj[n])
    raise SchemaError(f"record has none of {names}")


def cmd_eval_refseg(args) -> int:
    from .evaluate import read_jsonl
    from .grounding import refseg_eval

    _need_file(args.pairs)
    pairs = []
    for obj in read_jsonl(args.pairs):
        pairs.append((_mask_field(obj, "pred", "pred_mask"), _mask_field(obj, "gt", "gt_mask")))
    res = refseg_eval(pairs)
    _write_reports(args.out, res, _text_table([("cIoU", res["ciou"]), ("gIoU", res["giou"]),
                                               ("pairs", res["n"])]))
    sys.stdout.write((Path(args.out) / "report.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def _captions(path, many: bool):
    from .evaluate import read_jsonl

    out = {}
    for obj in read_jsonl(path):
        try:
            key = str(obj["id"])
            if many:
                caps = obj["captions"] if "captions" in obj else [obj["caption"]]
                if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
                    raise SchemaError(f"{key}: captions must be strings")
                out[key] = caps
            else:
                if not isinstance(obj["caption"], str):
                    raise SchemaError(f"{key}: caption must be a string")
                out[key] = obj["caption"]
        except KeyError as exc:
            raise SchemaError(f"{path}: record missing {exc}") from exc
    return out


def region_caption_report(gt: dict, pred: dict) -> dict:
    """METEOR and CIDEr over regions; missing predictions score as empty captions."""
    from .caption_metrics import cider, meteor_corpus

    cands = {k: pred.get(k, "") for k in gt}
    unknown = sorted(set(pred) - set(gt))
    if unknown:
        raise SchemaError(f"predictions for unknown region ids: {unknown[:5]}")
    per_c, c = cider(cands, gt)
    per_m, m = meteor_corpus(cands, gt)
    return {"meteor": m, "cider": c, "n": len(cands),
            "per_region": {k: {"meteor": per_m[k], "cider": per_c[k]} for k in cands}}


def cmd_eval_regioncap(args) -> int:
    _need_file(args.gt)
    _need_file(args.pred)
    res = region_caption_report(_captions(args.gt, True), _captions(args.pred, False))
    _write_reports(args.out, res, _text_table([("METEOR", res["meteor"]), ("CIDEr", res["cider"]),
                                               ("regions", res["n"])]))
    sys.stdout.write((Path(args.out) / "report.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def _pipeline_clients(args):
    from .pipeline.clients import Clients, clients_from_env
    from .pipeline.synthetic import SyntheticWorld

    if args.mock == "synthetic":
        return SyntheticWorld(args.seed, hallucinate=args.hallucinate).clients()
    if args.mock == "fixtures":
        if not args.fixtures or not Path(args.fixtures).is_dir():
            raise CliIOError(f"fixture directory {args.fixtures} not found")
        return Clients.from_fixtures(args.fixtures)
    return clients_from_env(max_concurrency=args.max_concurrency)


def cmd_pipeline(args) -> int:
    from .pipeline import CheckpointStore, PipelineConfig, read_manifest, run_all

    _need_file(args.manifest)
    try:
        manifest = read_manifest(args.manifest)
    except SchemaError as exc:
        # an unusable manifest is fatal in the same way as a missing one
        raise CliIOError(str(exc)) from exc
    store_dir = Path(args.store) if args.store else Path(args.out) / "store"
    if args.action == "resume" and not store_dir.is_dir():
        raise CliIOError(f"nothing to resume: {store_dir} does not exist")
    cfg = PipelineConfig(tau_nms=args.tau_nms, tau_match=args.tau_match, tau_phrase=args.tau_phrase,
                         max_caption_retries=args.max_retries, workers=args.workers,
                         checklist=args.checklist)
    clients = _pipeline_clients(args)
    out = Path(args.out)
    records, report = run_all(manifest, clients, CheckpointStore(store_dir), cfg, out / "corpus.jsonl")
    if args.dump_fixtures:
        clients.dump_fixtures(args.dump_fixtures)
    rep = report.to_json()
    (out / "run_report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    lines = [f"images {report.n_images}, complete {report.n_complete}"]
    for lv, c in sorted(rep["levels"].items()):
        lines.append(f"level {lv}: done {c['done']}, skipped {c['skipped']}, failed {c['failed']}")
    for f in report.failures:
        lines.append(f"failed {f['image_id']} at level {f['level']}: {f['error']}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_convert(args) -> int:
    from .evaluate import read_jsonl
    from .pipeline.clients import ServiceClient
    from .pipeline.convert import (
        convert_many,
        echo_llm,
        expected_phrases,
        paraphrase_llm,
        validate_conversion,
    )

    _need_file(args.input)
    items = read_jsonl(args.input)
    llm = segmenter = None
    if args.mock == "echo":
        llm = echo_llm
    elif args.mock == "paraphrase":
        llm = paraphrase_llm
    elif args.mock == "none":
        url = os.environ.get("GCGKIT_TEXT_LLM_ENDPOINT")
        llm = ServiceClient("text_llm", url) if url else None
        url = os.environ.get("GCGKIT_SEGMENTER_ENDPOINT")
        segmenter = ServiceClient("segmenter", url) if url else None
    records, rejected = convert_many(args.kind, items, llm, segmenter, args.max_retries,
                                     not args.no_fallback, args.workers)
    by_id = {str(it.get("image_id")): it for it in items}
    problems = []
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for r in records:
            obj = r.to_json()
            for p in validate_conversion(obj, expected_phrases(args.kind, by_id[r.image_id])):
                problems.append(f"{r.image_id}: {p}")
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")
    sys.stdout.write(f"converted {len(records)}, rejected {len(rejected)}\n")
    for image_id, msg in rejected:
        sys.stdout.write(f"rejected {image_id}: {msg}\n")
    if problems:
        raise SchemaError("validator found mismatches: " + "; ".join(problems[:5]))
    return EXIT_EXHAUSTED if rejected else EXIT_OK


def cmd_render(args) -> int:
    from .evaluate import read_jsonl
    from .render import render_record

    _need_file(args.records)
    if not Path(args.images).is_dir():
        raise CliIOError(f"image directory {args.images} not found")
    n = 0
    for obj in read_jsonl(args.records):
        try:
            render_record(obj, args.images, args.out, png=args.png)
        except (OSError, ValueError) as exc:
            if isinstance(exc, GcgError):
                raise
            raise CliIOError(f"{obj.get('image_id')}: {exc}") from exc
        n += 1
    sys.stdout.write(f"rendered {n} records into {args.out}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcgkit", description="Grounded caption toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    default_workers = os.cpu_count() or 1

    e = sub.add_parser("eval-gcg", help="score grounded caption predictions")
    e.add_argument("--gt", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--metrics", default="meteor,cider,ap50,miou,recall")
    e.add_argument("--text-sim", choices=("lexical", "embedding"), default="lexical")
    e.add_argument("--embed-endpoint")
    e.add_argument("--iou-thresh", type=_unit, default=0.5)
    e.add_argument("--sim-thresh", type=_unit, default=0.5)
    e.add_argument("--ap-iou-thresh", type=_unit, default=0.5)
    e.add_argument("--workers", type=_positive, default=default_workers)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_gcg)

    r = sub.add_parser("eval-refseg", help="cIoU / gIoU over mask pairs")
    r.add_argument("--pairs", required=True, help="JSONL of {id, pred, gt} masks")
    r.add_argument("--workers", type=_positive, default=default_workers)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_eval_refseg)

    c = sub.add_parser("eval-regioncap", help="METEOR / CIDEr over region captions")
    c.add_argument("--gt", required=True, help="JSONL of {id, captions}")
    c.add_argument("--pred", required=True, help="JSONL of {id, caption}")
    c.add_argument("--workers", type=_positive, default=default_workers)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_eval_regioncap)

    pl = sub.add_parser("pipeline", help="run the four annotation levels")
    pl.add_argument("action", choices=("run", "resume"))
    pl.add_argument("--manifest", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--store", help="checkpoint directory (default: OUT/store)")
    pl.add_argument("--mock", choices=("synthetic", "fixtures", "none"), default="none")
    pl.add_argument("--fixtures", help="directory of recorded client responses")
    pl.add_argument("--dump-fixtures", help="write every client exchange to this directory")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--hallucinate", type=float, default=0.0,
                    help="synthetic mock: chance the first dense caption names an absent object")
    pl.add_argument("--tau-nms", type=_unit, default=0.5)
    pl.add_argument("--tau-match", type=_unit, default=0.5)
    pl.add_argument("--tau-phrase", type=_unit, default=0.5)
    pl.add_argument("--max-retries", type=int, default=2)
    pl.add_argument("--checklist", choices=("llm", "chunker"), default="llm")
    pl.add_argument("--max-concurrency", type=_positive, help="per-client request cap")
    pl.add_argument("--workers", type=_positive, default=default_workers)
    pl.set_defaults(func=cmd_pipeline)

    cv = sub.add_parser("convert", help="build grounded caption records from other datasets")
    cv.add_argument("kind", choices=("refcocog", "psg", "flickr"))
    cv.add_argument("--input", required=True)
    cv.add_argument("--out", required=True, help="output JSONL")
    cv.add_argument("--mock", choices=("echo", "paraphrase", "none"), default="none")
    cv.add_argument("--max-retries", type=int, default=2)
    cv.add_argument("--no-fallback", action="store_true", help="fail instead of using box masks")
    cv.add_argument("--workers", type=_positive, default=default_workers)
    cv.set_defaults(func=cmd_convert)

    rd = sub.add_parser("render", help="draw phrase masks over images")
    rd.add_argument("--records", required=True)
    rd.add_argument("--images", required=True)
    rd.add_argument("--out", required=True)
    rd.add_argument("--png", action="store_true", help="write PNG (needs Pillow)")
    rd.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliIOError, ClientUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    except (GcgError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
