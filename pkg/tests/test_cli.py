import json
import subprocess
import sys

import pytest

from builders import refcocog_item, psg_item, flickr_item
from gcgkit.benchdata import synthetic_gcg_pairs
from gcgkit.cli import main, region_caption_report
from gcgkit.evaluate import EvalConfig, evaluate_gcg
from gcgkit.grounding import refseg_eval
from gcgkit.masks import BinaryMask
from gcgkit.pipeline.synthetic import synthetic_manifest


def write_jsonl(path, objs):
    with open(path, "w") as fh:
        for o in objs:
            fh.write(json.dumps(o) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def gcg_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("gcg")
    gts, preds = synthetic_gcg_pairs(8, seed=11)
    return (write_jsonl(d / "gt.jsonl", [r.to_json() for r in gts]),
            write_jsonl(d / "pred.jsonl", [r.to_json() for r in preds]), gts, preds)


class TestEvalGcg:
    def test_self_match(self, tmp_path, gcg_files):
        gt, _, _, _ = gcg_files
        assert main(["eval-gcg", "--gt", gt, "--pred", gt, "--out", str(tmp_path), "--workers", "1"]) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["recall"] == 1.0 and rep["miou"] == 1.0 and rep["ap50"] == 1.0

    def test_library_equivalence(self, tmp_path, gcg_files):
        gt, pred, gts, preds = gcg_files
        for w in ("1", "3"):
            out = tmp_path / w
            assert main(["eval-gcg", "--gt", gt, "--pred", pred, "--out", str(out), "--workers", w]) == 0
            assert json.loads((out / "report.json").read_text()) == json.loads(
                json.dumps(evaluate_gcg(gts, preds, EvalConfig()).to_json()))

    def test_exit_codes(self, tmp_path, gcg_files):
        gt, _, _, _ = gcg_files
        assert main(["eval-gcg", "--gt", gt, "--pred", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"image_id": "x"}\n')
        assert main(["eval-gcg", "--gt", gt, "--pred", str(bad), "--out", str(tmp_path)]) == 2
        with pytest.raises(SystemExit):
            main(["eval-gcg", "--gt", gt, "--pred", gt, "--out", str(tmp_path), "--iou-thresh", "1.5"])


def mask(x1, w=6, h=4):
    import numpy as np
    g = np.zeros((h, w), dtype=np.uint8)
    g[:, :x1] = 1
    return BinaryMask.from_dense(g)


class TestEvalRefseg:
    def test_cases(self, tmp_path):
        pairs = [(mask(2), mask(4)), (mask(5), mask(5))]
        f = write_jsonl(tmp_path / "p.jsonl", [{"id": i, "pred": p.to_json(), "gt_mask": g.to_json()}
                                               for i, (p, g) in enumerate(pairs)])
        assert main(["eval-refseg", "--pairs", f, "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "report.json").read_text())
        assert rep == json.loads(json.dumps(refseg_eval(pairs)))
        same = write_jsonl(tmp_path / "s.jsonl", [{"id": 0, "pred": mask(3).to_json(), "gt": mask(3).to_json()}])
        main(["eval-refseg", "--pairs", same, "--out", str(tmp_path / "s")])
        assert json.loads((tmp_path / "s" / "report.json").read_text())["ciou"] == 1.0
        empty = write_jsonl(tmp_path / "e.jsonl", [{"id": 0, "pred": BinaryMask.empty(6, 4).to_json(),
                                                    "gt": mask(3).to_json()}])
        main(["eval-refseg", "--pairs", empty, "--out", str(tmp_path / "e")])
        assert json.loads((tmp_path / "e" / "report.json").read_text())["ciou"] == 0.0
        assert main(["eval-refseg", "--pairs", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1


class TestEvalRegioncap:
    def test_cases(self, tmp_path):
        gt = {"r1": ["a man riding a brown horse on the beach"], "r2": ["two dogs playing in the snow"],
              "r3": ["a red car parked near a building"]}
        pred = {"r1": "a man riding a horse", "r2": "purple elephants flying", "r3": "a red car parked"}
        gf = write_jsonl(tmp_path / "g.jsonl", [{"id": k, "captions": v} for k, v in gt.items()])
        pf = write_jsonl(tmp_path / "p.jsonl", [{"id": k, "caption": v} for k, v in pred.items()])
        assert main(["eval-regioncap", "--gt", gf, "--pred", pf, "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "report.json").read_text())
        assert rep == json.loads(json.dumps(region_caption_report(gt, pred)))
        assert rep["per_region"]["r2"]["cider"] == 0.0
        selfp = write_jsonl(tmp_path / "s.jsonl", [{"id": k, "caption": v[0]} for k, v in gt.items()])
        main(["eval-regioncap", "--gt", gf, "--pred", selfp, "--out", str(tmp_path / "s")])
        rep = json.loads((tmp_path / "s" / "report.json").read_text())
        assert rep["meteor"] >= 0.99


class TestPipeline:
    def manifest(self, tmp_path, n=4):
        return write_jsonl(tmp_path / "m.jsonl", synthetic_manifest(n, seed=3))

    def test_run_resume(self, tmp_path, capsys):
        m = self.manifest(tmp_path)
        out = tmp_path / "out"
        args = ["pipeline", "run", "--manifest", m, "--out", str(out), "--mock", "synthetic", "--seed", "3",
                "--hallucinate", "0.5", "--workers", "2", "--dump-fixtures", str(tmp_path / "fx")]
        assert main(args) == 0
        first = (out / "corpus.jsonl").read_bytes()
        assert len(first.splitlines()) == 4
        args[1] = "resume"
        assert main(args) == 0
        assert (out / "corpus.jsonl").read_bytes() == first
        rep = json.loads((out / "run_report.json").read_text())
        assert rep["levels"]["4"]["skipped"] == 4
        # replay from the recorded fixtures into a fresh store
        out2 = tmp_path / "out2"
        assert main(["pipeline", "run", "--manifest", m, "--out", str(out2), "--mock", "fixtures",
                     "--fixtures", str(tmp_path / "fx"), "--workers", "1"]) == 0
        assert (out2 / "corpus.jsonl").read_bytes() == first

    def test_bad_manifest(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("not json\n")
        assert main(["pipeline", "run", "--manifest", str(bad), "--out", str(tmp_path / "o"),
                     "--mock", "synthetic"]) == 1
        assert main(["pipeline", "run", "--manifest", str(tmp_path / "missing"), "--out",
                     str(tmp_path / "o"), "--mock", "synthetic"]) == 1
        assert main(["pipeline", "resume", "--manifest", self.manifest(tmp_path), "--out",
                     str(tmp_path / "never"), "--mock", "synthetic"]) == 1


class TestConvert:
    def test_kinds(self, tmp_path):
        cases = {"refcocog": refcocog_item("a", ["the man", "a dog"]),
                 "psg": psg_item("b", [("a man", 1, "rides", "a horse", 4)]),
                 "flickr": flickr_item("c", "A dog runs.", [("A dog", [[1, 2, 9, 8]])])}
        for kind, item in cases.items():
            inp = write_jsonl(tmp_path / f"{kind}.jsonl", [item])
            out = tmp_path / f"{kind}.out.jsonl"
            assert main(["convert", kind, "--input", inp, "--out", str(out), "--mock", "echo"]) == 0
            assert len(out.read_text().splitlines()) == 1

    def test_exhausted(self, tmp_path):
        inp = write_jsonl(tmp_path / "r.jsonl", [refcocog_item("a", ["the man"]), refcocog_item("b", ["a dog"])])
        assert main(["convert", "refcocog", "--input", inp, "--out", str(tmp_path / "o.jsonl"),
                     "--mock", "paraphrase"]) == 3
        assert (tmp_path / "o.jsonl").read_text() == ""

    def test_no_segmenter_no_fallback(self, tmp_path, monkeypatch):
        monkeypatch.delenv("GCGKIT_SEGMENTER_ENDPOINT", raising=False)
        inp = write_jsonl(tmp_path / "f.jsonl", [flickr_item("c", "A dog runs.", [("A dog", [[1, 2, 9, 8]])])])
        assert main(["convert", "flickr", "--input", inp, "--out", str(tmp_path / "o.jsonl"),
                     "--no-fallback"]) == 1


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gcgkit.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "eval-gcg" in r.stdout
