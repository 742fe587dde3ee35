import json

import pytest

from finealign.cli import main
from finealign.gradcheck import run_suite
from finealign.report import smooth


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"train": {"lr": 3e-3, "warmup": 5}, "stage1": {"max_steps": 5}, "stage2": {"max_steps": 4}, "model": {"dim": 8}}))
    assert main(["generate", "--samples", "8", "--seed", "1", "--out", str(root / "c.jsonl")]) == 0
    assert main(["train", "--stage", "1", "--data", str(root / "c.jsonl"), "--config", str(cfg), "--out", str(root / "s1")]) == 0
    args = ["train", "--stage", "2", "--data", str(root / "c.jsonl"), "--config", str(cfg), "--out", str(root / "s2")]
    assert main(args + ["--resume", str(root / "s1"), "--workers", "2"]) == 0
    return root


class TestCli:
    def test_train_outputs(self, trained):
        assert (trained / "s2" / "checkpoint" / "manifest.json").exists()
        assert len((trained / "s2" / "metrics.jsonl").read_text().splitlines()) == 4

    def test_stage_two_without_resume(self, trained, capsys):
        code, _, err = run(capsys, "train", "--stage", "2", "--data", trained / "c.jsonl", "--out", trained / "bad")
        assert code == 2
        assert json.loads(err)["error"] == "MissingCheckpointError"

    def test_eval_retrieval(self, trained, capsys):
        code, out, _ = run(capsys, "eval-retrieval", "--ckpt", trained / "s2", "--data", trained / "c.jsonl", "--long")
        assert code == 0 and out["caption"] == "long"
        assert set(out["image_to_text"]) == {"R@1", "R@5", "R@10"}

    def test_eval_fgovd_and_bbox(self, trained, capsys):
        code, out, _ = run(capsys, "eval-fgovd", "--ckpt", trained / "s2", "--data", trained / "c.jsonl")
        assert code == 0 and out["regions"] == 16 and 0.0 <= out["top1"] <= 1.0
        code, out, _ = run(capsys, "eval-bbox", "--ckpt", trained / "s2" / "checkpoint", "--data", trained / "c.jsonl")
        assert code == 0 and out["regions"] == 16 and out["classes"] == 24

    def test_ovd_fuse(self, tmp_path, capsys):
        src = tmp_path / "det.jsonl"
        src.write_text(
            json.dumps({"box": [0, 0, 0.5, 0.5], "confidences": [0.9, 0.1], "sims": [0.2, 0.8]})
            + "\n"
            + json.dumps({"box": [0.1, 0.1, 0.2, 0.3], "confidences": [0.2, 0.3, 0.5], "sims": [0, 0, 0]})
            + "\n"
        )
        code, out, _ = run(capsys, "ovd-fuse", "--in", src, "--out", tmp_path / "f.jsonl", "--alpha", "1.0")
        assert code == 0 and out["boxes"] == 2
        rows = [json.loads(line) for line in (tmp_path / "f.jsonl").read_text().splitlines()]
        assert [r["category"] for r in rows] == [0, 2]

    def test_ovd_fuse_bad_line(self, tmp_path, capsys):
        src = tmp_path / "det.jsonl"
        src.write_text(json.dumps({"box": [0, 0, 1, 1], "confidences": [0.5], "sims": [0.1]}) + "\n{\"box\": 1}\n")
        code, _, err = run(capsys, "ovd-fuse", "--in", src, "--out", tmp_path / "f.jsonl")
        assert code == 2 and "line 2" in json.loads(err)["message"]

    def test_report(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "report", "--metrics", trained / "s2" / "metrics.jsonl", "--out", tmp_path / "rep", "--tsv")
        assert code == 0
        table = (tmp_path / "rep" / "metrics.tsv").read_text().splitlines()
        assert table[0].split("\t")[:3] == ["step", "lr", "loss_total"]
        assert len(table) == 5
        for key in ("losses", "margins"):
            assert open(out[key], "rb").read(8) == b"\x89PNG\r\n\x1a\n"


class TestReportHelpers:
    def test_smooth(self):
        assert smooth([1.0, 3.0, 5.0, 7.0], 2).tolist() == [1.0, 2.0, 4.0, 6.0]


class TestGradSuite:
    def test_suite_below_tolerance(self):
        report = run_suite(seed=1)
        assert set(report) == {"global", "dual_caption", "fgv", "fgt", "cmr", "tic", "total_stage1", "total"}
        assert max(report.values()) < 1e-4
