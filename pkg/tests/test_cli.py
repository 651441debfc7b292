import json

import numpy as np
import pytest

from lthead import load_checkpoint, load_features
from lthead.cli import main


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data plus a tiny trained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--classes", "4", "--head-count", "40",
                "--ratio", "8", "--dim", "8", "--seed", "3",
                "--separation", "2.0", "--noise", "0.5",
                "--test-per-class", "6", "--out", str(root / "data")]) == 0
    cfg = root / "run.cfg"
    cfg.write_text("seed=1\ntotal_iters=40\nbatch_size=16\nwarmup_iters=5\n"
                   "depth=1\nheads=2\ndropout=0.0\nstage2_iters=20\n")
    assert run(["train", "--features", str(root / "data.train"),
                "--config", str(cfg), "--loss", "bsm",
                "--out", str(root / "model.ckpt")]) == 0
    assert run(["calibrate", "--ckpt", str(root / "model.ckpt"),
                "--features", str(root / "data.train"), "--method", "marc",
                "--out", str(root / "model_marc.ckpt")]) == 0
    return root


class TestGenData:
    def test_files_written(self, workspace):
        train = load_features(workspace / "data.train")
        test = load_features(workspace / "data.test")
        assert train.num_classes == 4 and train.dim == 8
        assert test.role == "test"
        counts = np.bincount(test.labels, minlength=4)
        assert np.all(counts == 6)


class TestTrain:
    def test_checkpoint_and_loss_log(self, workspace):
        head, stats, cal = load_checkpoint(workspace / "model.ckpt")
        assert head.config.depth == 1 and cal is None
        assert stats.counts.sum() == load_features(workspace / "data.train").num_samples
        log = (workspace / "model.ckpt.losses.csv").read_text().splitlines()
        assert log[0] == "iteration,loss"
        assert len(log) == 41
        step, value = log[1].split(",")
        assert step == "0" and float(value) > 0

    def test_unknown_config_key_exit_2(self, workspace, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("lr=0.5\n")
        assert run(["train", "--features", str(workspace / "data.train"),
                    "--config", str(bad), "--out", str(tmp_path / "x.ckpt")]) == 2

    def test_cross_process_determinism(self, workspace, tmp_path):
        import subprocess
        import sys
        outs = []
        for name in ("p1.ckpt", "p2.ckpt"):
            out = tmp_path / name
            cmd = [sys.executable, "-m", "lthead.cli", "train",
                   "--features", str(workspace / "data.train"),
                   "--config", str(workspace / "run.cfg"),
                   "--out", str(out)]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outs.append(out)
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_divergence_exit_3(self, workspace, tmp_path):
        cfg = tmp_path / "boom.cfg"
        cfg.write_text("seed=1\ntotal_iters=30\nbatch_size=8\nwarmup_iters=2\n"
                       "lr0=1e30\nweight_decay=0.0\ndepth=1\nheads=2\ndropout=0.0\n")
        with np.errstate(over="ignore", invalid="ignore"):
            code = run(["train", "--features", str(workspace / "data.train"),
                        "--config", str(cfg), "--out", str(tmp_path / "x.ckpt")])
        assert code == 3


class TestCalibrate:
    def test_calibrated_checkpoint_evaluates(self, workspace):
        _, _, cal = load_checkpoint(workspace / "model_marc.ckpt")
        assert cal is not None and cal.variant == "marc"
        assert run(["eval", "--ckpt", str(workspace / "model_marc.ckpt"),
                    "--test", str(workspace / "data.test"),
                    "--report", str(workspace / "marc.report")]) == 0
        payload = json.loads((workspace / "marc.report.json").read_text())
        assert 0.0 <= payload["overall"] <= 1.0


class TestEval:
    def test_report_files(self, workspace):
        assert run(["eval", "--ckpt", str(workspace / "model.ckpt"),
                    "--test", str(workspace / "data.test"),
                    "--report", str(workspace / "base.report")]) == 0
        text = (workspace / "base.report").read_text()
        assert "overall" in text and "macro f1" in text
        payload = json.loads((workspace / "base.report.json").read_text())
        assert set(payload) >= {"overall", "many", "medium", "few",
                                "precision", "recall", "f1"}

    def test_determinism_across_runs(self, workspace, tmp_path):
        a, b = tmp_path / "a.report", tmp_path / "b.report"
        run(["eval", "--ckpt", str(workspace / "model.ckpt"),
             "--test", str(workspace / "data.test"), "--report", str(a)])
        run(["eval", "--ckpt", str(workspace / "model.ckpt"),
             "--test", str(workspace / "data.test"), "--report", str(b)])
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.report.json").read_bytes() == \
            (tmp_path / "b.report.json").read_bytes()

    def test_missing_checkpoint_exit_2(self, workspace, tmp_path):
        assert run(["eval", "--ckpt", str(tmp_path / "nope.ckpt"),
                    "--test", str(workspace / "data.test"),
                    "--report", str(tmp_path / "r")]) == 2

    def test_corrupt_checkpoint_exit_2(self, workspace, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"XXXX" + b"\0" * 20)
        assert run(["eval", "--ckpt", str(bad),
                    "--test", str(workspace / "data.test"),
                    "--report", str(tmp_path / "r")]) == 2


class TestZeroShot:
    def test_orthonormal_toy(self, tmp_path):
        class_embs = tmp_path / "classes.txt"
        class_embs.write_text("1.0, 0.0, 0.0\n0.0, 1.0, 0.0\n0.0, 0.0, 1.0\n")
        images = tmp_path / "images.txt"
        images.write_text("0, 1.0, 0.0, 0.0\n1, 0.0, 1.0, 0.0\n2, 0.0, 0.0, 1.0\n")
        assert run(["zero-shot", "--image-embs", str(images),
                    "--class-embs", str(class_embs),
                    "--report", str(tmp_path / "zs.report")]) == 0
        payload = json.loads((tmp_path / "zs.report.json").read_text())
        assert payload["overall"] == 1.0

    def test_label_file_override(self, tmp_path):
        class_embs = tmp_path / "classes.txt"
        class_embs.write_text("1.0, 0.0\n0.0, 1.0\n")
        images = tmp_path / "images.txt"
        images.write_text("0, 1.0, 0.0\n0, 0.0, 1.0\n")
        labels = tmp_path / "labels.txt"
        labels.write_text("0\n1\n")
        assert run(["zero-shot", "--image-embs", str(images),
                    "--class-embs", str(class_embs),
                    "--test-labels", str(labels),
                    "--report", str(tmp_path / "zs2.report")]) == 0
        payload = json.loads((tmp_path / "zs2.report.json").read_text())
        assert payload["overall"] == 1.0


class TestGradcheckCommand:
    def test_losses_module_passes(self, capsys):
        assert run(["gradcheck", "--module", "losses", "--tol", "1e-5"]) == 0
        out = capsys.readouterr().out
        assert "PASS losses.ce" in out and "FAIL" not in out


class TestReportCommand:
    def test_table_and_machine(self, workspace, capsys):
        assert run(["report", "--inputs", str(workspace / "model.ckpt"),
                    "--format", "table"]) == 0
        table = capsys.readouterr().out
        assert "checkpoint" in table and "calibrator" in table
        assert run(["report", "--inputs", str(workspace / "model.ckpt"),
                    str(workspace / "model_marc.ckpt"),
                    "--format", "machine"]) == 0
        rows = json.loads(capsys.readouterr().out)
        assert len(rows) == 2
        assert {r["calibrator"] for r in rows} == {"-", "marc"}


class TestUsage:
    def test_no_command_exit_1(self):
        assert run([]) == 1

    def test_unknown_command_exit_1(self):
        assert run(["frobnicate"]) == 1

    def test_missing_required_flag_exit_1(self):
        assert run(["gen-data", "--classes", "3"]) == 1

    def test_bad_choice_exit_1(self, workspace):
        assert run(["calibrate", "--ckpt", "x", "--features", "y",
                    "--method", "temperature", "--out", "z"]) == 1
