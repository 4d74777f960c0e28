import csv
import json
import subprocess
import sys

import pytest

from grouplab import lab
from grouplab.estimator import SetPredictionDetector

TINY = {"train_count": 40, "val_count": 16, "num_queries": 6, "d_model": 16, "heads": 2,
        "layers": 1, "ffn_dim": 16, "epochs": 2, "batch_size": 8, "diagnostic_scenes": 8,
        "scene_params": {"d_model": 16}}


def run(capsys, *argv):
    code = lab.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data plus one K=3 training run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("lab")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert lab.main(["generate", "--config", str(root / "tiny.json"), "--out", str(root / "data")]) == 0
    cfg = {**TINY, "data_dir": str(root / "data")}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert lab.main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run"),
                     "--k", "3", "--epochs", "3"]) == 0
    return root


class TestGenerate:
    def test_deterministic_and_disjoint(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "generate", "--config", workspace / "tiny.json", "--out", tmp_path)
        assert code == 0 and json.loads(out)["status"] == "ok"
        first = json.loads((workspace / "data" / "report.json").read_text())
        again = json.loads((tmp_path / "report.json").read_text())
        assert first["train"]["sha256"] == again["train"]["sha256"]
        assert first["val"]["sha256"] == again["val"]["sha256"]
        train_ids = {json.loads(l)["scene_id"]
                     for l in (tmp_path / "train.jsonl").read_text().splitlines()[1:]}
        val_ids = {json.loads(l)["scene_id"]
                   for l in (tmp_path / "val.jsonl").read_text().splitlines()[1:]}
        assert len(train_ids) == 40 and len(val_ids) == 16 and train_ids.isdisjoint(val_ids)

    def test_seed_changes_content(self, workspace, tmp_path, capsys):
        run(capsys, "generate", "--config", workspace / "tiny.json", "--out", tmp_path, "--seed", 99)
        first = json.loads((workspace / "data" / "report.json").read_text())
        assert json.loads((tmp_path / "report.json").read_text())["train"]["sha256"] != \
            first["train"]["sha256"]

    def test_unwritable(self, workspace, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(capsys, "generate", "--config", workspace / "tiny.json",
                           "--out", blocker / "sub")
        assert code != 0 and len(err.strip().splitlines()) == 1
        assert "error" in json.loads(err)


class TestTrain:
    def test_outputs(self, workspace):
        run_dir = workspace / "run"
        metrics = rows(run_dir / "metrics.csv")
        assert [r["epoch"] for r in metrics] == ["1", "2", "3"]
        assert set(lab.METRIC_FIELDS) == set(metrics[0])
        assert sorted(p.name for p in (run_dir / "checkpoints").iterdir()) == \
            ["epoch_001.ckpt", "epoch_002.ckpt", "epoch_003.ckpt", "final.ckpt"]
        report = json.loads((run_dir / "report.json").read_text())
        assert report["status"] == "ok" and report["params"]["num_groups"] == 3
        assert len(rows(run_dir / "diagnostics" / "pd_md.csv")) == 3

    def test_diverged_run(self, workspace, tmp_path, capsys, monkeypatch):
        calls = {"n": 0}
        real = SetPredictionDetector._train_step

        def flaky(self, batch):
            calls["n"] += 1
            return float("nan") if calls["n"] > 5 else real(self, batch)

        monkeypatch.setattr(SetPredictionDetector, "_train_step", flaky)
        code, _, err = run(capsys, "train", "--config", workspace / "cfg.json", "--out", tmp_path)
        assert code == 4 and json.loads(err)["error"] == "TrainingDiverged"
        assert len(rows(tmp_path / "metrics.csv")) == 1
        assert json.loads((tmp_path / "report.json").read_text())["status"] == "diverged"

    def test_invalid_strategy_combination(self, workspace, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", workspace / "cfg.json", "--out", tmp_path,
                           "--k", "2", "--multiplicity", "2")
        assert code == 2 and json.loads(err)["error"] == "ConfigError"


class TestEval:
    def test_repeatable(self, workspace, tmp_path, capsys):
        ckpt = workspace / "run" / "checkpoints" / "final.ckpt"
        for name in ("a", "b"):
            code, _, _ = run(capsys, "eval", "--config", workspace / "cfg.json",
                             "--out", tmp_path / name, "--checkpoint", ckpt)
            assert code == 0
        a = json.loads((tmp_path / "a" / "report.json").read_text())
        b = json.loads((tmp_path / "b" / "report.json").read_text())
        a.pop("detections"), b.pop("detections")
        assert a == b and a["nms"] is True and set(a["per_class_AP"]) <= {"0", "1", "2", "3"}
        dump = (tmp_path / "a" / "diagnostics" / "detections.csv").read_text().splitlines()
        assert dump[0] == "scene_id,class_id,score,cx,cy,w,h"

    def test_group_and_nms_flags(self, workspace, tmp_path, capsys):
        ckpt = workspace / "run" / "checkpoints" / "final.ckpt"
        code, _, _ = run(capsys, "eval", "--config", workspace / "cfg.json", "--out", tmp_path,
                         "--checkpoint", ckpt, "--group-index", 2, "--no-nms")
        report = json.loads((tmp_path / "report.json").read_text())
        assert code == 0 and report["group"] == 2 and report["nms"] is False

    def test_mismatch_rejected(self, workspace, tmp_path, capsys):
        ckpt = workspace / "run" / "checkpoints" / "final.ckpt"
        code, _, err = run(capsys, "eval", "--config", workspace / "cfg.json", "--out", tmp_path,
                           "--checkpoint", ckpt, "--k", 2)
        assert code == 5 and "num_groups" in json.loads(err)["message"]

    def test_missing_checkpoint(self, workspace, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--config", workspace / "cfg.json", "--out", tmp_path,
                           "--checkpoint", tmp_path / "none.ckpt")
        assert code == 5 and len(err.strip().splitlines()) == 1


class TestSweep:
    def test_single_value_equals_train(self, workspace, tmp_path, capsys):
        cfg = {**TINY, "data_dir": str(workspace / "data"), "sweep_values": [1], "seeds": [4]}
        (tmp_path / "s.json").write_text(json.dumps(cfg))
        code, _, _ = run(capsys, "sweep", "--config", tmp_path / "s.json", "--out", tmp_path / "sw")
        assert code == 0
        table = rows(tmp_path / "sw" / "metrics.csv")
        assert [r["seed"] for r in table] == ["4", "mean", "std"]
        code, _, _ = run(capsys, "train", "--config", workspace / "cfg.json", "--out",
                         tmp_path / "tr", "--seed", 4)
        final = rows(tmp_path / "tr" / "metrics.csv")[-1]
        assert float(table[0]["map_no_nms"]) == float(final["map_no_nms"])
        assert float(table[0]["duplicate_rate"]) == float(final["duplicate_rate"])

    def test_failures_recorded(self, workspace, tmp_path, capsys):
        cfg = {**TINY, "data_dir": str(workspace / "data"), "sweep_axis": "multiplicity",
               "sweep_values": [1, 4], "seeds": [0], "epochs": 1}
        (tmp_path / "s.json").write_text(json.dumps(cfg))
        code, _, _ = run(capsys, "sweep", "--config", tmp_path / "s.json", "--out", tmp_path)
        table = rows(tmp_path / "metrics.csv")
        assert code == 0
        assert table[0]["status"] == "ok" and table[1]["status"].startswith("failed")
        assert json.loads((tmp_path / "report.json").read_text())["failed_runs"] == 1

    def test_bad_axis(self, workspace, tmp_path, capsys):
        (tmp_path / "s.json").write_text(json.dumps({**TINY, "sweep_axis": "lr"}))
        code, _, err = run(capsys, "sweep", "--config", tmp_path / "s.json", "--out", tmp_path)
        assert code == 2 and "sweep_axis" in json.loads(err)["message"]


class TestDiagnose:
    def test_outputs(self, workspace, tmp_path, capsys):
        code, _, _ = run(capsys, "diagnose", "--config", workspace / "cfg.json", "--out", tmp_path,
                         "--checkpoint-dir", workspace / "run" / "checkpoints")
        assert code == 0
        series = rows(tmp_path / "diagnostics" / "pd_md.csv")
        assert [r["step"] for r in series] == ["1", "2", "3"]
        trained = rows(workspace / "run" / "diagnostics" / "pd_md.csv")
        assert [float(r["pd"]) for r in series] == [float(r["pd"]) for r in trained]
        pos = rows(tmp_path / "diagnostics" / "positions_epoch_003.csv")
        assert len(pos) == 3 * 6

    def test_missing_checkpoint_partial(self, workspace, tmp_path, capsys, caplog):
        ckpts = tmp_path / "ckpts"
        ckpts.mkdir()
        for e in (1, 3):
            name = f"epoch_{e:03d}.ckpt"
            (ckpts / name).write_bytes((workspace / "run" / "checkpoints" / name).read_bytes())
        code, _, _ = run(capsys, "diagnose", "--config", workspace / "cfg.json",
                         "--out", tmp_path / "d", "--checkpoint-dir", ckpts)
        report = json.loads((tmp_path / "d" / "report.json").read_text())
        assert code == 0 and report["missing"] == [2] and report["warnings"]
        assert "missing checkpoints" in caplog.text
        assert len(rows(tmp_path / "d" / "diagnostics" / "pd_md.csv")) == 2

    def test_no_checkpoints(self, workspace, tmp_path, capsys):
        code, _, err = run(capsys, "diagnose", "--config", workspace / "cfg.json", "--out", tmp_path,
                           "--checkpoint-dir", tmp_path)
        assert code == 5 and json.loads(err)["error"] == "CheckpointError"


class TestErrors:
    def test_bad_json(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("{oops")
        code, _, err = run(capsys, "train", "--config", tmp_path / "c.json", "--out", tmp_path)
        assert code == 2 and len(err.strip().splitlines()) == 1
        assert json.loads(err)["error"] == "ConfigError"

    def test_unknown_command(self, capsys):
        code, _, err = run(capsys, "frobnicate", "--out", "x")
        assert code == 2 and json.loads(err)["error"] == "ConfigError"

    def test_console_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "grouplab.lab", "train", "--out", str(tmp_path),
                               "--k", "0"], capture_output=True, text=True)
        assert proc.returncode == 2 and proc.stderr.count("\n") == 1
