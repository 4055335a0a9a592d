import csv
import json
import subprocess
import sys
from dataclasses import fields

import numpy as np
import pytest

from thphealth.cli import main
from thphealth.config import TrainConfig
from thphealth.data import parse_sequences

TINY_FLAGS = [
    "--d", "8", "--n-layers", "1", "--n-heads", "2", "--d-ff", "16", "--n-quad", "8",
    "--batch-size", "8", "--warmup-steps", "5", "--learning-rate", "0.005",
]


def _simulate(tmp_path, name="d.jsonl", preset="paper-like", n=30, extra=()):
    out = tmp_path / name
    code = main(["simulate", "--preset", preset, "--n-patients", str(n), "--horizon-days", "200", "--seed", "4", "--out", str(out), *extra])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A simulated dataset and a 2-epoch checkpoint shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data = _simulate(root, n=40)
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run), "--epochs", "2", *TINY_FLAGS]) == 0
    return root, data, run


class TestSimulate:
    def test_round_trip_and_manifest(self, tmp_path):
        out = _simulate(tmp_path)
        d = parse_sequences(out, K=3)
        assert len(d) == 30
        manifest = json.loads(out.with_suffix(".manifest.json").read_text())
        assert manifest["command"] == "simulate" and manifest["seed"] == 4
        assert set(manifest["outputs"]) == {"dataset"}
        assert len(manifest["checksums"]) == 1

    def test_byte_identical(self, tmp_path):
        a = _simulate(tmp_path, "a.jsonl")
        b = _simulate(tmp_path, "b.jsonl")
        assert a.read_bytes() == b.read_bytes()

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"mu": [0.1, 0.2], "A": [[0.1, 0], [0, 0.1]], "delta": [[1, 1], [1, 1]], "horizon_days": 50, "n_patients": 3, "type_names": ["x", "y"]}))
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o.jsonl")]) == 0
        assert len(parse_sequences(tmp_path / "o.jsonl", K=2)) == 3

    def test_missing_config(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o.jsonl")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_supercritical_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"mu": [0.1], "A": [[2.0]], "delta": [[1.0]]}))
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o.jsonl")]) == 2

    def test_simulation_failure_exit_3(self, tmp_path, monkeypatch):
        import thphealth.cli as cli
        from thphealth.simulate import SimulationError

        def boom(*a, **k):
            raise SimulationError("supercritical or bound failure: event guard exceeded")

        monkeypatch.setattr(cli, "make_imbalanced_cohort", boom)
        assert main(["simulate", "--preset", "two-type", "--out", str(tmp_path / "o.jsonl")]) == 3


class TestTrain:
    def test_artifacts(self, workspace):
        _, _, run = workspace
        for name in ("checkpoint.thp", "metrics.csv", "train.jsonl", "eval.jsonl", "manifest.json"):
            assert (run / name).is_file()
        with open(run / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_nll", "train_ce", "train_time_mse", "eval_macro_f1", "eval_medae", "lr"]
        assert len(rows) == 3

    def test_identical_metrics(self, workspace, tmp_path):
        _, data, run = workspace
        again = tmp_path / "again"
        assert main(["train", "--data", str(data), "--out", str(again), "--epochs", "2", *TINY_FLAGS]) == 0
        assert (again / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()

    def test_config_file_and_flag_precedence(self, workspace, tmp_path):
        _, data, _ = workspace
        cfg = tmp_path / "t.json"
        cfg.write_text(json.dumps({"epochs": 5, "weighted_ce": False}))
        out = tmp_path / "r"
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--epochs", "0", *TINY_FLAGS]) == 0
        resolved = json.loads((out / "manifest.json").read_text())["config"]
        assert resolved["epochs"] == 0 and resolved["weighted_ce"] is False and resolved["d"] == 8

    def test_unweighted_flag(self, workspace, tmp_path):
        from thphealth.checkpoint import load_checkpoint

        _, data, _ = workspace
        out = tmp_path / "u"
        assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "0", "--weighted-ce=false", *TINY_FLAGS]) == 0
        assert load_checkpoint(out / "checkpoint.thp").class_weights.w == (1.0, 1.0, 1.0)

    def test_zero_epochs_writes_checkpoint(self, workspace, tmp_path):
        _, data, _ = workspace
        out = tmp_path / "z"
        assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "0", *TINY_FLAGS]) == 0
        assert (out / "checkpoint.thp").is_file()

    def test_bad_config(self, workspace, tmp_path):
        _, data, _ = workspace
        assert main(["train", "--data", str(data), "--out", str(tmp_path / "x"), "--d", "7"]) == 2
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"not_a_key": 1}))
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "x")]) == 2

    def test_divergence_exit_4(self, workspace, tmp_path, monkeypatch):
        import thphealth.cli as cli
        from thphealth.training import TrainingDiverged

        def diverge(cfg, tr, ev, **kw):
            raise TrainingDiverged("training diverged at epoch 1, step 1: boom", None, [])

        monkeypatch.setattr(cli, "train", diverge)
        _, data, _ = workspace
        assert main(["train", "--data", str(data), "--out", str(tmp_path / "x"), "--epochs", "1", *TINY_FLAGS]) == 4
        assert (tmp_path / "x" / "metrics.csv").is_file()


class TestEval:
    def test_matches_training_log(self, workspace, tmp_path):
        _, _, run = workspace
        out = tmp_path / "rep.json"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.thp"), "--data", str(run / "eval.jsonl"), "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        with open(run / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        from thphealth.checkpoint import load_checkpoint

        best_epoch = load_checkpoint(run / "checkpoint.thp").epoch
        row = next(r for r in rows if int(r["epoch"]) == best_epoch)
        assert rep["macro_f1"] == float(row["eval_macro_f1"])
        assert rep["medae_days"] == float(row["eval_medae"])

    def test_k_mismatch_exit_5(self, workspace, tmp_path):
        _, _, run = workspace
        two = _simulate(tmp_path, "two.jsonl", preset="two-type", n=5)
        assert main(["eval", "--checkpoint", str(run / "checkpoint.thp"), "--data", str(two), "--out", str(tmp_path / "r.json"), "--num-types", "2"]) == 5
        four = tmp_path / "four.jsonl"
        four.write_text('{"patient_id":"a","events":[[0,0],[1,3]]}\n')
        assert main(["eval", "--checkpoint", str(run / "checkpoint.thp"), "--data", str(four), "--out", str(tmp_path / "r.json")]) == 5

    def test_empty_dataset(self, workspace, tmp_path, capsys):
        _, _, run = workspace
        empty = tmp_path / "e.jsonl"
        empty.write_text("")
        assert main(["eval", "--checkpoint", str(run / "checkpoint.thp"), "--data", str(empty), "--out", str(tmp_path / "r.json")]) == 2
        assert "no predictions" in capsys.readouterr().err

    def test_schema_shared_with_glm(self, workspace, tmp_path):
        _, data, run = workspace
        assert main(["eval", "--checkpoint", str(run / "checkpoint.thp"), "--data", str(run / "eval.jsonl"), "--out", str(tmp_path / "thp.json")]) == 0
        assert main(["glm", "train", "--data", str(data), "--out", str(tmp_path / "glm")]) == 0
        thp = json.loads((tmp_path / "thp.json").read_text())
        glm = json.loads((tmp_path / "glm" / "glm_report.json").read_text())
        assert set(thp) == set(glm)
        assert glm["model"] == "glm" and thp["model"] == "thp"
        manifest = json.loads((tmp_path / "glm" / "manifest.json").read_text())
        assert manifest["config"]["window_days"] == 100.0
        assert main(["glm", "eval", "--params", str(tmp_path / "glm" / "glm_params.json"), "--data", str(run / "eval.jsonl"), "--out", str(tmp_path / "g2.json")]) == 0


class TestExplain:
    def test_outputs(self, workspace, tmp_path):
        _, _, run = workspace
        pid = parse_sequences(run / "eval.jsonl", K=3)[0].patient_id
        out = tmp_path / "x"
        assert main(["explain", "--checkpoint", str(run / "checkpoint.thp"), "--data", str(run / "eval.jsonl"), "--patient-id", pid, "--out", str(out)]) == 0
        with open(out / f"{pid}_intensity.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["s", "lambda_IP", "lambda_OP", "lambda_ED", "lambda_total"]
        lam = np.array(rows[1:], dtype=float)
        np.testing.assert_allclose(lam[:, 4], lam[:, 1:4].sum(axis=1), atol=1e-9)
        with open(out / f"{pid}_heatmap.csv") as fh:
            hm = np.array(list(csv.reader(fh))[1:], dtype=float)
        assert np.all(hm[hm[:, 1] > hm[:, 0], 2] == 0.0)
        assert (out / f"{pid}_recency.csv").read_text().startswith("lag_days,mean_weight")

    def test_unknown_patient(self, workspace, tmp_path):
        _, _, run = workspace
        assert main(["explain", "--checkpoint", str(run / "checkpoint.thp"), "--data", str(run / "eval.jsonl"), "--patient-id", "ghost", "--out", str(tmp_path)]) == 2


class TestAblate:
    def test_summary(self, workspace, tmp_path):
        _, data, _ = workspace
        out = tmp_path / "abl"
        assert main(["ablate", "--data", str(data), "--out", str(out), "--seeds", "0,1", "--epochs", "1", *TINY_FLAGS]) == 0
        result = json.loads((out / "ablation.json").read_text())
        assert result["seeds"] == [0, 1]
        assert set(result["median"]) == {"weighted", "unweighted", "glm"}
        assert len(result["runs"]) == 2


class TestHelp:
    def test_train_help_lists_all_keys(self, capsys):
        assert main(["train", "--help"]) == 0
        text = capsys.readouterr().out
        for f in fields(TrainConfig):
            assert "--" + f.name.replace("_", "-") in text
            assert f"default: {f.default}" in text

    @pytest.mark.parametrize("cmd", [["simulate"], ["eval"], ["explain"], ["ablate"], ["glm", "train"], ["glm", "eval"]])
    def test_every_command_has_help(self, cmd, capsys):
        assert main([*cmd, "--help"]) == 0
        assert "usage" in capsys.readouterr().out

    def test_usage_error(self):
        assert main(["train"]) == 2
        assert main(["frobnicate"]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "thphealth", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for cmd in ("simulate", "train", "eval", "explain", "ablate", "glm"):
            assert cmd in proc.stdout
