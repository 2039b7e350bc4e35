import json
import math
import os
import subprocess
import sys

from ipl import checkpoint, tasks
from ipl.cli import RunConfig, run
from ipl.train import OptimConfig, build_models

FAST = ["--n-examples", "100", "--epochs", "2", "--d-e", "16", "--d-ff", "32", "--n-heads", "2"]


def last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


def metrics_lines(run_dir):
    with open(os.path.join(run_dir, "metrics.jsonl"), encoding="utf-8") as fh:
        return fh.read().splitlines()


class TestConfig:
    def test_every_field_has_a_default(self):
        cfg = RunConfig().validate()
        cfg.model_config().validate()
        assert cfg.optim_config().method == "ipl"

    def test_unknown_flag_is_usage_error(self, capsys):
        assert run(["train", "--no-such-flag", "1"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert run(["dance"]) == 1

    def test_invalid_values_rejected_before_compute(self, tmp_path, capsys):
        assert run(["train", "--mode", "sideways", "--run-dir", str(tmp_path / "r")]) == 1
        assert not (tmp_path / "r").exists()
        assert run(["train", "--method", "finetune_pet", "--l", "4"]) == 1

    def test_config_file_keys_checked(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"not_a_field": 1}))
        assert run(["train", "--config", str(path)]) == 1
        path.write_text(json.dumps({"epochs": "three"}))
        assert run(["train", "--config", str(path)]) == 1

    def test_flags_override_config_file(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"n_examples": 40, "epochs": 5}))
        out = tmp_path / "data"
        assert run(["gen-data", "--config", str(path), "--n-examples", "60", "--out", str(out)]) == 0
        assert last_json(capsys)["train"] == 48


class TestCommands:
    def test_gen_data(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert run(["gen-data", "--n-examples", "100", "--seed", "2", "--out", str(out)]) == 0
        summary = last_json(capsys)
        assert (summary["train"], summary["dev"], summary["test"]) == (80, 10, 10)
        back = tasks.load_dataset(out)
        assert back.train == tasks.gen_synthetic_cls(2, 100).train

    def test_gen_data_generation_task(self, tmp_path, capsys):
        out = tmp_path / "kv"
        assert run(["gen-data", "--task", "kv-gen", "--n-examples", "40", "--out", str(out)]) == 0
        assert tasks.load_dataset(out).kind == "gen"

    def test_train_writes_run_directory(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert run(["train", *FAST, "--run-dir", str(run_dir)]) == 0
        summary = last_json(capsys)
        assert len(metrics_lines(run_dir)) == 2
        assert {"config.json", "metrics.jsonl", "checkpoint.iplc", "summary.json"} <= set(os.listdir(run_dir))
        echoed = json.loads((run_dir / "config.json").read_text())
        assert echoed["command"] == "train"
        assert set(echoed) - {"command"} == set(RunConfig().echo())
        assert summary["epochs"] == 2

    def test_rerun_from_echoed_config_is_bit_exact(self, tmp_path, capsys):
        first, second = tmp_path / "a", tmp_path / "b"
        assert run(["train", *FAST, "--seed", "4", "--run-dir", str(first)]) == 0
        assert run(["train", "--config", str(first / "config.json"), "--run-dir", str(second)]) == 0
        assert metrics_lines(first) == metrics_lines(second)
        assert (first / "checkpoint.iplc").read_bytes() == (second / "checkpoint.iplc").read_bytes()

    def test_run_root_from_environment(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("IPL_RUN_DIR", str(tmp_path / "root"))
        assert run(["train", *FAST, "--epochs", "1"]) == 0
        (child,) = os.listdir(tmp_path / "root")
        assert child.endswith("_train")
        assert last_json(capsys)["run_dir"] == str(tmp_path / "root" / child)

    def test_default_epochs(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        args = ["train", "--method", "ipl", "--l", "16", "--task", "cue-flip", "--seed", "1"]
        # fewer examples keep the run short; the epoch count is the default
        assert run([*args, "--n-examples", "100", "--run-dir", str(run_dir)]) == 0
        lines = [json.loads(l) for l in metrics_lines(run_dir)]
        assert [l["epoch"] for l in lines] == list(range(1, 21))

    def test_eval_fresh_checkpoint_near_chance(self, tmp_path, capsys):
        cfg = RunConfig(seed=11)
        pm, lm = build_models(cfg.model_config(), cfg.optim_config())
        path = tmp_path / "fresh.iplc"
        checkpoint.save_checkpoint(str(path), pm, lm, {"optim": cfg.optim_config().to_dict()})
        assert run(["eval", "--checkpoint", str(path), "--split", "dev"]) == 0
        result = last_json(capsys)
        assert result["n"] == 200
        # four binomial standard deviations around chance
        assert abs(result["accuracy"] - 0.5) <= 4 * math.sqrt(0.25 / 200)

    def test_eval_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        assert run(["eval", "--checkpoint", str(tmp_path / "none.iplc")]) == 2

    def test_eval_corrupt_checkpoint_is_runtime_error(self, tmp_path, capsys):
        path = tmp_path / "bad.iplc"
        path.write_bytes(b"IPLC\x01")
        assert run(["eval", "--checkpoint", str(path)]) == 2

    def test_export_gates(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert run(["train", *FAST, "--l", "4", "--run-dir", str(run_dir)]) == 0
        capsys.readouterr()
        out = tmp_path / "gates"
        args = ["export-gates", *FAST, "--checkpoint", str(run_dir / "checkpoint.iplc"),
                "--split", "test", "--attention-ids", "0,1", "--out", str(out)]
        assert run(args) == 0
        result = last_json(capsys)
        assert result["records"] == 10
        assert len((out / "gates.jsonl").read_text().splitlines()) == 10
        assert len((out / "gates.attention.jsonl").read_text().splitlines()) == 2
        assert set(result["similarity"]) >= {"within_type_mean_cosine", "between_type_mean_cosine", "gap"}

    def test_export_gates_needs_ipl_checkpoint(self, tmp_path, capsys):
        cfg = OptimConfig(method="prompt_tuning", prompt_length=2)
        pm, lm = build_models(RunConfig().model_config(), cfg)
        path = tmp_path / "pt.iplc"
        checkpoint.save_checkpoint(str(path), pm, lm, {"optim": cfg.to_dict()})
        assert run(["export-gates", "--checkpoint", str(path), "--out", str(tmp_path / "g")]) == 1

    def test_sweep_length(self, tmp_path, capsys):
        run_dir = tmp_path / "sweep"
        args = ["sweep-length", *FAST, "--epochs", "1", "--lengths", "0,2", "--seeds", "0,1",
                "--run-dir", str(run_dir)]
        assert run(args) == 0
        lines = (run_dir / "sweep.csv").read_text().splitlines()
        assert lines[0] == "length,seed,dev_metric"
        assert [tuple(l.split(",")[:2]) for l in lines[1:]] == [("0", "0"), ("0", "1"), ("2", "0"), ("2", "1")]

    def test_grad_check_fails_loudly_on_impossible_tolerance(self, capsys):
        args = ["grad-check", "--d-e", "8", "--d-ff", "8", "--n-heads", "2", "--n-layers", "1",
                "--grad-batch", "1", "--grad-max-elements", "4", "--grad-tolerance", "0.0"]
        assert run(args) == 2
        assert last_json(capsys)["pass"] is False

    def test_grad_check_default_config(self, capsys):
        assert run(["grad-check", "--seed", "7"]) == 0
        result = last_json(capsys)
        assert result["worst"] <= 1e-4
        assert any(k.startswith("layers.") for k in result["groups"])
        assert {"prompt.P", "prompt.W_M", "prompt.W_N"} <= set(result["groups"])


def test_console_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "ipl", "gen-data", "--n-examples", "20", "--out", str(tmp_path / "d")],
        capture_output=True, text=True,
    )
    assert out.returncode == 0, out.stderr
    assert json.loads(out.stdout)["train"] == 16
