from __future__ import annotations

import json
import subprocess
import sys

from conftest import perfect_ball_models

from safe_explore.cli import main
from safe_explore.harness import read_csv
from safe_explore.safety_model import save_models

TINY = '{"actor_hidden": [8], "critic_hidden": [8], "batch_size": 8, "warmup": 16}'


def test_pretrain_command(tmp_path, capsys):
    assert main(["pretrain", "--task", "Ball1D", "--episodes", "5", "--seed", "1", "--epochs", "2",
                 "--out", str(tmp_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["episodes"] == 5
    assert (tmp_path / "model_1.json").exists()


def test_run_command_with_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"task_id": "Ball1D", "variant": "plain", "seeds": [0, 1], "episodes": 9,
                               "out_dir": str(tmp_path / "ignored")}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--episodes", "2", "--seeds", "4", "--out", str(out),
                 "--agent", TINY]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert [p["seed"] for p in summary["per_seed"]] == [4]
    assert len(read_csv(out / "metrics_seed4.csv")) == 2
    saved = json.loads((out / "config.json").read_text())
    assert saved["agent"]["actor_hidden"] == [8]


def test_run_safety_and_inspect(tmp_path, capsys):
    save_models(perfect_ball_models(1), tmp_path / "m", "Ball1D")
    assert main(["run", "--task", "Ball1D", "--variant", "safety", "--model", str(tmp_path / "m"),
                 "--seeds", "0", "--episodes", "2", "--out", str(tmp_path / "r"), "--agent", TINY]) == 0
    capsys.readouterr()
    assert main(["inspect-correction", "--task", "Ball1D", "--model", str(tmp_path / "m"),
                 "--state", "[0.88, 0.0, 0.5]", "--action", "[1.0]"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["dominant_index"] == 0
    assert abs(0.88 + out["sensitivities"][0][0] * out["corrected_action"][0] - 0.9) < 1e-12


def test_sweep_command(tmp_path, capsys):
    assert main(["sweep", "--task", "Ball1D", "--margins", "0.1,0.2", "--seeds", "0", "--episodes", "1",
                 "--out", str(tmp_path), "--agent", TINY]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["margin"] for r in rows] == [0.1, 0.2]
    assert (tmp_path / "sweep.csv").exists()


def test_bad_config_is_reported(tmp_path, capsys):
    assert main(["run", "--task", "Ball1D", "--variant", "shaping", "--episodes", "1", "--out", str(tmp_path)]) == 2
    assert "margin" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "safe_explore", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "inspect-correction" in res.stdout
