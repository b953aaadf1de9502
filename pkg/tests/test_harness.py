from __future__ import annotations

import json
import math

import numpy as np
import pytest
from conftest import perfect_ball_models
from hypothesis import given
from hypothesis import strategies as st

from safe_explore import harness
from safe_explore.envs import State, task_spec
from safe_explore.harness import (
    AGENT_PROFILES,
    CSV_HEADER,
    ConfigError,
    EpisodeRecord,
    ExperimentConfig,
    RunMetrics,
    nearest_rank,
    pretrain_pipeline,
    quartiles,
    read_csv,
    run_experiment,
    run_shaping_sweep,
    shaped_reward,
    write_csv,
)
from safe_explore.safety_model import save_models

TINY = {"actor_hidden": [16, 16], "critic_hidden": [16, 16], "batch_size": 16, "warmup": 64}


def _state(signals):
    return State(np.zeros(3), np.asarray(signals, dtype=np.float64))


def test_shaping_interior_unchanged():
    assert shaped_reward(_state([0.5, -0.5]), 0.7, 0.1, -1.0, task_spec("Ball1D")) == 0.7


def test_shaping_near_upper_wall():
    assert shaped_reward(_state([0.95, -0.95]), 0.2, 0.1, -1.0, task_spec("Ball1D")) == pytest.approx(-0.8)


def test_shaping_corridor_wall_distance():
    spec = task_spec("SpaceshipCorridor")
    # x = 0.2: distance 0.2 to the wall at 0
    assert shaped_reward(_state([0.2, -0.2]), 0.0, 0.23, -1000.0, spec) == -1000.0
    assert shaped_reward(_state([0.5, -0.5]), 0.0, 0.23, -1000.0, spec) == 0.0


def test_shaping_needs_positive_margin():
    with pytest.raises(ValueError):
        shaped_reward(_state([0.5, -0.5]), 0.0, 0.0, -1.0, task_spec("Ball1D"))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.sampled_from([0.25, 0.5, 0.75]))
def test_nearest_rank_matches_sorted_definition(values, q):
    ordered = sorted(values)
    assert nearest_rank(values, q) == ordered[max(1, math.ceil(q * len(values))) - 1]


def test_quartiles_small_case():
    assert quartiles([5, 1, 3, 2, 4]) == (2, 3, 4)
    assert quartiles([7]) == (7, 7, 7)
    with pytest.raises(ValueError):
        nearest_rank([], 0.5)


def test_csv_round_trip(tmp_path):
    recs = [
        EpisodeRecord(0, 1, "plain", 0.1 + 0.2, True, 1, 17),
        EpisodeRecord(1, 1, "plain", -1e-300, False, 1, 150),
    ]
    write_csv(tmp_path / "m.csv", recs)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)
    assert read_csv(tmp_path / "m.csv") == recs


@pytest.mark.parametrize(
    "kwargs",
    [
        {"task_id": "Nope"},
        {"task_id": "Ball1D", "variant": "other"},
        {"task_id": "Ball1D", "variant": "shaping"},
        {"task_id": "Ball1D", "variant": "safety"},
        {"task_id": "Ball1D", "margin": 0.1},
        {"task_id": "Ball1D", "seeds": []},
        {"task_id": "Ball1D", "episodes": -1},
        {"task_id": "Ball1D", "agent": {"bogus": 1}},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kwargs)


def test_config_defaults():
    cfg = ExperimentConfig(task_id="Ball1D", variant="shaping", margin=0.1)
    assert cfg.penalty == -1.0 and cfg.episodes == 300
    assert ExperimentConfig(task_id="SpaceshipArena").episodes == 500
    assert ExperimentConfig(task_id="SpaceshipCorridor", variant="shaping", margin=0.2).penalty == -1000.0


def test_zero_episodes_gives_header_only(tmp_path):
    cfg = ExperimentConfig(task_id="Ball1D", seeds=[0], episodes=0, out_dir=str(tmp_path), agent=TINY)
    run_experiment(cfg)
    assert (tmp_path / "metrics_seed0.csv").read_text() == ",".join(CSV_HEADER) + "\n"


def test_missing_model_dir(tmp_path):
    cfg = ExperimentConfig(task_id="Ball1D", variant="safety", model_dir=str(tmp_path / "none"), out_dir=str(tmp_path))
    with pytest.raises(FileNotFoundError):
        run_experiment(cfg)


def test_safety_with_perfect_model_never_violates(tmp_path):
    save_models(perfect_ball_models(1), tmp_path / "models", "Ball1D")
    cfg = ExperimentConfig(
        task_id="Ball1D", variant="safety", seeds=[0, 1, 2], episodes=50,
        model_dir=str(tmp_path / "models"), out_dir=str(tmp_path / "run"), agent=AGENT_PROFILES["desk"],
    )
    runs = run_experiment(cfg)
    for seed, r in runs.items():
        assert all(e.cum_violations == 0 for e in r.eval_episodes + r.train_episodes)
        assert all(row.cum_violations == 0 for row in read_csv(tmp_path / "run" / f"metrics_seed{seed}.csv"))
    agg = json.loads((tmp_path / "run" / "aggregate.json").read_text())
    assert agg["episodes"] == 50
    assert {p["train_violations"] for p in agg["per_seed"]} == {0}


def test_identical_config_gives_identical_csvs(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = ExperimentConfig(task_id="Ball1D", variant="shaping", margin=0.1, seeds=[3], episodes=6,
                               out_dir=str(tmp_path / name), agent=TINY)
        run_experiment(cfg)
        outs.append(tmp_path / name)
    for f in ("metrics_seed3.csv", "train_seed3.csv", "aggregate.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_violation_accounting_matches_termination(tmp_path):
    cfg = ExperimentConfig(task_id="Ball1D", seeds=[0], episodes=8, out_dir=str(tmp_path), agent=TINY)
    r = run_experiment(cfg)[0]
    for recs in (r.eval_episodes, r.train_episodes):
        running = 0
        for e in recs:
            # a violation ends the episode early; a full-length episode never counts
            if e.steps == 150:
                assert not e.violated
            running += e.violated
            assert e.cum_violations == running


def _fake_runs(finals_by_margin):
    def fake(cfg):
        finals = finals_by_margin[cfg.margin]
        runs = {}
        for seed, v in zip(cfg.seeds, finals):
            m = RunMetrics(seed, "x")
            m.eval_episodes.append(EpisodeRecord(0, seed, "shaping", 0.0, v > 0, v, 1))
            runs[seed] = m
        return runs

    return fake


def test_sweep_single_margin_single_seed(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "run_experiment", _fake_runs({0.1: [4]}))
    rows = run_shaping_sweep("Ball1D", [0.1], [0], tmp_path)
    assert len(rows) == 1
    assert rows[0]["q1"] == rows[0]["median"] == rows[0]["q3"] == 4
    assert rows[0]["best"]


def test_sweep_tie_marks_lowest_margin(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "run_experiment", _fake_runs({0.2: [1, 2, 3], 0.1: [2, 2, 9], 0.3: [5, 6, 7]}))
    rows = run_shaping_sweep("Ball1D", [0.2, 0.1, 0.3], [0, 1, 2], tmp_path)
    assert [r["best"] for r in rows] == [False, True, False]
    assert (tmp_path / "sweep.csv").read_text().splitlines()[0] == "margin,q1,median,q3,best"


def test_sweep_needs_margins(tmp_path):
    with pytest.raises(ValueError):
        run_shaping_sweep("Ball1D", [], [0], tmp_path)


def test_pretrain_pipeline_outputs(tmp_path):
    report = pretrain_pipeline("Ball1D", 1000, tmp_path / "a", seed=0, save_dataset=False)
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["model_0.json", "model_1.json", "report.json"]
    assert report["dataset_size"] > 1000
    assert len(report["val_mse"]) == 2 and max(report["val_mse"]) < 1e-4
    lo, hi = report["signal_spans"][0]
    assert lo <= 0.05 and hi >= 0.95


def test_pretrain_is_deterministic(tmp_path):
    for name in ("a", "b"):
        pretrain_pipeline("Ball1D", 20, tmp_path / name, seed=4, epochs=3)
    for f in ("model_0.json", "model_1.json", "dataset.jsonl", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_pretrain_rejects_zero_episodes(tmp_path):
    with pytest.raises(ValueError):
        pretrain_pipeline("Ball1D", 0, tmp_path)
    assert not any(tmp_path.iterdir())
