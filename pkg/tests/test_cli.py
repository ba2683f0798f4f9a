"""Config parsing, raster ingestion, and end-to-end command behaviour."""

import json
import math

import numpy as np
import pytest

from terrascout.cli import (
    build_env_config,
    build_feature_config,
    build_train_config,
    ingest_raster,
    load_ground_truth,
    main,
    parse_config_file,
)
from terrascout.errors import DataError, UsageError
from terrascout.gridmap import write_text_grid
from terrascout.nn import load_checkpoint


SMOKE_CONFIG = """
# compact scenario for fast tests
terrain_size = 20.0
map_resolution = 0.5
planning_resolution = 5.0
num_agents = 2
budget = 3
comm_radius = 25.0
sensor = 5:0.9, 10:0.8, 15:0.7
weight_interesting = 0.8
weight_uninteresting = 0.2

train.total_missions = 4
train.rollout_block = 12
train.batch_size = 12
train.epochs = 1
train.actor_lr = 1e-3
train.critic_lr = 1e-3
train.epsilon_anneal_missions = 10
train.conv_channels = 3, 4
train.conv_strides = 1, 2
train.mlp_sizes = 12
"""


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "smoke.cfg"
    path.write_text(SMOKE_CONFIG)
    return path


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_parse_config_round_trip(smoke_config):
    raw = parse_config_file(smoke_config)
    cfg = build_env_config(raw)
    assert cfg.terrain_size == 20.0
    assert cfg.num_agents == 2
    assert cfg.sensor.accuracy_at(10.0) == 0.8
    assert cfg.weights.w1 == 0.8
    tcfg = build_train_config(raw)
    assert tcfg.total_missions == 4
    assert tcfg.arch.conv_channels == (3, 4)
    assert build_feature_config(raw) == build_feature_config({})


def test_unknown_config_key_is_named(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("terrain_sizzle = 50\n")
    with pytest.raises(UsageError, match="terrain_sizzle"):
        parse_config_file(path)


def test_feature_toggles_parse(tmp_path):
    path = tmp_path / "f.cfg"
    path.write_text("features.entropy_map = off\nfeatures.footprint_map = on\n")
    fcfg = build_feature_config(parse_config_file(path))
    assert not fcfg.entropy_map
    assert fcfg.footprint_map


def test_comm_radius_inf(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("comm_radius = inf\n")
    cfg = build_env_config(parse_config_file(path))
    assert math.isinf(cfg.comm_radius)


# ---------------------------------------------------------------------------
# raster ingestion
# ---------------------------------------------------------------------------


def test_ingest_threshold_and_fraction(tmp_path):
    values = np.array([[20.0, 26.0], [30.0, 10.0]])
    raster = tmp_path / "raster.txt"
    write_text_grid(raster, values, 0.5)
    gt, fraction = ingest_raster(raster, 25.0)
    np.testing.assert_array_equal(gt.cells, [[0, 1], [1, 0]])
    assert fraction == pytest.approx(0.5)


def test_ingest_extreme_thresholds(tmp_path):
    values = np.array([[20.0, 26.0], [30.0, 10.0]])
    raster = tmp_path / "raster.txt"
    write_text_grid(raster, values, 0.5)
    gt_all, _ = ingest_raster(raster, -math.inf)
    assert gt_all.cells.all()
    gt_none, fraction = ingest_raster(raster, 100.0)
    assert not gt_none.cells.any()
    assert fraction == 0.0


def test_ingest_monotone_in_threshold(tmp_path):
    rng = np.random.default_rng(0)
    raster = tmp_path / "raster.txt"
    write_text_grid(raster, rng.uniform(0, 40, size=(20, 20)), 0.5)
    counts = []
    for thr in np.linspace(0, 40, 15):
        gt, _ = ingest_raster(raster, thr)
        counts.append(int(gt.cells.sum()))
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_ingest_rejects_non_finite(tmp_path):
    raster = tmp_path / "raster.txt"
    raster.write_text("2 1 0.5\nnan 3.0\n")
    with pytest.raises(DataError):
        ingest_raster(raster, 1.0)


# ---------------------------------------------------------------------------
# commands end to end
# ---------------------------------------------------------------------------


def test_train_command_writes_manifest_and_checkpoints(smoke_config, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main([
        "train", "--config", str(smoke_config), "--seed", "7", "--out", str(out), "--quiet",
    ])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["seed"] == 7
    assert manifest["config"]["num_agents"] == 2
    assert (out / "actor.ckpt").exists()
    assert (out / "training_log.csv").exists()


def test_train_determinism_byte_identical(smoke_config, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["train", "--config", str(smoke_config), "--seed", "3",
                 "--out", str(out1), "--quiet"]) == 0
    assert main(["train", "--config", str(smoke_config), "--seed", "3",
                 "--out", str(out2), "--quiet"]) == 0
    assert (out1 / "training_log.csv").read_bytes() == (out2 / "training_log.csv").read_bytes()
    assert (out1 / "missions.csv").read_bytes() == (out2 / "missions.csv").read_bytes()


def test_train_variant_recorded_in_checkpoints(smoke_config, tmp_path):
    out = tmp_path / "qv"
    rc = main([
        "train", "--config", str(smoke_config), "--seed", "1", "--out", str(out),
        "--variant", "central-qv", "--missions", "2", "--quiet",
    ])
    assert rc == 0
    assert (out / "vnet.ckpt").exists()
    _, meta = load_checkpoint(out / "actor.ckpt")
    assert meta["variant"] == "central-qv"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["variant"] == "central-qv"


def test_evaluate_command_and_determinism(smoke_config, tmp_path):
    out1, out2 = tmp_path / "e1", tmp_path / "e2"
    argv = ["evaluate", "--config", str(smoke_config), "--seed", "5",
            "--planner", "random", "--planner", "coverage", "--missions", "3"]
    assert main(argv + ["--out", str(out1)]) == 0
    assert main(argv + ["--out", str(out2)]) == 0
    b1 = (out1 / "benchmark.csv").read_bytes()
    assert b1 == (out2 / "benchmark.csv").read_bytes()
    assert b1.startswith(b"planner,checkpoint,entropy_mean")


def test_evaluate_rejects_single_mission(smoke_config, tmp_path):
    rc = main(["evaluate", "--config", str(smoke_config), "--planner", "random",
               "--missions", "1", "--out", str(tmp_path / "x")])
    assert rc == 2


def test_evaluate_learned_requires_weights(smoke_config, tmp_path):
    rc = main(["evaluate", "--config", str(smoke_config), "--planner", "learned",
               "--missions", "2", "--out", str(tmp_path / "x")])
    assert rc == 2


def test_evaluate_with_fixed_terrain(smoke_config, tmp_path):
    terrain = tmp_path / "gt.txt"
    cells = np.zeros((40, 40))
    cells[:20] = 1.0
    write_text_grid(terrain, cells, 0.5)
    out = tmp_path / "fixed"
    rc = main(["evaluate", "--config", str(smoke_config), "--planner", "greedy-ig",
               "--missions", "2", "--terrain", str(terrain), "--out", str(out)])
    assert rc == 0
    assert (out / "benchmark.csv").exists()


def test_evaluate_terrain_shape_mismatch_is_data_error(smoke_config, tmp_path):
    terrain = tmp_path / "gt.txt"
    write_text_grid(terrain, np.ones((4, 4)), 0.5)
    rc = main(["evaluate", "--config", str(smoke_config), "--planner", "random",
               "--missions", "2", "--terrain", str(terrain), "--out", str(tmp_path / "x")])
    assert rc == 3


def test_evaluate_agent_override(smoke_config, tmp_path):
    out = tmp_path / "agents"
    rc = main(["evaluate", "--config", str(smoke_config), "--planner", "random",
               "--missions", "2", "--agents", "3", "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["num_agents"] == 3


def test_ingest_command(tmp_path):
    raster = tmp_path / "raster.txt"
    write_text_grid(raster, np.array([[30.0, 10.0], [26.0, 24.0]]), 0.5)
    out = tmp_path / "ing"
    rc = main(["ingest", "--input", str(raster), "--threshold", "25.0", "--out", str(out)])
    assert rc == 0
    gt = load_ground_truth(out / "ground_truth.txt")
    np.testing.assert_array_equal(gt.cells, [[1, 0], [1, 0]])


def test_ingest_parse_error_exit_code(tmp_path):
    raster = tmp_path / "broken.txt"
    raster.write_text("not a header\n")
    rc = main(["ingest", "--input", str(raster), "--threshold", "25.0",
               "--out", str(tmp_path / "x")])
    assert rc == 3


def test_ablate_features_channel_bookkeeping(smoke_config, tmp_path):
    out = tmp_path / "abl"
    rc = main(["ablate-features", "--config", str(smoke_config), "--seed", "2",
               "--out", str(out), "--toggles", "entropy_map", "--missions", "2"])
    assert rc == 0
    _, meta = load_checkpoint(out / "without_entropy_map" / "actor.ckpt")
    assert "entropy_map" not in meta["manifest"]
    assert meta["in_channels"] == 6
    assert (out / "without_entropy_map" / "benchmark.csv").exists()


def test_ablate_unknown_plane_is_usage_error(smoke_config, tmp_path):
    rc = main(["ablate-features", "--config", str(smoke_config), "--out",
               str(tmp_path / "x"), "--toggles", "sharpness_map"])
    assert rc == 2


def test_sweep_coverage_altitude(smoke_config, tmp_path):
    out = tmp_path / "sweep"
    rc = main(["sweep-coverage-altitude", "--config", str(smoke_config),
               "--missions", "2", "--out", str(out)])
    assert rc == 0
    lines = (out / "coverage_sweep.csv").read_text().splitlines()
    assert lines[0] == "altitude,entropy_mean,f1_mean"
    assert len(lines) == 4  # three altitude levels


def test_learned_actor_transfers_across_team_sizes(smoke_config, tmp_path):
    # actors are team-size agnostic (id plane is normalized), so a 2-agent
    # checkpoint drives 3-agent missions without retraining
    train_out = tmp_path / "train"
    assert main(["train", "--config", str(smoke_config), "--seed", "4",
                 "--out", str(train_out), "--missions", "2", "--quiet"]) == 0
    eval_out = tmp_path / "eval"
    rc = main(["evaluate", "--config", str(smoke_config), "--planner", "learned",
               "--actor-weights", str(train_out / "actor.ckpt"),
               "--agents", "3", "--comm-radius", "inf",
               "--missions", "2", "--out", str(eval_out)])
    assert rc == 0
    assert (eval_out / "benchmark.csv").exists()


def test_evaluate_local_metrics_flag(smoke_config, tmp_path):
    out = tmp_path / "localm"
    rc = main(["evaluate", "--config", str(smoke_config), "--planner", "random",
               "--missions", "2", "--local-metrics", "--out", str(out)])
    assert rc == 0
    lines = (out / "random_local_metrics.csv").read_text().splitlines()
    assert lines[0] == "mission,step,agent,roi_entropy,f1"
    # 2 missions x 3 steps x 2 agents
    assert len(lines) == 1 + 12
