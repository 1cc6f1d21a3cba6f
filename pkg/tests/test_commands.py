"""End-to-end tests for the penn-mpc commands at toy scale."""

import json
import math

import numpy as np
import pytest

from pennmpc.commands.collect import DATASET_DIR
from pennmpc.commands.common import EFFECTIVE_CONFIG_NAME, FAILED_NAME, RUN_MANIFEST_NAME, derive_seed
from pennmpc.commands.train import CHECKPOINT_NAME
from pennmpc.config import load_config
from pennmpc.core.nn import LayerParams, MlpParams
from pennmpc.main import main
from pennmpc.models.domain import NormStats
from pennmpc.services.dataset_store import read_manifest
from pennmpc.services.penn_dynamics import PennModel, save_checkpoint

TINY = [
    "model.H=2",
    "model.B=2",
    "model.hidden=[8]",
    "train.epochs=3",
    "train.batch_size=16",
    "collect.episode_seconds=10",
    "mppi.K=16",
    "mppi.T=3",
]


@pytest.fixture(scope="module")
def collected(tmp_path_factory):
    out = tmp_path_factory.mktemp("collect")
    assert main(["collect", "--out", str(out), "--minutes", "0.5", *TINY]) == 0
    return out


@pytest.fixture(scope="module")
def trained(collected, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out", str(out), f"io.data_dir={collected / DATASET_DIR}", *TINY]) == 0
    return out


def test_derive_seed_is_stable_and_keyed():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert derive_seed(0, 1) != derive_seed(1, 0)
    assert 0 <= derive_seed(5) < 2**32


def test_collect_writes_round_robin_episodes(collected):
    manifest = read_manifest(collected / DATASET_DIR)
    assert manifest.H == 2
    assert len(manifest.episodes) == 3
    tags = [(e.tag, e.direction) for e in manifest.episodes]
    assert tags == [("zigzag_low_speed", "ccw"), ("zigzag_low_speed", "cw"), ("high_speed_laps", "ccw")]
    assert all(e.rows <= 100 for e in manifest.episodes)
    assert (collected / "track.csv").exists()
    assert (collected / EFFECTIVE_CONFIG_NAME).exists()
    run = json.loads((collected / RUN_MANIFEST_NAME).read_text())
    assert run["command"] == "collect" and "numpy" in run["versions"]


def test_collect_is_reproducible(collected, tmp_path):
    assert main(["collect", "--out", str(tmp_path), "--minutes", "0.5", *TINY]) == 0
    for entry in read_manifest(collected / DATASET_DIR).episodes:
        a = (collected / DATASET_DIR / entry.file).read_bytes()
        b = (tmp_path / DATASET_DIR / entry.file).read_bytes()
        assert a == b


def test_collect_mix_can_be_restricted(tmp_path):
    assert main(["collect", "--out", str(tmp_path), "--minutes", "0.2", 'collect.mix=["slide"]', *TINY]) == 0
    assert {e.tag for e in read_manifest(tmp_path / DATASET_DIR).episodes} == {"slide"}


def test_train_outputs(trained):
    metrics = (trained / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,train_loss,rmse_total,rmse_vx,rmse_vy,rmse_r"
    assert len(metrics) == 1 + 3
    assert (trained / CHECKPOINT_NAME).exists()
    report = (trained / "eval_report.csv").read_text().splitlines()
    assert report[0] == "metric,rmse,unit"
    assert [line.split(",")[0] for line in report[1:]] == ["Total", "v_x", "v_y", "r"]


def test_eval_reproduces_the_train_report(collected, trained, tmp_path):
    argv = ["eval", "--out", str(tmp_path), "--checkpoint", str(trained / CHECKPOINT_NAME),
            f"io.data_dir={collected / DATASET_DIR}", *TINY]
    assert main(argv) == 0
    assert (tmp_path / "eval_report.csv").read_text() == (trained / "eval_report.csv").read_text()
    assert main([*argv, "--split", "all"]) == 0


def test_eval_rejects_mismatched_history(collected, tmp_path):
    ckpt_dir = tmp_path / "h3"
    assert main(["train", "--out", str(ckpt_dir), f"io.data_dir={collected / DATASET_DIR}", *TINY, "model.H=3"]) == 0
    out = tmp_path / "eval"
    code = main(["eval", "--out", str(out), "--checkpoint", str(ckpt_dir / CHECKPOINT_NAME),
                 f"io.data_dir={collected / DATASET_DIR}", *TINY])
    assert code == 3
    failed = (out / FAILED_NAME).read_text()
    assert "H=3" in failed and "H=2" in failed


def test_ablate_history(collected, tmp_path):
    argv = ["ablate-history", "--out", str(tmp_path), "--h-min", "1", "--h-max", "2",
            f"io.data_dir={collected / DATASET_DIR}", *TINY]
    assert main(argv) == 0
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[0] == "H,rmse_total,rmse_vx,rmse_vy,rmse_r,best"
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2"]
    assert sum(r.endswith(",true") for r in rows[1:]) == 1
    assert "*" in (tmp_path / "ablation.txt").read_text()


EXPLORE_TINY = [
    *TINY,
    "explore.warmup_steps=30",
    "explore.steps_per_round=10",
    "explore.retrain_epochs=2",
    "explore.eval_minutes=0.2",
]


def test_explore_resume_matches_uninterrupted_run(tmp_path):
    straight = tmp_path / "straight"
    assert main(["explore", "--out", str(straight), "--rounds", "2", *EXPLORE_TINY]) == 0
    state = json.loads((straight / "explore_state.json").read_text())
    assert state["completed_rounds"] == 2
    assert state["cumulative_steps"] == 30 + 2 * 10
    assert state["buffer_episodes"] == 3

    resumed = tmp_path / "resumed"
    assert main(["explore", "--out", str(resumed), "--rounds", "1", *EXPLORE_TINY]) == 0
    assert main(["explore", "--out", str(resumed), "--rounds", "2", *EXPLORE_TINY]) == 0
    curve = (straight / "learning_curve.csv").read_text()
    assert curve.splitlines()[0] == "round,cumulative_steps,rmse_total,rmse_vx,rmse_vy,rmse_r,mean_jrd_pre"
    assert len(curve.splitlines()) == 3
    assert (resumed / "learning_curve.csv").read_text() == curve
    for name in ("model_round_01.ckpt.json", "model_round_02.ckpt.json"):
        assert (resumed / name).read_bytes() == (straight / name).read_bytes()


def test_explore_refuses_to_switch_policy(tmp_path):
    assert main(["explore", "--out", str(tmp_path), "--rounds", "1", "--policy", "random", *EXPLORE_TINY]) == 0
    assert main(["explore", "--out", str(tmp_path), "--rounds", "2", *EXPLORE_TINY]) == 2
    assert main(["explore", "--out", str(tmp_path), "--rounds", "1", "--fresh", *EXPLORE_TINY]) == 0


@pytest.mark.parametrize("mode", ["direct", "safe"])
def test_deploy_out_of_steps_fails_with_diagnostics(collected, trained, tmp_path, mode):
    argv = ["deploy", "--out", str(tmp_path), "--checkpoint", str(trained / CHECKPOINT_NAME), "--mode", mode,
            "deploy.max_steps=5", f"io.data_dir={collected / DATASET_DIR}", *TINY]
    assert main(argv) == 3
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["completed"] is False
    assert summary["failure"] in ("max_steps", "off_track")
    diagnostics = (tmp_path / "diagnostics.csv").read_text().splitlines()
    assert diagnostics[0] == "t,mode,applied_steer,applied_throttle,best_cost,mean_jrd,max_jrd,n_invalid"
    assert len(diagnostics) == 1 + summary["steps"]
    assert len((tmp_path / "trajectory.csv").read_text().splitlines()) == 1 + summary["steps"]
    assert (tmp_path / FAILED_NAME).exists()
    if mode == "safe":
        assert summary["jrd_threshold"] is not None


def test_main_exit_codes(collected, tmp_path):
    assert main(["train", "--out", str(tmp_path), "model.depth=3"]) == 2
    assert main(["train", "--out", str(tmp_path), "model.var_min=20"]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["collect", "--out", str(tmp_path), "--rate", "0"]) == 2

    (tmp_path / FAILED_NAME).write_text("stale\n")
    assert main(["collect", "--out", str(tmp_path), "--minutes", "0.1", "--rate", "20", *TINY]) == 0
    assert not (tmp_path / FAILED_NAME).exists()
    assert load_config(tmp_path / EFFECTIVE_CONFIG_NAME).plant.dt == 0.05


def _kinematic_ensemble(var: float = 0.01) -> PennModel:
    """Two linear members around 5 m/s, differing only in steering gain; H=1, raw units."""
    var_min, var_max = 1e-6, 10.0
    s = (var - var_min) / (var_max - var_min)
    raw = math.log(s / (1.0 - s))
    members = []
    for steer_gain in (1.385, 1.25):
        W = np.zeros((6, 5))
        W[0, 0], W[0, 4] = -0.00075, 0.4  # drag, throttle
        W[1, 1] = -0.5
        W[2, 2], W[2, 3] = -0.8, steer_gain
        b = np.array([0.0, 0.0, 0.0, raw, raw, raw])
        members.append(MlpParams((LayerParams(W, b),), ()))
    return PennModel(tuple(members), NormStats.identity(1), H=1, var_min=var_min, var_max=var_max)


@pytest.mark.parametrize("mode", ["direct", "safe"])
def test_deploy_completes_a_lap_with_a_sound_model(tmp_path, mode):
    ckpt = tmp_path / "kinematic.ckpt.json"
    save_checkpoint(_kinematic_ensemble(), ckpt)
    out = tmp_path / mode
    argv = ["deploy", "--out", str(out), "--checkpoint", str(ckpt), "--mode", mode,
            "deploy.laps=1", "deploy.max_steps=900", "costs.target_speed=5.0", "costs.jrd_threshold=0.5",
            "mppi.K=64", "mppi.T=15"]
    assert main(argv) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["completed"] is True
    assert summary["laps_completed"] == 1
    assert summary["failure"] is None
    assert summary["max_abs_e_lat"] < 3.0
    assert not (out / FAILED_NAME).exists()
