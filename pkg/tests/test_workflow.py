import math

import numpy as np
import pytest

from taxelgraph.baoding2d import ObsMode
from taxelgraph.ppo import PpoConfig
from taxelgraph.tactilesim import desk_layout, generate_grasp_dataset
from taxelgraph.workflow import (PerceptionBuffer, WorkflowConfig, bench_csv, curves_csv, final_reward,
                                 levels_csv, perception_digest, run_alternating_training,
                                 run_baseline_comparison, run_input_ablations, run_task_levels, write_manifest)

TINY_PPO = PpoConfig(gamma=0.95, n_envs=2, rollout_length=8, minibatch_size=8, epochs_per_update=1)


class TestBuffer:
    def test_fifo_eviction(self):
        buf = PerceptionBuffer(3)
        buf.add(["a", "b"], [[0.0] * 4, [1.0] * 4])
        buf.add(["c", "d"], [[2.0] * 4, [3.0] * 4])
        assert buf.frames() == ["b", "c", "d"]
        assert buf.labels()[:, 0].tolist() == [1.0, 2.0, 3.0]
        assert len(buf) == 3 and buf.total_added == 4

    def test_empty(self):
        buf = PerceptionBuffer(2)
        assert len(buf) == 0 and buf.labels().shape == (0, 4)

    def test_bad(self):
        with pytest.raises(ValueError):
            PerceptionBuffer(0)
        with pytest.raises(ValueError):
            PerceptionBuffer(2).add(["a"], np.zeros((2, 4)))


class TestAlternating:
    def test_zero_iterations(self):
        res = run_alternating_training(WorkflowConfig(max_outer_iterations=0, ppo=TINY_PPO))
        assert res.history == [] and res.curve == []
        assert res.perception.params_ is not None and res.policy.obs_dim == 16

    def test_threshold_never_reached(self):
        cfg = WorkflowConfig(max_outer_iterations=2, stage_updates=1, buffer_threshold=1000, ppo=TINY_PPO)
        res = run_alternating_training(cfg)
        assert [h.retrained for h in res.history] == [False, False]
        assert all(math.isnan(h.test_rmse) for h in res.history)
        assert [h.buffer_size for h in res.history] == [16, 32]

    def test_retraining_changes_perception(self):
        cfg = WorkflowConfig(max_outer_iterations=1, stage_updates=2, buffer_threshold=20, perception_epochs=1,
                             ppo=TINY_PPO)
        ref = run_alternating_training(WorkflowConfig(max_outer_iterations=0, ppo=TINY_PPO))
        res = run_alternating_training(cfg)
        h = res.history[0]
        assert h.retrained and h.buffer_size == 32 and h.steps == 32
        assert math.isfinite(h.train_rmse) and math.isfinite(h.test_rmse)
        assert perception_digest(res.perception) != perception_digest(ref.perception)

    def test_reproducible(self):
        cfg = WorkflowConfig(max_outer_iterations=2, stage_updates=1, buffer_threshold=10, perception_epochs=1,
                             ppo=TINY_PPO)
        a = run_alternating_training(cfg)
        b = run_alternating_training(cfg)
        assert [h.csv() for h in a.history] == [h.csv() for h in b.history]
        assert perception_digest(a.perception) == perception_digest(b.perception)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            WorkflowConfig(perception_kind="rnn")
        with pytest.raises(ValueError):
            WorkflowConfig(buffer_threshold=0)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_grasp_dataset(desk_layout(), "cube", 30, 0)


class TestBench:
    def test_single_kind_single_seed(self, small_dataset):
        rows = run_baseline_comparison(small_dataset, ["mlp"], 2, [0], desk_layout())
        assert [(r.kind, r.seed) for r in rows] == [("mlp", "0"), ("mlp", "mean")]
        text = bench_csv(rows)
        assert text.splitlines()[0] == "kind,seed,train_rmse,test_rmse,orientation_deg"
        assert len(text.splitlines()) == 3

    def test_deterministic(self, small_dataset):
        a = run_baseline_comparison(small_dataset, ["tacgnn", "cnn"], 1, [0, 1], desk_layout())
        b = run_baseline_comparison(small_dataset, ["tacgnn", "cnn"], 1, [0, 1], desk_layout())
        assert bench_csv(a) == bench_csv(b) and len(a) == 6

    def test_sphere_has_no_orientation(self):
        ds = generate_grasp_dataset(desk_layout(), "sphere", 10, 0)
        rows = run_baseline_comparison(ds, ["gcn"], 1, [0], desk_layout())
        assert bench_csv(rows).splitlines()[0] == "kind,seed,train_rmse,test_rmse"


class TestDrivers:
    def test_task_levels(self):
        rows = run_task_levels(None, n_episodes=4, seeds=(0, 1))
        assert [(r.level, s) for s, r in rows] == [(lv, s) for lv in ("simple", "middle", "hard") for s in (0, 1)]
        assert len(levels_csv(rows).splitlines()) == 7
        with pytest.raises(ValueError):
            run_task_levels(None, n_episodes=0)

    def test_ablations(self):
        modes = [ObsMode("groundtruth"), ObsMode("no_perception"), ObsMode.parse("noise2")]
        curves = run_input_ablations(modes, 2, TINY_PPO)
        assert list(curves) == ["groundtruth", "no_perception", "noise2"]
        assert all(len(c) == 2 and c[-1].steps == 32 for c in curves.values())
        assert len(curves_csv(curves).splitlines()) == 7
        # no episode can finish within 16 steps, so there is no reward to report yet
        assert math.isnan(final_reward(curves["groundtruth"]))

    def test_manifest(self, tmp_path):
        (tmp_path / "x.csv").write_text("a\n")
        write_manifest(tmp_path / "m.txt", {"seed": 3}, [3], [tmp_path / "x.csv"])
        lines = (tmp_path / "m.txt").read_text().splitlines()
        assert lines[0] == "config.seed=3" and lines[1] == "seeds=3"
        assert lines[2].startswith("sha256.x.csv=") and len(lines[2].split("=")[1]) == 64
