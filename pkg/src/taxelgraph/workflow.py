"""Alternating perception/control training and the experiment drivers.

One outer iteration freezes the perception model, runs a PPO stage whose
observations pass through it while every tactile frame is recorded with
the true disc centers, and then, once enough frames are stored, retrains
the perception model on the recorded data.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baoding2d import LEVELS, Geometry, ObsMode, TaskConfig, frames_to_raw, perception_inputs
from .perception import make_regressor, train_test_split_indices
from .ppo import PolicyParams, PpoConfig, UpdateRecord, VecEnv, evaluate_policy, init_policy, run_ppo

PERCEPTION_KINDS = ("tacgnn", "mlp", "cnn", "gcn")


class PerceptionBuffer:
    """FIFO store of (tactile frame, true object state) pairs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._frames = deque(maxlen=self.capacity)
        self._labels = deque(maxlen=self.capacity)
        self.total_added = 0

    def __len__(self) -> int:
        return len(self._frames)

    def add(self, frames, labels) -> None:
        labels = np.asarray(labels, dtype=np.float64)
        if len(frames) != len(labels):
            raise ValueError("frames and labels differ in length")
        for f, y in zip(frames, labels):
            self._frames.append(f)
            self._labels.append(y)
        self.total_added += len(frames)

    def frames(self) -> list:
        return list(self._frames)

    def labels(self) -> np.ndarray:
        return np.array(self._labels) if self._labels else np.zeros((0, 4))


@dataclass
class WorkflowConfig:
    perception_kind: str = "tacgnn"
    buffer_threshold: int = 5000
    perception_epochs: int = 10
    max_outer_iterations: int = 4
    stage_updates: int = 75
    level: str = "simple"
    seed: int = 0
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(gamma=0.95))
    init_scale: float = 0.012
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.perception_kind not in PERCEPTION_KINDS:
            raise ValueError(f"unknown perception kind {self.perception_kind!r}")
        if self.buffer_threshold < 1 or self.perception_epochs < 0 or self.max_outer_iterations < 0:
            raise ValueError("thresholds and counts must be non-negative (threshold >= 1)")
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")

    @property
    def buffer_capacity(self) -> int:
        return 2 * self.buffer_threshold


@dataclass
class IterationRecord:
    iteration: int
    steps: int
    mean_reward: float
    success_rate: float
    buffer_size: int
    retrained: bool
    train_rmse: float
    test_rmse: float

    HEADER = "iteration,steps,mean_reward,success_rate,buffer_size,retrained,train_rmse,test_rmse"

    def csv(self) -> str:
        return ",".join(repr(v) if isinstance(v, float) else str(int(v)) if isinstance(v, bool) else str(v)
                        for v in (getattr(self, f.name) for f in fields(self)))


@dataclass
class WorkflowResult:
    perception: object
    policy: PolicyParams
    history: list
    curve: list


def _perception_model(cfg: WorkflowConfig, geom: Geometry):
    kw = dict(epochs=cfg.perception_epochs, warm_start=True, random_state=cfg.seed)
    if cfg.perception_kind == "gcn":
        from .baoding2d import taxel_layout
        kw["rest_positions"] = taxel_layout(geom, np.zeros(4))
    model = make_regressor(cfg.perception_kind, **kw)
    probe = None if cfg.perception_kind in ("tacgnn", "gcn") else np.zeros((1, geom.n_taxels))
    return model.initialize(probe, 4, np.zeros(4), np.full(4, cfg.init_scale))


def perception_digest(model) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.params_.tensors().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def retrain_perception(model, buffer: PerceptionBuffer, cfg: WorkflowConfig, iteration: int, n_taxels: int):
    """Fit on a seeded split of the buffer; returns ``(train_rmse, test_rmse)``."""
    frames, labels = buffer.frames(), buffer.labels()
    tr, te = train_test_split_indices(len(frames), cfg.seed + iteration, 1.0 - cfg.test_fraction)
    X = perception_inputs(model, frames, n_taxels)
    pick = (lambda idx: [X[i] for i in idx]) if isinstance(X, list) else (lambda idx: X[idx])
    model.fit(pick(tr), labels[tr])
    train = model.rmse(pick(tr), labels[tr])
    test = model.rmse(pick(te), labels[te]) if len(te) else float("nan")
    return train, test


def run_alternating_training(cfg: WorkflowConfig, geometry: Geometry | None = None, log=None) -> WorkflowResult:
    """Alternate frozen-perception PPO stages with perception retraining."""
    geom = geometry or Geometry()
    perception = _perception_model(cfg, geom)
    mode = ObsMode("tacgnn", model=perception)
    venv = VecEnv(cfg.ppo.n_envs, TaskConfig.for_level(cfg.level), mode, geom, cfg.seed)
    policy = init_policy(venv.obs_dim, cfg.ppo.hidden, cfg.seed, cfg.ppo.init_log_std)
    buffer = PerceptionBuffer(cfg.buffer_capacity)
    history, curve = [], []
    optimizer, steps = None, 0
    rng = np.random.default_rng([cfg.seed, 1])
    for it in range(1, cfg.max_outer_iterations + 1):
        frozen = perception_digest(perception)
        recs, optimizer = run_ppo(policy, venv, cfg.ppo, cfg.stage_updates, rng, optimizer,
                                  on_rollout=lambda b: buffer.add(b.frames, b.labels),
                                  start_update=len(curve), start_steps=steps)
        if perception_digest(perception) != frozen:
            raise RuntimeError("perception changed during a control stage")
        curve.extend(recs)
        steps = recs[-1].steps if recs else steps
        retrained = len(buffer) >= cfg.buffer_threshold
        train = test = float("nan")
        if retrained:
            train, test = retrain_perception(perception, buffer, cfg, it, geom.n_taxels)
        tail = recs[-max(1, len(recs) // 5):] if recs else []
        rec = IterationRecord(it, steps, _nanmean([r.mean_reward for r in tail]),
                              _nanmean([r.success_rate for r in tail]), len(buffer), retrained, train, test)
        history.append(rec)
        if log:
            log(rec)
    return WorkflowResult(perception, policy, history, curve)


def _nanmean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


# -- experiment drivers ------------------------------------------------------------

@dataclass
class BenchRow:
    kind: str
    seed: str
    train_rmse: float
    test_rmse: float
    orientation_deg: float | None = None


def run_baseline_comparison(dataset, kinds, epochs: int, seeds, layout=None, split_seed: int = 0,
                            log=None) -> list[BenchRow]:
    """Train each kind with an equal budget per seed; adds a mean row per kind.

    Position RMSE covers the first three label columns; a fourth column, when
    present, is an angle in degrees reported separately.
    """
    tr, te = train_test_split_indices(len(dataset), split_seed)
    Y = dataset.labels
    pos = [0, 1, 2]
    rows = []
    for kind in kinds:
        per = []
        for seed in seeds:
            est = make_regressor(kind, layout, epochs=epochs, random_state=int(seed))
            X = dataset.frames if kind == "tacgnn" else dataset.raw
            pick = (lambda idx: [X[i] for i in idx]) if kind == "tacgnn" else (lambda idx: X[idx])
            est.fit(pick(tr), Y[tr])
            ori = est.rmse(pick(te), Y[te], [3]) if Y.shape[1] > 3 else None
            row = BenchRow(kind, str(seed), est.rmse(pick(tr), Y[tr], pos), est.rmse(pick(te), Y[te], pos), ori)
            per.append(row)
            if log:
                log(row)
        rows.extend(per)
        ori = float(np.mean([r.orientation_deg for r in per])) if per[0].orientation_deg is not None else None
        rows.append(BenchRow(kind, "mean", float(np.mean([r.train_rmse for r in per])),
                             float(np.mean([r.test_rmse for r in per])), ori))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    has_ori = any(r.orientation_deg is not None for r in rows)
    head = "kind,seed,train_rmse,test_rmse" + (",orientation_deg" if has_ori else "")
    lines = [head]
    for r in rows:
        vals = [r.kind, r.seed, repr(r.train_rmse), repr(r.test_rmse)]
        if has_ori:
            vals.append(repr(r.orientation_deg))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def run_task_levels(policy: PolicyParams | None, levels=LEVELS, n_episodes: int = 500, seeds=(0,),
                    mode: ObsMode | None = None, geometry: Geometry | None = None) -> list:
    """Evaluation-only success table, one row per (level, seed)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rows = []
    for level in levels:
        for seed in seeds:
            rows.append((seed, evaluate_policy(policy, TaskConfig.for_level(level), mode, n_episodes, seed,
                                               geometry)))
    return rows


def levels_csv(rows) -> str:
    lines = ["level,seed,episodes,success_rate,mean_steps,mean_reward"]
    for seed, r in rows:
        lines.append(f"{r.level},{seed},{r.episodes},{r.success_rate!r},{r.mean_steps!r},{r.mean_reward!r}")
    return "\n".join(lines) + "\n"


def train_policy(mode: ObsMode, n_updates: int, ppo: PpoConfig, level: str = "simple", seed: int = 0,
                 geometry: Geometry | None = None) -> tuple[PolicyParams, list[UpdateRecord]]:
    venv = VecEnv(ppo.n_envs, TaskConfig.for_level(level), mode, geometry, seed)
    policy = init_policy(venv.obs_dim, ppo.hidden, seed, ppo.init_log_std)
    recs, _ = run_ppo(policy, venv, ppo, n_updates, np.random.default_rng([seed, 1]))
    return policy, recs


def run_input_ablations(modes, n_updates: int, ppo: PpoConfig, level: str = "simple", seed: int = 0,
                        geometry: Geometry | None = None, log=None) -> dict[str, list[UpdateRecord]]:
    """One policy per observation mode with an identical update budget."""
    curves = {}
    for mode in modes:
        _, recs = train_policy(mode, n_updates, ppo, level, seed, geometry)
        curves[mode.label] = recs
        if log:
            log(mode.label, recs)
    return curves


def final_reward(curve: list[UpdateRecord], tail: int = 10) -> float:
    """Mean episode reward over the last ``tail`` updates."""
    return _nanmean([r.mean_reward for r in curve[-tail:]])


def curves_csv(curves: dict[str, list[UpdateRecord]]) -> str:
    lines = ["mode," + UpdateRecord.HEADER]
    for name, recs in curves.items():
        lines.extend(f"{name},{r.csv()}" for r in recs)
    return "\n".join(lines) + "\n"


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, config: dict, seeds, outputs) -> None:
    """Config echo, seeds and content hashes of the produced files."""
    lines = [f"config.{k}={v}" for k, v in config.items()]
    lines.append("seeds=" + ",".join(str(s) for s in seeds))
    for p in outputs:
        lines.append(f"sha256.{Path(p).name}={file_digest(p)}")
    Path(path).write_text("\n".join(lines) + "\n")


__all__ = ["PerceptionBuffer", "WorkflowConfig", "IterationRecord", "WorkflowResult", "run_alternating_training",
           "retrain_perception", "perception_digest", "run_baseline_comparison", "bench_csv", "BenchRow",
           "run_task_levels", "levels_csv", "train_policy", "run_input_ablations", "final_reward", "curves_csv",
           "write_manifest", "file_digest", "frames_to_raw", "PERCEPTION_KINDS"]
