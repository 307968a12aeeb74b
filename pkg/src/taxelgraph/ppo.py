"""Proximal policy optimization for the pusher task.

The policy is a diagonal Gaussian around ``0.5 + actor(obs)`` with a
learnable, state-independent log standard deviation. Samples are clamped
into the action box before they reach the environment; log-probabilities
are taken on the unclamped sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .baoding2d import (Baoding2DEnv, Geometry, ObsMode, TaskConfig, canonical_centers, make_observation,
                        obs_dim, perception_inputs)
from .diffcore import Adam, MlpParams, NonFiniteError, kaiming_init, mlp_backward, mlp_forward

ACTION_DIM = 4
LOG_2PI = math.log(2 * math.pi)
DESK_HIDDEN = (64, 64)
PAPER_HIDDEN = (512, 256, 128)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    epochs_per_update: int = 4
    minibatch_size: int = 256
    rollout_length: int = 128
    n_envs: int = 16
    entropy_coefficient: float = 0.0
    value_coefficient: float = 0.5
    learning_rate: float = 1e-3
    hidden: tuple = DESK_HIDDEN
    init_log_std: float = -1.0
    max_grad_norm: float = 0.5
    reward_scale: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.n_envs < 1 or self.rollout_length < 0 or self.minibatch_size < 1 or self.epochs_per_update < 0:
            raise ValueError("n_envs, minibatch_size must be >= 1 and rollout_length, epochs >= 0")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- policy -------------------------------------------------------------------

@dataclass
class PolicyParams:
    actor: MlpParams
    critic: MlpParams
    log_std: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.actor.layer_sizes[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out = self.actor.tensors("actor.")
        out.update(self.critic.tensors("critic."))
        out["log_std"] = self.log_std
        return out

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.actor.copy(), self.critic.copy(), self.log_std.copy())

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "PolicyParams":
        def mlp(prefix):
            n = sum(1 for k in t if k.startswith(prefix + "w"))
            ws = [np.asarray(t[f"{prefix}w{i}"], dtype=np.float64) for i in range(n)]
            bs = [np.asarray(t[f"{prefix}b{i}"], dtype=np.float64).reshape(-1) for i in range(n)]
            sizes = [ws[0].shape[0]] + [w.shape[1] for w in ws]
            return MlpParams(sizes, ws, bs)
        return cls(mlp("actor."), mlp("critic."), np.asarray(t["log_std"], dtype=np.float64).reshape(-1))


def init_policy(n_obs: int, hidden=DESK_HIDDEN, seed=None, init_log_std: float = -1.0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    actor = kaiming_init([n_obs, *hidden, ACTION_DIM], rng, output_gain=0.01)
    critic = kaiming_init([n_obs, *hidden, 1], rng)
    return PolicyParams(actor, critic, np.full(ACTION_DIM, float(init_log_std)))


def action_mean(policy: PolicyParams, obs: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(policy.actor, np.atleast_2d(obs))
    return 0.5 + out


def value_of(policy: PolicyParams, obs: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(policy.critic, np.atleast_2d(obs))
    return out[:, 0]


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + LOG_2PI))


def sample_actions(policy: PolicyParams, obs: np.ndarray, rng, deterministic: bool = False):
    """Return ``(raw_actions, log_probs, values)``; clamp raw actions before stepping."""
    mean = action_mean(policy, obs)
    if deterministic:
        raw = mean
    else:
        raw = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)
    return raw, gaussian_log_prob(mean, policy.log_std, raw), value_of(policy, obs)


# -- vectorized environments ---------------------------------------------------

def env_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


class VecEnv:
    """A list of environments stepped in lock step with automatic reset.

    Observations are built for all environments at once so that a
    perception model runs one batched prediction per step.
    """

    def __init__(self, n_envs: int, task: TaskConfig | None = None, mode: ObsMode | None = None,
                 geometry: Geometry | None = None, seed=None):
        if n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        self.task = task or TaskConfig()
        self.mode = mode or ObsMode()
        self.geom = geometry or Geometry()
        seqs = env_seeds(seed, 2 * n_envs)
        self.envs = [Baoding2DEnv(self.task, self.geom, seqs[i]) for i in range(n_envs)]
        self.obs_rngs = [np.random.default_rng(seqs[n_envs + i]) for i in range(n_envs)]
        self.frames = [None] * n_envs
        self.episode_reward = np.zeros(n_envs)
        for i, env in enumerate(self.envs):
            _, self.frames[i] = env.reset()

    @property
    def n_envs(self) -> int:
        return len(self.envs)

    @property
    def obs_dim(self) -> int:
        return obs_dim(self.mode)

    def set_perception(self, model) -> None:
        self.mode = ObsMode(self.mode.name, self.mode.noise_mm, model)

    def observe(self) -> np.ndarray:
        predicted = [None] * self.n_envs
        if self.mode.name == "tacgnn":
            predicted = self.mode.model.predict(perception_inputs(self.mode.model, self.frames, self.geom.n_taxels))
        rows = []
        for i, env in enumerate(self.envs):
            ob = make_observation(env.state, self.mode, rng=self.obs_rngs[i], frame=self.frames[i],
                                  predicted=predicted[i])
            rows.append(ob.vector(self.geom, self.mode))
        return np.array(rows)

    def true_labels(self) -> np.ndarray:
        return np.array([canonical_centers(env.state.disc_centers) for env in self.envs])

    def step(self, actions: np.ndarray):
        """Step every env; returns ``(rewards, dones, finished)``.

        ``finished`` lists ``(outcome, steps, episode_reward)`` for episodes
        that ended on this step.
        """
        actions = np.clip(actions, 0.0, 1.0)
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs)
        finished = []
        for i, env in enumerate(self.envs):
            state, frame, rb, done, info = env.step(actions[i])
            rewards[i] = rb.total
            self.episode_reward[i] += rb.total
            if done:
                dones[i] = 1.0
                finished.append((info["outcome"], state.step_count, self.episode_reward[i]))
                self.episode_reward[i] = 0.0
                _, frame = env.reset()
            self.frames[i] = frame
        return rewards, dones, finished


# -- rollouts --------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Time-major arrays of shape ``(T, n_envs, ...)`` plus bootstrap values."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    last_values: np.ndarray
    frames: list = field(default_factory=list)
    labels: np.ndarray | None = None
    episodes: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.rewards.size

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])


def collect_rollouts(policy: PolicyParams, venv: VecEnv, rollout_length: int, rng,
                     deterministic: bool = False, record_frames: bool = False) -> RolloutBuffer:
    """Run ``rollout_length`` lock-step transitions in every environment.

    With ``record_frames`` the tactile frame seen at each step is kept with
    the true (canonically ordered) disc centers.
    """
    rng = np.random.default_rng(rng)
    T, E, D = rollout_length, venv.n_envs, venv.obs_dim
    obs = np.zeros((T, E, D))
    acts = np.zeros((T, E, ACTION_DIM))
    rews = np.zeros((T, E))
    dones = np.zeros((T, E))
    vals = np.zeros((T, E))
    logps = np.zeros((T, E))
    frames, labels, episodes = [], [], []
    current = venv.observe()
    for t in range(T):
        if record_frames:
            frames.extend(venv.frames)
            labels.append(venv.true_labels())
        raw, logp, v = sample_actions(policy, current, rng, deterministic)
        obs[t], acts[t], logps[t], vals[t] = current, raw, logp, v
        rews[t], dones[t], fin = venv.step(raw)
        episodes.extend(fin)
        current = venv.observe()
    last = value_of(policy, current) if T else np.zeros(E)
    lab = np.concatenate(labels) if labels else np.zeros((0, 4))
    return RolloutBuffer(obs, acts, rews, dones, vals, logps, last, frames, lab, episodes)


def compute_gae(rewards, values, dones, last_values, gamma: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimates and return targets.

    Arrays are time-major; a trailing env axis is optional.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(r)
    next_v = np.asarray(last_values, dtype=np.float64)
    running = np.zeros_like(next_v)
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_v = v[t]
    return adv, adv + v


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean() if adv.size else adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# -- loss and update -------------------------------------------------------------

@dataclass
class LossParts:
    total: float
    surrogate: float
    value_loss: float
    entropy: float
    clip_fraction: float


def ppo_loss(policy: PolicyParams, obs, actions, old_log_probs, advantages, returns, config: PpoConfig):
    """Scalar PPO loss and its gradient for every policy tensor."""
    obs = np.atleast_2d(obs)
    n = len(obs)
    out, cache_a = mlp_forward(policy.actor, obs)
    mean = 0.5 + out
    log_std = policy.log_std
    inv_std = np.exp(-log_std)
    z = (actions - mean) * inv_std
    logp = -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * ACTION_DIM * LOG_2PI
    ratio = np.exp(logp - old_log_probs)
    eps = config.clip_epsilon
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    s1, s2 = ratio * advantages, clipped * advantages
    surrogate = -float(np.mean(np.minimum(s1, s2)))
    entropy = gaussian_entropy(log_std)
    v, cache_c = mlp_forward(policy.critic, obs)
    err = v[:, 0] - returns
    value_loss = float(np.mean(err * err))
    total = surrogate + config.value_coefficient * value_loss - config.entropy_coefficient * entropy
    if not math.isfinite(total):
        raise NonFiniteError(f"non-finite PPO loss (surrogate={surrogate}, value={value_loss})")

    g_logp = -(s1 <= s2).astype(np.float64) * advantages * ratio / n
    g_mean = (g_logp[:, None] * z * inv_std)
    g_log_std = (g_logp[:, None] * (z * z - 1.0)).sum(axis=0) - config.entropy_coefficient
    ga, _ = mlp_backward(policy.actor, cache_a, g_mean)
    gc, _ = mlp_backward(policy.critic, cache_c, (config.value_coefficient * 2.0 * err / n)[:, None])
    grads = ga.tensors("actor.")
    grads.update(gc.tensors("critic."))
    grads["log_std"] = g_log_std
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > eps))
    return LossParts(total, surrogate, value_loss, entropy, clip_frac), grads


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def make_optimizer(policy: PolicyParams, config: PpoConfig) -> Adam:
    return Adam(policy.tensors(), learning_rate=config.learning_rate)


def ppo_update(policy: PolicyParams, optimizer: Adam, buffer: RolloutBuffer, config: PpoConfig, rng) -> LossParts:
    """Several epochs of minibatch Adam steps on the clipped objective.

    Returns diagnostics averaged over all minibatches.
    """
    rng = np.random.default_rng(rng)
    adv, ret = compute_gae(buffer.rewards * config.reward_scale, buffer.values, buffer.dones,
                           buffer.last_values, config.gamma, config.gae_lambda)
    obs = buffer.flat("observations")
    acts = buffer.flat("actions")
    old = buffer.flat("log_probs")
    adv = normalize_advantages(adv.reshape(-1))
    ret = ret.reshape(-1)
    n = len(obs)
    parts = []
    for _ in range(config.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            lp, grads = ppo_loss(policy, obs[idx], acts[idx], old[idx], adv[idx], ret[idx], config)
            clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(grads)
            parts.append(lp)
    if not parts:
        return LossParts(0.0, 0.0, 0.0, gaussian_entropy(policy.log_std), 0.0)
    return LossParts(*(float(np.mean([getattr(p, f.name) for p in parts])) for f in fields(LossParts)))


# -- training and evaluation -------------------------------------------------------

@dataclass
class UpdateRecord:
    update: int
    steps: int
    mean_reward: float
    success_rate: float
    surrogate: float
    value_loss: float
    entropy: float
    clip_fraction: float

    HEADER = "update,steps,mean_reward,success_rate,surrogate,value_loss,entropy,clip_fraction"

    def csv(self) -> str:
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in
                        (self.update, self.steps, self.mean_reward, self.success_rate, self.surrogate,
                         self.value_loss, self.entropy, self.clip_fraction))


def run_ppo(policy: PolicyParams, venv: VecEnv, config: PpoConfig, n_updates: int, rng,
            optimizer: Adam | None = None, on_rollout=None, start_update: int = 0, start_steps: int = 0):
    """Alternate rollout collection and updates for ``n_updates`` iterations.

    ``on_rollout(buffer)`` receives each buffer (with recorded frames) before
    the update. Returns ``(records, optimizer)``.
    """
    rng = np.random.default_rng(rng)
    optimizer = optimizer or make_optimizer(policy, config)
    records = []
    steps = start_steps
    for u in range(n_updates):
        buf = collect_rollouts(policy, venv, config.rollout_length, rng, record_frames=on_rollout is not None)
        steps += len(buf)
        if on_rollout is not None:
            on_rollout(buf)
        lp = ppo_update(policy, optimizer, buf, config, rng)
        eps = buf.episodes
        mean_r = float(np.mean([e[2] for e in eps])) if eps else float("nan")
        succ = float(np.mean([e[0] == "success" for e in eps])) if eps else float("nan")
        records.append(UpdateRecord(start_update + u + 1, steps, mean_r, succ, lp.surrogate, lp.value_loss,
                                    lp.entropy, lp.clip_fraction))
    return records, optimizer


@dataclass(frozen=True)
class EvalResult:
    level: str
    episodes: int
    success_rate: float
    mean_steps: float
    mean_reward: float


def evaluate_policy(policy: PolicyParams | None, task: TaskConfig, mode: ObsMode | None = None,
                    n_episodes: int = 100, seed=None, geometry: Geometry | None = None,
                    n_envs: int = 16) -> EvalResult:
    """Deterministic-mean evaluation; ``policy=None`` means uniform random actions."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    mode = mode or ObsMode()
    venv = VecEnv(min(n_envs, n_episodes), task, mode, geometry, seed)
    rng = np.random.default_rng(env_seeds(seed, 1)[0].spawn(1)[0])
    done, started = [], venv.n_envs
    active = np.ones(venv.n_envs, dtype=bool)
    while len(done) < n_episodes:
        if policy is None:
            act = rng.uniform(0.0, 1.0, size=(venv.n_envs, ACTION_DIM))
        else:
            act = action_mean(policy, venv.observe())
        # step only envs whose episode still counts
        for i, env in enumerate(venv.envs):
            if not active[i]:
                continue
            state, frame, rb, d, info = env.step(np.clip(act[i], 0.0, 1.0))
            venv.episode_reward[i] += rb.total
            if d:
                done.append((info["outcome"], state.step_count, venv.episode_reward[i]))
                venv.episode_reward[i] = 0.0
                if started < n_episodes:
                    started += 1
                    _, frame = env.reset()
                else:
                    active[i] = False
            venv.frames[i] = frame
    done = done[:n_episodes]
    return EvalResult(task.level, len(done), float(np.mean([d[0] == "success" for d in done])),
                      float(np.mean([d[1] for d in done])), float(np.mean([d[2] for d in done])))
