"""Planar two-disc rotation task driven by four tactile pushers.

Two identical discs rest in a shallow circular dish whose slope pulls them
towards the center. Four round-tipped pushers slide on rails at 0, 90, 180
and 270 degrees, each with a strip of taxels across its tip. The goal is to
rotate the disc pair by more than 180 degrees without spilling a disc out of
the dish. Dynamics are kinematic: motion comes from overlap resolution only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pointset import DEFAULT_THRESHOLD, PointSet
from .tactilesim import pressures_from_distance

MAX_STEPS = 200
SUCCESS_ANGLE = 180.0
ANGLE_DEADBAND = 1e-9
LEVELS = ("simple", "middle", "hard")


@dataclass(frozen=True)
class TaskConfig:
    level: str = "simple"
    disturbance_sigma: float = 0.0
    hold_steps: int = 0
    success_angle: float = SUCCESS_ANGLE
    max_steps: int = MAX_STEPS
    disturbance_period: int = 10

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")
        if self.hold_steps and self.level != "hard":
            raise ValueError("hold_steps only applies to the hard level")

    @classmethod
    def for_level(cls, level: str) -> "TaskConfig":
        if level == "simple":
            return cls("simple")
        if level == "middle":
            return cls("middle", disturbance_sigma=0.1)
        if level == "hard":
            return cls("hard", disturbance_sigma=0.1, hold_steps=5)
        raise ValueError(f"unknown level {level!r}")


@dataclass(frozen=True)
class Geometry:
    dish_radius: float = 0.05
    disc_radius: float = 0.012
    tip_radius: float = 0.01
    rail_offset: float = 0.004
    retracted: float = 0.06
    travel: float = 0.048
    max_speed: float = 0.05
    centering: float = 0.15
    disturbance_gain: float = 0.05
    taxels_per_tip: int = 8
    tip_arc_deg: float = 140.0
    activation_radius: float = 0.002
    noise_fraction: float = 0.1
    floor_pitch: float = 0.008

    @property
    def n_tip_taxels(self) -> int:
        return 4 * self.taxels_per_tip

    @property
    def n_taxels(self) -> int:
        return self.n_tip_taxels + len(floor_grid(self))


def floor_grid(geom: Geometry) -> np.ndarray:
    """(M, 2) taxel sites of the dish floor: a square grid clipped to the dish.

    A pitch of 0 disables the floor pad.
    """
    if geom.floor_pitch <= 0:
        return np.zeros((0, 2))
    n = int(geom.dish_radius // geom.floor_pitch)
    ticks = np.arange(-n, n + 1) * geom.floor_pitch
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return pts[np.hypot(pts[:, 0], pts[:, 1]) <= geom.dish_radius + 1e-12]


PUSHER_ANGLES = np.radians([0.0, 90.0, 180.0, 270.0])
RADIAL = np.stack([np.cos(PUSHER_ANGLES), np.sin(PUSHER_ANGLES)], axis=1)
TANGENT = np.stack([-np.sin(PUSHER_ANGLES), np.cos(PUSHER_ANGLES)], axis=1)


@dataclass(frozen=True)
class RewardBreakdown:
    r_angle: float
    r_success: int
    r_fail: int

    @property
    def total(self) -> float:
        return 0.5 * self.r_angle + 250.0 * self.r_success - 100.0 * self.r_fail


@dataclass
class EnvState:
    pusher_extension: np.ndarray
    pusher_velocity: np.ndarray
    disc_centers: np.ndarray
    last_action: np.ndarray
    step_count: int = 0
    cumulative_angle: float = 0.0
    axis_angle: float = 0.0
    hold_count: int = 0
    contact_force: np.ndarray = field(default_factory=lambda: np.zeros(4))
    done: bool = False
    outcome: str | None = None

    def copy(self) -> "EnvState":
        return EnvState(self.pusher_extension.copy(), self.pusher_velocity.copy(), self.disc_centers.copy(),
                        self.last_action.copy(), self.step_count, self.cumulative_angle, self.axis_angle,
                        self.hold_count, self.contact_force.copy(), self.done, self.outcome)


def wrap_degrees(a: float) -> float:
    """Map to (-180, 180]."""
    a = math.fmod(a, 360.0)
    if a > 180.0:
        a -= 360.0
    elif a <= -180.0:
        a += 360.0
    return a


def compute_angle(disc_centers, previous_axis: float | None = None) -> tuple[float, float]:
    """Axis direction (degrees) of disc 0 -> disc 1 and the signed short-arc change."""
    c = np.asarray(disc_centers, dtype=np.float64)
    d = c[1] - c[0]
    if d[0] == 0.0 and d[1] == 0.0:
        raise ValueError("disc centers coincide; axis undefined")
    now = math.degrees(math.atan2(d[1], d[0]))
    if previous_axis is None:
        return now, 0.0
    delta = wrap_degrees(now - previous_axis)
    if abs(delta) < ANGLE_DEADBAND:
        delta = 0.0
    return now, delta


def tip_centers(geom: Geometry, extension: np.ndarray) -> np.ndarray:
    rho = geom.retracted - np.asarray(extension) * geom.travel
    return rho[:, None] * RADIAL + geom.rail_offset * TANGENT


def taxel_layout(geom: Geometry, extension: np.ndarray) -> np.ndarray:
    """Taxel positions (z = 0): the tip arcs, pusher by pusher, then the floor grid."""
    half = math.radians(geom.tip_arc_deg) / 2
    offs = np.linspace(-half, half, geom.taxels_per_tip)
    tips = tip_centers(geom, extension)
    out = []
    for k in range(4):
        ang = PUSHER_ANGLES[k] + math.pi + offs  # facing the dish center
        pts = tips[k] + geom.tip_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        out.append(pts)
    out.append(floor_grid(geom))
    xy = np.concatenate(out)
    return np.concatenate([xy, np.zeros((len(xy), 1))], axis=1)


def resolve_contacts(geom: Geometry, centers: np.ndarray, extension: np.ndarray, passes: int = 6) -> np.ndarray:
    """Push discs out of each other and out of the tips; returns per-tip push totals."""
    tips = tip_centers(geom, extension)
    r, rf = geom.disc_radius, geom.tip_radius
    push = np.zeros(4)
    for _ in range(passes):
        d = centers[1] - centers[0]
        dist = math.hypot(d[0], d[1])
        if dist < 2 * r:
            n = d / dist if dist > 0 else np.array([1.0, 0.0])
            corr = 0.5 * (2 * r - dist) * n
            centers[0] -= corr
            centers[1] += corr
        moved = False
        for k in range(4):
            for i in range(2):
                v = centers[i] - tips[k]
                dist = math.hypot(v[0], v[1])
                if dist < r + rf:
                    n = v / dist if dist > 0 else -RADIAL[k]
                    centers[i] = tips[k] + (r + rf) * n
                    push[k] += r + rf - dist
                    moved = True
        if not moved and math.hypot(*(centers[1] - centers[0])) >= 2 * r - 1e-12:
            break
    return push


class Baoding2DEnv:
    """Single environment instance with its own random stream."""

    def __init__(self, config: TaskConfig | None = None, geometry: Geometry | None = None, seed=None):
        self.config = config or TaskConfig()
        self.geom = geometry or Geometry()
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None

    def seed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    def reset(self) -> tuple[EnvState, PointSet]:
        g = self.geom
        theta = math.radians(self.rng.uniform(-10.0, 10.0))
        axis = np.array([math.cos(theta), math.sin(theta)])
        centers = np.stack([-axis * g.disc_radius, axis * g.disc_radius])
        centers += self.rng.uniform(-0.001, 0.001, size=(2, 2))
        ext = np.full(4, 0.4)
        resolve_contacts(g, centers, ext)
        ang, _ = compute_angle(centers)
        self.state = EnvState(ext, np.zeros(4), centers, ext.copy(), 0, 0.0, ang)
        return self.state, self.tactile_frame()

    def tactile_frame(self, state: EnvState | None = None) -> PointSet:
        s = state or self.state
        return self._frame(s, self.rng)

    def _frame(self, s: EnvState, rng) -> PointSet:
        g = self.geom
        pos = taxel_layout(g, s.pusher_extension)
        sd = np.full(len(pos), np.inf)
        for c in s.disc_centers:
            sd = np.minimum(sd, np.hypot(pos[:, 0] - c[0], pos[:, 1] - c[1]) - g.disc_radius)
        pr = pressures_from_distance(sd, g.activation_radius)
        if g.noise_fraction > 0:
            pr = np.clip(pr * rng.uniform(1 - g.noise_fraction, 1 + g.noise_fraction, len(pr)), 0.0, 1.0)
        active = np.flatnonzero(pr >= DEFAULT_THRESHOLD)
        return PointSet(active, pos[active], pr[active])

    def step(self, action) -> tuple[EnvState, PointSet, RewardBreakdown, bool, dict]:
        s = self.state
        if s is None:
            raise RuntimeError("call reset() before step()")
        if s.done:
            raise RuntimeError("episode is over; call reset()")
        g, cfg = self.geom, self.config
        target = np.clip(np.asarray(action, dtype=np.float64).reshape(4), 0.0, 1.0)
        old = s.pusher_extension
        ext = old + np.clip(target - old, -g.max_speed, g.max_speed)
        centers = s.disc_centers * (1.0 - g.centering)
        step_no = s.step_count + 1
        if cfg.disturbance_sigma > 0 and step_no % cfg.disturbance_period == 0:
            for i in range(2):
                mag = abs(self.rng.normal(0.0, cfg.disturbance_sigma))
                phi = self.rng.uniform(0.0, 2 * math.pi)
                centers[i] += g.disturbance_gain * mag * np.array([math.cos(phi), math.sin(phi)])
        push = resolve_contacts(g, centers, ext)
        axis, delta = compute_angle(centers, s.axis_angle)
        cum = s.cumulative_angle + delta

        fell = bool(np.any(np.hypot(centers[:, 0], centers[:, 1]) > g.dish_radius))
        beyond = abs(cum) > cfg.success_angle
        hold = s.hold_count + 1 if beyond else 0
        success = (not fell) and beyond and hold >= cfg.hold_steps + 1
        timeout = (not fell) and (not success) and step_no >= cfg.max_steps
        outcome = "fail" if fell else "success" if success else "timeout" if timeout else None
        reward = RewardBreakdown(abs(delta), int(success), int(fell or timeout))

        self.state = EnvState(ext, ext - old, centers, target, step_no, cum, axis, hold, push,
                              outcome is not None, outcome)
        info = {"outcome": outcome, "delta": delta, "disturbed": cfg.disturbance_sigma > 0
                and step_no % cfg.disturbance_period == 0}
        return self.state, self.tactile_frame(), reward, self.state.done, info


# -- observations ------------------------------------------------------------

OBS_MODES = ("groundtruth", "no_perception", "noise", "tacgnn", "finger_torque")


@dataclass(frozen=True)
class ObsMode:
    """Which object information the policy sees.

    ``noise_mm`` is the half-width of the uniform noise for mode "noise";
    ``model`` is a fitted perception regressor for mode "tacgnn" (or any
    regressor over frames predicting the four canonical disc coordinates).
    """

    name: str = "groundtruth"
    noise_mm: float = 0.0
    model: object = None

    def __post_init__(self):
        if self.name not in OBS_MODES:
            raise ValueError(f"unknown observation mode {self.name!r}")
        if self.name == "tacgnn" and self.model is None:
            raise ValueError("tacgnn mode needs a perception model")

    @property
    def object_width(self) -> int:
        return 0 if self.name == "no_perception" else 4

    @property
    def label(self) -> str:
        return f"noise{self.noise_mm:g}" if self.name == "noise" else self.name

    @classmethod
    def parse(cls, text: str, model=None) -> "ObsMode":
        t = text.strip().lower()
        if t.startswith("noise"):
            return cls("noise", float(t[5:].strip("_() ") or 0.0))
        return cls(t, model=model)


@dataclass
class Observation:
    pusher_extension: np.ndarray
    pusher_velocity: np.ndarray
    last_action: np.ndarray
    object_info: np.ndarray

    def vector(self, geom: Geometry, mode: ObsMode) -> np.ndarray:
        """Flat, roughly unit-scaled policy input."""
        parts = [self.pusher_extension, self.pusher_velocity / geom.max_speed, self.last_action]
        if mode.name == "finger_torque":
            parts.append(self.object_info / (0.1 * geom.disc_radius))
        elif mode.object_width:
            parts.append(self.object_info / geom.dish_radius)
        return np.concatenate(parts)


def canonical_centers(centers: np.ndarray) -> np.ndarray:
    """Flattened disc centers with the larger-x disc first (discs are indistinguishable)."""
    c = np.asarray(centers, dtype=np.float64)
    if (c[1, 0], c[1, 1]) > (c[0, 0], c[0, 1]):
        c = c[::-1]
    return c.reshape(-1).copy()


def frames_to_raw(frames, n_taxels: int) -> np.ndarray:
    """Scatter sparse frames into a dense ``(len(frames), n_taxels)`` pressure matrix."""
    out = np.zeros((len(frames), n_taxels))
    for i, f in enumerate(frames):
        out[i, f.ids] = f.pressures
    return out


def perception_inputs(model, frames, n_taxels: int):
    """Frames as the input type ``model`` expects (point sets or dense vectors)."""
    if getattr(model, "kind", "tacgnn") == "tacgnn":
        return list(frames)
    return frames_to_raw(frames, n_taxels)


def obs_dim(mode: ObsMode) -> int:
    return 12 + mode.object_width


def make_observation(state: EnvState, mode: ObsMode, perception=None, rng=None, frame: PointSet | None = None,
                     predicted: np.ndarray | None = None, geometry: Geometry | None = None) -> Observation:
    """Build the policy observation for one state.

    In tacgnn mode ``predicted`` (precomputed) wins over running
    ``perception`` on ``frame``.
    """
    if mode.name == "groundtruth":
        info = canonical_centers(state.disc_centers)
    elif mode.name == "no_perception":
        info = np.zeros(0)
    elif mode.name == "noise":
        rng = np.random.default_rng(rng)
        b = mode.noise_mm * 1e-3
        info = canonical_centers(state.disc_centers) + rng.uniform(-b, b, size=4)
    elif mode.name == "finger_torque":
        info = state.contact_force.copy()
    else:
        if predicted is None:
            model = perception if perception is not None else mode.model
            if model is None:
                raise ValueError("tacgnn mode needs a perception model")
            if frame is None:
                raise ValueError("tacgnn mode needs the current tactile frame")
            n_taxels = (geometry or Geometry()).n_taxels
            predicted = model.predict(perception_inputs(model, [frame], n_taxels))[0]
        info = np.asarray(predicted, dtype=np.float64).reshape(4)
    return Observation(state.pusher_extension.copy(), state.pusher_velocity.copy(), state.last_action.copy(), info)


def trajectory_line(step: int, state: EnvState, action, reward: RewardBreakdown) -> str:
    """One log line: step, extensions, disc centers, action, reward fields."""
    vals = [*state.pusher_extension, *state.disc_centers.ravel(), *np.asarray(action, dtype=float),
            reward.r_angle, reward.r_success, reward.r_fail, reward.total]
    return f"{step} " + " ".join(repr(float(v)) for v in vals)
