"""Grasping environment: observations, shaped reward, termination and pose noise.

The log diameter is drawn per episode and never observed directly, which
makes each episode one member of a family of MDPs indexed by the diameter.
Observation, reward and termination helpers are pure functions over
:class:`~loggrasp.sim.SimState` and broadcast over batches; :class:`GraspEnv`
wraps one instance and :class:`VecGraspEnv` advances many with auto-reset.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from . import sim
from .errors import InvalidArgumentError, ProtocolError

OBS_DIM = 18
ACT_DIM = 6


class TerminationReason(enum.IntEnum):
    TimeLimit = 1
    ProximityTimeout = 2
    JointLimit = 3
    LogOutOfRange = 4
    VelocityLimit = 5
    Success = 6


@dataclass(frozen=True)
class RewardConfig:
    w1: float = 0.5
    w2: float = 2.0
    w3: float = 1.0
    z_lift: float = 1.5
    d_max_log: float = 0.8
    q8_closed: float = 3.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) <= 0:
            raise InvalidArgumentError("reward weights must be positive")


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = False
    eps_range: float = 0.1
    d_noise: float = 8.0


@dataclass(frozen=True)
class TerminationConfig:
    t_max: float = 9.0
    t_limit: float = 6.0
    proximity_eps: float = 0.2
    max_log_distance: float = 8.0
    stop_on_success: bool = False
    # success predicate used when stop_on_success is set
    success_q8_fraction: float = 0.95
    success_lift_tol: float = 0.25


@dataclass(frozen=True)
class EnvConfig:
    scenario: sim.ScenarioConfig = field(default_factory=sim.ScenarioConfig)
    sim: sim.SimParams = field(default_factory=sim.SimParams)
    reward: RewardConfig = field(default_factory=RewardConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    termination: TerminationConfig = field(default_factory=TerminationConfig)
    action_repeat: int = 1

    @property
    def limits(self) -> kin.JointLimits:
        return self.sim.model.limits


@dataclass(frozen=True)
class Observation:
    q: np.ndarray
    qd_a: np.ndarray
    dp: np.ndarray
    dpsi: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd_a, self.dp, np.asarray(self.dpsi)[..., None]], axis=-1)


@dataclass(frozen=True)
class RewardBreakdown:
    distance: np.ndarray
    grapple: np.ndarray
    lift: np.ndarray
    balance: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.distance + self.grapple + self.lift + self.balance


def relative_distance(frame: kin.GrappleFrame, log_position, cfg: RewardConfig = RewardConfig()) -> np.ndarray:
    """Log center lowered by ``d_off = (d_max - z_l) / 2`` minus the grapple center."""
    p = np.asarray(getattr(log_position, "position", log_position), dtype=float)
    z = p[..., 2]
    target = np.concatenate([p[..., :2], (z - (cfg.d_max_log - z) / 2)[..., None]], axis=-1)
    return target - frame.position


def log_axis_vector(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    return np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], axis=-1)


def angle_distance(e_cx, e_ly) -> np.ndarray:
    dot = np.abs(np.sum(np.asarray(e_cx) * np.asarray(e_ly), axis=-1))
    return np.clip(1.0 - dot, 0.0, 1.0)


def pose_errors(state: sim.SimState, frame: kin.GrappleFrame, cfg: RewardConfig = RewardConfig()):
    """True (noise-free) relative distance and angle distance."""
    dp = relative_distance(frame, state.log.position, cfg)
    dpsi = angle_distance(frame.e_x, log_axis_vector(state.log.yaw))
    return dp, dpsi


def combined_distance(dp, dpsi, cfg: RewardConfig = RewardConfig()) -> np.ndarray:
    return np.linalg.norm(dp, axis=-1) + cfg.w1 * dpsi


def reward_terms(d_combine, q8, z_log, command, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    r_distance = np.exp(-cfg.w2 * d_combine)
    closing = np.clip(q8 / cfg.q8_closed, 0.0, 1.0)
    r_grapple = r_distance * closing + (1.0 - closing) * (1.0 - r_distance)
    r_lift = (1.0 - np.tanh(cfg.w3 * np.abs(z_log - cfg.z_lift))) * (1.0 - r_grapple)
    r_balance = (1.0 - np.tanh(np.linalg.norm(command, axis=-1))) * (1.0 - r_lift)
    return RewardBreakdown(r_distance, r_grapple, r_lift, r_balance)


def reward(state: sim.SimState, command, cfg: RewardConfig = RewardConfig(), frame=None) -> RewardBreakdown:
    """Shaped reward for ``state`` reached under desired joint velocities ``command``."""
    if frame is None:
        frame = kin.forward_kinematics(state.q, check=False)
    dp, dpsi = pose_errors(state, frame, cfg)
    d = combined_distance(dp, dpsi, cfg)
    return reward_terms(d, state.q[..., 7], state.log.position[..., 2], np.asarray(command, float), cfg)


def noise_scale(dp, d_noise: float = 8.0) -> np.ndarray:
    return (np.linalg.norm(dp, axis=-1) / d_noise) ** 2


def inject_pose_noise(dp, dpsi, noise: NoiseConfig, rng: np.random.Generator):
    """Multiplicative pose-measurement error that fades quadratically near the log.

    One pair of factors (position, orientation) is drawn per query and row.
    """
    dp = np.asarray(dp, dtype=float)
    dpsi = np.asarray(dpsi, dtype=float)
    s = noise_scale(dp, noise.d_noise)
    eps = rng.uniform(-noise.eps_range, noise.eps_range, size=dpsi.shape + (2,))
    dp_noisy = dp + (eps[..., 0] * s)[..., None] * dp
    dpsi_noisy = np.clip(dpsi + eps[..., 1] * dpsi * s, 0.0, 1.0)
    return dp_noisy, dpsi_noisy


def success_now(state: sim.SimState, cfg: EnvConfig) -> np.ndarray:
    t = cfg.termination
    q8 = state.q[..., 7]
    z = state.log.position[..., 2]
    return (
        state.attached
        & (q8 >= t.success_q8_fraction * cfg.reward.q8_closed)
        & (np.abs(z - cfg.reward.z_lift) <= t.success_lift_tol)
    )


def termination_codes(state: sim.SimState, frame: kin.GrappleFrame, cfg: EnvConfig, reached=False, limit_flags=None):
    """Integer termination reason per instance, 0 where the episode continues.

    Priority when several criteria hold: JointLimit, VelocityLimit,
    LogOutOfRange, Success, ProximityTimeout, TimeLimit.
    """
    tc = cfg.termination
    lim = cfg.limits
    tol = 1e-9
    t = np.asarray(state.sim_time, dtype=float)
    flags = state.limit_flags if limit_flags is None else limit_flags
    q = state.q
    outside = (q < lim.lo - tol) | (q > lim.hi + tol)
    terminal = np.asarray(lim.terminal, dtype=bool)
    joint = np.any((flags | outside) & terminal, axis=-1)
    velocity = np.any(np.abs(state.qd_a) > lim.speed * (1 + tol), axis=-1)
    far = np.linalg.norm(state.log.position - frame.position, axis=-1) > tc.max_log_distance
    dp, dpsi = pose_errors(state, frame, cfg.reward)
    close = combined_distance(dp, dpsi, cfg.reward) < tc.proximity_eps
    proximity = (t >= tc.t_limit - tol) & ~(np.asarray(reached) | close)
    timeout = t >= tc.t_max - tol
    success = success_now(state, cfg) if tc.stop_on_success else np.zeros(t.shape, dtype=bool)

    code = np.zeros(t.shape, dtype=np.int64)
    ordered = [
        (timeout, TerminationReason.TimeLimit),
        (proximity, TerminationReason.ProximityTimeout),
        (success, TerminationReason.Success),
        (far, TerminationReason.LogOutOfRange),
        (velocity, TerminationReason.VelocityLimit),
        (joint, TerminationReason.JointLimit),
    ]
    # later entries overwrite earlier ones, so the list runs from lowest to highest priority
    for cond, reason in ordered:
        code = np.where(cond, int(reason), code)
    return code


def check_termination(state: sim.SimState, t=None, cfg: EnvConfig = EnvConfig(), reached: bool = False):
    """Termination reason for a single state, or ``None``. ``t`` overrides ``state.sim_time``."""
    if t is not None:
        state = sim.SimState(**{**state.__dict__, "sim_time": np.float64(t)})
    frame = kin.forward_kinematics(state.q, cfg.sim.model, check=False)
    code = int(termination_codes(state, frame, cfg, reached))
    return TerminationReason(code) if code else None


def observe(state: sim.SimState, frame: kin.GrappleFrame, cfg: EnvConfig, rng=None) -> Observation:
    dp, dpsi = pose_errors(state, frame, cfg.reward)
    if cfg.noise.enabled:
        if rng is None:
            raise InvalidArgumentError("pose noise needs a random generator")
        dp, dpsi = inject_pose_noise(dp, dpsi, cfg.noise, rng)
    return Observation(np.array(state.q), np.array(state.qd_a), dp, dpsi)


def action_bounds(cfg: EnvConfig = EnvConfig()):
    v = cfg.limits.speed
    return -v, v


class GraspEnv:
    """Single grasping environment with the reset / step protocol."""

    def __init__(self, cfg: EnvConfig = EnvConfig(), seed=None):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.state: sim.SimState | None = None
        self.done = True
        self.reached = False
        self.steps = 0

    def reset(self, rng: np.random.Generator | None = None, state: sim.SimState | None = None) -> Observation:
        if rng is not None:
            self.rng = rng
        self.state = state if state is not None else sim.spawn_scenario(self.cfg.scenario, self.rng, self.cfg.sim)
        self.done = False
        self.reached = False
        self.steps = 0
        frame = kin.forward_kinematics(self.state.q, self.cfg.sim.model, check=False)
        return observe(self.state, frame, self.cfg, self.rng)

    @property
    def frame(self) -> kin.GrappleFrame:
        return kin.forward_kinematics(self.state.q, self.cfg.sim.model, check=False)

    def step(self, action):
        """Apply desired actuated velocities; returns (observation, reward, termination or None)."""
        if self.state is None or self.done:
            raise ProtocolError("step() called before reset() or after the episode terminated")
        lo, hi = action_bounds(self.cfg)
        command = np.clip(np.asarray(action, dtype=float), lo, hi)
        if command.shape != (ACT_DIM,) or not np.all(np.isfinite(command)):
            raise InvalidArgumentError("action must be 6 finite desired joint velocities")
        state = self.state
        flags = np.zeros(kin.N_JOINTS, dtype=bool)
        for _ in range(self.cfg.action_repeat):
            state = sim.step(state, command, self.cfg.sim.dt, self.cfg.sim)
            flags |= state.limit_flags
        self.state = state
        self.steps += 1
        frame = self.frame
        r = reward(state, command, self.cfg.reward, frame)
        code = int(termination_codes(state, frame, self.cfg, self.reached, flags))
        dp, dpsi = pose_errors(state, frame, self.cfg.reward)
        self.reached = self.reached or bool(combined_distance(dp, dpsi, self.cfg.reward) < self.cfg.termination.proximity_eps)
        obs = observe(state, frame, self.cfg, self.rng)
        reason = TerminationReason(code) if code else None
        self.done = reason is not None
        return obs, r, reason


class VecGraspEnv:
    """``n`` environments advanced together; finished ones are re-spawned immediately.

    Each instance owns an independent random stream spawned from ``seed``.
    Observations are stacked row-wise in environment order.
    """

    def __init__(self, n: int, cfg: EnvConfig = EnvConfig(), seed: int = 0):
        self.n = n
        self.cfg = cfg
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
        self.state = sim.stack_states([self._spawn(i) for i in range(n)])
        self.reached = np.zeros(n, dtype=bool)
        self.ep_return = np.zeros(n)
        self.ep_length = np.zeros(n, dtype=np.int64)
        self.obs = self._observe(self._frame())

    def _spawn(self, i: int) -> sim.SimState:
        return sim.spawn_scenario(self.cfg.scenario, self.rngs[i], self.cfg.sim)

    def _frame(self) -> kin.GrappleFrame:
        return kin.forward_kinematics(self.state.q, self.cfg.sim.model, check=False)

    def _observe(self, frame) -> np.ndarray:
        dp, dpsi = pose_errors(self.state, frame, self.cfg.reward)
        if self.cfg.noise.enabled:
            rows = [inject_pose_noise(dp[i], dpsi[i], self.cfg.noise, self.rngs[i]) for i in range(self.n)]
            dp = np.stack([r[0] for r in rows])
            dpsi = np.stack([r[1] for r in rows])
        return Observation(self.state.q, self.state.qd_a, dp, dpsi).vector

    def step(self, actions):
        """Returns (observations, rewards, termination codes, finished-episode info list).

        Rows of ``observations`` that terminated already show the new episode.
        ``final_obs`` in the info dict holds their last observation for bootstrapping.
        """
        lo, hi = action_bounds(self.cfg)
        command = np.clip(np.asarray(actions, dtype=float), lo, hi)
        if not np.all(np.isfinite(command)):
            raise InvalidArgumentError("actions must be finite")
        state = self.state
        flags = np.zeros((self.n, kin.N_JOINTS), dtype=bool)
        for _ in range(self.cfg.action_repeat):
            state = sim.step(state, command, self.cfg.sim.dt, self.cfg.sim)
            flags |= state.limit_flags
        self.state = state
        frame = self._frame()
        rew = reward(state, command, self.cfg.reward, frame).total
        codes = termination_codes(state, frame, self.cfg, self.reached, flags)
        dp, dpsi = pose_errors(state, frame, self.cfg.reward)
        self.reached |= combined_distance(dp, dpsi, self.cfg.reward) < self.cfg.termination.proximity_eps
        self.ep_return += rew
        self.ep_length += 1
        obs = self._observe(frame)

        finished = []
        for i in np.flatnonzero(codes):
            finished.append(
                {
                    "env": int(i),
                    "return": float(self.ep_return[i]),
                    "length": int(self.ep_length[i]),
                    "reason": TerminationReason(int(codes[i])),
                    "final_obs": obs[i].copy(),
                }
            )
            fresh = self._spawn(int(i))
            self.state = sim.assign_state(self.state, int(i), fresh)
            self.reached[i] = False
            self.ep_return[i] = 0.0
            self.ep_length[i] = 0
            fresh_frame = kin.forward_kinematics(fresh.q, self.cfg.sim.model, check=False)
            obs[i] = observe(fresh, fresh_frame, self.cfg, self.rngs[i]).vector
        self.obs = obs
        return obs, rew, codes, finished

    def snapshot(self) -> dict:
        return {
            "state": self.state,
            "rngs": [r.bit_generator.state for r in self.rngs],
            "reached": self.reached.copy(),
            "ep_return": self.ep_return.copy(),
            "ep_length": self.ep_length.copy(),
            "obs": self.obs.copy(),
        }

    def restore(self, snap: dict) -> None:
        self.state = snap["state"]
        for r, s in zip(self.rngs, snap["rngs"]):
            r.bit_generator.state = s
        self.reached = snap["reached"].copy()
        self.ep_return = snap["ep_return"].copy()
        self.ep_length = snap["ep_length"].copy()
        self.obs = snap["obs"].copy()
