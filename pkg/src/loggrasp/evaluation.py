"""Monte Carlo evaluation: trials, the success judge, batch statistics and tables.

A trial records a compact per-step trace. The judge is a pure function of
that trace and a :class:`SuccessCriteria`, so one recorded trial can be
re-judged under different thresholds.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import env as genv
from . import kinematics as kin
from . import sim
from .errors import ConfigError
from .policy import ActorCritic, ObservationNormalizer, denormalize_action

STANDARD_DIAMETERS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


class FailureReason(enum.Enum):
    Timeout = "Timeout"
    CenterMiss = "CenterMiss"
    NeverReached = "NeverReached"
    JointLimit = "JointLimit"
    OutOfRange = "OutOfRange"
    VelocityLimit = "VelocityLimit"


HARD = {
    genv.TerminationReason.JointLimit: FailureReason.JointLimit,
    genv.TerminationReason.LogOutOfRange: FailureReason.OutOfRange,
    genv.TerminationReason.VelocityLimit: FailureReason.VelocityLimit,
}


@dataclass(frozen=True)
class SuccessCriteria:
    reach_deadline: float = 6.0
    grasp_deadline: float = 9.0
    center_miss_threshold: float = 0.5
    proximity_eps: float = 0.2
    z_lift: float = 1.5
    lift_tol: float = 0.25
    q8_fraction: float = 0.95
    q8_closed: float = 3.0

    def __post_init__(self):
        if not self.reach_deadline < self.grasp_deadline:
            raise ConfigError("reach_deadline must be earlier than grasp_deadline")
        if self.center_miss_threshold < 0 or self.lift_tol < 0:
            raise ConfigError("thresholds must be non-negative")


@dataclass
class TrialRecord:
    """Per-step trace of one trial; ``axial`` is the offset at the latest attachment."""

    time: np.ndarray
    d_combine: np.ndarray
    attached: np.ndarray
    q8: np.ndarray
    z_log: np.ndarray
    axial: np.ndarray
    termination: genv.TerminationReason | None
    diameter: float
    trajectory: list | None = None


@dataclass(frozen=True)
class TrialResult:
    success: bool
    failure_reason: FailureReason | None
    grasp_time: float | None
    miss_distance: float | None
    reach_time: float | None = None
    trajectory: list | None = None

    def __post_init__(self):
        if self.success != (self.failure_reason is None):
            raise ValueError("a trial succeeds exactly when it has no failure reason")


def judge(rec: TrialRecord, criteria: SuccessCriteria = SuccessCriteria()) -> TrialResult:
    """Success needs: reached in time, then fully grasped and lifted in time, centered.

    Failure priority: hard terminations, then CenterMiss, then NeverReached,
    then Timeout.
    """
    t = rec.time
    reached = np.flatnonzero((rec.d_combine < criteria.proximity_eps) & (t <= criteria.reach_deadline + 1e-9))
    reach_time = float(t[reached[0]]) if reached.size else None
    held = (
        rec.attached
        & (rec.q8 >= criteria.q8_fraction * criteria.q8_closed)
        & (np.abs(rec.z_log - criteria.z_lift) <= criteria.lift_tol)
        & (t <= criteria.grasp_deadline + 1e-9)
    )
    if reach_time is not None:
        held &= t >= reach_time
    grasped = np.flatnonzero(held)
    centered = grasped[np.abs(rec.axial[grasped]) <= criteria.center_miss_threshold]
    if reach_time is not None and centered.size:
        i = int(centered[0])
        return TrialResult(True, None, float(t[i]), float(abs(rec.axial[i])), reach_time, rec.trajectory)

    first = int(grasped[0]) if grasped.size else None
    miss = float(abs(rec.axial[first])) if first is not None else None
    grasp_time = float(t[first]) if first is not None else None
    if rec.termination in HARD:
        reason = HARD[rec.termination]
    elif grasped.size and reach_time is not None:
        reason = FailureReason.CenterMiss
    elif reach_time is None:
        reason = FailureReason.NeverReached
    else:
        reason = FailureReason.Timeout
    return TrialResult(False, reason, grasp_time, miss, reach_time, rec.trajectory)


class Controller:
    """Maps (observation, true state) to desired actuated joint velocities."""

    def reset(self, state: sim.SimState) -> None:
        pass

    def __call__(self, obs: genv.Observation, state: sim.SimState) -> np.ndarray:
        raise NotImplementedError


class ZeroController(Controller):
    def __call__(self, obs, state):
        return np.zeros(genv.ACT_DIM)


class PolicyController(Controller):
    """Deterministic network policy: the Beta mean (or Gaussian mean), never perturbed."""

    def __init__(self, net: ActorCritic, cfg: genv.EnvConfig = genv.EnvConfig()):
        self.net = net
        self.normalizer = ObservationNormalizer(cfg.limits)
        self.bounds = genv.action_bounds(cfg)

    def __call__(self, obs, state):
        a_n = self.net.act(self.normalizer(obs.vector), None)[0]
        return denormalize_action(a_n, self.bounds)


def _wrap(angle):
    return (angle + math.pi) % (2 * math.pi) - math.pi


class WaypointController(Controller):
    """Scripted grasp using privileged state: approach above, align, descend, close, lift.

    The suspension point (telescope tip) is steered with damped least squares
    on a finite-difference Jacobian of q1..q4; the grapple hangs below it.
    The rotator turns the jaw axis parallel to the log.
    """

    def __init__(self, model: kin.CraneModel = kin.DEFAULT_MODEL, hover: float = 0.7, gain: float = 2.0,
                 max_speed: float = 4.0, damping: float = 0.05, yaw_gain: float = 3.0, d_max_log: float = 0.8,
                 sway_gain: float = 1.5, swing_tol: float = 0.3):
        self.model = model
        self.hover = hover
        self.gain = gain
        self.max_speed = max_speed
        self.damping = damping
        self.yaw_gain = yaw_gain
        self.d_max_log = d_max_log
        self.sway_gain = sway_gain
        self.swing_tol = swing_tol
        self.phase = "approach"

    def reset(self, state):
        self.phase = "approach"

    def _plumb(self, q):
        q = np.array(q, dtype=float)
        q[4:6] = kin.hanging_equilibrium(q)
        return q

    def _pivot_jacobian(self, q, h=1e-6):
        J = np.zeros((3, 4))
        for j in range(4):
            qp, qm = q.copy(), q.copy()
            qp[j] += h
            qm[j] -= h
            J[:, j] = (kin.pivot_position(qp, self.model) - kin.pivot_position(qm, self.model)) / (2 * h)
        return J

    def _solve(self, q, v, margin=0.08):
        """Joint rates for pivot velocity ``v``; joints about to hit a stop drop out."""
        J = self._pivot_jacobian(q)
        lo, hi = self.model.limits.lo[:4], self.model.limits.hi[:4]
        active = np.ones(4, dtype=bool)
        for _ in range(4):
            Ja = J[:, active]
            qd = np.zeros(4)
            qd[active] = Ja.T @ np.linalg.solve(Ja @ Ja.T + self.damping**2 * np.eye(3), v)
            blocked = ((q[:4] < lo + margin) & (qd < 0)) | ((q[:4] > hi - margin) & (qd > 0))
            if not blocked.any():
                break
            active &= ~blocked
        return qd

    def _heading(self, q):
        ex = kin.forward_kinematics(self._plumb(q), self.model, check=False).e_x
        return math.atan2(ex[1], ex[0])

    def __call__(self, obs, state):
        q = np.array(state.q, dtype=float)
        plumb = self._plumb(q)
        frame = kin.forward_kinematics(q, self.model, check=False)
        hang = kin.forward_kinematics(plumb, self.model, check=False).position - kin.pivot_position(plumb, self.model)
        target_point = sim.grasp_point(state.log, self.d_max_log)
        err_now = target_point - frame.position

        if self.phase == "approach":
            target = target_point + np.array([0.0, 0.0, self.hover])
            horiz = np.linalg.norm((target_point - frame.position)[:2])
            if horiz < 0.1 and obs.dpsi < 0.02 and np.linalg.norm(state.qd_u) < self.swing_tol:
                self.phase = "descend"
        if self.phase == "descend":
            target = target_point
            # the jaws need about a second to close, so start before arriving
            if np.linalg.norm(err_now) < 0.3:
                self.phase = "close"
        if self.phase == "close":
            target = target_point
            if bool(state.attached):
                self.phase = "lift"
        if self.phase == "lift":
            target = frame.position + np.array([0.0, 0.0, 1.5 - float(state.log.position[2])])

        pivot = kin.pivot_position(q, self.model)
        v = self.gain * (target - hang - pivot)
        # moving the suspension point toward the swinging grapple damps the sway
        sway = frame.position - (pivot + hang)
        v[:2] += self.sway_gain * sway[:2]
        speed = np.linalg.norm(v)
        if speed > self.max_speed:
            v *= self.max_speed / speed
        qd = self._solve(q, v)

        cmd = np.zeros(genv.ACT_DIM)
        cmd[:4] = qd
        # rotator: turn e_C,x parallel to the log axis (either direction)
        axis = state.log.axis
        want = math.atan2(axis[1], axis[0])
        err = _wrap(2 * (want - self._heading(q))) / 2
        cmd[4] = self.yaw_gain * err * self._heading_sign(q)
        cmd[5] = 1.5 if self.phase in ("close", "lift") else -1.5 * (q[7] > 0.3)
        speeds = self.model.limits.speed
        scale = np.max(np.abs(cmd[:4]) / speeds[:4])
        if scale > 1:
            cmd[:4] /= scale
        return np.clip(cmd, -speeds, speeds)

    def _heading_sign(self, q, h=1e-4):
        qp, qm = q.copy(), q.copy()
        qp[6] += h
        qm[6] -= h
        d = _wrap(self._heading(qp) - self._heading(qm))
        return 1.0 if d >= 0 else -1.0


def run_trial(controller: Controller, state: sim.SimState, cfg: genv.EnvConfig = genv.EnvConfig(),
              rng: np.random.Generator | None = None, record_trajectory: bool = False) -> TrialRecord:
    """Roll ``controller`` out from ``state`` until the environment terminates."""
    env = genv.GraspEnv(cfg)
    obs = env.reset(rng=rng if rng is not None else np.random.default_rng(0), state=state)
    controller.reset(state)
    times, dcomb, attached, q8, zl, axial = [], [], [], [], [], []
    traj = [sim.trajectory_row(state, cfg.sim)] if record_trajectory else None
    miss = np.nan
    reason = None
    while reason is None:
        cmd = controller(obs, env.state)
        was_attached = bool(env.state.attached)
        obs, _, reason = env.step(cmd)
        s = env.state
        frame = env.frame
        if bool(s.attached) and not was_attached:
            miss = float(sim.axial_offset(s, frame))
        dp, dpsi = genv.pose_errors(s, frame, cfg.reward)
        times.append(float(s.sim_time))
        dcomb.append(float(genv.combined_distance(dp, dpsi, cfg.reward)))
        attached.append(bool(s.attached))
        q8.append(float(s.q[7]))
        zl.append(float(s.log.position[2]))
        axial.append(miss)
        if traj is not None:
            traj.append(sim.trajectory_row(s, cfg.sim))
    return TrialRecord(
        np.array(times), np.array(dcomb), np.array(attached, dtype=bool), np.array(q8), np.array(zl),
        np.array(axial), reason, float(state.log.diameter), traj,
    )


def evaluation_env_config(cfg: genv.EnvConfig, criteria: SuccessCriteria) -> genv.EnvConfig:
    """Trials run to the grasp deadline; only hard terminations and the deadlines stop them early."""
    term = replace(cfg.termination, t_max=criteria.grasp_deadline, t_limit=criteria.reach_deadline,
                   proximity_eps=criteria.proximity_eps, stop_on_success=False)
    return replace(cfg, termination=term)


@dataclass
class BatchStats:
    diameter: float
    n_trials: int
    successes: int
    failures: Counter = field(default_factory=Counter)

    @property
    def success_rate(self) -> float | None:
        return None if self.n_trials == 0 else 100.0 * self.successes / self.n_trials


def scenario_seeds(seed: int, diameters, n_per_batch: int):
    root = np.random.SeedSequence(seed)
    per_d = root.spawn(len(diameters))
    return [ss.spawn(n_per_batch) for ss in per_d]


def monte_carlo(controller_factory, diameters=STANDARD_DIAMETERS, n_per_batch: int = 100,
                criteria: SuccessCriteria = SuccessCriteria(), seed: int = 0,
                cfg: genv.EnvConfig = genv.EnvConfig(), results: list | None = None) -> list[BatchStats]:
    """Batches of randomized trials per fixed diameter, reproducible from ``seed``.

    ``controller_factory()`` returns a fresh controller per trial. Pass a list
    as ``results`` to also collect every ``TrialResult``.
    """
    run_cfg = evaluation_env_config(cfg, criteria)
    stats = []
    seeds = scenario_seeds(seed, diameters, n_per_batch)
    for d, trial_seeds in zip(diameters, seeds):
        scen = replace(run_cfg.scenario, fixed_diameter=float(d))
        batch = BatchStats(float(d), n_per_batch, 0)
        for ss in trial_seeds:
            rng = np.random.default_rng(ss)
            state = sim.spawn_scenario(scen, rng, run_cfg.sim)
            res = judge(run_trial(controller_factory(), state, run_cfg, rng), criteria)
            if results is not None:
                results.append(res)
            if res.success:
                batch.successes += 1
            else:
                batch.failures[res.failure_reason] += 1
        stats.append(batch)
    return stats


def export_table(stats: list[BatchStats]) -> tuple[str, str]:
    """CSV text (byte-stable) and an aligned plain-text table, rows sorted by diameter."""
    if not stats:
        raise ConfigError("no batches to export")
    rows = sorted(stats, key=lambda b: b.diameter)
    header = ["d", "n", "success_rate"] + [r.value for r in FailureReason]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    table = []
    for b in rows:
        rate = "" if b.success_rate is None else f"{b.success_rate:.1f}"
        row = [f"{b.diameter:.2f}", str(b.n_trials), rate] + [str(b.failures.get(r, 0)) for r in FailureReason]
        writer.writerow(row)
        table.append(row)
    widths = [max(len(h), *(len(r[i]) for r in table)) for i, h in enumerate(header)]
    shown = [[c if c else "n/a" for c in r] for r in table]
    widths = [max(w, *(len(r[i]) for r in shown)) for i, w in enumerate(widths)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in shown]
    return buf.getvalue(), "\n".join(lines) + "\n"
