"""Simplified crane world: velocity tracking, swinging grapple and geometric grasping.

Multi-contact physics is replaced by three cheap models:

* actuated joints follow the commanded velocities through a first-order lag,
* the passive tip/tilt joints behave as damped pendulums driven by the
  acceleration of the telescope tip,
* the log is captured when the closing jaws pass it at the right place and
  then moves rigidly with the grapple.

Every array in :class:`SimState` may carry leading batch dimensions; ``step``
and friends broadcast so that many environments advance in one call.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import kinematics as kin
from .errors import ConfigError, InvalidArgumentError

ACT = np.array(kin.ACTUATED)


@dataclass(frozen=True)
class ScenarioConfig:
    radius_min: float = 5.5
    radius_max: float = 7.5
    sector_center: float = -math.pi / 2
    sector_half_width: float = math.pi / 6
    diameter_min: float = 0.3
    diameter_max: float = 0.8
    fixed_diameter: float | None = None
    slew_min: float = -2 * math.pi / 3
    slew_max: float = -math.pi / 3
    log_length: float = 2.75
    wood_density: float = 800.0
    # transport pose for q2, q3, q4, q7, q8
    rest_pose: tuple = (0.75, 0.95, 0.4, 0.0, 0.3)

    def validate(self) -> None:
        if not self.radius_min < self.radius_max or self.sector_half_width < 0 or self.radius_min < 0:
            raise ConfigError("log sampling region is empty")
        if self.fixed_diameter is None and not self.diameter_min <= self.diameter_max:
            raise ConfigError("diameter range is empty")
        if not self.slew_min <= self.slew_max:
            raise ConfigError("slew range is empty")
        if len(self.rest_pose) != 5:
            raise ConfigError("rest_pose needs values for q2, q3, q4, q7, q8")


@dataclass(frozen=True)
class SimParams:
    dt: float = 0.005
    tau: float = 0.1
    pendulum_length: float = 0.8
    damping: float = 1.0
    gravity: float = 9.81
    drive_gain: float | None = None  # defaults to 1 / pendulum_length
    capture_factor: float = 0.5
    align_tol: float = 0.05
    # reference diameter of the grasp-point offset shared with the reward
    d_max_log: float = 0.8
    model: kin.CraneModel = field(default_factory=kin.CraneModel)

    @property
    def kappa(self) -> float:
        return 1.0 / self.pendulum_length if self.drive_gain is None else self.drive_gain


@dataclass(frozen=True)
class LogSpec:
    diameter: np.ndarray
    length: float
    position: np.ndarray
    rotation: np.ndarray
    mass: np.ndarray

    @property
    def axis(self) -> np.ndarray:
        return self.rotation[..., :, 1]

    @property
    def yaw(self) -> np.ndarray:
        a = self.axis
        return np.arctan2(-a[..., 0], a[..., 1])


@dataclass(frozen=True)
class SimState:
    q: np.ndarray
    qd_a: np.ndarray
    qd_u: np.ndarray
    log: LogSpec
    attached: np.ndarray
    grasp_pos: np.ndarray  # log center in grapple coordinates, valid while attached
    grasp_rot: np.ndarray
    limit_flags: np.ndarray  # joints clamped during the last step
    pivot_pos: np.ndarray
    pivot_vel: np.ndarray
    sim_time: np.ndarray

    @property
    def batch_shape(self) -> tuple:
        return self.q.shape[:-1]


def yaw_rotation(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    R = np.zeros(psi.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R


def log_mass(diameter, length: float, density: float):
    return density * math.pi * (np.asarray(diameter) / 2) ** 2 * length


def spawn_scenario(cfg: ScenarioConfig, rng: np.random.Generator, params: SimParams = SimParams()) -> SimState:
    """Random log and crane slew; every other joint starts in the transport pose, at rest."""
    cfg.validate()
    r = math.sqrt(rng.uniform(cfg.radius_min**2, cfg.radius_max**2))
    phi = cfg.sector_center + rng.uniform(-cfg.sector_half_width, cfg.sector_half_width)
    yaw = rng.uniform(-math.pi, math.pi)
    if cfg.fixed_diameter is not None:
        d = float(cfg.fixed_diameter)
    else:
        d = rng.uniform(cfg.diameter_min, cfg.diameter_max)
    slew = rng.uniform(cfg.slew_min, cfg.slew_max)

    q = np.zeros(kin.N_JOINTS)
    q[0] = slew
    q[[1, 2, 3, 6, 7]] = cfg.rest_pose
    q[4:6] = kin.hanging_equilibrium(q)
    q, _ = kin.clamp_to_limits(q, params.model.limits)

    log = LogSpec(
        diameter=np.float64(d),
        length=cfg.log_length,
        position=np.array([r * math.cos(phi), r * math.sin(phi), d / 2]),
        rotation=yaw_rotation(yaw),
        mass=np.float64(log_mass(d, cfg.log_length, cfg.wood_density)),
    )
    return SimState(
        q=q,
        qd_a=np.zeros(6),
        qd_u=np.zeros(2),
        log=log,
        attached=np.bool_(False),
        grasp_pos=np.zeros(3),
        grasp_rot=np.eye(3),
        limit_flags=np.zeros(kin.N_JOINTS, dtype=bool),
        pivot_pos=kin.pivot_position(q, params.model),
        pivot_vel=np.zeros(3),
        sim_time=np.float64(0.0),
    )


def stack_states(states: list[SimState]) -> SimState:
    def stack(values):
        if isinstance(values[0], LogSpec):
            return LogSpec(**{f.name: stack([getattr(v, f.name) for v in values]) for f in fields(LogSpec)})
        if isinstance(values[0], float):
            return np.array(values)
        return np.stack([np.asarray(v) for v in values])

    return SimState(**{f.name: stack([getattr(s, f.name) for s in states]) for f in fields(SimState)})


def index_state(state: SimState, i) -> SimState:
    def take(v):
        if isinstance(v, LogSpec):
            return LogSpec(**{f.name: take(getattr(v, f.name)) for f in fields(LogSpec)})
        if isinstance(v, float):
            return v
        out = np.array(v[i])
        return float(out) if out.ndim == 0 and out.dtype.kind == "f" else out

    return SimState(**{f.name: take(getattr(state, f.name)) for f in fields(SimState)})


def assign_state(batch: SimState, i: int, single: SimState) -> SimState:
    """Copy of ``batch`` with entry ``i`` replaced by ``single``."""

    def put(b, s):
        if isinstance(b, LogSpec):
            return LogSpec(**{f.name: put(getattr(b, f.name), getattr(s, f.name)) for f in fields(LogSpec)})
        if isinstance(b, float):
            return b
        out = np.array(b)
        out[i] = s
        return out

    return SimState(**{f.name: put(getattr(batch, f.name), getattr(single, f.name)) for f in fields(SimState)})


def state_bytes(state: SimState) -> bytes:
    """Canonical serialization used for bit-for-bit determinism checks."""
    parts = []
    for f in fields(SimState):
        v = getattr(state, f.name)
        if isinstance(v, LogSpec):
            parts.extend(np.ascontiguousarray(getattr(v, g.name)).tobytes() for g in fields(LogSpec))
        else:
            parts.append(np.ascontiguousarray(v).tobytes())
    return b"".join(parts)


def _swing_tangents(q, model: kin.CraneModel, frames=None):
    """Unit directions in which the grapple bob moves for increasing tip and tilt."""
    if frames is None:
        frames = kin.chain(q, model, upto=6)
    def cross_down(z):
        # z x (0, 0, -1)
        return np.stack([-z[..., 1], z[..., 0], np.zeros_like(z[..., 0])], axis=-1)

    return cross_down(frames[5][..., :3, 2]), cross_down(frames[6][..., :3, 2])


def pendulum_step(state: SimState, base_acceleration, dt: float, params: SimParams = SimParams(), frames=None):
    """Advance the tip and tilt joints as damped pendulums driven by the pivot acceleration.

    The pendulum variable is the deviation ``e = q - q_eq`` from the plumb
    configuration, so the grapple keeps hanging while boom and arm rotate.
    Integrated with kick-drift-kick; with zero damping this is symplectic.
    Joint end stops are inelastic.
    """
    if dt <= 0:
        raise InvalidArgumentError("dt must be positive")
    q = state.q
    lim = params.model.limits
    q_eq = kin.hanging_equilibrium(q)
    eq_rate = np.stack([-(state.qd_a[..., 1] + state.qd_a[..., 2]), np.zeros(q.shape[:-1])], axis=-1)
    e = q[..., 4:6] - q_eq
    e_dot = state.qd_u - eq_rate

    a = np.asarray(base_acceleration, dtype=float)
    t5, t6 = _swing_tangents(q, params.model, frames)
    drive = -params.kappa * np.stack([np.sum(a * t5, axis=-1), np.sum(a * t6, axis=-1)], axis=-1)
    w2 = params.gravity / params.pendulum_length
    c = params.damping

    acc = -w2 * np.sin(e) - c * e_dot + drive
    half = e_dot + 0.5 * dt * acc
    e_new = e + dt * half
    acc = -w2 * np.sin(e_new) - c * half + drive
    e_dot_new = half + 0.5 * dt * acc

    q_u = q_eq + e_new
    qd_u = e_dot_new + eq_rate
    lo, hi = lim.lo[4:6], lim.hi[4:6]
    hit = (q_u < lo) | (q_u > hi)
    q_u = np.clip(q_u, lo, hi)
    qd_u = np.where(hit, 0.0, qd_u)
    return q_u[..., 0], q_u[..., 1], qd_u[..., 0], qd_u[..., 1]


def grasp_point(log: LogSpec, d_max_log: float = 0.8) -> np.ndarray:
    """Log center lowered by the diameter-dependent offset used by the reward target."""
    p = log.position
    z = p[..., 2]
    return np.concatenate([p[..., :2], (z - (d_max_log - z) / 2)[..., None]], axis=-1)


def grasp_conditions(state: SimState, frame: kin.GrappleFrame, params: SimParams = SimParams()):
    """Per-condition booleans: (radial, axial, aligned, closed)."""
    axis = state.log.axis
    rel = frame.position - grasp_point(state.log, params.d_max_log)
    axial = np.sum(rel * axis, axis=-1)
    radial = np.linalg.norm(rel - axial[..., None] * axis, axis=-1)
    width = kin.jaw_opening_width(np.clip(state.q[..., 7], 0.0, params.model.jaw_closed), params.model, check=False)
    align = 1.0 - np.abs(np.sum(frame.e_x * axis, axis=-1))
    d = state.log.diameter
    return (
        radial <= params.capture_factor * width + 1e-9,
        np.abs(axial) <= state.log.length / 2,
        align <= params.align_tol,
        width < d,
    )


def grasp_check(state: SimState, frame: kin.GrappleFrame | None = None, params: SimParams = SimParams()):
    """Attachment flag after this instant: latch on capture, release when the jaws reopen past d."""
    if frame is None:
        frame = kin.forward_kinematics(state.q, params.model, check=False)
    radial, axial, aligned, closed = grasp_conditions(state, frame, params)
    capture = radial & axial & aligned & closed
    return np.where(state.attached, closed, capture)


def axial_offset(state: SimState, frame: kin.GrappleFrame) -> np.ndarray:
    """Signed distance of the grapple center from the log center along the log axis."""
    return np.sum((frame.position - state.log.position) * state.log.axis, axis=-1)


def step(state: SimState, command, dt: float | None = None, params: SimParams = SimParams()) -> SimState:
    """Advance the world by ``dt`` under desired actuated velocities ``command``."""
    dt = params.dt if dt is None else dt
    command = np.asarray(command, dtype=float)
    if not np.all(np.isfinite(command)):
        raise InvalidArgumentError("velocity command must be finite")
    lim = params.model.limits
    vmax = lim.speed

    if params.tau > 0:
        blend = 1.0 - math.exp(-dt / params.tau)
        qd = state.qd_a + blend * (command - state.qd_a)
    else:
        qd = np.broadcast_to(command, state.qd_a.shape).copy()
    qd = np.clip(qd, -vmax, vmax)

    q = np.array(state.q)
    q[..., ACT] = q[..., ACT] + dt * qd
    lo, hi = lim.lo[ACT], lim.hi[ACT]
    q_act = np.clip(q[..., ACT], lo, hi)
    flags = np.zeros(q.shape, dtype=bool)
    flags[..., ACT] = q_act != q[..., ACT]
    qd = np.where(flags[..., ACT], 0.0, qd)
    q[..., ACT] = q_act

    frames = kin.chain(q, params.model, upto=6)
    pivot = frames[5][..., :3, 3]
    pivot_vel = (pivot - state.pivot_pos) / dt
    accel = (pivot_vel - state.pivot_vel) / dt

    mid = replace(state, q=q, qd_a=qd)
    q5, q6, qd5, qd6 = pendulum_step(mid, accel, dt, params, frames)
    flags[..., 4] = (q5 <= lim.lo[4]) | (q5 >= lim.hi[4])
    flags[..., 5] = (q6 <= lim.lo[5]) | (q6 >= lim.hi[5])
    q[..., 4] = q5
    q[..., 5] = q6
    qd_u = np.stack([qd5, qd6], axis=-1)

    wrist = kin.chain(q, params.model, start=frames[5], first=5)[-1]
    frame = kin.grapple_from_wrist(wrist, params.model)
    moved = replace(mid, q=q, qd_u=qd_u)
    attached = grasp_check(moved, frame, params)
    newly = attached & ~state.attached
    released = state.attached & ~attached

    Rc, pc = frame.rotation, frame.position
    Rc_T = np.swapaxes(Rc, -1, -2)
    log = state.log
    grasp_pos = np.where(newly[..., None], (Rc_T @ (log.position - pc)[..., None])[..., 0], state.grasp_pos)
    grasp_rot = np.where(newly[..., None, None], Rc_T @ log.rotation, state.grasp_rot)

    held_pos = pc + (Rc @ grasp_pos[..., None])[..., 0]
    held_rot = Rc @ grasp_rot
    position = np.where(attached[..., None], held_pos, log.position)
    rotation = np.where(attached[..., None, None], held_rot, log.rotation)
    if np.any(released):
        # a released log drops back to the ground, keeping its heading
        ground = np.concatenate([position[..., :2], (log.diameter / 2)[..., None]], axis=-1)
        position = np.where(released[..., None], ground, position)
        flat = yaw_rotation(LogSpec(log.diameter, log.length, position, rotation, log.mass).yaw)
        rotation = np.where(released[..., None, None], flat, rotation)

    return SimState(
        q=q,
        qd_a=qd,
        qd_u=qd_u,
        log=replace(log, position=position, rotation=rotation),
        attached=attached,
        grasp_pos=grasp_pos,
        grasp_rot=grasp_rot,
        limit_flags=flags,
        pivot_pos=pivot,
        pivot_vel=pivot_vel,
        sim_time=state.sim_time + dt,
    )


TRAJECTORY_COLUMNS = (
    ["time"]
    + [f"q{i}" for i in range(1, 9)]
    + [f"qd{i}" for i in (1, 2, 3, 4, 7, 8)]
    + ["pc_x", "pc_y", "pc_z", "log_x", "log_y", "log_z", "log_yaw", "attached"]
)


def trajectory_row(state: SimState, params: SimParams = SimParams()) -> list:
    frame = kin.forward_kinematics(state.q, params.model, check=False)
    return (
        [float(state.sim_time)]
        + [float(v) for v in state.q]
        + [float(v) for v in state.qd_a]
        + [float(v) for v in frame.position]
        + [float(v) for v in state.log.position]
        + [float(state.log.yaw), int(bool(state.attached))]
    )


def write_trajectory_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
