"""Forward kinematics of the 8-DoF forestry crane.

Joint order is ``q = [q1 .. q8]`` (0-based index ``i`` holds ``q{i+1}``):
slew, boom, arm, telescope (meters), tip, tilt, rotator, grapple jaws.
The actuated subset is ``q1, q2, q3, q4, q7, q8``; ``q5`` and ``q6`` swing freely.

All functions broadcast over leading batch dimensions, so a stack of
configurations with shape ``(n, 8)`` can be evaluated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidArgumentError, LimitViolationError

N_JOINTS = 8
ACTUATED = (0, 1, 2, 3, 6, 7)
UNACTUATED = (4, 5)
JOINT_NAMES = ("slew", "boom", "arm", "telescope", "tip", "tilt", "rotator", "jaws")


@dataclass(frozen=True)
class DhRow:
    """One standard Denavit-Hartenberg row; ``joint`` adds ``q[joint]`` to ``theta`` or ``d``."""

    theta: float
    d: float
    a: float
    alpha: float
    joint: int | None = None
    target: str = "theta"

    def __post_init__(self):
        if self.target not in ("theta", "d"):
            raise InvalidArgumentError(f"DH joint binding must target 'theta' or 'd', got {self.target!r}")
        if self.joint is not None and not 0 <= self.joint < N_JOINTS:
            raise InvalidArgumentError(f"DH joint index {self.joint} out of range")


# Rows 4 and 5 both translate by q4: the two synchronized telescope stages.
CRANE_DH = (
    DhRow(0.0, 2.4, 0.18, np.pi / 2, joint=0),
    DhRow(0.0, 0.0, 3.5, 0.0, joint=1),
    DhRow(0.0, 0.0, -0.4, np.pi / 2, joint=2),
    DhRow(0.0, 3.1, 0.0, 0.0, joint=3, target="d"),
    DhRow(0.0, 0.0, 0.0, -np.pi / 2, joint=3, target="d"),
    DhRow(0.0, 0.0, -0.21, -np.pi / 2, joint=4),
    DhRow(0.0, 0.0, 0.0, -np.pi / 2, joint=5),
    DhRow(0.0, 0.58, 0.0, 0.0, joint=6),
)


@dataclass(frozen=True)
class JointLimits:
    """Position ranges for all joints and speed limits for the actuated ones.

    ``terminal`` marks joints whose end stops count as a safety violation for
    episode termination. The jaw stops are the intended open/closed positions
    and the passive joints have modeled end stops, so only the boom chain is
    terminal by default.
    """

    lower: tuple = (-3.71, -1.2, -0.91, 0.0, -1.57, -0.79, -np.inf, 0.0)
    upper: tuple = (3.71, 1.56, 4.6, 4.47, 1.57, 2.36, np.inf, 3.0)
    max_speed: tuple = (0.6, 0.4, 0.4, 0.6, 1.2, 1.5)
    terminal: tuple = (True, True, True, True, False, False, False, False)

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != (N_JOINTS,) or hi.shape != (N_JOINTS,):
            raise InvalidArgumentError("joint limits need 8 lower and 8 upper bounds")
        if np.any(lo >= hi):
            bad = int(np.argmax(lo >= hi)) + 1
            raise InvalidArgumentError(f"joint q{bad}: lower bound must be below upper bound")
        if len(self.max_speed) != len(ACTUATED) or np.any(np.asarray(self.max_speed) <= 0):
            raise InvalidArgumentError("max_speed needs 6 positive entries")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    @property
    def speed(self) -> np.ndarray:
        return np.asarray(self.max_speed, dtype=float)


@dataclass(frozen=True)
class PoseTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def from_matrix(cls, H: np.ndarray) -> "PoseTransform":
        return cls(np.array(H[..., :3, :3]), np.array(H[..., :3, 3]))

    def matrix(self) -> np.ndarray:
        shape = self.translation.shape[:-1]
        H = np.zeros(shape + (4, 4))
        H[..., :3, :3] = self.rotation
        H[..., :3, 3] = self.translation
        H[..., 3, 3] = 1.0
        return H

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        eye = np.broadcast_to(np.eye(3), R.shape)
        ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max() <= tol
        return bool(ortho and np.abs(np.linalg.det(R) - 1.0).max() <= tol)


@dataclass(frozen=True)
class GrappleFrame:
    """Grapple-center frame C: position and rotation whose columns are e_C,x/y/z."""

    position: np.ndarray
    rotation: np.ndarray

    @property
    def e_x(self) -> np.ndarray:
        return self.rotation[..., :, 0]

    @property
    def e_y(self) -> np.ndarray:
        return self.rotation[..., :, 1]

    @property
    def e_z(self) -> np.ndarray:
        return self.rotation[..., :, 2]

    def matrix(self) -> np.ndarray:
        return PoseTransform(self.rotation, self.position).matrix()


@dataclass(frozen=True)
class CraneModel:
    dh: tuple = CRANE_DH
    limits: JointLimits = field(default_factory=JointLimits)
    grapple_offset: float = 0.3
    jaw_max_width: float = 1.6

    @property
    def jaw_closed(self) -> float:
        return float(self.limits.upper[7])


DEFAULT_MODEL = CraneModel()


def _dh_matrix(theta, d, a: float, alpha: float) -> np.ndarray:
    theta, d = np.broadcast_arrays(np.asarray(theta, float), np.asarray(d, float))
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    H = np.zeros(theta.shape + (4, 4))
    H[..., 0, 0] = ct
    H[..., 0, 1] = -st * ca
    H[..., 0, 2] = st * sa
    H[..., 0, 3] = a * ct
    H[..., 1, 0] = st
    H[..., 1, 1] = ct * ca
    H[..., 1, 2] = -ct * sa
    H[..., 1, 3] = a * st
    H[..., 2, 1] = sa
    H[..., 2, 2] = ca
    H[..., 2, 3] = d
    H[..., 3, 3] = 1.0
    return H


def dh_transform(row: DhRow, q_value=0.0) -> PoseTransform:
    """Rot_z(theta) Trans_z(d) Trans_x(a) Rot_x(alpha), with the bound joint value applied."""
    q_value = np.asarray(q_value, dtype=float)
    if not np.all(np.isfinite(q_value)):
        raise InvalidArgumentError("joint value must be finite")
    return PoseTransform.from_matrix(_row_matrix(row, q_value))


def _row_matrix(row: DhRow, q_value) -> np.ndarray:
    theta, d = row.theta, row.d
    if row.joint is not None:
        if row.target == "theta":
            theta = theta + q_value
        else:
            d = d + q_value
    elif np.ndim(q_value):
        theta = np.full(np.shape(q_value), theta)
    return _dh_matrix(theta, d, row.a, row.alpha)


@lru_cache(maxsize=None)
def _row_constant(row: DhRow) -> np.ndarray:
    """The joint-independent factor: Rz(theta) Tz(d) Tx(a) Rx(alpha) with zero joint value."""
    if row.joint is None or row.target == "d":
        return _dh_matrix(row.theta, row.d, row.a, row.alpha)
    return _dh_matrix(0.0, row.d, row.a, row.alpha)


def chain(q, model: CraneModel = DEFAULT_MODEL, upto: int | None = None, start=None, first: int = 0) -> list[np.ndarray]:
    """Homogeneous transforms of frames ``first..upto`` w.r.t. the base, each ``(..., 4, 4)``.

    ``start`` is the transform of frame ``first`` when resuming a partial chain.
    A joint rotation about z only mixes the first two columns and a joint
    translation along z only shifts the last one, so each row costs one
    column update plus a product with a constant matrix.
    """
    q = np.asarray(q, dtype=float)
    batch = q.shape[:-1]
    H = np.broadcast_to(np.eye(4), batch + (4, 4)) if start is None else start
    frames = [H]
    for row in model.dh[first:upto]:
        if row.joint is not None:
            v = q[..., row.joint]
            H = np.array(H)
            if row.target == "theta":
                th = row.theta + v
                c, s = np.cos(th)[..., None], np.sin(th)[..., None]
                x, y = H[..., :, 0].copy(), H[..., :, 1].copy()
                H[..., :, 0] = c * x + s * y
                H[..., :, 1] = c * y - s * x
            else:
                H[..., :, 3] += v[..., None] * H[..., :, 2]
        H = H @ _row_constant(row)
        frames.append(H)
    return frames


def check_limits(q, limits: JointLimits = DEFAULT_MODEL.limits, tol: float = 0.0) -> None:
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError("joint vector must be finite")
    lo, hi = limits.lo, limits.hi
    bad = (q < lo - tol) | (q > hi + tol)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        j = int(idx[-1])
        raise LimitViolationError(j + 1, float(q[tuple(idx)]), lo[j], hi[j])


def forward_kinematics(q, model: CraneModel = DEFAULT_MODEL, check: bool = True) -> GrappleFrame:
    """Grapple-center frame for configuration(s) ``q``.

    The center sits ``model.grapple_offset`` along the wrist approach axis (z of frame 8).
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != N_JOINTS:
        raise InvalidArgumentError(f"expected {N_JOINTS} joint values, got shape {q.shape}")
    if check:
        check_limits(q, model.limits)
    return grapple_from_wrist(chain(q, model)[-1], model)


def grapple_from_wrist(H8: np.ndarray, model: CraneModel = DEFAULT_MODEL) -> GrappleFrame:
    R = H8[..., :3, :3]
    p = H8[..., :3, 3] + model.grapple_offset * R[..., :, 2]
    return GrappleFrame(p, np.array(R))


def pivot_position(q, model: CraneModel = DEFAULT_MODEL) -> np.ndarray:
    """Position of the telescope tip (frame 5), the suspension point of the grapple."""
    q = np.asarray(q, dtype=float)
    H = chain(q, model, upto=5)[5]
    return H[..., :3, 3]


def hanging_equilibrium(q) -> np.ndarray:
    """Tip/tilt angles at which the grapple hangs plumb for the current boom and arm.

    Boom and arm rotate about parallel horizontal axes, so the tip joint has to
    compensate their sum; the tilt axis is then horizontal at pi/2.
    """
    q = np.asarray(q, dtype=float)
    q5 = np.pi / 2 - q[..., 1] - q[..., 2]
    return np.stack([q5, np.full_like(q5, np.pi / 2)], axis=-1)


def clamp_to_limits(q, limits: JointLimits = DEFAULT_MODEL.limits):
    """Clamp every joint into range; returns ``(clamped, flags)`` with one flag per joint."""
    q = np.asarray(q, dtype=float)
    clamped = np.clip(q, limits.lo, limits.hi)
    flags = clamped != q
    return clamped, flags


def jaw_opening_width(q8, model: CraneModel = DEFAULT_MODEL, check: bool = True):
    """Jaw tip opening in meters; linear from ``jaw_max_width`` (open) to 0 (closed)."""
    q8 = np.asarray(q8, dtype=float)
    closed = model.jaw_closed
    if check and (not np.all(np.isfinite(q8)) or np.any(q8 < 0.0) or np.any(q8 > closed)):
        raise InvalidArgumentError(f"q8 must lie in [0, {closed}]")
    w = model.jaw_max_width * (1.0 - q8 / closed)
    return float(w) if w.ndim == 0 else w
