import numpy as np

from loggrasp import kinematics as kin
from loggrasp.sim import LogSpec, ScenarioConfig, SimParams, spawn_scenario, yaw_rotation
from dataclasses import replace


def place_log_at_grapple(state, diameter=0.5, axial=0.0, yaw_error=0.0, params=SimParams()):
    """Return ``state`` with a log whose grasp point coincides with the grapple center."""
    frame = kin.forward_kinematics(state.q, params.model, check=False)
    ex = frame.e_x
    psi = np.arctan2(ex[0], -ex[1])  # log axis (-sin psi, cos psi, 0) parallel to e_x
    psi += yaw_error
    axis = np.array([-np.sin(psi), np.cos(psi), 0.0])
    pz = frame.position[2]
    zc = (pz + params.d_max_log / 2) / 1.5
    center = np.array([frame.position[0], frame.position[1], zc]) - axial * axis
    log = LogSpec(
        diameter=np.float64(diameter),
        length=2.75,
        position=center,
        rotation=yaw_rotation(psi),
        mass=np.float64(1.0),
    )
    return replace(state, log=log)


def spawned(seed=0, **kw):
    return spawn_scenario(ScenarioConfig(**kw), np.random.default_rng(seed))


def with_jaws(state, q8):
    q = np.array(state.q)
    q[7] = q8
    return replace(state, q=q)
