"""Forward dynamics T(s, a) of articulated characters.

PD actuation toward target joint angles, gravity, soft joint limits and a
compliant ground contact, advanced by symplectic Euler at 480 Hz.  Control
steps hold the action for 16 substeps (30 Hz).

The heavy lifting happens in the compiled kernel (:mod:`.kernel`).  States
may carry any number of leading batch axes; every batch member is simulated
independently and in ascending index order.

Packed states ``x = [qpos, qvel]`` are what the training code differentiates:
:func:`state_jacobians` returns the next packed state together with its exact
Jacobians with respect to the previous state and the action.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .. import mathcore
from ..autodiff import jet as J
from . import kernel
from .character import CharacterSpec

DT = 1.0 / 480.0
SUBSTEPS = 16
CONTROL_DT = DT * SUBSTEPS
FRICTION_VEL_SCALE = kernel.FRICTION_VEL_SCALE
DAMPING_RAMP = kernel.DAMPING_RAMP  # penetration over which contact damping fades in


class SimulationError(FloatingPointError):
    """Non-finite state; ``substep`` counts physics substeps from the start of the call."""

    def __init__(self, message, substep=None, env=None):
        where = []
        if env is not None:
            where.append(f"env {env}")
        if substep is not None:
            where.append(f"substep {substep}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))
        self.substep = substep
        self.env = env


@dataclass(frozen=True)
class SimState:
    """Generalized state plus phase; link quantities are derived on demand."""

    qpos: np.ndarray
    qvel: np.ndarray
    phase: np.ndarray | float = 0.0
    period: float = np.inf

    def links(self, spec: CharacterSpec) -> "LinkStates":
        return link_states(spec, self.qpos, self.qvel)

    def with_phase(self, phase) -> "SimState":
        return replace(self, phase=phase)

    @property
    def packed(self) -> np.ndarray:
        return pack(self.qpos, self.qvel)


class LinkStates(NamedTuple):
    pos: np.ndarray  # (..., L, 3) COM positions
    quat: np.ndarray  # (..., L, 4)
    vel: np.ndarray  # (..., L, 3)
    angvel: np.ndarray  # (..., L, 3)
    rot: np.ndarray  # (..., L, 3, 3)


# ------------------------------------------------------------- elementary laws


def pd_torque(q, qdot, target, kp, kd):
    """tau = kp * (target - q) + kd * (0 - qdot)."""
    return kp * (target - q) - kd * qdot


def soft_limit_torque(q, lo, hi, stiffness):
    """Restoring torque outside [lo, hi], zero inside."""
    return -stiffness * (np.maximum(q - hi, 0.0) + np.minimum(q - lo, 0.0))


def _friction_gain(speed_sq):
    """tanh(|v| / s) / |v|, with a series branch at rest."""
    s = FRICTION_VEL_SCALE
    small = J.value(speed_sq) < 1e-16
    safe = J.where(small, np.ones_like(J.value(speed_sq)), speed_sq)
    speed = np.sqrt(safe)
    exact = np.tanh(speed / s) / speed
    series = (1.0 - speed_sq / (3.0 * s * s)) / s
    return J.where(small, series, exact)


def _contact_law(height, velocity, stiffness, damping, friction):
    """Ground force (..., P, 3) and slip coefficient (..., P) of points at ``height``."""
    pen = -height
    inside = J.value(pen) > 0.0
    pen = np.maximum(pen, 0.0)
    vn = velocity[..., 2]
    ramp = np.minimum(pen / DAMPING_RAMP, 1.0)
    fn = stiffness * pen + damping * np.maximum(-vn, 0.0) * ramp
    fn = J.where(inside, fn, np.zeros_like(J.value(fn)))
    vt = velocity[..., :2]
    g = _friction_gain(J.sum(vt * vt, axis=-1))
    slip = friction * fn * g  # force per unit tangential speed
    ft = -slip[..., None] * vt
    return J.concatenate([ft, fn[..., None]], axis=-1), slip


def contact_forces(height, velocity, stiffness, damping, friction):
    """Compliant ground force on points at ``height`` (...) moving with ``velocity`` (..., 3)."""
    return _contact_law(height, velocity, stiffness, damping, friction)[0]


def contact_force(point_height, point_velocity, spec: CharacterSpec):
    """Ground force (3,) on one contact point under the character's contact parameters."""
    return contact_forces(
        np.asarray(point_height, float),
        np.asarray(point_velocity, float),
        spec.contact_stiffness,
        spec.contact_damping,
        spec.friction,
    )


# -------------------------------------------------------------------- helpers


def pack(qpos, qvel):
    return np.concatenate([qpos, qvel], axis=-1)


def unpack(spec: CharacterSpec, x):
    return x[..., : spec.nq], x[..., spec.nq :]


def _model(spec: CharacterSpec) -> kernel.Model:
    m = spec.__dict__.get("_compiled_model")
    if m is None:
        m = kernel.build_model(spec)
        spec.__dict__["_compiled_model"] = m
    return m


def _duals(values: np.ndarray, ntan: int, first: int = -1) -> np.ndarray:
    """(B, n) values -> (B, n, 1 + ntan) duals, seeding identity tangents at ``first`` if >= 0."""
    B, n = values.shape
    out = np.zeros((B, n, 1 + ntan))
    out[:, :, 0] = values
    if first >= 0:
        out[:, np.arange(n), 1 + first + np.arange(n)] = 1.0
    return out


def _batch_push(push, B):
    if push is None:
        return np.zeros((B, 3))
    return np.ascontiguousarray(np.broadcast_to(np.asarray(push, float), (B, 3)))


def _run(spec, qpos, qvel, target, push, substeps, dt):
    """Advance dual arrays in place; raise on a non-finite state."""
    code = kernel.run_batch(_model(spec), qpos, qvel, target, push, substeps, dt)
    if code >= 0:
        env, sub = divmod(int(code), substeps)
        raise SimulationError("non-finite state", sub, env)


def simulate(spec: CharacterSpec, qpos, qvel, target, push=None, substeps: int = SUBSTEPS, dt: float = DT):
    """Plain batched integration: returns new (qpos, qvel) after ``substeps`` substeps."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    qpos = np.asarray(qpos, float)
    qvel = np.asarray(qvel, float)
    target = np.asarray(target, float)
    batch = qpos.shape[:-1]
    target = np.broadcast_to(target, batch + (spec.n_act,))
    B = int(np.prod(batch, dtype=int))
    # the kernel integrates in place, so never hand it a view of the caller's arrays
    qp = qpos.reshape(B, spec.nq, 1).copy()
    qv = qvel.reshape(B, spec.nv, 1).copy()
    tg = np.ascontiguousarray(target.reshape(B, spec.n_act, 1))
    _run(spec, qp, qv, tg, _batch_push(push, B), substeps, dt)
    return qp[..., 0].reshape(batch + (spec.nq,)), qv[..., 0].reshape(batch + (spec.nv,))


def _advance_phase(state: SimState, dt):
    if not np.isfinite(state.period):
        return state.phase
    return np.mod(np.asarray(state.phase) + dt / state.period, 1.0)


def step(s: SimState, a, spec: CharacterSpec, dt: float = DT, push=None) -> SimState:
    """Advance the state by one physics substep with PD targets ``a``."""
    qpos, qvel = simulate(spec, s.qpos, s.qvel, a, push, 1, dt)
    return SimState(qpos, qvel, _advance_phase(s, dt), s.period)


def control_step(s: SimState, a, spec: CharacterSpec, push=None) -> SimState:
    """Hold ``a`` for 16 substeps (one 30 Hz control period)."""
    qpos, qvel = s.qpos, s.qvel
    qpos, qvel = simulate(spec, qpos, qvel, a, push, SUBSTEPS, DT)
    return SimState(qpos, qvel, _advance_phase(s, CONTROL_DT), s.period)


def state_jacobians(spec: CharacterSpec, x, a, push=None):
    """Next packed state after one control step and its Jacobians.

    ``x`` is (B, nq + nv) and ``a`` is (B, n_act).  Returns
    ``(x_next, d x_next / d x, d x_next / d a)`` with shapes
    (B, nx), (B, nx, nx) and (B, nx, n_act).
    """
    x = np.asarray(x, float)
    a = np.asarray(a, float)
    nq, nx, na = spec.nq, spec.nx, spec.n_act
    ntan = nx + na
    xd = _duals(x, ntan, 0)
    qp = np.ascontiguousarray(xd[:, :nq])
    qv = np.ascontiguousarray(xd[:, nq:])
    tg = _duals(a, ntan, nx)
    _run(spec, qp, qv, tg, _batch_push(push, len(x)), SUBSTEPS, DT)
    out = np.concatenate([qp, qv], axis=1)
    return out[..., 0], out[..., 1 : 1 + nx], out[..., 1 + nx :]


def kinematic_features(spec: CharacterSpec, qpos, qvel):
    """(..., L, 15) per link: COM position, rot6d, linear velocity, angular velocity."""
    qpos = np.asarray(qpos, float)
    qvel = np.asarray(qvel, float)
    batch = qpos.shape[:-1]
    B = int(np.prod(batch, dtype=int))
    out = np.zeros((B, spec.n_links, 15, 1))
    kernel.features_batch(
        _model(spec),
        np.ascontiguousarray(qpos.reshape(B, spec.nq, 1)),
        np.ascontiguousarray(qvel.reshape(B, spec.nv, 1)),
        out,
    )
    return out[..., 0].reshape(batch + (spec.n_links, 15))


def feature_jacobian(spec: CharacterSpec, x):
    """Features (B, L, 15) of packed states (B, nx) and their Jacobian (B, L, 15, nx)."""
    x = np.asarray(x, float)
    xd = _duals(x, spec.nx, 0)
    out = np.zeros((len(x), spec.n_links, 15, 1 + spec.nx))
    kernel.features_batch(
        _model(spec), np.ascontiguousarray(xd[:, : spec.nq]), np.ascontiguousarray(xd[:, spec.nq :]), out
    )
    return out[..., 0], out[..., 1:]


def link_states(spec: CharacterSpec, qpos, qvel) -> LinkStates:
    """World link COM positions, orientations and velocities."""
    qpos = np.asarray(qpos, float)
    batch = qpos.shape[:-1]
    B = int(np.prod(batch, dtype=int))
    rot = np.zeros((B, spec.n_links, 3, 3))
    com = np.zeros((B, spec.n_links, 3))
    kernel.frames_batch(_model(spec), np.ascontiguousarray(qpos.reshape(B, spec.nq)), rot, com)
    feats = kinematic_features(spec, qpos, qvel)
    rot = rot.reshape(batch + (spec.n_links, 3, 3))
    return LinkStates(com.reshape(batch + (spec.n_links, 3)), mathcore.mat_to_quat(rot), feats[..., 9:12], feats[..., 12:15], rot)


def mechanical_energy(spec: CharacterSpec, qpos, qvel) -> np.ndarray:
    """Kinetic (links plus rotor armature) plus gravitational potential energy."""
    ls = link_states(spec, qpos, qvel)
    qvel = np.asarray(qvel, float)
    iw = np.einsum("...lij,lj,...lkj->...lik", ls.rot, spec.inertias, ls.rot)
    kin = 0.5 * np.einsum("l,...lx,...lx->...", spec.masses, ls.vel, ls.vel)
    kin = kin + 0.5 * np.einsum("...li,...lij,...lj->...", ls.angvel, iw, ls.angvel)
    kin = kin + 0.5 * np.einsum("k,...k->...", spec.armature, qvel * qvel)
    pot = spec.gravity * np.einsum("l,...l->...", spec.masses, ls.pos[..., 2])
    return kin + pot


def contact_points_world(spec: CharacterSpec, qpos):
    """World positions (..., P, 3) of the lowest point of every capsule end sphere."""
    ls = link_states(spec, qpos, np.zeros(np.shape(qpos)[:-1] + (spec.nv,)))
    plink, plocal, prad = spec.contact_points
    if len(plink) == 0:
        return np.zeros(np.shape(qpos)[:-1] + (0, 3))
    rot = ls.rot[..., plink, :, :]
    com = ls.pos[..., plink, :]
    rel = plocal - spec.coms[plink]
    pts = com + np.einsum("...pij,pj->...pi", rot, rel)
    pts[..., 2] -= prad
    return pts
