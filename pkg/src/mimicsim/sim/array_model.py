"""Reference implementation of the dynamics on numpy arrays and jets.

This mirrors the compiled kernel operation for operation but is written
against broadcasting numpy code, so it doubles as an independent oracle for the
kernel and its forward-mode Jacobians.  It is slow; use
:mod:`mimicsim.sim.dynamics` for real work.

Generalized coordinates
    fixed root:  qpos = qvel layout = [joint angles]
    planar root: qpos = [com_x, com_z, pitch, joints], qvel likewise
    free root:   qpos = [com (3), quat (4), joints], qvel = [com velocity (3), world angular velocity (3), joints]

For floating roots the translation coordinate is the centre of mass of the
whole character, so every non-translation Jacobian column has zero
mass-weighted mean.  That decouples the momentum equations exactly.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .. import mathcore
from ..autodiff import jet as J
from .character import CharacterSpec
from .dynamics import DT, SUBSTEPS, SimulationError, LinkStates, pd_torque, soft_limit_torque
from .dynamics import _contact_law as _contact


class Frames(NamedTuple):
    rot: object  # (..., L, 3, 3) link orientations
    origin: object  # (..., L, 3) link frame origins (joint anchors)
    com: object  # (..., L, 3) link centres of mass
    axis: object  # (..., nv, 3) world dof axes (zeros for translations)
    anchor: object  # (..., nv, 3) world dof anchors


# ------------------------------------------------------------------ kinematics


def _matvec(m, v):
    return J.einsum("...ij,...j->...i", m, v)


def _matmul(a, b):
    return J.einsum("...ij,...jk->...ik", a, b)


def forward_kinematics(spec: CharacterSpec, qpos) -> Frames:
    batch = J.value(qpos).shape[:-1]
    links = spec.links
    rot, origin, com = [None] * spec.n_links, [None] * spec.n_links, [None] * spec.n_links
    axes = [np.zeros(batch + (3,))] * spec.nv
    anchors = [np.zeros(batch + (3,))] * spec.nv
    k = spec.n_root_v
    qi = spec.n_root_q
    zero3 = np.zeros(batch + (3,))
    for i, link in enumerate(links):
        p = spec.parent[i]
        if p < 0 and spec.floating:
            if spec.root == "free":
                r = mathcore.quat_to_mat(mathcore.quat_normalize(qpos[..., 3:7]))
                for a in range(3):
                    axes[3 + a] = np.broadcast_to(np.eye(3)[a], batch + (3,))
            else:
                r = mathcore.axis_angle_to_mat(np.array([0.0, 1.0, 0.0]), qpos[..., 2])
                axes[2] = np.broadcast_to(np.array([0.0, 1.0, 0.0]), batch + (3,))
            o = zero3
        else:
            j = link.joint
            offset = np.asarray(j.offset)
            rest = mathcore.quat_to_mat(np.asarray(j.rest))
            if p < 0:
                o = np.broadcast_to(offset, batch + (3,))
                frame = np.broadcast_to(rest, batch + (3, 3))
            else:
                o = origin[p] + _matvec(rot[p], offset)
                frame = _matmul(rot[p], rest) if not np.allclose(rest, np.eye(3)) else rot[p]
            for axis in j.axes:
                axis = np.asarray(axis)
                axes[k] = _matvec(frame, axis) if J.is_jet(frame) else frame @ axis
                anchors[k] = o
                frame = _matmul(frame, mathcore.axis_angle_to_mat(axis, qpos[..., qi]))
                k += 1
                qi += 1
            r = frame
        rot[i], origin[i] = r, o
        com[i] = o + _matvec(r, spec.coms[i])
    rot = J.stack(rot, axis=-3)
    origin = J.stack(origin, axis=-2)
    com = J.stack(com, axis=-2)
    axis = J.stack(axes, axis=-2)
    anchor = J.stack(anchors, axis=-2)
    if spec.floating:
        # translate so that the whole-body COM sits at the translation coordinate
        m = spec.masses
        cbar = J.einsum("...li,l->...i", com, m / m.sum())
        if spec.root == "free":
            target = qpos[..., 0:3]
        else:
            target = J.stack([qpos[..., 0], np.zeros(batch), qpos[..., 1]], axis=-1)
        shift = (target - cbar)[..., None, :]
        origin = origin + shift
        com = com + shift
        anchor = anchor + shift
    return Frames(rot, origin, com, axis, anchor)


def link_jacobians(spec: CharacterSpec, fr: Frames):
    """Linear (G) and angular (W) Jacobians of link COMs, each (..., L, nv, 3)."""
    moves = spec.moves_link[..., None].astype(float)
    rel = fr.com[..., :, None, :] - fr.anchor[..., None, :, :]
    ax = fr.axis[..., None, :, :]
    lin = moves * J.cross(ax, rel) + spec.translation_axes
    ang = moves * ax
    if spec.floating:
        m = spec.masses / spec.masses.sum()
        rot_cols = (~spec.translation_dofs)[:, None].astype(float)
        mean = J.einsum("...lkx,l->...kx", lin, m)
        lin = lin - rot_cols * mean[..., None, :, :]
    return lin, ang


def _velocities(lin, ang, qvel):
    return J.einsum("...lkx,...k->...lx", lin, qvel), J.einsum("...lkx,...k->...lx", ang, qvel)


def link_states(spec: CharacterSpec, qpos, qvel) -> LinkStates:
    """World link COM positions, orientations and velocities (plain arrays)."""
    qpos = np.asarray(qpos, float)
    qvel = np.asarray(qvel, float)
    fr = forward_kinematics(spec, qpos)
    lin, ang = link_jacobians(spec, fr)
    v, w = _velocities(lin, ang, qvel)
    return LinkStates(fr.com, mathcore.mat_to_quat(fr.rot), v, w, fr.rot)


def kinematic_features(spec: CharacterSpec, qpos, qvel):
    """(..., L, 15) per-link [position, rot6d, velocity, angular velocity]; jet-friendly."""
    fr = forward_kinematics(spec, qpos)
    lin, ang = link_jacobians(spec, fr)
    v, w = _velocities(lin, ang, qvel)
    r6 = J.concatenate([fr.rot[..., :, :, 0], fr.rot[..., :, :, 1]], axis=-1)
    return J.concatenate([fr.com, r6, v, w], axis=-1)


# -------------------------------------------------------------------- dynamics


def generalized_forces(spec: CharacterSpec, fr: Frames, lin, ang, qpos, qvel, v, w, target, push=None):
    """Mass matrix, force vector and velocity-damping matrix of the equations of motion.

    The damping matrix collects joint damping and the slip-proportional
    friction so the integrator can treat them implicitly.  One-sided contact
    damping stays explicit: its coefficient switches with the sign of the
    normal velocity and would make the step discontinuous.
    """
    m = spec.masses
    inertia_world = J.einsum("...lij,lj,...lkj->...lik", fr.rot, spec.inertias, fr.rot)

    # velocity-product terms: d/dt of the Jacobian columns applied to qvel
    axis = fr.axis
    frame_w = J.einsum("kl,...lx,...l->...kx", spec.frame_rate_dofs.astype(float), axis, qvel)
    axis_dot = J.cross(frame_w, axis)
    ap = spec.anchor_parent
    has_parent = ap >= 0
    if has_parent.any():
        idx = np.where(has_parent, ap, 0)
        pv = J.take(v, idx, axis=-2)
        pw = J.take(w, idx, axis=-2)
        pc = J.take(fr.com, idx, axis=-2)
        anchor_vel = has_parent[:, None] * (pv + J.cross(pw, fr.anchor - pc))
    else:
        anchor_vel = np.zeros(J.value(axis).shape)
    moves = spec.moves_link[..., None].astype(float)
    rel = fr.com[..., :, None, :] - fr.anchor[..., None, :, :]
    relv = v[..., :, None, :] - anchor_vel[..., None, :, :]
    gdot = moves * (J.cross(axis_dot[..., None, :, :], rel) + J.cross(axis[..., None, :, :], relv))
    bias_lin = J.einsum("...lkx,...k->...lx", gdot, qvel)
    if spec.floating:
        bias_lin = bias_lin - J.einsum("...lx,l->...x", bias_lin, m / m.sum())[..., None, :]
    bias_ang = J.einsum("lk,...kx,...k->...lx", spec.moves_link.astype(float), axis_dot, qvel)

    force = np.zeros(J.value(fr.com).shape)
    force[..., 2] = -spec.gravity * m
    torque = 0.0
    damp = np.diag(np.concatenate([np.zeros(spec.n_root_v), spec.kd]))
    if push is not None:
        force = force.copy()
        force[..., 0, :] += push
    if spec.contact_enabled:
        plink, plocal, prad = spec.contact_points
        if len(plink):
            prot = J.take(fr.rot, plink, axis=-3)
            porg = J.take(fr.origin, plink, axis=-2)
            pcom = J.take(fr.com, plink, axis=-2)
            pt = porg + J.einsum("...pij,pj->...pi", prot, plocal) - np.array([0.0, 0.0, 1.0]) * prad[:, None]
            arm = pt - pcom
            pvel = J.take(v, plink, axis=-2) + J.cross(J.take(w, plink, axis=-2), arm)
            f, slip = _contact(pt[..., 2], pvel, spec.contact_stiffness, spec.contact_damping, spec.friction)
            pjac = J.take(lin, plink, axis=-3) + J.cross(J.take(ang, plink, axis=-3), arm[..., None, :])
            coef = J.stack([slip, slip, np.zeros(J.value(slip).shape)], axis=-1)
            damp = damp + J.einsum("...pkx,...px,...pjx->...kj", pjac, coef, pjac)
            inc = (plink[None, :] == np.arange(spec.n_links)[:, None]).astype(float)
            force = force + J.einsum("lp,...px->...lx", inc, f)
            torque = J.einsum("lp,...px->...lx", inc, J.cross(arm, f))

    iw_w = J.einsum("...lij,...lj->...li", inertia_world, w)
    ang_load = torque - J.einsum("...lij,...lj->...li", inertia_world, bias_ang) - J.cross(w, iw_w)
    lin_load = force - m[:, None] * bias_lin
    rhs = J.einsum("...lkx,...lx->...k", lin, lin_load) + J.einsum("...lkx,...lx->...k", ang, ang_load)

    if spec.n_act:
        q = qpos[..., spec.n_root_q :]
        qd = qvel[..., spec.n_root_v :]
        tau = pd_torque(q, qd, target, spec.kp, spec.kd) + soft_limit_torque(
            q, spec.limit_lo, spec.limit_hi, spec.limit_stiffness
        )
        if spec.n_root_v:
            tau = J.concatenate([np.zeros(J.value(tau).shape[:-1] + (spec.n_root_v,)), tau], axis=-1)
        rhs = rhs + tau

    mass = J.einsum("...lki,...lji,l->...kj", lin, lin, m) + J.einsum("...lki,...lij,...lmj->...km", ang, inertia_world, ang)
    mass = mass + np.diag(spec.armature)
    return mass, rhs, damp


def accelerations(spec: CharacterSpec, qpos, qvel, target, dt=DT, push=None):
    """Generalized accelerations with velocity damping taken implicitly over ``dt``."""
    fr = forward_kinematics(spec, qpos)
    lin, ang = link_jacobians(spec, fr)
    v, w = _velocities(lin, ang, qvel)
    mass, rhs, damp = generalized_forces(spec, fr, lin, ang, qpos, qvel, v, w, target, push)
    return J.solve(mass + dt * damp, rhs)


def integrate(spec: CharacterSpec, qpos, qvel, qacc, dt):
    """Symplectic Euler: velocities first, then coordinates with the new velocities."""
    qvel = qvel + dt * qacc
    if spec.root == "free":
        com = qpos[..., 0:3] + dt * qvel[..., 0:3]
        quat = mathcore.quat_integrate(qpos[..., 3:7], qvel[..., 3:6], dt)
        parts = [com, quat]
        if spec.n_act:
            parts.append(qpos[..., 7:] + dt * qvel[..., 6:])
        qpos = J.concatenate(parts, axis=-1)
    else:
        qpos = qpos + dt * qvel
    return qpos, qvel


def step_arrays(spec: CharacterSpec, qpos, qvel, target, dt=DT, push=None, substep=None):
    """One physics substep on raw coordinate arrays (or jets)."""
    qacc = accelerations(spec, qpos, qvel, target, dt, push)
    qpos, qvel = integrate(spec, qpos, qvel, qacc, dt)
    if not (np.all(np.isfinite(J.value(qpos))) and np.all(np.isfinite(J.value(qvel)))):
        raise SimulationError("non-finite state", substep)
    return qpos, qvel


def control_arrays(spec: CharacterSpec, qpos, qvel, target, push=None, substeps=SUBSTEPS, dt=DT):
    for n in range(substeps):
        qpos, qvel = step_arrays(spec, qpos, qvel, target, dt, push, substep=n)
    return qpos, qvel


def state_jacobians(spec: CharacterSpec, x, a, push=None):
    """Next packed state after one control step and its Jacobians.

    ``x`` is (..., nq + nv), ``a`` is (..., n_act).  Returns
    ``(x_next, d x_next / d x, d x_next / d a)``.
    """
    nq, nx, na = spec.nq, spec.nx, spec.n_act
    ntan = nx + na
    xj = J.seed(x, 0, ntan)
    aj = J.seed(a, nx, ntan)
    qpos, qvel = xj[..., :nq], xj[..., nq:]
    qpos, qvel = control_arrays(spec, qpos, qvel, aj, push)
    out = J.concatenate([qpos, qvel], axis=-1)
    return out.val, out.dot[..., :nx], out.dot[..., nx:]


def feature_jacobian(spec: CharacterSpec, x):
    """Per-link kinematic features of packed states and their Jacobian."""
    nq = spec.nq
    xj = J.seed(x, 0, spec.nx)
    k = kinematic_features(spec, xj[..., :nq], xj[..., nq:])
    return k.val, k.dot


def mechanical_energy(spec: CharacterSpec, qpos, qvel) -> np.ndarray:
    ls = link_states(spec, qpos, qvel)
    iw = np.einsum("...lij,lj,...lkj->...lik", ls.rot, spec.inertias, ls.rot)
    kin = 0.5 * np.einsum("l,...lx,...lx->...", spec.masses, ls.vel, ls.vel)
    kin = kin + 0.5 * np.einsum("...li,...lij,...lj->...", ls.angvel, iw, ls.angvel)
    kin = kin + 0.5 * np.einsum("k,...k->...", spec.armature, qvel * qvel)
    pot = spec.gravity * np.einsum("l,...l->...", spec.masses, ls.pos[..., 2])
    return kin + pot
