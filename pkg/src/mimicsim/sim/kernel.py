"""Compiled simulator core.

Every quantity is a *dual array*: its trailing axis has length ``D = 1 + n``,
slot 0 holds the value and slots 1..n hold forward-mode tangents.  With
``D = 1`` the kernel is a plain simulator; with tangents seeded on the state
and action it yields the exact Jacobian of a control step in the same pass.

The arithmetic mirrors :mod:`mimicsim.sim.array_model` (the numpy reference
implementation) operation for operation.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numba import njit

from .character import CharacterSpec

_JIT = dict(cache=True, nogil=True)
_INLINE = dict(_JIT, inline="always")

FRICTION_VEL_SCALE = 0.05
DAMPING_RAMP = 1e-3


class Model(NamedTuple):
    root_kind: int  # 0 fixed, 1 planar, 2 free
    n_root_q: int
    n_root_v: int
    parent: np.ndarray
    dof_start: np.ndarray
    dof_count: np.ndarray
    dof_axis: np.ndarray
    dof_qidx: np.ndarray
    offset: np.ndarray
    rest: np.ndarray
    mass: np.ndarray
    inertia: np.ndarray
    com: np.ndarray
    moves: np.ndarray
    frame_rate: np.ndarray
    anchor_parent: np.ndarray
    is_trans: np.ndarray
    trans_axes: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    klim: np.ndarray
    armature: np.ndarray
    contact_on: bool
    plink: np.ndarray
    plocal: np.ndarray
    prad: np.ndarray
    k_contact: float
    d_contact: float
    mu: float
    gravity: float


def build_model(spec: CharacterSpec) -> Model:
    from .. import mathcore

    L = spec.n_links
    start = np.zeros(L, dtype=np.int64)
    count = np.zeros(L, dtype=np.int64)
    axes = np.zeros((spec.nv, 3))
    qidx = np.zeros(spec.nv, dtype=np.int64)
    offset = np.zeros((L, 3))
    rest = np.tile(np.eye(3), (L, 1, 1))
    k = spec.n_root_v
    for i, link in enumerate(spec.links):
        j = link.joint
        if j is None:
            continue
        start[i], count[i] = k, j.dof
        offset[i] = j.offset
        rest[i] = mathcore.quat_to_mat(np.asarray(j.rest, float))
        for a in j.axes:
            axes[k] = a
            qidx[k] = k + (spec.n_root_q - spec.n_root_v)
            k += 1
    plink, plocal, prad = spec.contact_points
    return Model(
        root_kind={"fixed": 0, "planar": 1, "free": 2}[spec.root],
        n_root_q=spec.n_root_q,
        n_root_v=spec.n_root_v,
        parent=spec.parent.astype(np.int64),
        dof_start=start,
        dof_count=count,
        dof_axis=axes,
        dof_qidx=qidx,
        offset=offset,
        rest=np.ascontiguousarray(rest),
        mass=spec.masses.astype(float),
        inertia=spec.inertias.astype(float),
        com=spec.coms.astype(float),
        moves=spec.moves_link.astype(float),
        frame_rate=spec.frame_rate_dofs.astype(float),
        anchor_parent=spec.anchor_parent.astype(np.int64),
        is_trans=spec.translation_dofs.astype(np.bool_),
        trans_axes=spec.translation_axes.astype(float),
        kp=spec.kp.astype(float),
        kd=spec.kd.astype(float),
        lo=spec.limit_lo.astype(float),
        hi=spec.limit_hi.astype(float),
        klim=spec.limit_stiffness.astype(float),
        armature=spec.armature.astype(float),
        contact_on=bool(spec.contact_enabled and len(plink) > 0),
        plink=plink.astype(np.int64),
        plocal=np.ascontiguousarray(plocal, dtype=float).reshape(-1, 3),
        prad=prad.astype(float),
        k_contact=float(spec.contact_stiffness),
        d_contact=float(spec.contact_damping),
        mu=float(spec.friction),
        gravity=float(spec.gravity),
    )


# ------------------------------------------------------------ dual scalars


@njit(**_INLINE)
def _mac(out, a, b, s):
    """out += s * a * b."""
    a0 = a[0]
    b0 = b[0]
    out[0] += s * a0 * b0
    for t in range(1, out.shape[0]):
        out[t] += s * (a0 * b[t] + a[t] * b0)


@njit(**_INLINE)
def _axpy(out, a, s):
    """out += s * a."""
    for t in range(out.shape[0]):
        out[t] += s * a[t]


@njit(**_INLINE)
def _chain(out, a, f0, df):
    """out = f(a) given f(a0) and f'(a0)."""
    out[0] = f0
    for t in range(1, out.shape[0]):
        out[t] = df * a[t]


@njit(**_INLINE)
def _div(out, a, b):
    q = a[0] / b[0]
    out[0] = q
    for t in range(1, out.shape[0]):
        out[t] = (a[t] - q * b[t]) / b[0]


@njit(**_INLINE)
def _cross_acc(out, a, b, s):
    """out += s * (a x b) for dual 3-vectors."""
    _mac(out[0], a[1], b[2], s)
    _mac(out[0], a[2], b[1], -s)
    _mac(out[1], a[2], b[0], s)
    _mac(out[1], a[0], b[2], -s)
    _mac(out[2], a[0], b[1], s)
    _mac(out[2], a[1], b[0], -s)


@njit(**_INLINE)
def _dot3(out, a, b):
    out[:] = 0.0
    for x in range(3):
        _mac(out, a[x], b[x], 1.0)


@njit(**_INLINE)
def _finite(a):
    for k in range(a.shape[0]):
        if not np.isfinite(a[k]):
            return False
    return True


# -------------------------------------------------------------- kinematics


@njit(**_JIT)
def _quat_to_mat(q, R):
    D = q.shape[1]
    n2 = np.zeros(D)
    for a in range(4):
        _mac(n2, q[a], q[a], 1.0)
    n = np.empty(D)
    r0 = np.sqrt(n2[0])
    _chain(n, n2, r0, 0.5 / r0)
    qn = np.empty((4, D))
    for a in range(4):
        _div(qn[a], q[a], n)
    if qn[0, 0] < 0.0:
        for a in range(4):
            for t in range(D):
                qn[a, t] = -qn[a, t]
    w, x, y, z = qn[0], qn[1], qn[2], qn[3]
    R[:] = 0.0
    R[0, 0, 0] = 1.0
    R[1, 1, 0] = 1.0
    R[2, 2, 0] = 1.0
    _mac(R[0, 0], y, y, -2.0)
    _mac(R[0, 0], z, z, -2.0)
    _mac(R[0, 1], x, y, 2.0)
    _mac(R[0, 1], w, z, -2.0)
    _mac(R[0, 2], x, z, 2.0)
    _mac(R[0, 2], w, y, 2.0)
    _mac(R[1, 0], x, y, 2.0)
    _mac(R[1, 0], w, z, 2.0)
    _mac(R[1, 1], x, x, -2.0)
    _mac(R[1, 1], z, z, -2.0)
    _mac(R[1, 2], y, z, 2.0)
    _mac(R[1, 2], w, x, -2.0)
    _mac(R[2, 0], x, z, 2.0)
    _mac(R[2, 0], w, y, -2.0)
    _mac(R[2, 1], y, z, 2.0)
    _mac(R[2, 1], w, x, 2.0)
    _mac(R[2, 2], x, x, -2.0)
    _mac(R[2, 2], y, y, -2.0)


@njit(**_INLINE)
def _skew(a):
    k = np.zeros((3, 3))
    k[0, 1] = -a[2]
    k[0, 2] = a[1]
    k[1, 0] = a[2]
    k[1, 2] = -a[0]
    k[2, 0] = -a[1]
    k[2, 1] = a[0]
    return k


@njit(**_JIT)
def forward_kinematics(m, qpos, R, o, c, ax, an):
    """Link rotations R (L,3,3,D), joint origins o, COMs c, dof axes ax and anchors an."""
    L = m.parent.shape[0]
    D = qpos.shape[1]
    nv = ax.shape[0]
    R[:] = 0.0
    o[:] = 0.0
    c[:] = 0.0
    ax[:] = 0.0
    an[:] = 0.0
    F = np.zeros((3, 3, D))
    rot = np.zeros((3, 3, D))
    tmp = np.zeros((3, 3, D))
    for i in range(L):
        p = m.parent[i]
        if p < 0 and m.root_kind > 0:
            if m.root_kind == 2:
                _quat_to_mat(qpos[3:7], R[i])
                for a in range(3):
                    ax[3 + a, a, 0] = 1.0
            else:
                th = qpos[2]
                s0 = np.sin(th[0])
                c0 = np.cos(th[0])
                _chain(R[i, 0, 0], th, c0, -s0)
                _chain(R[i, 0, 2], th, s0, c0)
                _chain(R[i, 2, 0], th, -s0, -c0)
                _chain(R[i, 2, 2], th, c0, -s0)
                R[i, 1, 1, 0] = 1.0
                ax[2, 1, 0] = 1.0
        else:
            F[:] = 0.0
            if p < 0:
                for a in range(3):
                    o[i, a, 0] = m.offset[i, a]
                    for b in range(3):
                        F[a, b, 0] = m.rest[i, a, b]
            else:
                for a in range(3):
                    for t in range(D):
                        acc = o[p, a, t]
                        for b in range(3):
                            acc += R[p, a, b, t] * m.offset[i, b]
                        o[i, a, t] = acc
                    for b in range(3):
                        for t in range(D):
                            acc = 0.0
                            for k in range(3):
                                acc += R[p, a, k, t] * m.rest[i, k, b]
                            F[a, b, t] = acc
            for k in range(m.dof_start[i], m.dof_start[i] + m.dof_count[i]):
                axis = m.dof_axis[k]
                for a in range(3):
                    for t in range(D):
                        acc = 0.0
                        for b in range(3):
                            acc += F[a, b, t] * axis[b]
                        ax[k, a, t] = acc
                an[k] = o[i]
                th = qpos[m.dof_qidx[k]]
                s0 = np.sin(th[0])
                c0 = np.cos(th[0])
                K = _skew(axis)
                K2 = K @ K
                for a in range(3):
                    for b in range(3):
                        eye = 1.0 if a == b else 0.0
                        _chain(rot[a, b], th, eye + s0 * K[a, b] + (1.0 - c0) * K2[a, b], c0 * K[a, b] + s0 * K2[a, b])
                tmp[:] = 0.0
                for a in range(3):
                    for b in range(3):
                        for j in range(3):
                            _mac(tmp[a, b], F[a, j], rot[j, b], 1.0)
                F[:] = tmp
            R[i] = F
        for a in range(3):
            for t in range(D):
                acc = o[i, a, t]
                for b in range(3):
                    acc += R[i, a, b, t] * m.com[i, b]
                c[i, a, t] = acc
    if m.root_kind > 0:
        total = m.mass.sum()
        shift = np.zeros((3, D))
        if m.root_kind == 2:
            for a in range(3):
                shift[a] = qpos[a]
        else:
            shift[0] = qpos[0]
            shift[2] = qpos[1]
        for i in range(L):
            for a in range(3):
                _axpy(shift[a], c[i, a], -m.mass[i] / total)
        for i in range(L):
            for a in range(3):
                _axpy(o[i, a], shift[a], 1.0)
                _axpy(c[i, a], shift[a], 1.0)
        for k in range(nv):
            for a in range(3):
                _axpy(an[k, a], shift[a], 1.0)


@njit(**_JIT)
def link_jacobians(m, c, ax, an, G, W):
    """Linear and angular COM Jacobians, (L, nv, 3, D) each."""
    L = c.shape[0]
    nv = ax.shape[0]
    D = c.shape[2]
    G[:] = 0.0
    W[:] = 0.0
    rel = np.zeros((3, D))
    for i in range(L):
        for k in range(nv):
            if m.is_trans[k]:
                for a in range(3):
                    G[i, k, a, 0] = m.trans_axes[k, a]
            elif m.moves[i, k] > 0.0:
                for a in range(3):
                    for t in range(D):
                        rel[a, t] = c[i, a, t] - an[k, a, t]
                _cross_acc(G[i, k], ax[k], rel, 1.0)
                W[i, k] = ax[k]
    if m.root_kind > 0:
        total = m.mass.sum()
        mean = np.zeros((3, D))
        for k in range(nv):
            if m.is_trans[k]:
                continue
            mean[:] = 0.0
            for i in range(L):
                for a in range(3):
                    _axpy(mean[a], G[i, k, a], m.mass[i] / total)
            for i in range(L):
                for a in range(3):
                    _axpy(G[i, k, a], mean[a], -1.0)


@njit(**_JIT)
def _velocities(G, W, qvel, v, w):
    L, nv = G.shape[0], G.shape[1]
    v[:] = 0.0
    w[:] = 0.0
    for i in range(L):
        for k in range(nv):
            for a in range(3):
                _mac(v[i, a], G[i, k, a], qvel[k], 1.0)
                _mac(w[i, a], W[i, k, a], qvel[k], 1.0)


# ---------------------------------------------------------------- dynamics


@njit(**_JIT)
def _friction_gain(out, sp2):
    s = FRICTION_VEL_SCALE
    if sp2[0] < 1e-16:
        _chain(out, sp2, (1.0 - sp2[0] / (3.0 * s * s)) / s, -1.0 / (3.0 * s * s * s))
    else:
        sp = np.sqrt(sp2[0])
        th = np.tanh(sp / s)
        g = th / sp
        # d g / d sp2 = (sech^2(sp/s)/s * sp - th) / sp^2 / (2 sp)
        dg = ((1.0 - th * th) / s * sp - th) / (sp * sp) / (2.0 * sp)
        _chain(out, sp2, g, dg)


@njit(**_JIT)
def accelerations(m, qpos, qvel, target, push, dt):
    """Generalized accelerations from ``(M + dt C) qacc = f``."""
    L = m.parent.shape[0]
    nv = qvel.shape[0]
    D = qpos.shape[1]
    R = np.zeros((L, 3, 3, D))
    o = np.zeros((L, 3, D))
    c = np.zeros((L, 3, D))
    ax = np.zeros((nv, 3, D))
    an = np.zeros((nv, 3, D))
    forward_kinematics(m, qpos, R, o, c, ax, an)
    G = np.zeros((L, nv, 3, D))
    W = np.zeros((L, nv, 3, D))
    link_jacobians(m, c, ax, an, G, W)
    v = np.zeros((L, 3, D))
    w = np.zeros((L, 3, D))
    _velocities(G, W, qvel, v, w)
    total = m.mass.sum()

    # world inertia tensors
    Iw = np.zeros((L, 3, 3, D))
    for i in range(L):
        for a in range(3):
            for b in range(3):
                for j in range(3):
                    _mac(Iw[i, a, b], R[i, a, j], R[i, b, j], m.inertia[i, j])

    # velocity-product terms
    frame_w = np.zeros((nv, 3, D))
    for k in range(nv):
        for l in range(nv):
            if m.frame_rate[k, l] > 0.0:
                for a in range(3):
                    _mac(frame_w[k, a], ax[l, a], qvel[l], 1.0)
    axis_dot = np.zeros((nv, 3, D))
    for k in range(nv):
        _cross_acc(axis_dot[k], frame_w[k], ax[k], 1.0)
    anchor_vel = np.zeros((nv, 3, D))
    rel = np.zeros((3, D))
    for k in range(nv):
        p = m.anchor_parent[k]
        if p >= 0:
            for a in range(3):
                for t in range(D):
                    anchor_vel[k, a, t] = v[p, a, t]
                    rel[a, t] = an[k, a, t] - c[p, a, t]
            _cross_acc(anchor_vel[k], w[p], rel, 1.0)
    bias_lin = np.zeros((L, 3, D))
    bias_ang = np.zeros((L, 3, D))
    term = np.zeros((3, D))
    relv = np.zeros((3, D))
    for i in range(L):
        for k in range(nv):
            if m.moves[i, k] <= 0.0 or m.is_trans[k]:
                continue
            for a in range(3):
                for t in range(D):
                    rel[a, t] = c[i, a, t] - an[k, a, t]
                    relv[a, t] = v[i, a, t] - anchor_vel[k, a, t]
            term[:] = 0.0
            _cross_acc(term, axis_dot[k], rel, 1.0)
            _cross_acc(term, ax[k], relv, 1.0)
            for a in range(3):
                _mac(bias_lin[i, a], term[a], qvel[k], 1.0)
                _mac(bias_ang[i, a], axis_dot[k, a], qvel[k], 1.0)
    if m.root_kind > 0:
        mean = np.zeros((3, D))
        for i in range(L):
            for a in range(3):
                _axpy(mean[a], bias_lin[i, a], m.mass[i] / total)
        for i in range(L):
            for a in range(3):
                _axpy(bias_lin[i, a], mean[a], -1.0)

    # external loads per link
    force = np.zeros((L, 3, D))
    torque = np.zeros((L, 3, D))
    for i in range(L):
        force[i, 2, 0] = -m.gravity * m.mass[i]
    for a in range(3):
        force[0, a, 0] += push[a]
    damp = np.zeros((nv, nv, D))
    for k in range(m.n_root_v, nv):
        damp[k, k, 0] = m.kd[k - m.n_root_v]
    if m.contact_on:
        pt = np.zeros((3, D))
        arm = np.zeros((3, D))
        pvel = np.zeros((3, D))
        f = np.zeros((3, D))
        pen = np.zeros(D)
        ramp = np.zeros(D)
        sink = np.zeros(D)
        fn = np.zeros(D)
        sp2 = np.zeros(D)
        gain = np.zeros(D)
        slip = np.zeros(D)
        pjac = np.zeros((nv, 3, D))
        for p in range(m.plink.shape[0]):
            li = m.plink[p]
            for a in range(3):
                for t in range(D):
                    acc = o[li, a, t]
                    for b in range(3):
                        acc += R[li, a, b, t] * m.plocal[p, b]
                    pt[a, t] = acc
            pt[2, 0] -= m.prad[p]
            if pt[2, 0] >= 0.0:
                continue
            for a in range(3):
                for t in range(D):
                    arm[a, t] = pt[a, t] - c[li, a, t]
                    pvel[a, t] = v[li, a, t]
            _cross_acc(pvel, w[li], arm, 1.0)
            for t in range(D):
                pen[t] = -pt[2, t]
            # ramp = min(pen / delta, 1), ties to the first argument
            if pen[0] / DAMPING_RAMP <= 1.0:
                _chain(ramp, pen, pen[0] / DAMPING_RAMP, 1.0 / DAMPING_RAMP)
            else:
                ramp[:] = 0.0
                ramp[0] = 1.0
            # sink = max(-vn, 0), ties to the first argument
            if -pvel[2, 0] >= 0.0:
                _chain(sink, pvel[2], -pvel[2, 0], -1.0)
            else:
                sink[:] = 0.0
            fn[:] = 0.0
            _axpy(fn, pen, m.k_contact)
            _mac(fn, sink, ramp, m.d_contact)
            sp2[:] = 0.0
            _mac(sp2, pvel[0], pvel[0], 1.0)
            _mac(sp2, pvel[1], pvel[1], 1.0)
            _friction_gain(gain, sp2)
            slip[:] = 0.0
            _mac(slip, fn, gain, m.mu)
            f[:] = 0.0
            _mac(f[0], slip, pvel[0], -1.0)
            _mac(f[1], slip, pvel[1], -1.0)
            f[2] = fn
            for a in range(3):
                _axpy(force[li, a], f[a], 1.0)
            _cross_acc(torque[li], arm, f, 1.0)
            # implicit friction: point Jacobian J_p = G + W x arm
            for k in range(nv):
                pjac[k] = G[li, k]
                _cross_acc(pjac[k], W[li, k], arm, 1.0)
            tmp = np.zeros(D)
            for k in range(nv):
                for j in range(nv):
                    for a in range(2):
                        tmp[:] = 0.0
                        _mac(tmp, pjac[k, a], pjac[j, a], 1.0)
                        _mac(damp[k, j], slip, tmp, 1.0)

    # right-hand side
    rhs = np.zeros((nv, D))
    iw_w = np.zeros((3, D))
    load = np.zeros((3, D))
    for i in range(L):
        iw_w[:] = 0.0
        for a in range(3):
            for b in range(3):
                _mac(iw_w[a], Iw[i, a, b], w[i, b], 1.0)
        # angular load: torque - Iw alpha_bias - w x Iw w
        load[:] = 0.0
        for a in range(3):
            _axpy(load[a], torque[i, a], 1.0)
            for b in range(3):
                _mac(load[a], Iw[i, a, b], bias_ang[i, b], -1.0)
        _cross_acc(load, w[i], iw_w, -1.0)
        for k in range(nv):
            for a in range(3):
                _mac(rhs[k], W[i, k, a], load[a], 1.0)
        load[:] = 0.0
        for a in range(3):
            _axpy(load[a], force[i, a], 1.0)
            _axpy(load[a], bias_lin[i, a], -m.mass[i])
        for k in range(nv):
            for a in range(3):
                _mac(rhs[k], G[i, k, a], load[a], 1.0)
    for j in range(nv - m.n_root_v):
        k = j + m.n_root_v
        q = qpos[m.dof_qidx[k]]
        u = qvel[k]
        # kp (target - q) - kd u
        _axpy(rhs[k], target[j], m.kp[j])
        _axpy(rhs[k], q, -m.kp[j])
        _axpy(rhs[k], u, -m.kd[j])
        if q[0] - m.hi[j] >= 0.0:
            _axpy(rhs[k], q, -m.klim[j])
            rhs[k, 0] += m.klim[j] * m.hi[j]
        if q[0] - m.lo[j] <= 0.0:
            _axpy(rhs[k], q, -m.klim[j])
            rhs[k, 0] += m.klim[j] * m.lo[j]

    # mass matrix plus implicit damping
    A = np.zeros((nv, nv, D))
    tmp3 = np.zeros((3, D))
    for i in range(L):
        for j in range(nv):
            tmp3[:] = 0.0
            for a in range(3):
                for b in range(3):
                    _mac(tmp3[a], Iw[i, a, b], W[i, j, b], 1.0)
            for k in range(nv):
                for a in range(3):
                    _mac(A[k, j], G[i, k, a], G[i, j, a], m.mass[i])
                    _mac(A[k, j], W[i, k, a], tmp3[a], 1.0)
    for k in range(nv):
        A[k, k, 0] += m.armature[k]
        for j in range(nv):
            _axpy(A[k, j], damp[k, j], dt)
    return _solve(A, rhs)


@njit(**_JIT)
def _cholesky_solve(L, b):
    """Solve (L L^T) x = b in place for each column of b (n, k)."""
    n = L.shape[0]
    for c in range(b.shape[1]):
        for i in range(n):
            acc = b[i, c]
            for j in range(i):
                acc -= L[i, j] * b[j, c]
            b[i, c] = acc / L[i, i]
        for i in range(n - 1, -1, -1):
            acc = b[i, c]
            for j in range(i + 1, n):
                acc -= L[j, i] * b[j, c]
            b[i, c] = acc / L[i, i]


@njit(**_JIT)
def _solve(A, r):
    """Dual solve of the symmetric positive definite system A x = r."""
    nv = r.shape[0]
    D = r.shape[1]
    L = np.zeros((nv, nv))
    for i in range(nv):
        for j in range(i + 1):
            acc = A[i, j, 0]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                L[i, i] = np.sqrt(acc) if acc > 0.0 else np.nan
            else:
                L[i, j] = acc / L[j, j]
    x = np.zeros((nv, D))
    x0 = np.zeros((nv, 1))
    x0[:, 0] = r[:, 0]
    _cholesky_solve(L, x0)
    x[:, 0] = x0[:, 0]
    if D > 1:
        rhs = np.empty((nv, D - 1))
        for k in range(nv):
            for t in range(1, D):
                acc = r[k, t]
                for j in range(nv):
                    acc -= A[k, j, t] * x0[j, 0]
                rhs[k, t - 1] = acc
        _cholesky_solve(L, rhs)
        x[:, 1:] = rhs
    return x


@njit(**_JIT)
def _quat_integrate(q, omega, dt):
    """exp(omega dt) * q, renormalized and sign-canonical; q, omega dual."""
    D = q.shape[1]
    rv = omega * dt
    th2 = np.zeros(D)
    for a in range(3):
        _mac(th2, rv[a], rv[a], 1.0)
    half = np.zeros(D)
    s = np.zeros(D)
    if th2[0] < 1e-12:
        _chain(half, th2, 1.0 - th2[0] / 8.0, -1.0 / 8.0)
        _chain(s, th2, 0.5 - th2[0] / 48.0, -1.0 / 48.0)
    else:
        th = np.sqrt(th2[0])
        sh = np.sin(0.5 * th)
        ch = np.cos(0.5 * th)
        # derivatives with respect to th2 (d th / d th2 = 1 / (2 th))
        _chain(half, th2, ch, -0.5 * sh / (2.0 * th))
        _chain(s, th2, sh / th, (0.5 * ch * th - sh) / (th * th) / (2.0 * th))
    dq = np.zeros((4, D))
    dq[0] = half
    for a in range(3):
        _mac(dq[1 + a], rv[a], s, 1.0)
    out = np.zeros((4, D))
    aw, ax_, ay, az = dq[0], dq[1], dq[2], dq[3]
    bw, bx, by, bz = q[0], q[1], q[2], q[3]
    _mac(out[0], aw, bw, 1.0)
    _mac(out[0], ax_, bx, -1.0)
    _mac(out[0], ay, by, -1.0)
    _mac(out[0], az, bz, -1.0)
    _mac(out[1], aw, bx, 1.0)
    _mac(out[1], ax_, bw, 1.0)
    _mac(out[1], ay, bz, 1.0)
    _mac(out[1], az, by, -1.0)
    _mac(out[2], aw, by, 1.0)
    _mac(out[2], ax_, bz, -1.0)
    _mac(out[2], ay, bw, 1.0)
    _mac(out[2], az, bx, 1.0)
    _mac(out[3], aw, bz, 1.0)
    _mac(out[3], ax_, by, 1.0)
    _mac(out[3], ay, bx, -1.0)
    _mac(out[3], az, bw, 1.0)
    n2 = np.zeros(D)
    for a in range(4):
        _mac(n2, out[a], out[a], 1.0)
    n = np.empty(D)
    r0 = np.sqrt(n2[0])
    _chain(n, n2, r0, 0.5 / r0)
    res = np.empty((4, D))
    for a in range(4):
        _div(res[a], out[a], n)
    if res[0, 0] < 0.0:
        res = -res
    return res


@njit(**_JIT)
def substep(m, qpos, qvel, target, push, dt):
    """One symplectic Euler substep, in place on dual arrays."""
    acc = accelerations(m, qpos, qvel, target, push, dt)
    nv = qvel.shape[0]
    for k in range(nv):
        _axpy(qvel[k], acc[k], dt)
    if m.root_kind == 2:
        for a in range(3):
            _axpy(qpos[a], qvel[a], dt)
        qpos[3:7] = _quat_integrate(qpos[3:7], qvel[3:6], dt)
        for k in range(6, nv):
            _axpy(qpos[k + 1], qvel[k], dt)
    else:
        for k in range(nv):
            _axpy(qpos[k], qvel[k], dt)


@njit(**_JIT)
def run_batch(m, qpos, qvel, target, push, nsub, dt):
    """Advance every environment ``nsub`` substeps in place.

    Returns -1 on success, otherwise ``env * nsub + substep`` of the first
    non-finite state.
    """
    B = qpos.shape[0]
    for b in range(B):
        for n in range(nsub):
            substep(m, qpos[b], qvel[b], target[b], push[b], dt)
            if not (_finite(qpos[b, :, 0]) and _finite(qvel[b, :, 0])):
                return b * nsub + n
    return -1


@njit(**_JIT)
def features_batch(m, qpos, qvel, out):
    """Per-link [com, rot6d, linear velocity, angular velocity] into out (B, L, 15, D)."""
    B = qpos.shape[0]
    L = m.parent.shape[0]
    nv = qvel.shape[1]
    D = qpos.shape[2]
    R = np.zeros((L, 3, 3, D))
    o = np.zeros((L, 3, D))
    c = np.zeros((L, 3, D))
    ax = np.zeros((nv, 3, D))
    an = np.zeros((nv, 3, D))
    G = np.zeros((L, nv, 3, D))
    W = np.zeros((L, nv, 3, D))
    v = np.zeros((L, 3, D))
    w = np.zeros((L, 3, D))
    for b in range(B):
        forward_kinematics(m, qpos[b], R, o, c, ax, an)
        link_jacobians(m, c, ax, an, G, W)
        _velocities(G, W, qvel[b], v, w)
        for i in range(L):
            for a in range(3):
                out[b, i, a] = c[i, a]
                out[b, i, 3 + a] = R[i, a, 0]
                out[b, i, 6 + a] = R[i, a, 1]
                out[b, i, 9 + a] = v[i, a]
                out[b, i, 12 + a] = w[i, a]


@njit(**_JIT)
def frames_batch(m, qpos, rot, com):
    """Plain link rotations (B, L, 3, 3) and COMs (B, L, 3)."""
    B = qpos.shape[0]
    L = m.parent.shape[0]
    nv = m.dof_axis.shape[0]
    R = np.zeros((L, 3, 3, 1))
    o = np.zeros((L, 3, 1))
    c = np.zeros((L, 3, 1))
    ax = np.zeros((nv, 3, 1))
    an = np.zeros((nv, 3, 1))
    q = np.zeros((qpos.shape[1], 1))
    for b in range(B):
        q[:, 0] = qpos[b]
        forward_kinematics(m, q, R, o, c, ax, an)
        rot[b] = R[:, :, :, 0]
        com[b] = c[:, :, 0]
