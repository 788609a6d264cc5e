"""Rotation helpers: quaternions (w, x, y, z), rotation matrices and the 6D form.

Everything here is written against numpy ufuncs and the structural helpers of
:mod:`mimicsim.autodiff.jet`, so the same functions accept plain arrays or
forward-mode jets.  Arrays broadcast over leading axes.
"""

from __future__ import annotations

import numpy as np

from .autodiff import jet as J

__all__ = [
    "quat_normalize",
    "quat_canonical",
    "quat_conj",
    "quat_mul",
    "quat_rotate",
    "quat_to_mat",
    "quat_to_rot6d",
    "mat_to_rot6d",
    "rot6d_to_mat",
    "mat_to_quat",
    "quat_integrate",
    "quat_geodesic_angle",
    "quat_slerp",
    "axis_angle_to_quat",
    "axis_angle_to_mat",
    "skew",
]

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_canonical(q):
    """Flip sign so that w >= 0 (resolves the double cover)."""
    return J.where(J.value(q)[..., :1] < 0.0, -q, q)


def quat_normalize(q):
    norm = np.sqrt(J.sum(q * q, axis=-1, keepdims=True))
    return quat_canonical(q / norm)


def quat_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return J.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_mat(q):
    """Rotation matrix (..., 3, 3) of a unit quaternion."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        J.stack([1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)], axis=-1),
        J.stack([2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)], axis=-1),
        J.stack([2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)], axis=-1),
    ]
    return J.stack(rows, axis=-2)


def quat_rotate(q, v):
    return J.einsum("...ij,...j->...i", quat_to_mat(q), v)


def mat_to_rot6d(m):
    """First two columns of a rotation matrix, column-major: (c0, c1)."""
    return J.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def quat_to_rot6d(q):
    # every matrix entry is quadratic in q, so q and -q give identical bits
    if not np.all(np.isfinite(J.value(q))):
        raise ValueError("quat_to_rot6d: non-finite quaternion")
    return mat_to_rot6d(quat_to_mat(q))


def rot6d_to_mat(r):
    """Gram-Schmidt reconstruction of the full rotation matrix."""
    r = np.asarray(r, dtype=float)
    a, b = r[..., :3], r[..., 3:6]
    c0 = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b - np.sum(c0 * b, axis=-1, keepdims=True) * c0
    c1 = b / np.linalg.norm(b, axis=-1, keepdims=True)
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def mat_to_quat(m):
    """Canonical unit quaternion of a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    shape = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    for n, r in enumerate(m):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        k = int(np.argmax([tr, r[0, 0], r[1, 1], r[2, 2]]))
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        out[n] = q
    return quat_normalize(out).reshape(shape + (4,))


def _sinc_half(theta_sq):
    """sin(theta/2)/theta with a series branch near zero (safe under jets)."""
    small = J.value(theta_sq) < 1e-12
    safe = J.where(small, np.ones_like(J.value(theta_sq)), theta_sq)
    theta = np.sqrt(safe)
    exact = np.sin(0.5 * theta) / theta
    series = 0.5 - theta_sq / 48.0
    return J.where(small, series, exact)


def quat_integrate(q, omega, dt):
    """Advance ``q`` by the world-frame rotation exp(omega * dt), renormalized."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rv = omega * dt
    theta_sq = J.sum(rv * rv, axis=-1)
    small = J.value(theta_sq) < 1e-12
    safe = J.where(small, np.ones_like(J.value(theta_sq)), theta_sq)
    half = J.where(small, 1.0 - theta_sq / 8.0, np.cos(0.5 * np.sqrt(safe)))
    s = _sinc_half(theta_sq)[..., None]
    dq = J.concatenate([half[..., None], rv * s], axis=-1)
    return quat_normalize(quat_mul(dq, q))


def quat_geodesic_angle(a, b):
    """Rotation angle between two orientations, in [0, pi]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rel = quat_mul(quat_conj(a), b)
    vec = np.linalg.norm(rel[..., 1:], axis=-1)
    return 2.0 * np.arctan2(vec, np.abs(rel[..., 0]))


def quat_slerp(a, b, t):
    """Shortest-arc spherical interpolation for scalar ``t`` in [0, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.sum(a * b, axis=-1, keepdims=True)
    b = np.where(d < 0.0, -b, b)
    d = np.abs(d)
    theta = np.arccos(np.clip(d, -1.0, 1.0))
    sin_theta = np.sin(theta)
    near = sin_theta < 1e-9
    safe = np.where(near, 1.0, sin_theta)
    wa = np.where(near, 1.0 - t, np.sin((1.0 - t) * theta) / safe)
    wb = np.where(near, t, np.sin(t * theta) / safe)
    return quat_normalize(wa * a + wb * b)


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)[..., None]
    return quat_normalize(np.concatenate([np.cos(0.5 * angle), np.sin(0.5 * angle) * axis], axis=-1))


def skew(v):
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def axis_angle_to_mat(axis, angle):
    """Rodrigues rotation about a constant unit ``axis``; ``angle`` may be a jet."""
    k = skew(axis)
    k2 = k @ k
    s = np.sin(angle)[..., None, None]
    c = (1.0 - np.cos(angle))[..., None, None]
    return np.eye(3) + s * k + c * k2
