"""Dual quaternion arithmetic.

A dual quaternion is stored as a length-8 float array ``[r0, r1, r2, r3,
d0, d1, d2, d3]`` where ``r`` is the rotation quaternion (w, x, y, z) and
``d = 0.5 * t * r`` encodes the translation ``t``.  All functions accept
arrays with arbitrary leading dimensions.
"""
import numpy as np

from .errors import BlendDegenerate

EPS_REAL = 1e-9


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0, a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    b0, b1, b2, b3 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
            a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
            a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
            a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1.0
    return q


def quat_from_rotvec(rotvec):
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x with its series near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(angle > 1e-8, np.sin(half) / np.where(angle > 0, angle, 1.0), 0.5 - angle**2 / 48.0)
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Rotation matrix (3, 3) to unit quaternion with non-negative w."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def dq_identity(n=None):
    if n is None:
        q = np.zeros(8)
        q[0] = 1.0
        return q
    q = np.zeros((n, 8))
    q[:, 0] = 1.0
    return q


def dq_from_rt(quat, t):
    """Rigid transform ``x -> R x + t`` as a dual quaternion."""
    quat = np.asarray(quat, dtype=float)
    t = np.asarray(t, dtype=float)
    tq = np.concatenate([np.zeros(t.shape[:-1] + (1,)), t], axis=-1)
    return np.concatenate([quat, 0.5 * quat_mul(tq, quat)], axis=-1)


def dq_from_translation(t):
    t = np.asarray(t, dtype=float)
    quat = np.zeros(t.shape[:-1] + (4,))
    quat[..., 0] = 1.0
    return dq_from_rt(quat, t)


def dq_from_twist(rotvec, t, center=None):
    """Rotation by ``rotvec`` about ``center`` followed by translation ``t``."""
    rotvec = np.asarray(rotvec, dtype=float)
    t = np.asarray(t, dtype=float)
    quat = quat_from_rotvec(rotvec)
    if center is None:
        return dq_from_rt(quat, t)
    center = np.asarray(center, dtype=float)
    rc = np.einsum("...ij,...j->...i", quat_to_matrix(quat), center)
    return dq_from_rt(quat, center - rc + t)


def dq_mul(a, b):
    """Composition ``a * b`` (apply ``b`` first)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    real = quat_mul(a[..., :4], b[..., :4])
    dual = quat_mul(a[..., :4], b[..., 4:]) + quat_mul(a[..., 4:], b[..., :4])
    return np.concatenate([real, dual], axis=-1)


def dq_normalize(q):
    """Unit dual quaternion representing the same screw motion as ``q``.

    Scales by the real-part norm, then removes the dual component parallel to
    the real part so the Pluecker condition ``real . dual = 0`` holds.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q[..., :4], axis=-1, keepdims=True)
    if np.any(norm <= EPS_REAL):
        raise BlendDegenerate("dual quaternion real part has (near) zero norm")
    real = q[..., :4] / norm
    dual = q[..., 4:] / norm
    dual = dual - np.sum(real * dual, axis=-1, keepdims=True) * real
    return np.concatenate([real, dual], axis=-1)


def dq_translation(q):
    """Translation of a (possibly unnormalised) dual quaternion."""
    q = np.asarray(q, dtype=float)
    r = q[..., :4]
    t = 2.0 * quat_mul(q[..., 4:], quat_conj(r))[..., 1:]
    return t / np.sum(r * r, axis=-1, keepdims=True)


def dq_rotation(q):
    return quat_to_matrix(np.asarray(q, dtype=float)[..., :4])


def dq_transform_points(q, v):
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.einsum("...ij,...j->...i", dq_rotation(q), v) + dq_translation(q)


def dq_rotate_vectors(q, n):
    q = np.asarray(q, dtype=float)
    return np.einsum("...ij,...j->...i", dq_rotation(q), np.asarray(n, dtype=float))


def dq_to_matrix(q):
    q = np.asarray(q, dtype=float)
    m = np.zeros(q.shape[:-1] + (4, 4))
    m[..., :3, :3] = dq_rotation(q)
    m[..., :3, 3] = dq_translation(q)
    m[..., 3, 3] = 1.0
    return m


def dq_from_matrix(m):
    m = np.asarray(m, dtype=float)
    return dq_from_rt(matrix_to_quat(m[:3, :3]), m[:3, 3])


def dq_sign_align(qs, ref):
    """Flip entries of ``qs`` onto the hemisphere of ``ref`` (real-part dot)."""
    qs = np.asarray(qs, dtype=float)
    s = np.where(qs[..., :4] @ np.asarray(ref, dtype=float)[:4] < 0.0, -1.0, 1.0)
    return qs * s[..., None]


def quat_right_matrix(b):
    """4x4 matrix ``M`` with ``a * b == M @ a``."""
    b0, b1, b2, b3 = b
    return np.array(
        [
            [b0, -b1, -b2, -b3],
            [b1, b0, b3, -b2],
            [b2, -b3, b0, b1],
            [b3, b2, -b1, b0],
        ]
    )


def dq_right_matrix(b):
    """8x8 matrix ``M`` with ``dq_mul(a, b) == M @ a``."""
    b = np.asarray(b, dtype=float)
    m = np.zeros((8, 8))
    rr = quat_right_matrix(b[:4])
    m[:4, :4] = rr
    m[4:, :4] = quat_right_matrix(b[4:])
    m[4:, 4:] = rr
    return m


def point_jacobian(b, v):
    """Jacobian (3, 8) of the transformed point w.r.t. the raw blend ``b``.

    The transform applied is ``R(r) v / |r|^2 + 2 vec(d r*) / |r|^2``, i.e.
    normalisation by the real norm is part of the differentiated map.
    """
    b = np.asarray(b, dtype=float)
    v = np.asarray(v, dtype=float)
    r0, w = b[0], b[1:4]
    d0, e = b[4], b[5:8]
    n2 = b[:4] @ b[:4]
    u = (r0 * r0 - w @ w) * v + 2.0 * (w @ v) * w + 2.0 * r0 * np.cross(w, v)
    g = r0 * e - d0 * w + np.cross(w, e)
    du = np.empty((3, 4))
    du[:, 0] = 2.0 * r0 * v + 2.0 * np.cross(w, v)
    du[:, 1:] = -2.0 * np.outer(v, w) + 2.0 * (w @ v) * np.eye(3) + 2.0 * np.outer(w, v) - 2.0 * r0 * skew(v)
    dg_r = np.empty((3, 4))
    dg_r[:, 0] = e
    dg_r[:, 1:] = -d0 * np.eye(3) - skew(e)
    dg_d = np.empty((3, 4))
    dg_d[:, 0] = -w
    dg_d[:, 1:] = r0 * np.eye(3) + skew(w)
    f = (u + 2.0 * g) / n2
    jac = np.zeros((3, 8))
    jac[:, :4] = (du + 2.0 * dg_r) / n2 - 2.0 * np.outer(f, b[:4]) / n2
    jac[:, 4:] = 2.0 * dg_d / n2
    return jac


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def point_jacobian_batch(b, v):
    """Vectorised :func:`point_jacobian` over leading axis: (N, 8), (N, 3) -> (N, 3, 8)."""
    b = np.asarray(b, dtype=float)
    v = np.asarray(v, dtype=float)
    n = len(b)
    r0, w = b[:, 0], b[:, 1:4]
    d0, e = b[:, 4], b[:, 5:8]
    n2 = np.einsum("ij,ij->i", b[:, :4], b[:, :4])
    wv = np.einsum("ij,ij->i", w, v)
    ww = np.einsum("ij,ij->i", w, w)
    u = (r0 * r0 - ww)[:, None] * v + 2.0 * wv[:, None] * w + 2.0 * r0[:, None] * np.cross(w, v)
    g = r0[:, None] * e - d0[:, None] * w + np.cross(w, e)
    eye = np.eye(3)[None]
    du = np.empty((n, 3, 4))
    du[:, :, 0] = 2.0 * r0[:, None] * v + 2.0 * np.cross(w, v)
    du[:, :, 1:] = (-2.0 * np.einsum("ni,nj->nij", v, w) + 2.0 * wv[:, None, None] * eye
                    + 2.0 * np.einsum("ni,nj->nij", w, v) - 2.0 * r0[:, None, None] * skew_batch(v))
    dg_r = np.empty((n, 3, 4))
    dg_r[:, :, 0] = e
    dg_r[:, :, 1:] = -d0[:, None, None] * eye - skew_batch(e)
    dg_d = np.empty((n, 3, 4))
    dg_d[:, :, 0] = -w
    dg_d[:, :, 1:] = r0[:, None, None] * eye + skew_batch(w)
    f = (u + 2.0 * g) / n2[:, None]
    jac = np.empty((n, 3, 8))
    jac[:, :, :4] = (du + 2.0 * dg_r) / n2[:, None, None] - 2.0 * np.einsum("ni,nj->nij", f, b[:, :4]) / n2[:, None, None]
    jac[:, :, 4:] = 2.0 * dg_d / n2[:, None, None]
    return jac


def skew_batch(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out
