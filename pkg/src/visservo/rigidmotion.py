"""
Quaternion and rotation kernels.

Quaternions are stored as ``(4,)`` float arrays ordered ``[x, y, z, w]``:
vector part first, scalar part last.  The product follows the operator
form ``p ⊗ q = (p_w I + Omega(p_v)) q`` with

    Omega(v) = [[-[v x],  v],
                [  -v^T,  0]]

and ``rotation_matrix`` returns the active rotation
``A(q) = I + 2 q_w [q_v x] + 2 [q_v x]^2``.  With these two conventions
composition reads right to left in the matrices:
``A(p ⊗ q) = A(q) @ A(p)``.  Kinematics ``q_dot = 1/2 Omega(w) q`` then
describe a body whose angular rate ``w`` is expressed in the body frame.

Every quaternion returned here is normalized and canonicalized to a
non-negative scalar part.
"""

from __future__ import annotations

import math

import numpy as np

UNIT_TOL = 1e-9

IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v x]`` such that ``skew(v) @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def omega_matrix(v: np.ndarray) -> np.ndarray:
    """4x4 matrix ``Omega(v)`` used by the product operator and kinematics."""
    x, y, z = v
    return np.array(
        [
            [0.0, z, -y, x],
            [-z, 0.0, x, y],
            [y, -x, 0.0, z],
            [-x, -y, -z, 0.0],
        ]
    )


def canonical(q: np.ndarray) -> np.ndarray:
    """Normalize ``q`` and flip its sign so the scalar part is non-negative."""
    q = np.asarray(q, dtype=float)
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n == 0.0 or not math.isfinite(n):
        raise ValueError(f"cannot normalize quaternion {q!r}")
    if q[3] < 0.0:
        n = -n
    return q / n


def quaternion(vec, scalar: float) -> np.ndarray:
    """Build a unit quaternion from its vector and scalar parts."""
    v = np.asarray(vec, dtype=float)
    return canonical(np.array([v[0], v[1], v[2], float(scalar)]))


def from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return quaternion(math.sin(0.5 * angle) * axis, math.cos(0.5 * angle))


def from_small_vec(v: np.ndarray) -> np.ndarray:
    """Unit quaternion with vector part ``v`` (``|v| < 1``) and positive scalar.

    Inputs with ``|v| >= 1`` are treated as ``[v, 1]`` and normalized, which
    keeps the multiplicative correction well defined after large updates.
    """
    v = np.asarray(v, dtype=float)
    s2 = 1.0 - float(v @ v)
    if s2 > 0.0:
        return np.array([v[0], v[1], v[2], math.sqrt(s2)])
    return canonical(np.array([v[0], v[1], v[2], 1.0]))


def check_unit(q: np.ndarray, tol: float = UNIT_TOL) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    if abs(float(q @ q) - 1.0) > 2.0 * tol:
        raise ValueError(f"quaternion is not unit: norm={np.linalg.norm(q):.3e}")
    return q


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix ``A(q) = I + 2 q_w [q_v x] + 2 [q_v x]^2``.

    Raises
    ------
    ValueError
        If ``q`` deviates from unit norm by more than ``UNIT_TOL``.
    """
    check_unit(q)
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def _product(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    px, py, pz, pw = p
    qx, qy, qz, qw = q
    # vec = p_w q_v + q_w p_v - p_v x q_v ; scalar = p_w q_w - p_v . q_v
    return np.array(
        [
            pw * qx + qw * px - (py * qz - pz * qy),
            pw * qy + qw * py - (pz * qx - px * qz),
            pw * qz + qw * pz - (px * qy - py * qx),
            pw * qw - px * qx - py * qy - pz * qz,
        ]
    )


def quat_product(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Quaternion product ``p ⊗ q``, renormalized and canonicalized."""
    check_unit(p)
    check_unit(q)
    return canonical(_product(p, q))


def quat_inverse(q: np.ndarray) -> np.ndarray:
    """Inverse of a unit quaternion (its conjugate)."""
    check_unit(q)
    return canonical(np.array([-q[0], -q[1], -q[2], q[3]]))


def quat_error(q: np.ndarray, q_hat: np.ndarray) -> np.ndarray:
    """Small error quaternion ``q ⊗ q_hat^-1`` with non-negative scalar part."""
    return quat_product(q, quat_inverse(q_hat))


def quat_step(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Advance ``q`` by a constant body rate ``omega`` over ``dt`` seconds.

    Uses the exact exponential of ``1/2 Omega(omega) dt`` rather than a
    first-order integration step.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    check_unit(q)
    omega = np.asarray(omega, dtype=float)
    rate = float(np.linalg.norm(omega))
    if rate == 0.0:
        return canonical(q)
    half = 0.5 * rate * dt
    dq = np.empty(4)
    dq[:3] = math.sin(half) / rate * omega
    dq[3] = math.cos(half)
    return canonical(_product(dq, q))


def rotation_angle(q: np.ndarray) -> float:
    """Rotation angle in ``[0, pi]`` encoded by a unit quaternion."""
    return 2.0 * math.atan2(float(np.linalg.norm(q[:3])), abs(float(q[3])))
