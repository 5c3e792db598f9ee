"""
Tumbling-target dynamics in dimensionless inertia parameters.

The target is a torque-free rigid body.  Its principal moments enter the
model only through two ratios ``sigma = (s1, s2)``; the third ratio is
implied by ``s1 + s2 + s3 + s1 s2 s3 = 0``.  Euler's equations become

    omega_dot = phi(omega, sigma) + B(sigma) eps_tau

with ``eps_tau`` the torque disturbance divided by the inertia trace.

Error-state layout (20 components), used by every matrix in the package::

    0:3   dq_v     attitude error, vector part of q ⊗ q_hat^-1
    3:6   d_omega  body rate error
    6:9   d_rho    CoM position error (camera frame)
    9:12  d_rho_dot
    12:14 d_sigma
    14:17 d_varrho grapple offset error (body frame)
    17:20 dmu_v    misalignment error, vector part of mu_hat^-1 ⊗ mu
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from visservo.rigidmotion import (
    IDENTITY,
    _product,
    canonical,
    check_unit,
    from_small_vec,
    quat_error,
    quat_inverse,
    quat_product,
    rotation_matrix,
    skew,
)

N_ERR = 20
N_NOISE = 6

SL_Q = slice(0, 3)
SL_W = slice(3, 6)
SL_RHO = slice(6, 9)
SL_VEL = slice(9, 12)
SL_SIGMA = slice(12, 14)
SL_VARRHO = slice(14, 17)
SL_MU = slice(17, 20)
SL_PARAMS = slice(12, 20)

# Triangle-inequality margin: keep sigma strictly inside the open box.
TRIANGLE_MARGIN = 1e-9


@dataclass(frozen=True)
class InertiaParams:
    """Independent dimensionless inertia ratios ``(s1, s2)``."""

    s1: float
    s2: float

    def __post_init__(self):
        if not (abs(self.s1) < 1.0 and abs(self.s2) < 1.0):
            raise ValueError(f"sigma outside the open unit box: ({self.s1}, {self.s2})")

    @property
    def s3(self) -> float:
        return third_sigma(self.s1, self.s2)

    def as_array(self) -> np.ndarray:
        return np.array([self.s1, self.s2])


def third_sigma(s1: float, s2: float) -> float:
    return -(s1 + s2) / (1.0 + s1 * s2)


def sigma_from_inertia(Ixx: float, Iyy: float, Izz: float) -> InertiaParams:
    """Dimensionless ratios from principal moments of inertia.

    Raises ``ValueError`` for non-positive moments or for triples that
    violate (or sit within ``TRIANGLE_MARGIN`` of) a triangle inequality.
    """
    I = np.array([Ixx, Iyy, Izz], dtype=float)
    if np.any(~np.isfinite(I)) or np.any(I <= 0.0):
        raise ValueError(f"principal moments must be positive, got {I}")
    tol = TRIANGLE_MARGIN * I.sum()
    if Ixx + Iyy <= Izz + tol or Iyy + Izz <= Ixx + tol or Izz + Ixx <= Iyy + tol:
        raise ValueError(f"moments violate the triangle inequality: {I}")
    return InertiaParams((Iyy - Izz) / Ixx, (Izz - Ixx) / Iyy)


def gamma_residual(s1: float, s2: float, s3: float) -> float:
    """Constraint residual ``s1 + s2 + s3 + s1 s2 s3``."""
    return s1 + s2 + s3 + s1 * s2 * s3


def b_matrix(s1: float, s2: float) -> np.ndarray:
    return np.diag(
        [
            1.0 + (2.0 + s1 * s2 + s1) / (1.0 - s2),
            1.0 + (2.0 + s1 * s2 - s2) / (1.0 + s1),
            1.0 + (2.0 + s1 - s2) / (1.0 + s1 * s2),
        ]
    )


def euler_terms(omega, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Gyroscopic term ``phi`` and disturbance gain ``B`` of Euler's equations."""
    s1, s2 = _sigma_pair(sigma)
    wx, wy, wz = omega
    phi = np.array([s1 * wy * wz, s2 * wx * wz, third_sigma(s1, s2) * wx * wy])
    return phi, b_matrix(s1, s2)


def _sigma_pair(sigma) -> tuple[float, float]:
    if isinstance(sigma, InertiaParams):
        return sigma.s1, sigma.s2
    return float(sigma[0]), float(sigma[1])


@dataclass(frozen=True)
class ProcessNoise:
    eps_tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    eps_f: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class TargetState:
    """Full target state: pose, rates and constant parameters.

    ``q`` orients the body frame {B} in the camera frame {A}; ``mu`` is the
    constant rotation between {B} and the grapple frame {C}, so the grapple
    frame orientation is ``mu ⊗ q``.
    """

    q: np.ndarray
    omega: np.ndarray
    rho_o: np.ndarray
    rho_o_dot: np.ndarray
    sigma: np.ndarray
    varrho: np.ndarray
    mu: np.ndarray = field(default_factory=lambda: IDENTITY.copy())

    @classmethod
    def from_vector(cls, y: np.ndarray) -> "TargetState":
        """Inverse of ``to_vector`` (22 components, full quaternions)."""
        return cls(
            q=y[0:4].copy(),
            omega=y[4:7].copy(),
            rho_o=y[7:10].copy(),
            rho_o_dot=y[10:13].copy(),
            sigma=y[13:15].copy(),
            varrho=y[15:18].copy(),
            mu=y[18:22].copy(),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.q, self.omega, self.rho_o, self.rho_o_dot, self.sigma, self.varrho, self.mu]
        )

    def validate(self) -> "TargetState":
        check_unit(self.q)
        check_unit(self.mu)
        InertiaParams(*self.sigma)
        return self

    @property
    def grasp_position(self) -> np.ndarray:
        return self.rho_o + rotation_matrix(self.q) @ self.varrho

    @property
    def grasp_velocity(self) -> np.ndarray:
        return self.rho_o_dot + rotation_matrix(self.q) @ np.cross(self.omega, self.varrho)

    @property
    def grasp_attitude(self) -> np.ndarray:
        return quat_product(self.mu, self.q)


def _rate(y: np.ndarray, eps_tau=None, eps_f=None) -> np.ndarray:
    qx, qy, qz, qw, wx, wy, wz, _, _, _, vx, vy, vz, s1, s2 = y[:15].tolist()
    s3 = -(s1 + s2) / (1.0 + s1 * s2)
    # q_dot = 1/2 Omega(omega) q ; parameters are constant
    dy = np.array(
        [
            0.5 * (wz * qy - wy * qz + wx * qw),
            0.5 * (-wz * qx + wx * qz + wy * qw),
            0.5 * (wy * qx - wx * qy + wz * qw),
            -0.5 * (wx * qx + wy * qy + wz * qz),
            s1 * wy * wz,
            s2 * wx * wz,
            s3 * wx * wy,
            vx, vy, vz,
            0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ]
    )
    if eps_tau is not None:
        dy[4:7] += b_matrix(s1, s2) @ eps_tau
    if eps_f is not None:
        dy[10:13] = eps_f
    return dy


def process_derivative(x: TargetState, eps: ProcessNoise | None = None) -> np.ndarray:
    """Time derivative of the full 22-component state vector.

    Order follows ``TargetState.to_vector``; the quaternion rates are
    complete 4-vectors and every parameter rate is exactly zero.
    """
    if eps is None:
        return _rate(x.to_vector())
    return _rate(x.to_vector(), np.asarray(eps.eps_tau, float), np.asarray(eps.eps_f, float))


def _renorm(y: np.ndarray) -> np.ndarray:
    y[0:4] = canonical(y[0:4])
    return y


def propagate_vector(y: np.ndarray, dt: float, max_step: float = 0.05) -> np.ndarray:
    """Noise-free RK4 propagation of a 22-vector, renormalizing ``q`` each substep."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = max(1, math.ceil(dt / max_step - 1e-12))
    h = dt / n
    y = np.array(y, dtype=float)
    params = y[13:22].copy()
    for _ in range(n):
        k1 = _rate(y)
        k2 = _rate(y + 0.5 * h * k1)
        k3 = _rate(y + 0.5 * h * k2)
        k4 = _rate(y + h * k3)
        y = _renorm(y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        y[13:22] = params
    return y


def propagate(x: TargetState, dt: float, max_step: float = 0.05) -> TargetState:
    """Propagate the noise-free dynamics over ``dt`` with RK4 substeps."""
    return TargetState.from_vector(propagate_vector(x.to_vector(), dt, max_step))


def jacobians(x_hat: TargetState) -> tuple[np.ndarray, np.ndarray]:
    """Error-state Jacobians ``F`` (20x20) and ``G`` (20x6) at ``x_hat``."""
    wx, wy, wz = x_hat.omega
    s1, s2 = float(x_hat.sigma[0]), float(x_hat.sigma[1])
    den = 1.0 + s1 * s2
    s3 = -(s1 + s2) / den

    F = np.zeros((N_ERR, N_ERR))
    F[SL_Q, SL_Q] = -skew(x_hat.omega)
    F[SL_Q, SL_W] = 0.5 * np.eye(3)
    F[SL_W, SL_W] = [
        [0.0, s1 * wz, s1 * wy],
        [s2 * wz, 0.0, s2 * wx],
        [s3 * wy, s3 * wx, 0.0],
    ]
    F[SL_W, SL_SIGMA] = [
        [wy * wz, 0.0],
        [0.0, wx * wz],
        [(s2 * s2 - 1.0) / den**2 * wx * wy, (s1 * s1 - 1.0) / den**2 * wx * wy],
    ]
    F[SL_RHO, SL_VEL] = np.eye(3)

    G = np.zeros((N_ERR, N_NOISE))
    G[SL_W, 0:3] = b_matrix(s1, s2)
    G[SL_VEL, 3:6] = np.eye(3)
    return F, G


def discretize(F: np.ndarray, G: np.ndarray, Qc: np.ndarray, dt: float):
    """Transition matrix ``expm(F dt)`` and first-order process noise ``G Qc G^T dt``."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    Phi = expm(F * dt)
    Qk = G @ Qc @ G.T * dt
    return Phi, 0.5 * (Qk + Qk.T)


def boxplus(x_hat: TargetState, dx: np.ndarray) -> TargetState:
    """Apply a 20-component error state to a reference state.

    Attitude and misalignment corrections are multiplicative
    (``q = dq ⊗ q_hat``, ``mu = mu_hat ⊗ dmu``); the rest are additive.
    """
    dq = from_small_vec(dx[SL_Q])
    dmu = from_small_vec(dx[SL_MU])
    return replace(
        x_hat,
        q=canonical(_product(dq, x_hat.q)),
        omega=x_hat.omega + dx[SL_W],
        rho_o=x_hat.rho_o + dx[SL_RHO],
        rho_o_dot=x_hat.rho_o_dot + dx[SL_VEL],
        sigma=x_hat.sigma + dx[SL_SIGMA],
        varrho=x_hat.varrho + dx[SL_VARRHO],
        mu=canonical(_product(x_hat.mu, dmu)),
    )


def boxminus(x: TargetState, x_hat: TargetState) -> np.ndarray:
    """Error state taking ``x_hat`` to ``x`` (inverse of ``boxplus``)."""
    dx = np.empty(N_ERR)
    dx[SL_Q] = quat_error(x.q, x_hat.q)[:3]
    dx[SL_W] = x.omega - x_hat.omega
    dx[SL_RHO] = x.rho_o - x_hat.rho_o
    dx[SL_VEL] = x.rho_o_dot - x_hat.rho_o_dot
    dx[SL_SIGMA] = x.sigma - x_hat.sigma
    dx[SL_VARRHO] = x.varrho - x_hat.varrho
    dx[SL_MU] = quat_product(quat_inverse(x_hat.mu), x.mu)[:3]
    return dx
