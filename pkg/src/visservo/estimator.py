"""
Adaptive constrained error-state Kalman filter for the tumbling target.

The filter keeps a full reference state ``x_hat`` and a 20x20 covariance
of the error state (layout in :mod:`visservo.targetdyn`).  Each update
computes an error-state correction, folds the attitude and misalignment
parts in multiplicatively, and resets the error state to zero.

Three extensions on top of the plain EKF:

* gain projection on the two inertia-ratio rows so the posterior never
  leaves the open box ``|sigma_i| < 1``;
* a health flag ``gamma`` that turns the whole update off when the vision
  channel is faulty;
* a sliding-window estimate of the measurement covariance from post-update
  residuals.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from visservo import targetdyn as td
from visservo.rigidmotion import (
    _product,
    quat_inverse,
    rotation_matrix,
    skew,
)
from visservo.targetdyn import (
    N_ERR,
    SL_MU,
    SL_PARAMS,
    SL_Q,
    SL_RHO,
    SL_SIGMA,
    SL_VARRHO,
    TargetState,
)

N_MEAS = 6

# Posterior inertia ratios are kept at least this far inside the unit box.
SIGMA_MARGIN = 1e-6
MAX_INNOVATION_COND = 1e12
PSD_FLOOR = 1e-12

DEFAULT_P0_SCALES = {
    "attitude": 1e-2,
    "rate": 1e-2,
    "position": 1e-1,
    "velocity": 1e-2,
    "sigma": 0.25,
    "varrho": 1e-2,
    "mu": 1e-2,
}


class DegradedUpdate(RuntimeError):
    """Innovation covariance too ill-conditioned to invert reliably."""


def initial_covariance(scales: dict | None = None) -> np.ndarray:
    s = dict(DEFAULT_P0_SCALES)
    if scales:
        unknown = set(scales) - set(s)
        if unknown:
            raise ValueError(f"unknown covariance blocks: {sorted(unknown)}")
        s.update(scales)
    diag = np.concatenate(
        [
            np.full(3, s["attitude"]),
            np.full(3, s["rate"]),
            np.full(3, s["position"]),
            np.full(3, s["velocity"]),
            np.full(2, s["sigma"]),
            np.full(3, s["varrho"]),
            np.full(3, s["mu"]),
        ]
    )
    return np.diag(diag)


@dataclass(frozen=True)
class Estimate:
    x_hat: TargetState
    P: np.ndarray
    epoch: int = 0
    # Transition matrix of the last prediction, kept for the Gramian.
    transition: np.ndarray | None = None


@dataclass
class NoiseModel:
    """Process noise density and adaptive measurement covariance.

    ``Sigma`` is the windowed mean of residual outer products, maintained
    recursively; ``window`` holds the residuals currently inside it.
    """

    Qc: np.ndarray
    R_hat: np.ndarray
    w: int = 100
    Sigma: np.ndarray = field(default_factory=lambda: np.zeros((N_MEAS, N_MEAS)))
    window: deque = field(default_factory=deque)
    count: int = 0

    def __post_init__(self):
        if self.w < 1:
            raise ValueError("window size must be >= 1")
        self.Qc = np.asarray(self.Qc, dtype=float)
        self.R_hat = np.asarray(self.R_hat, dtype=float)
        if self.Qc.shape != (6, 6) or self.R_hat.shape != (N_MEAS, N_MEAS):
            raise ValueError("Qc and R_hat must be 6x6")

    def copy(self) -> "NoiseModel":
        return NoiseModel(
            Qc=self.Qc,
            R_hat=self.R_hat.copy(),
            w=self.w,
            Sigma=self.Sigma.copy(),
            window=deque(self.window),
            count=self.count,
        )


@dataclass
class GramianTracker:
    W_O: np.ndarray = field(default_factory=lambda: np.zeros((N_ERR, N_ERR)))
    Phi_prod: np.ndarray = field(default_factory=lambda: np.eye(N_ERR))
    steps: int = 0

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.W_O)

    def condition_number(self) -> float:
        """``lambda_max / lambda_min`` of the Gramian, ``inf`` if singular."""
        lam = self.eigenvalues()
        if lam[-1] <= 0.0 or lam[0] <= 0.0:
            return math.inf
        return float(lam[-1] / lam[0])


@dataclass(frozen=True)
class UpdateInfo:
    estimate: Estimate
    gamma: int
    innovation: np.ndarray
    residual: np.ndarray | None = None
    H: np.ndarray | None = None
    K: np.ndarray | None = None
    beta: np.ndarray | None = None
    S: np.ndarray | None = None


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def predict(est: Estimate, noise: NoiseModel, dt: float, max_step: float = 0.05) -> Estimate:
    """Propagate state and covariance over ``dt``."""
    F, G = td.jacobians(est.x_hat)
    Phi, Qk = td.discretize(F, G, noise.Qc, dt)
    x_minus = td.propagate(est.x_hat, dt, max_step)
    P_minus = symmetrize(Phi @ est.P @ Phi.T + Qk)
    return Estimate(x_minus, P_minus, est.epoch + 1, Phi)


def predicted_measurement(x_hat: TargetState) -> np.ndarray:
    z = np.zeros(N_MEAS)
    z[:3] = x_hat.grasp_position
    return z


def measurement_model(est: Estimate) -> tuple[np.ndarray, np.ndarray]:
    """Predicted measurement and its sensitivity at the reference state.

    The error state is zero at the reference, so the attitude block of
    ``z_pred`` vanishes and the cross-coupling terms of ``H`` reduce to
    identities.
    """
    x = est.x_hat
    A = rotation_matrix(x.q)
    H = np.zeros((N_MEAS, N_ERR))
    H[0:3, SL_Q] = -2.0 * A @ skew(x.varrho)
    H[0:3, SL_RHO] = np.eye(3)
    H[0:3, SL_VARRHO] = A
    H[3:6, SL_Q] = np.eye(3)
    H[3:6, SL_MU] = np.eye(3)
    return predicted_measurement(x), H


def observation(x_hat: TargetState, dx: np.ndarray) -> np.ndarray:
    """Nonlinear measurement ``h(dx)`` for an error state ``dx`` about ``x_hat``."""
    x = td.boxplus(x_hat, dx)
    dq = _product(x.q, quat_inverse(x_hat.q))
    dmu = _product(quat_inverse(x_hat.mu), x.mu)
    z = np.empty(N_MEAS)
    z[:3] = x.grasp_position
    z[3:] = _product(dmu, dq)[:3]
    return z


def pose_to_measurement(x_hat: TargetState, rho_bar: np.ndarray, eta_bar: np.ndarray) -> np.ndarray:
    """Map a grapple-frame pose to the 6-vector ``[rho_bar, vec(mu^-1 ⊗ eta ⊗ q^-1)]``."""
    d_eta = _product(_product(quat_inverse(x_hat.mu), eta_bar), quat_inverse(x_hat.q))
    if d_eta[3] < 0.0:
        d_eta = -d_eta
    z = np.empty(N_MEAS)
    z[:3] = rho_bar
    z[3:] = d_eta[:3]
    return z


def projection_factors(
    K_u: np.ndarray,
    sigma_prior: np.ndarray,
    e: np.ndarray,
    mode: str = "boundary",
    margin: float = SIGMA_MARGIN,
) -> np.ndarray:
    """Scale factors ``beta`` for the two inertia-ratio rows of the gain.

    ``mode="boundary"`` shrinks the correction only when the unconstrained
    posterior leaves ``[-1 + margin, 1 - margin]``, and then places it on
    that boundary.  ``mode="printed"`` applies the literal rule
    ``beta = sgn(k^T e) - sigma / (k^T e)`` whenever ``|k^T e| > 1``; it is
    kept for comparison only and does not guarantee feasibility.
    """
    sigma_prior = np.asarray(sigma_prior, dtype=float)
    if np.any(np.abs(sigma_prior) >= 1.0):
        raise ValueError(f"prior sigma outside the unit box: {sigma_prior}")
    beta = np.ones(2)
    for i, r in enumerate(range(SL_SIGMA.start, SL_SIGMA.stop)):
        ke = float(K_u[r] @ e)
        if mode == "boundary":
            bound = 1.0 - margin
            if abs(sigma_prior[i] + ke) > bound and ke != 0.0:
                b = (math.copysign(bound, ke) - sigma_prior[i]) / ke
                beta[i] = min(max(b, 0.0), 1.0)
        elif mode == "printed":
            if abs(ke) > 1.0:
                beta[i] = math.copysign(1.0, ke) - sigma_prior[i] / ke
        else:
            raise ValueError(f"unknown projection mode {mode!r}")
    return beta


def gain_projection(
    K_u: np.ndarray,
    sigma_prior: np.ndarray,
    e: np.ndarray,
    mode: str = "boundary",
    margin: float = SIGMA_MARGIN,
) -> np.ndarray:
    """Gain with its inertia-ratio rows scaled so the posterior stays feasible.

    Rows other than the two ``sigma`` rows are untouched; when the
    unconstrained posterior is already interior ``K_u`` itself is returned.
    """
    beta = projection_factors(K_u, sigma_prior, e, mode, margin)
    if np.all(beta == 1.0):
        return K_u
    K = K_u.copy()
    K[SL_SIGMA] *= beta[:, None]
    return K


def kalman_update(
    est: Estimate,
    z: np.ndarray,
    gamma: int,
    noise: NoiseModel,
    projection: str = "boundary",
) -> UpdateInfo:
    """Fault-gated constrained measurement update with full diagnostics."""
    z = np.asarray(z, dtype=float)
    if z.shape != (N_MEAS,) or not np.all(np.isfinite(z)):
        raise ValueError("measurement must be a finite 6-vector")
    if gamma not in (0, 1):
        raise ValueError("gamma must be 0 or 1")
    z_pred, H = measurement_model(est)
    nu = z - z_pred
    if gamma == 0:
        return UpdateInfo(est, 0, nu, H=H)

    P = est.P
    PHt = P @ H.T
    S = symmetrize(H @ PHt + noise.R_hat)
    lam = np.linalg.eigvalsh(S)
    if lam[0] <= 0.0 or lam[-1] > MAX_INNOVATION_COND * lam[0]:
        raise DegradedUpdate("innovation covariance is ill-conditioned")
    K_u = np.linalg.solve(S, PHt.T).T
    beta = projection_factors(K_u, est.x_hat.sigma, nu, mode=projection)
    K = K_u.copy()
    K[SL_SIGMA] *= beta[:, None]
    dx = K @ nu

    x_post = td.boxplus(est.x_hat, dx)
    if projection == "boundary":
        # absorb round-off in the boundary placement
        bound = 1.0 - SIGMA_MARGIN
        x_post = replace(x_post, sigma=np.clip(x_post.sigma, -bound, bound))

    # Joseph form: stays PSD for the projected (suboptimal) gain too.
    IKH = np.eye(N_ERR) - K @ H
    P_post = symmetrize(IKH @ P @ IKH.T + K @ noise.R_hat @ K.T)
    residual = nu - H @ dx
    post = Estimate(x_post, P_post, est.epoch, est.transition)
    return UpdateInfo(post, 1, nu, residual, H, K, beta, S)


def update(
    est: Estimate,
    z: np.ndarray,
    gamma: int,
    noise: NoiseModel,
    projection: str = "boundary",
) -> Estimate:
    """Posterior estimate; with ``gamma == 0`` the prior is returned unchanged."""
    return kalman_update(est, z, gamma, noise, projection).estimate


def floor_psd(M: np.ndarray, floor: float = PSD_FLOOR) -> np.ndarray:
    M = symmetrize(M)
    lam, V = np.linalg.eigh(M)
    if lam[0] >= floor:
        return M
    lam = np.maximum(lam, floor)
    return symmetrize((V * lam) @ V.T)


def adapt_R(noise: NoiseModel, e: np.ndarray, H: np.ndarray, P_post: np.ndarray) -> NoiseModel:
    """Fold one post-update residual into the windowed covariance estimate.

    The window average grows until it holds ``w`` residuals and slides
    afterwards; ``R_hat = Sigma + H P_post H^T`` floored to PSD.
    """
    out = noise.copy()
    e = np.asarray(e, dtype=float).copy()
    ee = np.outer(e, e)
    out.count += 1
    out.window.append(e)
    if len(out.window) <= out.w:
        n = len(out.window)
        out.Sigma = (n - 1) / n * out.Sigma + ee / n
    else:
        old = out.window.popleft()
        out.Sigma = out.Sigma + (ee - np.outer(old, old)) / out.w
    out.R_hat = floor_psd(out.Sigma + H @ P_post @ H.T)
    return out


def batch_sigma(window) -> np.ndarray:
    """Direct windowed mean of residual outer products."""
    E = np.asarray(list(window))
    return E.T @ E / len(E)


def gramian_step(tracker: GramianTracker, Phi_k: np.ndarray, H_k: np.ndarray) -> GramianTracker:
    Phi_prod = Phi_k @ tracker.Phi_prod
    HPhi = H_k @ Phi_prod
    W = tracker.W_O + HPhi.T @ HPhi
    return GramianTracker(symmetrize(W), Phi_prod, tracker.steps + 1)


def parameter_trace(P: np.ndarray) -> float:
    return float(np.trace(P[SL_PARAMS, SL_PARAMS]))


def converged(est: Estimate, threshold: float) -> bool:
    """True when the trace of the parameter covariance block is below ``threshold``."""
    return parameter_trace(est.P) < threshold


class AdaptiveFilter:
    """Stateful wrapper running predict/update/adapt and tracking convergence.

    Not thread-safe; use one instance per run.
    """

    def __init__(
        self,
        estimate: Estimate,
        noise: NoiseModel,
        *,
        converge_threshold: float = 0.02,
        projection: str = "boundary",
        adapt: bool = True,
        max_step: float = 0.05,
    ):
        self.estimate = estimate
        self.noise = noise
        self.tracker = GramianTracker()
        self.converge_threshold = converge_threshold
        self.projection = projection
        self.adapt = adapt
        self.max_step = max_step
        self.converged_epoch: int | None = None
        self.projections = 0

    @property
    def is_converged(self) -> bool:
        return self.converged_epoch is not None

    def predict(self, dt: float) -> Estimate:
        self.estimate = predict(self.estimate, self.noise, dt, self.max_step)
        return self.estimate

    def update(self, z: np.ndarray, gamma: int) -> UpdateInfo:
        try:
            info = kalman_update(self.estimate, z, gamma, self.noise, self.projection)
        except DegradedUpdate:
            info = kalman_update(self.estimate, z, 0, self.noise, self.projection)
        self.estimate = info.estimate
        if info.gamma == 1:
            if info.beta is not None and np.any(info.beta != 1.0):
                self.projections += 1
            if self.adapt:
                self.noise = adapt_R(self.noise, info.residual, info.H, self.estimate.P)
        if self.estimate.transition is not None and info.H is not None:
            self.tracker = gramian_step(self.tracker, self.estimate.transition, info.H)
        if self.converged_epoch is None and converged(self.estimate, self.converge_threshold):
            self.converged_epoch = self.estimate.epoch
        return info
