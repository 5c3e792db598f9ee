"""
Time-optimal rendezvous of a double-integrator end effector with a moving
grasp point under an acceleration-norm limit.

With costate ``lambda = [c1; -c1 tau + c2]`` the optimal input is

    u(tau) = -a_max p(tau) / |p(tau)|,     p(tau) = -c1 tau + c2,

so a plan is fully described by ``chi = (c1, c2, t_f)``.  ``residual``
stacks the terminal velocity and position mismatches with a scalar
Hamiltonian condition and ``solve`` drives its norm to zero.

The direction of ``p`` turns fastest where ``|p|`` is smallest, at
``tau* = c1.c2 / |c1|^2``.  Quadrature and rollout both split the horizon
there and grade their nodes with ``tau = tau* + s sinh(xi)`` where
``s = |p(tau*)| / |c1|``; on that grid the unit-vector integrand is a
smooth function of ``xi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import least_squares, minimize

from visservo import targetdyn as td
from visservo.rigidmotion import rotation_matrix

SIMPSON_PANELS = 200
# Floor on the grading width relative to the horizon; keeps the stretched
# coordinate range bounded for near-singular costates.
GRADING_FLOOR = 1e-8
SINGULAR_TOL = 1e-12
# longest horizon the solver may try, in units of the 1D minimum-time bound
HORIZON_CAP = 100.0


class NoSolution(RuntimeError):
    """No multi-start run reached the residual tolerance."""


@dataclass(frozen=True)
class ChaserState:
    r: np.ndarray
    r_dot: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        v = np.asarray(self.r_dot, dtype=float)
        if r.shape != (3,) or v.shape != (3,) or not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
            raise ValueError("chaser state must be two finite 3-vectors")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "r_dot", v)


@dataclass(frozen=True)
class CostateSolution:
    c1: np.ndarray
    c2: np.ndarray
    t_f: float
    residual: float
    t: float = 0.0
    hamiltonian: str = "transversality"

    @property
    def chi(self) -> np.ndarray:
        return np.concatenate([self.c1, self.c2, [self.t_f]])


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    r: np.ndarray
    r_dot: np.ndarray
    u: np.ndarray
    a_max: float

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self):
        return list(zip(self.t, self.r, self.r_dot, self.u))

    def state_at(self, tau: float) -> ChaserState:
        """Chaser state at ``tau``, cubic Hermite between samples; held after the end."""
        if len(self.t) == 1 or tau <= self.t[0]:
            return ChaserState(self.r[0], self.r_dot[0])
        if tau >= self.t[-1]:
            dt = tau - self.t[-1]
            return ChaserState(self.r[-1] + dt * self.r_dot[-1], self.r_dot[-1])
        k = int(np.searchsorted(self.t, tau) - 1)
        h = self.t[k + 1] - self.t[k]
        s = (tau - self.t[k]) / h
        r0, r1 = self.r[k], self.r[k + 1]
        v0, v1 = self.r_dot[k], self.r_dot[k + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        r = h00 * r0 + h10 * h * v0 + h01 * r1 + h11 * h * v1
        v = v0 + (v1 - v0) * s
        return ChaserState(r, v)


def control_at(tau, c1, c2, a_max: float, side: int = -1) -> np.ndarray:
    """Optimal acceleration ``-a_max p / |p|`` at time ``tau``.

    Where ``p`` vanishes the direction is the one-sided limit: from the
    left (``side=-1``, default) that is ``-a_max c1/|c1|``.
    """
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    p = -c1 * tau + c2
    n = float(np.linalg.norm(p))
    scale = max(float(np.linalg.norm(c1)) * max(abs(tau), 1.0), float(np.linalg.norm(c2)), 1e-300)
    if n > SINGULAR_TOL * scale:
        return -a_max * p / n
    n1 = float(np.linalg.norm(c1))
    if n1 == 0.0:
        return np.zeros(3)
    return side * a_max * c1 / n1


def _controls(taus: np.ndarray, c1, c2, a_max: float, side: int) -> np.ndarray:
    p = c2[None, :] - np.outer(taus, c1)
    n = np.linalg.norm(p, axis=1)
    n1 = float(np.linalg.norm(c1))
    scale = max(n1 * max(float(np.max(np.abs(taus))), 1.0), float(np.linalg.norm(c2)), 1e-300)
    u = np.empty_like(p)
    ok = n > SINGULAR_TOL * scale
    u[ok] = -a_max * p[ok] / n[ok, None]
    if not np.all(ok):
        u[~ok] = side * a_max * c1 / n1 if n1 > 0.0 else 0.0
    return u


def hamiltonian_residual(c1, c2, t: float, t_f: float, v_mismatch, a_max: float) -> float:
    """``(|c1 t - c2| - |c1 t_f - c2|) a_max + c1 . v_mismatch``.

    ``v_mismatch`` is target minus chaser velocity at ``t_f``.
    """
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    return float(
        (np.linalg.norm(c1 * t - c2) - np.linalg.norm(c1 * t_f - c2)) * a_max
        + c1 @ np.asarray(v_mismatch, dtype=float)
    )


def transversality_residual(c1, c2, t_f: float, v_mismatch, target_acc, a_max: float) -> float:
    """Free-final-time condition ``H(t_f) = lambda(t_f) . [rho_dot; rho_ddot]``.

    Written as ``1 - a_max |p(t_f)| - c1 . v_mismatch - p(t_f) . rho_ddot(t_f)``;
    unlike ``hamiltonian_residual`` it fixes the overall scale of the costate.
    """
    c1 = np.asarray(c1, dtype=float)
    p_f = np.asarray(c2, dtype=float) - c1 * t_f
    return float(
        1.0
        - a_max * np.linalg.norm(p_f)
        - c1 @ np.asarray(v_mismatch, dtype=float)
        - p_f @ np.asarray(target_acc, dtype=float)
    )


def _closest_approach(c1, c2) -> tuple[float, float]:
    """Time of minimum ``|p|`` and grading width ``|p(tau*)| / |c1|``."""
    k2 = float(c1 @ c1)
    if k2 == 0.0:
        return math.nan, math.inf
    tau_s = float(c1 @ c2) / k2
    p_s = c2 - c1 * tau_s
    return tau_s, float(np.linalg.norm(p_s)) / math.sqrt(k2)


def _graded_nodes(a: float, b: float, center: float, s: float, n: int) -> np.ndarray:
    """``n + 1`` nodes on ``[a, b]`` uniform in ``xi`` for ``tau = center + s sinh(xi)``."""
    xa = math.asinh((a - center) / s)
    xb = math.asinh((b - center) / s)
    nodes = center + s * np.sinh(np.linspace(xa, xb, n + 1))
    nodes[0], nodes[-1] = a, b
    return nodes


def _segments(c1, c2, t: float, t_f: float):
    """Sub-intervals split at the closest approach, with grading parameters."""
    T = t_f - t
    tau_s, s = _closest_approach(c1, c2)
    if not math.isfinite(tau_s):
        return [(t, t_f, None, None)]
    s = max(s, GRADING_FLOOR * T)
    if t < tau_s < t_f:
        return [(t, tau_s, tau_s, s), (tau_s, t_f, tau_s, s)]
    return [(t, t_f, tau_s, s)]


def _graded_panels(xi_range: float, panels: int) -> int:
    """Panel count in the graded coordinate: ``panels`` per 2 units of ``xi``."""
    n = panels * max(1, math.ceil(xi_range / 2.0))
    return n + (n % 2)


def _simpson_weights(n: int) -> np.ndarray:
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def _quadrature(c1, c2, t: float, t_f: float, panels: int):
    """Nodes, combined weights and left/right flags for every segment."""
    if panels % 2:
        panels += 1
    for a, b, center, s in _segments(c1, c2, t, t_f):
        if center is None:
            n = panels
            taus = np.linspace(a, b, n + 1)
            jac = np.full(n + 1, (b - a) / n)
        else:
            xa = math.asinh((a - center) / s)
            xb = math.asinh((b - center) / s)
            n = _graded_panels(xb - xa, panels)
            xi = np.linspace(xa, xb, n + 1)
            taus = center + s * np.sinh(xi)
            taus[0], taus[-1] = a, b
            jac = s * np.cosh(xi) * ((xb - xa) / n)
        # segment left of the switch takes the left limit at its right end
        side = -1 if b == center else 1
        yield taus, _simpson_weights(n) * jac, side


def control_integrals(c1, c2, t: float, t_f: float, a_max: float, panels: int = SIMPSON_PANELS):
    """``(int u dtau, int (t_f - tau) u dtau)`` over ``[t, t_f]``.

    The second integral equals the double integral of ``u``.  Composite
    Simpson with ``panels`` (even) intervals per segment in the graded
    coordinate.
    """
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    I1 = np.zeros(3)
    I2 = np.zeros(3)
    if t_f <= t:
        return I1, I2
    for taus, w, side in _quadrature(c1, c2, t, t_f, panels):
        u = _controls(taus, c1, c2, a_max, side)
        I1 += w @ u
        I2 += (w * (t_f - taus)) @ u
    return I1, I2


def _regularized_c2(c1, c2, T: float) -> np.ndarray:
    """``c2`` with the miss distance of ``p`` raised to the grading floor.

    When ``p`` passes (almost) through zero the switch is sharper than the
    graded grid and the derivative kernel concentrates into a point mass no
    node can see.  Lifting ``p`` off the singularity to the floor width
    gives the sensitivities of a minimally smoothed switch instead.
    """
    k2 = float(c1 @ c1)
    if k2 == 0.0:
        return c2
    k = math.sqrt(k2)
    perp = c2 - c1 * (float(c1 @ c2) / k2)
    miss = float(np.linalg.norm(perp))
    floor = GRADING_FLOOR * T * k
    if miss >= floor:
        return c2
    if miss > 0.0:
        e = perp / miss
    else:
        e = np.cross(c1 / k, np.eye(3)[int(np.argmin(np.abs(c1)))])
        e /= np.linalg.norm(e)
    return c2 + (floor - miss) * e


def _integral_sensitivities(c1, c2, t: float, t_f: float, a_max: float, panels: int):
    """Integrals plus their 3x6 derivatives with respect to ``[c1, c2]``.

    Uses ``du/dp = -a_max (I - p p^T / |p|^2) / |p|`` with ``p = c2 - c1 tau``.
    """
    I1 = np.zeros(3)
    I2 = np.zeros(3)
    J1 = np.zeros((3, 6))
    J2 = np.zeros((3, 6))
    c2_reg = _regularized_c2(c1, c2, t_f - t)
    for taus, w, side in _quadrature(c1, c2, t, t_f, panels):
        u = _controls(taus, c1, c2, a_max, side)
        p = c2_reg[None, :] - np.outer(taus, c1)
        n = np.linalg.norm(p, axis=1)
        good = n > 0.0
        ph = np.zeros_like(p)
        ph[good] = p[good] / n[good, None]
        inv = np.where(good, 1.0 / np.where(good, n, 1.0), 0.0)
        # weighted sums of M_j = -a (I - ph ph^T) / |p| and tau_j M_j
        w2 = w * (t_f - taus)
        for wk, I, J in ((w, I1, J1), (w2, I2, J2)):
            I += wk @ u
            g = wk * inv
            M = -a_max * (np.sum(g) * np.eye(3) - (ph * g[:, None]).T @ ph)
            gt = g * taus
            Mt = -a_max * (np.sum(gt) * np.eye(3) - (ph * gt[:, None]).T @ ph)
            J[:, :3] -= Mt
            J[:, 3:] += M
    return I1, I2, J1, J2


class TargetPredictor:
    """Noise-free grasp-point trajectory of the target, tabulated for the solver.

    The state is propagated on a uniform grid of spacing ``dt`` from time
    ``t0``; position, velocity and acceleration of the grasp point are
    interpolated with cubic Hermite splines.  The table grows on demand.
    """

    def __init__(self, state: td.TargetState, t0: float = 0.0, dt: float = 0.01, horizon: float = 10.0):
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        self.t0 = float(t0)
        self.dt = float(dt)
        self._ys = [state.to_vector()]
        self._extend(horizon)

    @classmethod
    def from_estimate(cls, est, t0: float = 0.0, dt: float = 0.01, horizon: float = 10.0):
        return cls(getattr(est, "x_hat", est), t0, dt, horizon)

    def _extend(self, horizon: float) -> None:
        n_needed = int(math.ceil(horizon / self.dt)) + 1
        while len(self._ys) < n_needed + 1:
            self._ys.append(td.propagate_vector(self._ys[-1], self.dt, max_step=self.dt))
        self._build()

    def _build(self) -> None:
        Y = np.asarray(self._ys)
        pos, vel, acc, jerk = _grasp_table(Y)
        ts = self.t0 + self.dt * np.arange(len(Y))
        self.t_end = ts[-1]
        self._pos = CubicHermiteSpline(ts, pos, vel, axis=0)
        self._vel = CubicHermiteSpline(ts, vel, acc, axis=0)
        self._acc = CubicHermiteSpline(ts, acc, jerk, axis=0)

    def _ensure(self, tau: float) -> None:
        if tau < self.t0 - 1e-12:
            raise ValueError("cannot predict before the reference time")
        if tau > self.t_end:
            self._extend(max(2.0 * (tau - self.t0), tau - self.t0 + 1.0))

    def __call__(self, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Grasp position, velocity and acceleration at time ``tau``."""
        self._ensure(tau)
        return self._pos(tau), self._vel(tau), self._acc(tau)

    def jerk(self, tau: float) -> np.ndarray:
        self._ensure(tau)
        return self._acc(tau, 1)


def _grasp_table(Y: np.ndarray):
    """Grasp-point position, velocity, acceleration and jerk for rows of 22-vectors."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    qv, qw = Y[:, 0:3], Y[:, 3:4]
    w = Y[:, 4:7]
    s1, s2 = Y[:, 13], Y[:, 14]
    s3 = -(s1 + s2) / (1.0 + s1 * s2)
    rv = Y[:, 15:18]
    wx, wy, wz = w.T
    phi = np.stack([s1 * wy * wz, s2 * wx * wz, s3 * wx * wy], axis=1)
    # time derivative of phi along the torque-free flow
    px, py, pz = phi.T
    phi_dot = np.stack(
        [s1 * (py * wz + wy * pz), s2 * (px * wz + wx * pz), s3 * (px * wy + wx * py)], axis=1
    )
    wr = np.cross(w, rv)
    a_b = np.cross(phi, rv) + np.cross(w, wr)
    j_b = np.cross(phi_dot, rv) + np.cross(phi, wr) + np.cross(w, np.cross(phi, rv)) + np.cross(w, a_b)

    def rot(v):
        # A(q) v = v + 2 q_w (q_v x v) + 2 q_v x (q_v x v)
        t = np.cross(qv, v)
        return v + 2.0 * qw * t + 2.0 * np.cross(qv, t)

    return Y[:, 7:10] + rot(rv), Y[:, 10:13] + rot(wr), rot(a_b), rot(j_b)


def _grasp_kinematics(y: np.ndarray):
    """Grasp-point position, velocity, acceleration and jerk from a 22-vector."""
    return tuple(v[0] for v in _grasp_table(y))


def predict_target(est, t_f: float, dt: float, t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Grasp point position and velocity at ``t_f`` by propagating the estimate from ``t``."""
    if t_f < t:
        raise ValueError("t_f precedes the current time")
    x = est.x_hat if hasattr(est, "x_hat") else est
    if t_f > t:
        x = td.propagate(x, t_f - t, max_step=dt)
    return x.grasp_position, x.grasp_velocity


def _as_predictor(target, t: float) -> TargetPredictor:
    if isinstance(target, TargetPredictor):
        return target
    return TargetPredictor.from_estimate(target, t0=t)


def residual_vector(chi, chaser: ChaserState, target, a_max: float, t: float,
                    panels: int = SIMPSON_PANELS, hamiltonian: str = "transversality") -> np.ndarray:
    """The seven stacked conditions whose norm is ``residual``."""
    return _residual_terms(chi, chaser, target, a_max, t, panels, hamiltonian, False)[0]


def residual_jacobian(chi, chaser: ChaserState, target, a_max: float, t: float,
                      panels: int = SIMPSON_PANELS, hamiltonian: str = "transversality"):
    """``(residual_vector, d residual_vector / d chi)`` with an analytic 7x7 Jacobian."""
    return _residual_terms(chi, chaser, target, a_max, t, panels, hamiltonian, True)


def _residual_terms(chi, chaser, target, a_max, t, panels, hamiltonian, with_jac):
    chi = np.asarray(chi, dtype=float)
    c1, c2, t_f = chi[:3], chi[3:6], float(chi[6])
    if t_f <= t:
        raise ValueError("t_f must exceed the current time")
    if hamiltonian not in ("transversality", "printed"):
        raise ValueError(f"unknown hamiltonian condition {hamiltonian!r}")
    pred = _as_predictor(target, t)
    rho_f, rho_dot_f, rho_ddot_f = pred(t_f)
    if with_jac:
        I1, I2, J1, J2 = _integral_sensitivities(c1, c2, t, t_f, a_max, panels)
    else:
        I1, I2 = control_integrals(c1, c2, t, t_f, a_max, panels)
    v_f = chaser.r_dot + I1
    r_f = chaser.r + chaser.r_dot * (t_f - t) + I2
    dv = rho_dot_f - v_f
    if hamiltonian == "transversality":
        h = transversality_residual(c1, c2, t_f, dv, rho_ddot_f, a_max)
    else:
        h = hamiltonian_residual(c1, c2, t, t_f, dv, a_max)
    out = np.empty(7)
    out[:3] = -dv
    out[3:6] = r_f - rho_f
    out[6] = h
    if not with_jac:
        return out, None

    u_f = control_at(t_f, c1, c2, a_max, side=-1)
    J = np.zeros((7, 7))
    J[:3, :6] = J1
    J[:3, 6] = u_f - rho_ddot_f
    J[3:6, :6] = J2
    J[3:6, 6] = -dv
    p_f = c2 - c1 * t_f
    nf = float(np.linalg.norm(p_f))
    ph_f = p_f / nf if nf > 0.0 else np.zeros(3)
    # c1 . v_f contributes J1^T c1
    cJ = J1.T @ c1
    if hamiltonian == "transversality":
        J[6, :3] = a_max * t_f * ph_f - dv + cJ[:3] + t_f * rho_ddot_f
        J[6, 3:6] = -a_max * ph_f + cJ[3:] - rho_ddot_f
        J[6, 6] = a_max * (ph_f @ c1) + c1 @ u_f - p_f @ pred.jerk(t_f)
    else:
        p0 = c2 - c1 * t
        n0 = float(np.linalg.norm(p0))
        ph_0 = p0 / n0 if n0 > 0.0 else np.zeros(3)
        J[6, :3] = a_max * (t_f * ph_f - t * ph_0) + dv - cJ[:3]
        J[6, 3:6] = a_max * (ph_0 - ph_f) - cJ[3:]
        J[6, 6] = a_max * (ph_f @ c1) + c1 @ (rho_ddot_f - u_f)
    return out, J


def residual(chi, chaser: ChaserState, target, a_max: float, t: float,
             panels: int = SIMPSON_PANELS, hamiltonian: str = "transversality") -> float:
    """Norm of the stacked terminal-velocity, terminal-position and Hamiltonian mismatches.

    ``target`` is an ``Estimate`` (or ``TargetState``) propagated from ``t``,
    or a prebuilt ``TargetPredictor``.
    """
    return float(np.linalg.norm(residual_vector(chi, chaser, target, a_max, t, panels, hamiltonian)))


def _starts(chaser: ChaserState, pred: TargetPredictor, a_max: float, t: float):
    d0 = pred(t)[0] - chaser.r
    dist = float(np.linalg.norm(d0))
    dv = pred(t)[1] - chaser.r_dot
    T0 = max(math.sqrt(2.0 * dist / a_max), float(np.linalg.norm(dv)) / a_max, 1e-3)
    starts = []

    def unit(v, fallback):
        n = float(np.linalg.norm(v))
        return v / n if n > 1e-12 else fallback

    base = unit(d0, unit(dv, np.array([1.0, 0.0, 0.0])))
    for scale, mixed in [(1, False), (2, False), (4, False), (1, True), (2, True), (4, True), (1.5, False), (3, False)]:
        T = scale * T0
        rho_f, rho_dot_f, _ = pred(t + T)
        d = rho_f - chaser.r - chaser.r_dot * T
        g = unit(d + 0.5 * T * (rho_dot_f - chaser.r_dot), base) if mixed else unit(d, base)
        # bang-bang guess: accelerate along g, switch half way, |p(t_f)| = 1/a_max
        k = 1.0 / a_max
        c1 = -2.0 * k * g / T
        c2 = -k * g + c1 * t
        starts.append(np.concatenate([c1, c2, [T]]))
    return starts


def solve(
    chaser: ChaserState,
    target,
    a_max: float,
    t: float = 0.0,
    *,
    panels: int = SIMPSON_PANELS,
    hamiltonian: str = "transversality",
    tol: float = 1e-6,
    rendezvous_tol: float = 1e-9,
    warm_start=None,
) -> CostateSolution:
    """Multi-start quasi-Newton search for ``(c1, c2, t_f)`` with zero residual.

    Each start is first driven by Levenberg-Marquardt on the residual
    vector; starts it cannot settle get a BFGS descent on the squared
    residual followed by another polish.  The lowest residual wins, ties
    broken by the earliest ``t_f``.  ``warm_start`` (a previous ``chi``)
    is tried first and returned directly when it converges.

    Raises
    ------
    NoSolution
        If the best residual exceeds ``tol * (1 + |rho(t_f)|)``.
    """
    if a_max <= 0.0:
        raise ValueError("a_max must be positive")
    pred = _as_predictor(target, t)
    rho_t, rho_dot_t, _ = pred(t)
    if (np.linalg.norm(rho_t - chaser.r) < rendezvous_tol
            and np.linalg.norm(rho_dot_t - chaser.r_dot) < rendezvous_tol):
        return CostateSolution(np.zeros(3), np.zeros(3), t + 1e-9, 0.0, t, hamiltonian)

    starts = _starts(chaser, pred, a_max, t)
    # beyond the cap the horizon is held flat, so no search can wander off
    # into ever longer target predictions
    log_cap = math.log(HORIZON_CAP * starts[0][6])

    def unpack(z):
        # horizon is optimized in log space to keep t_f > t
        return np.concatenate([z[:6], [t + math.exp(min(z[6], log_cap))]])

    def terms(z):
        r, J = residual_jacobian(unpack(z), chaser, pred, a_max, t, panels, hamiltonian)
        J[:, 6] *= math.exp(z[6]) if z[6] < log_cap else 0.0
        return r, J

    def vec(z):
        return residual_vector(unpack(z), chaser, pred, a_max, t, panels, hamiltonian)

    def obj(z):
        try:
            r, J = terms(z)
        except (ValueError, FloatingPointError):
            return 1e20, np.zeros(7)
        v = float(r @ r)
        if not math.isfinite(v):
            return 1e20, np.zeros(7)
        return v, 2.0 * J.T @ r

    def lm(z):
        try:
            ls = least_squares(vec, z, jac=lambda z: terms(z)[1], method="lm",
                               xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
        except (ValueError, FloatingPointError):
            return z, obj(z)[0]
        f = obj(ls.x)[0]
        return (ls.x, f) if f <= obj(z)[0] else (z, obj(z)[0])

    accept = (1e-3 * tol) ** 2
    if warm_start is not None:
        w = np.asarray(warm_start, dtype=float)
        if w[6] > t:
            z, f = lm(np.concatenate([w[:6], [math.log(w[6] - t)]]))
            if f < accept:
                chi = unpack(z)
                return CostateSolution(chi[:3].copy(), chi[3:6].copy(), float(chi[6]),
                                       math.sqrt(f), t, hamiltonian)

    best = None
    for s in starts:
        z, f = lm(np.concatenate([s[:6], [math.log(s[6])]]))
        if not f < accept:
            # quasi-Newton descent from the start, then polish again
            z0 = np.concatenate([s[:6], [math.log(s[6])]])
            res = minimize(obj, z0, jac=True, method="BFGS", options={"maxiter": 60, "gtol": 1e-14})
            if math.isfinite(res.fun) and res.fun < f:
                z, f = lm(res.x)
        e = math.sqrt(f)
        chi = unpack(z)
        key = (e, chi[6])
        if best is None or key < best[0]:
            best = (key, chi)
    (e, _), chi = best
    rho_f = pred(chi[6])[0]
    if not e < tol * (1.0 + float(np.linalg.norm(rho_f))):
        raise NoSolution(f"best residual {e:.3e} above tolerance")
    return CostateSolution(chi[:3].copy(), chi[3:6].copy(), float(chi[6]), e, t, hamiltonian)


def rollout(sol: CostateSolution, chaser: ChaserState, a_max: float, dt: float) -> Trajectory:
    """RK4 integration of ``r_ddot = u*(tau)`` from ``sol.t`` to ``sol.t_f``.

    Steps never exceed ``dt``; nodes are graded toward the closest approach
    of ``p`` so rapid direction changes are resolved.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    t0, t_f = sol.t, sol.t_f
    if not np.any(sol.c1) and not np.any(sol.c2):
        return Trajectory(np.array([t0]), chaser.r[None, :].copy(), chaser.r_dot[None, :].copy(),
                          np.zeros((1, 3)), a_max)
    ts = [t0]
    rs = [chaser.r.copy()]
    vs = [chaser.r_dot.copy()]
    us = [control_at(t0, sol.c1, sol.c2, a_max, side=1)]
    r, v = chaser.r.copy(), chaser.r_dot.copy()
    for a, b, center, s in _segments(sol.c1, sol.c2, t0, t_f):
        n = max(int(math.ceil((b - a) / dt)), 1)
        if center is None:
            nodes = np.linspace(a, b, n + 1)
        else:
            xi_range = math.asinh((b - center) / s) - math.asinh((a - center) / s)
            n = max(n, _graded_panels(xi_range, SIMPSON_PANELS))
            nodes = _graded_nodes(a, b, center, s, n)
        side = -1 if b == center else 1
        for k in range(n):
            h = nodes[k + 1] - nodes[k]
            if h <= 0.0:
                continue
            u0, um, u1 = _controls(np.array([nodes[k], nodes[k] + 0.5 * h, nodes[k + 1]]),
                                   sol.c1, sol.c2, a_max, side)
            # RK4 for r_ddot = u(tau)
            r = r + h * v + h * h / 6.0 * (u0 + 2.0 * um)
            v = v + h / 6.0 * (u0 + 4.0 * um + u1)
            ts.append(nodes[k + 1])
            rs.append(r.copy())
            vs.append(v.copy())
            us.append(u1)
    return Trajectory(np.array(ts), np.array(rs), np.array(vs), np.array(us), a_max)


def hamiltonian_along(traj: Trajectory, sol: CostateSolution) -> np.ndarray:
    """``1 + c1.r_dot + p.u`` at every trajectory sample."""
    p = sol.c2[None, :] - np.outer(traj.t, sol.c1)
    return 1.0 + traj.r_dot @ sol.c1 + np.einsum("ij,ij->i", p, traj.u)
