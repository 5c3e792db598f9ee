"""Property-based checks of the invariants each module promises."""

import math

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visservo import estimator as es
from visservo import guidance as gd
from visservo import icp
from visservo import targetdyn as td
from visservo.rigidmotion import (
    canonical,
    quat_error,
    quat_product,
    quat_step,
    rotation_angle,
    rotation_matrix,
)

finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)


@st.composite
def quats(draw):
    v = draw(arrays(np.float64, 4, elements=finite))
    assume(np.linalg.norm(v) > 0.1)
    return canonical(v)


@st.composite
def inertias(draw):
    I = np.array(draw(st.lists(st.floats(0.1, 10.0), min_size=3, max_size=3)))
    a, b, c = I
    assume(a + b > c * (1 + 1e-6) and b + c > a * (1 + 1e-6) and a + c > b * (1 + 1e-6))
    return I


@st.composite
def states(draw, omega_scale=1.0):
    s = td.sigma_from_inertia(*draw(inertias()))
    return td.TargetState(
        q=draw(quats()),
        omega=draw(vec3) * omega_scale,
        rho_o=draw(vec3) + np.array([0.0, 0.0, 3.0]),
        rho_o_dot=0.1 * draw(vec3),
        sigma=s.as_array(),
        varrho=0.5 * draw(vec3),
        mu=draw(quats()),
    )


# ---------------------------------------------------------------- rotations


@given(quats(), quats())
def test_product_is_unit(p, q):
    assert abs(np.linalg.norm(quat_product(p, q)) - 1.0) < 1e-12
    assert abs(np.linalg.norm(quat_error(p, q)) - 1.0) < 1e-12


@given(quats(), quats())
def test_product_composes_rotations(p, q):
    # right-to-left composition for this product convention
    assert np.allclose(rotation_matrix(quat_product(p, q)), rotation_matrix(q) @ rotation_matrix(p), atol=1e-10)


@given(quats())
def test_rotation_matrix_orthonormal(q):
    A = rotation_matrix(q)
    assert np.allclose(A.T @ A, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(A) - 1.0) < 1e-12


@given(quats(), vec3, st.floats(1e-3, 1.0))
def test_step_angle(q, w, dt):
    q1 = quat_step(q, w, dt)
    assert abs(np.linalg.norm(q1) - 1.0) < 1e-12
    angle = np.linalg.norm(w) * dt
    assume(angle < math.pi)
    assert abs(rotation_angle(quat_error(q1, q)) - angle) < 1e-10


# ---------------------------------------------------------------- target dynamics


@given(inertias())
def test_inertia_constraint(I):
    s = td.sigma_from_inertia(*I)
    assert abs(td.gamma_residual(s.s1, s.s2, s.s3)) < 1e-12
    assert max(abs(s.s1), abs(s.s2), abs(s.s3)) < 1.0
    assert np.allclose(np.diag(td.b_matrix(s.s1, s.s2)), I.sum() / I, rtol=1e-12)


@settings(max_examples=40)
@given(states(), st.floats(0.01, 3.0))
def test_propagate_invariants(x, T):
    y = td.propagate(x, T)
    assert abs(np.linalg.norm(y.q) - 1.0) < 1e-12
    assert np.array_equal(y.to_vector()[13:22], x.to_vector()[13:22])


# ---------------------------------------------------------------- estimator


def _filter_inputs(x, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((20, 20)) * 0.05
    P = A @ A.T + np.diag(np.r_[np.full(12, 1e-4), 0.5, 0.5, np.full(6, 1e-4)])
    z = es.predicted_measurement(x) + rng.standard_normal(6) * 0.05
    noise = es.NoiseModel(Qc=np.eye(6) * 1e-6, R_hat=np.eye(6) * 1e-4)
    return es.Estimate(x, es.symmetrize(P)), z, noise


@settings(max_examples=60)
@given(states(), st.integers(0, 2**32 - 1))
def test_fault_gate_bitwise(x, seed):
    est, z, noise = _filter_inputs(x, seed)
    out = es.update(est, z, 0, noise)
    assert np.array_equal(out.x_hat.to_vector(), est.x_hat.to_vector())
    assert np.array_equal(out.P, est.P)


@settings(max_examples=100)
@given(states(), st.integers(0, 2**32 - 1), st.sampled_from(["boundary", "printed"]))
def test_update_respects_sigma_box(x, seed, projection):
    est, z, noise = _filter_inputs(x, seed)
    info = es.kalman_update(est, z, 1, noise, projection=projection)
    s1, s2 = info.estimate.x_hat.sigma
    s3 = td.third_sigma(s1, s2)
    if projection == "boundary":
        assert max(abs(s1), abs(s2)) <= 1.0 - es.SIGMA_MARGIN + 1e-15
    assert max(abs(s1), abs(s2), abs(s3)) < 1.0
    assert abs(td.gamma_residual(s1, s2, s3)) < 1e-12
    P = info.estimate.P
    assert np.allclose(P, P.T, atol=1e-10)
    assert np.linalg.eigvalsh(P).min() >= -1e-9


@settings(max_examples=30)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_recursive_sigma_matches_batch(w, seed):
    rng = np.random.default_rng(seed)
    noise = es.NoiseModel(Qc=np.eye(6), R_hat=np.eye(6), w=w)
    H = rng.standard_normal((6, 20))
    for k in range(1, 3 * w + 5):
        noise = es.adapt_R(noise, rng.standard_normal(6) * rng.uniform(0.01, 10.0), H, np.eye(20) * 1e-3)
        if k >= w:
            assert np.abs(noise.Sigma - es.batch_sigma(noise.window)).max() < 1e-12


# ---------------------------------------------------------------- registration


@given(st.integers(3, 40), st.integers(0, 2**32 - 1))
def test_horn_fit_unit_and_eps(m, seed):
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((m, 3))
    D = rng.standard_normal((m, 3))
    try:
        eta, rho, eps = icp.horn_fit(C, D)
    except icp.AmbiguousFit:
        assume(False)
    assert abs(np.linalg.norm(eta) - 1.0) < 1e-12
    r = C @ rotation_matrix(eta).T + rho - D
    assert abs(eps - np.mean(np.sum(r * r, axis=1))) < 1e-12


# ---------------------------------------------------------------- guidance


@given(vec3, vec3, st.floats(-10.0, 10.0), st.floats(0.01, 10.0))
def test_control_norm(c1, c2, tau, a_max):
    u = gd.control_at(tau, c1, c2, a_max)
    if np.any(c1) or np.any(c2):
        assert abs(np.linalg.norm(u) - a_max) < 1e-12 * max(1.0, a_max)


@settings(max_examples=10)
@given(arrays(np.float64, 3, elements=st.floats(-1.0, 1.0)).filter(lambda v: np.linalg.norm(v) > 0.1),
       st.floats(0.2, 5.0), st.floats(0.1, 2.0))
def test_collinear_reduces_to_1d(direction, d, a_max):
    k = direction / np.linalg.norm(direction)
    x = td.TargetState(np.array([0, 0, 0, 1.0]), np.zeros(3), d * k, np.zeros(3), np.zeros(2), np.zeros(3),
                       np.array([0, 0, 0, 1.0]))
    chaser = gd.ChaserState(np.zeros(3), np.zeros(3))
    sol = gd.solve(chaser, x, a_max)
    assert abs(sol.t_f - 2.0 * math.sqrt(d / a_max)) < 1e-3 * 2.0 * math.sqrt(d / a_max)
    traj = gd.rollout(sol, chaser, a_max, 0.01)
    assert np.max(np.linalg.norm(traj.u, axis=1)) - a_max <= 1e-9
    assert np.linalg.norm(traj.r[-1] - d * k) <= 1e-3
    assert np.linalg.norm(traj.r_dot[-1]) <= 1e-3
