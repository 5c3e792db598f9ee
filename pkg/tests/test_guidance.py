import math
import time

import numpy as np
import pytest
from helpers import central_jacobian, random_quat

from visservo import estimator as es
from visservo import guidance as gd
from visservo import targetdyn as td
from visservo.rigidmotion import IDENTITY, rotation_matrix

REST = gd.ChaserState(np.zeros(3), np.zeros(3))
TF_1D = 2.0 * math.sqrt(2.0)


def _target(rho_o=(2.0, 0.0, 0.0), rho_o_dot=(0.0, 0.0, 0.0), omega=(0.0, 0.0, 0.0), varrho=(0.0, 0.0, 0.0),
            q=IDENTITY, sigma=(0.0, 0.0)):
    f = lambda v: np.array(v, dtype=float)  # noqa: E731
    return td.TargetState(f(q), f(omega), f(rho_o), f(rho_o_dot), f(sigma), f(varrho), IDENTITY.copy())


def _rodrigues(axis, angle):
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


class TestControl:
    def test_constant_direction(self):
        for tau in (0.0, 1.0, 7.5):
            assert np.array_equal(gd.control_at(tau, np.zeros(3), [1.0, 0, 0], 0.7), [-0.7, 0, 0])

    def test_norm_is_a_max(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = rng.uniform(0.1, 5.0)
            u = gd.control_at(rng.uniform(-5, 5), rng.standard_normal(3), rng.standard_normal(3), a)
            assert abs(np.linalg.norm(u) - a) < 1e-12

    def test_bang_bang_switch(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = rng.standard_normal(3)
            k /= np.linalg.norm(k)
            c1 = rng.uniform(0.5, 2.0) * k * rng.choice([-1, 1])
            c2 = rng.uniform(-3, 3) * k
            tau_s = c2 @ c1 / (c1 @ c1)
            before = gd.control_at(tau_s - 1e-6, c1, c2, 1.0)
            after = gd.control_at(tau_s + 1e-6, c1, c2, 1.0)
            assert np.allclose(before, -after, atol=1e-12)
            assert np.allclose(np.abs(before @ k), 1.0)

    def test_singular_point_uses_left_limit(self):
        c1 = np.array([0.0, 0.0, 2.0])
        c2 = np.array([0.0, 0.0, 2.0])
        left = gd.control_at(1.0 - 1e-6, c1, c2, 1.0)
        assert np.allclose(gd.control_at(1.0, c1, c2, 1.0), left)
        assert np.allclose(gd.control_at(1.0, c1, c2, 1.0, side=1), -left)

    def test_zero_costate(self):
        assert np.array_equal(gd.control_at(0.3, np.zeros(3), np.zeros(3), 1.0), np.zeros(3))


class TestHamiltonianResidual:
    def test_zero_c1(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = gd.hamiltonian_residual(np.zeros(3), rng.standard_normal(3), 0.3, 4.0, rng.standard_normal(3), 1.3)
            assert v == 0.0

    def test_matched_norms(self):
        # p(t) and p(t_f) mirror each other about the closest approach
        c1 = np.array([1.0, 0.0, 0.0])
        c2 = np.array([1.0, 0.5, 0.0])
        assert abs(gd.hamiltonian_residual(c1, c2, 0.0, 2.0, np.zeros(3), 1.0)) < 1e-15

    def test_analytic_1d_solution(self):
        c1, c2 = np.array([-2.0 / TF_1D, 0, 0]), np.array([-1.0, 0, 0])
        assert abs(gd.hamiltonian_residual(c1, c2, 0.0, TF_1D, np.zeros(3), 1.0)) < 1e-9
        assert abs(gd.transversality_residual(c1, c2, TF_1D, np.zeros(3), np.zeros(3), 1.0)) < 1e-9


class TestPredictTarget:
    def test_still_target(self):
        x = _target(rho_o=(1.0, 2.0, 3.0), varrho=(0.3, 0.0, 0.1), q=random_quat(np.random.default_rng(3)))
        pos, vel = gd.predict_target(x, 5.0, 0.01)
        assert np.allclose(pos, x.grasp_position, atol=1e-15)
        assert np.allclose(vel, 0.0, atol=1e-15)

    def test_pure_translation(self):
        x = _target(rho_o_dot=(0.1, -0.2, 0.05), omega=(0.2, 0.1, -0.3), sigma=(0.3, -0.2))
        _, vel = gd.predict_target(x, 4.0, 0.01)
        assert np.allclose(vel, [0.1, -0.2, 0.05], atol=1e-15)

    def test_spinning_sphere_circle(self):
        rng = np.random.default_rng(4)
        q0 = random_quat(rng)
        omega = np.array([0.3, -0.4, 0.5])
        x = _target(rho_o=(0.1, 0.2, 3.0), rho_o_dot=(0.01, 0.0, -0.02), omega=omega, varrho=(0.4, -0.2, 0.3), q=q0)
        period = 2 * math.pi / np.linalg.norm(omega)
        A0 = rotation_matrix(q0)
        for t_f in np.linspace(0.0, period, 9)[1:]:
            R = _rodrigues(omega, np.linalg.norm(omega) * t_f)
            expected_pos = x.rho_o + x.rho_o_dot * t_f + A0 @ R @ x.varrho
            expected_vel = x.rho_o_dot + A0 @ R @ np.cross(omega, x.varrho)
            pos, vel = gd.predict_target(x, t_f, 0.01)
            assert np.linalg.norm(pos - expected_pos) < 1e-8
            assert np.linalg.norm(vel - expected_vel) < 1e-8

    def test_accepts_estimate_and_start_time(self):
        x = _target(rho_o_dot=(0.1, 0.0, 0.0))
        pos, _ = gd.predict_target(es.Estimate(x, np.eye(20)), 3.0, 0.01, t=1.0)
        assert np.allclose(pos, [2.2, 0, 0])

    def test_rejects_past(self):
        with pytest.raises(ValueError):
            gd.predict_target(_target(), 1.0, 0.01, t=2.0)

    def test_predictor_matches_predict_target(self):
        x = _target(omega=(0.2, 0.5, -0.1), sigma=(0.4, -0.3), varrho=(0.2, 0.1, 0.3), q=random_quat(np.random.default_rng(5)))
        pred = gd.TargetPredictor(x, t0=0.0, dt=0.01)
        for t_f in (0.37, 2.0, 6.3, 14.0):
            pos, vel, _ = pred(t_f)
            ref_pos, ref_vel = gd.predict_target(x, t_f, 0.01)
            assert np.allclose(pos, ref_pos, atol=1e-9)
            assert np.allclose(vel, ref_vel, atol=1e-9)

    def test_predictor_acceleration(self):
        x = _target(omega=(0.2, 0.5, -0.1), sigma=(0.4, -0.3), varrho=(0.2, 0.1, 0.3))
        pred = gd.TargetPredictor(x, dt=0.01)
        h = 1e-4
        fd = (pred(2.0 + h)[1] - pred(2.0 - h)[1]) / (2 * h)
        assert np.allclose(pred(2.0)[2], fd, atol=1e-6)


class TestResidual:
    def test_analytic_1d(self):
        chi = np.array([-2.0 / TF_1D, 0, 0, -1.0, 0, 0, TF_1D])
        assert gd.residual(chi, REST, _target(), 1.0, 0.0) < 1e-6
        assert gd.residual(chi, REST, _target(), 1.0, 0.0, hamiltonian="printed") < 1e-6

    def test_infeasible_short_horizon(self):
        chi = np.array([-1.0, 0, 0, -0.5, 0, 0, 1e-3])
        assert gd.residual(chi, REST, _target(), 1.0, 0.0) > 1.9

    def test_panel_doubling(self):
        x = _target(rho_o=(1.0, 0.5, 2.0), rho_o_dot=(0.05, -0.02, 0.01))
        sol = gd.solve(REST, x, 0.5)
        e1 = gd.residual(sol.chi, REST, x, 0.5, 0.0, panels=200)
        e2 = gd.residual(sol.chi, REST, x, 0.5, 0.0, panels=400)
        assert abs(e1 - e2) < 1e-8

    def test_rejects_past_horizon(self):
        with pytest.raises(ValueError):
            gd.residual(np.r_[np.ones(6), 0.5], REST, _target(), 1.0, 1.0)
        with pytest.raises(ValueError):
            gd.residual(np.r_[np.ones(6), 2.0], REST, _target(), 1.0, 0.0, hamiltonian="other")

    @pytest.mark.parametrize("hamiltonian", ["transversality", "printed"])
    def test_jacobian_matches_finite_differences(self, hamiltonian):
        rng = np.random.default_rng(6)
        x = _target(rho_o=(0.5, 0.3, 2.0), omega=(0.1, 0.3, -0.2), varrho=(0.3, 0.2, 0.1), sigma=(0.2, -0.1))
        chaser = gd.ChaserState(rng.standard_normal(3) * 0.1, rng.standard_normal(3) * 0.05)
        pred = gd.TargetPredictor(x, t0=0.5, dt=0.005)
        for _ in range(5):
            chi = np.r_[rng.standard_normal(6), rng.uniform(1.5, 4.0)]
            r, J = gd.residual_jacobian(chi, chaser, pred, 0.8, 0.5, hamiltonian=hamiltonian)
            fd = central_jacobian(lambda d: gd.residual_vector(chi + d, chaser, pred, 0.8, 0.5,
                                                               hamiltonian=hamiltonian), 7)
            assert np.abs(J - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())
            assert np.array_equal(r, gd.residual_vector(chi, chaser, pred, 0.8, 0.5, hamiltonian=hamiltonian))


def _check_plan(sol, chaser, target, a_max, tol=1e-4, dt=0.01):
    traj = gd.rollout(sol, chaser, a_max, dt)
    pos, vel = gd.predict_target(target, sol.t_f, 0.01, t=sol.t)
    assert np.linalg.norm(traj.r[-1] - pos) < tol
    assert np.linalg.norm(traj.r_dot[-1] - vel) < tol
    assert np.max(np.linalg.norm(traj.u, axis=1)) - a_max <= 1e-9
    H = gd.hamiltonian_along(traj, sol)
    # H can vanish on the optimum, so measure spread against its terms
    p = sol.c2[None, :] - np.outer(traj.t, sol.c1)
    scale = max(1.0, np.abs(traj.r_dot @ sol.c1).max(), np.abs(np.einsum("ij,ij->i", p, traj.u)).max())
    assert np.ptp(H) <= 1e-4 * scale
    return traj


class TestSolve:
    def test_1d_rest_to_rest(self):
        sol = gd.solve(REST, _target(), 1.0)
        assert abs(sol.t_f - TF_1D) < 1e-3 * TF_1D
        tau_s = sol.c2 @ sol.c1 / (sol.c1 @ sol.c1)
        assert abs(tau_s - TF_1D / 2) < 1e-3 * TF_1D
        traj = _check_plan(sol, REST, _target(), 1.0)
        k = int(np.argmax(np.linalg.norm(traj.r_dot, axis=1)))
        assert abs(np.linalg.norm(traj.r_dot[k]) - math.sqrt(2.0)) < 1e-4
        assert abs(traj.t[k] - TF_1D / 2) < 0.01

    def test_1d_scales_with_distance_and_limit(self):
        for d, a in [(0.5, 0.2), (3.0, 2.0)]:
            sol = gd.solve(REST, _target(rho_o=(0.0, d, 0.0)), a)
            assert sol.t_f == pytest.approx(2 * math.sqrt(d / a), rel=1e-3)

    def test_already_at_rendezvous(self):
        x = _target(rho_o=(0.0, 0.0, 0.0))
        sol = gd.solve(REST, x, 1.0, t=3.0)
        assert 3.0 < sol.t_f < 3.0 + 1e-6
        traj = gd.rollout(sol, REST, 1.0, 0.01)
        assert len(traj) == 1

    def test_drifting_target(self):
        x = _target(rho_o=(1.0, -0.5, 2.0), rho_o_dot=(0.05, 0.02, -0.03))
        chaser = gd.ChaserState(np.zeros(3), np.array([0.0, 0.1, 0.0]))
        sol = gd.solve(chaser, x, 0.5)
        assert sol.residual < 1e-6 * (1 + np.linalg.norm(gd.predict_target(x, sol.t_f, 0.01)[0]))
        _check_plan(sol, chaser, x, 0.5)

    def test_spinning_sphere(self):
        x = _target(rho_o=(0.2, 0.1, 2.5), omega=(0.0, 0.3, 0.2), varrho=(0.4, 0.0, 0.2), q=random_quat(np.random.default_rng(7)))
        sol = gd.solve(REST, x, 0.5, t=1.0)
        assert sol.t_f > 1.0
        _check_plan(sol, REST, x, 0.5)

    def test_tumbling_target_from_nonzero_time(self):
        x = _target(rho_o=(0.3, -0.2, 2.0), omega=(0.1, 0.15, -0.1), varrho=(0.3, 0.2, 0.25), sigma=(-0.33, 0.4))
        chaser = gd.ChaserState(np.array([0.0, 0.1, 0.0]), np.zeros(3))
        pred = gd.TargetPredictor(x, t0=2.0, dt=0.01)
        sol = gd.solve(chaser, pred, 0.2, t=2.0)
        traj = gd.rollout(sol, chaser, 0.2, 0.01)
        pos, vel, _ = pred(sol.t_f)
        assert np.linalg.norm(traj.r[-1] - pos) < 1e-3
        assert np.linalg.norm(traj.r_dot[-1] - vel) < 1e-3

    def test_warm_start_reproduces(self):
        x = _target(rho_o=(1.0, 0.5, 2.0), rho_o_dot=(0.05, -0.02, 0.01))
        sol = gd.solve(REST, x, 0.5)
        t0 = time.perf_counter()
        again = gd.solve(REST, x, 0.5, warm_start=sol.chi)
        assert time.perf_counter() - t0 < 2.0
        assert np.allclose(again.chi, sol.chi, atol=1e-6)

    def test_unreachable_tolerance_raises(self):
        with pytest.raises(gd.NoSolution):
            gd.solve(REST, _target(rho_o=(1.0, 0.5, 2.0), rho_o_dot=(0.05, -0.02, 0.01)), 0.5, tol=1e-300)

    def test_rejects_bad_limit(self):
        with pytest.raises(ValueError):
            gd.solve(REST, _target(), 0.0)


class TestRollout:
    def test_final_state_matches_integrals(self):
        x = _target(rho_o=(1.0, 0.5, 2.0), rho_o_dot=(0.05, -0.02, 0.01))
        chaser = gd.ChaserState(np.array([0.1, 0.0, 0.0]), np.array([0.0, 0.05, 0.0]))
        sol = gd.solve(chaser, x, 0.5)
        traj = gd.rollout(sol, chaser, 0.5, 0.01)
        I1, I2 = gd.control_integrals(sol.c1, sol.c2, 0.0, sol.t_f, 0.5)
        T = sol.t_f
        assert np.linalg.norm(traj.r[-1] - (chaser.r + chaser.r_dot * T + I2)) < 1e-6
        assert np.linalg.norm(traj.r_dot[-1] - (chaser.r_dot + I1)) < 1e-6

    def test_samples_and_state_at(self):
        sol = gd.solve(REST, _target(), 1.0)
        traj = gd.rollout(sol, REST, 1.0, 0.01)
        assert np.all(np.diff(traj.t) > 0)
        assert traj.t[0] == 0.0 and traj.t[-1] == pytest.approx(sol.t_f, abs=1e-12)
        assert len(traj.samples) == len(traj)
        # first half of the 1D plan is constant acceleration from rest
        s = traj.state_at(0.7)
        assert s.r == pytest.approx([0.245, 0, 0], abs=1e-6)
        assert s.r_dot == pytest.approx([0.7, 0, 0], abs=1e-6)
        end = traj.state_at(sol.t_f + 1.0)
        assert np.allclose(end.r, traj.r[-1] + traj.r_dot[-1])

    def test_rejects_bad_step(self):
        sol = gd.solve(REST, _target(), 1.0)
        with pytest.raises(ValueError):
            gd.rollout(sol, REST, 1.0, 0.0)

    def test_chaser_state_validation(self):
        with pytest.raises(ValueError):
            gd.ChaserState(np.zeros(2), np.zeros(3))
        with pytest.raises(ValueError):
            gd.ChaserState(np.zeros(3), np.array([np.nan, 0, 0]))
