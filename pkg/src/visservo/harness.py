"""
Closed-loop scenario simulator.

One run steps a noise-free truth model at ``run.dt``, takes a vision
measurement at every scan epoch, feeds it through registration, fault
detection and the adaptive filter, and once the parameter covariance has
converged hands the estimate to the rendezvous planner.  Every epoch
produces one row of ``EPOCH_COLUMNS``; ``export`` writes the rows as CSV
plus a JSON summary.

Randomness comes from one seed split into fixed per-purpose streams, so a
config and seed fully determine the log.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from visservo import estimator as es
from visservo import guidance as gd
from visservo import icp
from visservo import targetdyn as td
from visservo.config import ScenarioConfig, parse_config
from visservo.rigidmotion import (
    canonical,
    from_small_vec,
    quat_error,
    quat_product,
    rotation_angle,
    rotation_matrix,
)

_STREAMS = ("init", "sample", "noise", "outlier", "occlusion", "pose")

_XYZ = ("x", "y", "z")
_STATE_FIELDS = (
    [f"q_{a}" for a in ("x", "y", "z", "w")]
    + [f"omega_{a}" for a in _XYZ]
    + [f"rho_o_{a}" for a in _XYZ]
    + [f"rho_o_dot_{a}" for a in _XYZ]
    + ["sigma_1", "sigma_2"]
    + [f"varrho_{a}" for a in _XYZ]
    + [f"mu_{a}" for a in ("x", "y", "z", "w")]
)
_P_BLOCKS = ("attitude", "rate", "position", "velocity", "sigma", "varrho", "mu")
_P_SLICES = (td.SL_Q, td.SL_W, td.SL_RHO, td.SL_VEL, td.SL_SIGMA, td.SL_VARRHO, td.SL_MU)

EPOCH_COLUMNS: tuple[str, ...] = tuple(
    ["epoch", "t", "gamma", "gamma_icp", "fault", "icp_iterations", "fit_error", "cloud_points"]
    + [f"true_{f}" for f in _STATE_FIELDS]
    + [f"est_{f}" for f in _STATE_FIELDS]
    + ["est_sigma_3", "constraint_residual"]
    + [f"P_{b}" for b in _P_BLOCKS]
    + [f"z_{i}" for i in range(6)]
    + ["innovation_norm", "R_trace", "ogm_condition", "converged"]
    + ["position_error", "attitude_error", "pose_error"]
    + [f"chaser_r_{a}" for a in _XYZ]
    + [f"chaser_r_dot_{a}" for a in _XYZ]
    + ["planned_t_f", "guidance_residual"]
)


@dataclass
class RunLog:
    """Per-epoch rows in ``EPOCH_COLUMNS`` order plus a summary mapping."""

    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    columns: tuple = EPOCH_COLUMNS

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)


# ---------------------------------------------------------------- geometry


def _face(origin, u, v, spacing, rng):
    # one jittered sample per grid cell: a regular lattice gives point-to-point
    # ICP spurious minima at whole-cell offsets
    origin, u, v = (np.asarray(a, float) for a in (origin, u, v))
    nu = max(1, math.ceil(np.linalg.norm(u) / spacing))
    nv = max(1, math.ceil(np.linalg.norm(v) / spacing))
    a = (np.arange(nu)[:, None] + rng.random((nu, nv))) / nu
    b = (np.arange(nv)[None, :] + rng.random((nu, nv))) / nv
    return origin + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v


def _box(center, size, spacing, rng):
    lo = np.asarray(center, float) - 0.5 * np.array(size)
    ex, ey, ez = np.diag(np.asarray(size, float))
    faces = [
        _face(lo, ey, ez, spacing, rng), _face(lo + ex, ey, ez, spacing, rng),
        _face(lo, ex, ez, spacing, rng), _face(lo + ey, ex, ez, spacing, rng),
        _face(lo, ex, ey, spacing, rng), _face(lo + ez, ex, ey, spacing, rng),
    ]
    return np.vstack(faces)


def synthetic_model(spacing: float = 0.02, seed: int = 0) -> icp.SurfaceModel:
    """Box-shaped bus with an offset solar panel and an antenna mast, in the grapple frame.

    The grapple frame sits on the centre of the bus top face (``z = 0``);
    the appendages break every symmetry of the box so the registration
    has a unique answer.  Surfaces are sampled with one jittered point per
    ``spacing``-sized cell; ``seed`` fixes the jitter.
    """
    rng = np.random.default_rng(seed)
    bus = _box((0.0, 0.0, -0.3), (1.0, 0.8, 0.6), spacing, rng)
    panel = _box((0.95, 0.15, -0.2), (0.9, 0.4, 0.02), spacing, rng)
    mast = _box((-0.3, -0.25, 0.2), (0.04, 0.04, 0.4), spacing, rng)
    return icp.SurfaceModel(np.vstack([bus, panel, mast]))


def load_model(cfg: ScenarioConfig) -> icp.SurfaceModel:
    if cfg.cloud.model_file:
        return icp.SurfaceModel.from_file(cfg.cloud.model_file)
    return synthetic_model(cfg.cloud.model_spacing)


# ---------------------------------------------------------------- sensors


def active_faults(cfg: ScenarioConfig, t: float):
    """Faults whose half-open window ``[start, end)`` contains ``t``."""
    return [f for f in cfg.faults if f.start <= t < f.end]


def noise_factor(cfg: ScenarioConfig, t: float) -> float:
    ch = cfg.cloud.noise_change
    return ch.factor if ch is not None and t >= ch.time else 1.0


def _frustum_samples(rng, n: int, fr) -> np.ndarray:
    # uniform in volume: depth density grows with z^2
    u = rng.random(n)
    z = (fr.near**3 + u * (fr.far**3 - fr.near**3)) ** (1.0 / 3.0)
    half = math.tan(math.radians(fr.half_fov_deg))
    xy = (rng.random((n, 2)) * 2.0 - 1.0) * (half * z)[:, None]
    return np.column_stack([xy, z])


def synthesize_cloud(
    truth: td.TargetState,
    model: icp.SurfaceModel,
    cfg: ScenarioConfig,
    rngs: dict,
    t: float = 0.0,
) -> icp.PointCloud:
    """Sampled model points placed at the true grapple pose, with noise and faults.

    Camera-frame points are ``A(eta) d + rho`` for model points ``d`` and
    the true grapple pose ``(eta, rho)``, so registration maps them back
    with the inverse transform.
    """
    faults = active_faults(cfg, t)
    if any(f.kind == "blackout" for f in faults):
        return icp.PointCloud(np.zeros((0, 3)), t)
    m = min(cfg.cloud.points_per_scan, len(model))
    idx = rngs["sample"].choice(len(model), size=m, replace=False)
    A = rotation_matrix(truth.grasp_attitude)
    pts = model.points[idx] @ A.T + truth.grasp_position
    sigma = cfg.cloud.noise_sigma * noise_factor(cfg, t)
    pts = pts + sigma * rngs["noise"].standard_normal(pts.shape)
    for f in faults:
        if f.kind == "occlusion-fraction" and len(pts):
            rel = pts - pts.mean(axis=0)
            ang = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2.0 * math.pi)
            start = rngs["occlusion"].random() * 2.0 * math.pi
            hidden = np.mod(ang - start, 2.0 * math.pi) < f.fraction * 2.0 * math.pi
            if f.fraction >= 1.0:
                hidden[:] = True
            pts = pts[~hidden]
        elif f.kind == "outlier-burst" and len(pts):
            k = int(round(f.fraction * len(pts)))
            if k:
                which = rngs["outlier"].choice(len(pts), size=k, replace=False)
                pts = pts.copy()
                pts[which] = _frustum_samples(rngs["outlier"], k, cfg.cloud.frustum)
    return icp.PointCloud(pts, t)


def pose_sensor(truth: td.TargetState, cfg: ScenarioConfig, rngs: dict, t: float = 0.0) -> icp.PoseMeasurement:
    """Direct noisy grapple pose, bypassing the point cloud."""
    k = noise_factor(cfg, t)
    rng = rngs["pose"]
    rho = truth.grasp_position + cfg.cloud.pose_position_sigma * k * rng.standard_normal(3)
    dn = from_small_vec(cfg.cloud.pose_attitude_sigma * k * rng.standard_normal(3))
    eta = quat_product(dn, truth.grasp_attitude)
    gamma = 0 if any(f.kind == "blackout" for f in active_faults(cfg, t)) else 1
    return icp.PoseMeasurement(rho, eta, math.nan, 0, gamma)


# ---------------------------------------------------------------- setup


def make_rngs(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


def initial_truth(cfg: ScenarioConfig) -> td.TargetState:
    s = cfg.initial_state
    sigma = td.sigma_from_inertia(*cfg.inertia).as_array()
    x = td.TargetState(
        q=canonical(np.array(s.q)),
        omega=np.array(s.omega, float),
        rho_o=np.array(s.rho_o, float),
        rho_o_dot=np.array(s.rho_o_dot, float),
        sigma=sigma,
        varrho=np.array(s.varrho, float),
        mu=canonical(np.array(s.mu)),
    )
    x.validate()
    return x


SIGMA_INIT_BOUND = 1.0 - 1e-3


def initial_estimate(truth: td.TargetState, P0: np.ndarray, scale: float, rng) -> td.TargetState:
    """Truth perturbed by a draw from ``N(0, P0)`` scaled by ``scale``; sigma kept inside the box."""
    dx = scale * (np.linalg.cholesky(P0) @ rng.standard_normal(td.N_ERR))
    x = td.boxplus(truth, dx)
    sigma = np.clip(x.sigma, -SIGMA_INIT_BOUND, SIGMA_INIT_BOUND)
    return td.TargetState(x.q, x.omega, x.rho_o, x.rho_o_dot, sigma, x.varrho, x.mu)


def _state_row(x: td.TargetState):
    return list(x.to_vector())


# ---------------------------------------------------------------- run loop


@dataclass
class _Plan:
    sol: gd.CostateSolution
    traj: gd.Trajectory
    predictor: gd.TargetPredictor


def _alpha_threshold(filt) -> float:
    _, H = es.measurement_model(filt.estimate)
    S = H @ filt.estimate.P @ H.T + filt.noise.R_hat
    return 3.0 * math.sqrt(np.trace(S))


def run(cfg: ScenarioConfig, model: icp.SurfaceModel | None = None) -> RunLog:
    """Simulate one scenario; deterministic for a given config."""
    rngs = make_rngs(cfg.run.seed)
    ec, gc = cfg.estimator, cfg.guidance
    truth = initial_truth(cfg)
    P0 = es.initial_covariance(ec.P0_scales)
    x0 = initial_estimate(truth, P0, ec.init_error_scale, rngs["init"])
    noise = es.NoiseModel(Qc=cfg.Qc_matrix(), R_hat=cfg.R0_matrix(), w=ec.w)
    filt = es.AdaptiveFilter(
        es.Estimate(x0, P0),
        noise,
        converge_threshold=ec.converge_threshold,
        projection=ec.projection,
        adapt=ec.adapt,
        max_step=cfg.run.dt,
    )
    if cfg.cloud.sensor == "cloud" and model is None:
        model = load_model(cfg)

    period = cfg.scan_period
    chaser = gd.ChaserState(np.array(gc.chaser_r, float), np.array(gc.chaser_r_dot, float))
    plan: _Plan | None = None
    log = RunLog()
    t1 = t1_epoch = None
    solves = failures = 0
    capture: dict | None = None
    sigma_max = 0.0
    constraint_max = 0.0
    violations = 0
    gamma0 = 0

    for k in range(1, cfg.n_epochs + 1):
        t = k * period
        truth = td.propagate(truth, period, max_step=cfg.run.dt)
        filt.predict(period)
        prior = filt.estimate
        fault = bool(active_faults(cfg, t))

        n_pts = 0
        if cfg.cloud.sensor == "cloud":
            cloud = synthesize_cloud(truth, model, cfg, rngs, t)
            n_pts = len(cloud)
            eta0, rho0 = icp.predict_initial_pose(prior)
            meas = icp.register(cloud, model, eta0, rho0, cfg.eps_threshold, ec.n_max)
        else:
            meas = pose_sensor(truth, cfg, rngs, t)

        z_pred = es.predicted_measurement(prior.x_hat)
        if meas.gamma == 1:
            z = es.pose_to_measurement(prior.x_hat, meas.rho_bar, meas.eta_bar)
            nu = z - z_pred
            alpha_th = ec.alpha_th if ec.alpha_th is not None else _alpha_threshold(filt)
            gamma = icp.fault_detect(meas, nu, alpha_th, ec.L, cfg.eps_threshold)
        else:
            z = np.full(6, math.nan)
            nu = np.full(6, math.nan)
            gamma = 0
        info = filt.update(z if gamma else z_pred, gamma)
        gamma = info.gamma
        gamma0 += gamma == 0

        est = filt.estimate
        if t1 is None and filt.is_converged:
            t1, t1_epoch = t, k

        # guidance
        chaser = _chaser_at(plan, chaser, t, period)
        if gc.enabled and t1 is not None and capture is None:
            due = (k - t1_epoch) % gc.replan_period == 0
            if due and (plan is None or plan.sol.t_f - t > gc.freeze_horizon):
                solves += 1
                try:
                    pred = gd.TargetPredictor.from_estimate(est, t0=t, dt=gc.rollout_dt)
                    warm = None if plan is None else plan.sol.chi
                    sol = gd.solve(chaser, pred, gc.a_max, t, hamiltonian=gc.hamiltonian, warm_start=warm)
                    plan = _Plan(sol, gd.rollout(sol, chaser, gc.a_max, gc.rollout_dt), pred)
                except gd.NoSolution:
                    failures += 1

        sx = est.x_hat.sigma
        s3 = td.third_sigma(sx[0], sx[1])
        cres = td.gamma_residual(sx[0], sx[1], s3)
        smax = max(abs(sx[0]), abs(sx[1]), abs(s3))
        sigma_max = max(sigma_max, smax)
        constraint_max = max(constraint_max, abs(cres))
        violations += (smax >= 1.0) or abs(cres) > 1e-12

        pos_err = float(np.linalg.norm(est.x_hat.grasp_position - truth.grasp_position))
        att_err = rotation_angle(quat_error(truth.grasp_attitude, est.x_hat.grasp_attitude))
        row = [k, t, gamma, meas.gamma, int(fault), meas.iterations, meas.fit_error, n_pts]
        row += _state_row(truth) + _state_row(est.x_hat) + [s3, cres]
        row += [float(np.trace(est.P[s, s])) for s in _P_SLICES]
        row += list(z)
        row += [float(np.linalg.norm(nu)), float(np.trace(filt.noise.R_hat)),
                filt.tracker.condition_number(), int(filt.is_converged)]
        row += [pos_err, att_err, math.hypot(pos_err, ec.L * att_err)]
        row += list(chaser.r) + list(chaser.r_dot)
        row += [plan.sol.t_f, plan.sol.residual] if plan else [math.nan, math.nan]
        log.rows.append(row)

        if plan is not None and capture is None and plan.sol.t_f <= t + period:
            capture = _capture(plan, truth, t)
            break

    log.summary = {
        "seed": cfg.run.seed,
        "epochs": len(log.rows),
        "t1": t1,
        "t1_epoch": t1_epoch,
        "gamma0_epochs": int(gamma0),
        "projections": filt.projections,
        "sigma_max_abs": sigma_max,
        "constraint_residual_max": constraint_max,
        "sigma_violations": int(violations),
        "guidance_solves": solves,
        "guidance_failures": failures,
        "final_pose_error": log.rows[-1][EPOCH_COLUMNS.index("pose_error")] if log.rows else None,
    }
    log.summary.update(capture or {
        "capture_time": None,
        "planned_t_f": plan.sol.t_f if plan else None,
        "terminal_position_error": None,
        "terminal_velocity_error": None,
        "true_terminal_position_error": None,
        "true_terminal_velocity_error": None,
    })
    log.summary["status"] = _status(cfg, t1, plan, capture)
    return log


def _chaser_at(plan, chaser: gd.ChaserState, t: float, period: float) -> gd.ChaserState:
    if plan is None:
        # coast until the first plan exists
        return gd.ChaserState(chaser.r + chaser.r_dot * period, chaser.r_dot.copy())
    return plan.traj.state_at(t)


def _capture(plan: _Plan, truth: td.TargetState, t: float) -> dict:
    t_f = plan.sol.t_f
    r_f, v_f = plan.traj.r[-1], plan.traj.r_dot[-1]
    rho_f, rho_dot_f, _ = plan.predictor(t_f)
    true_f = td.propagate(truth, t_f - t) if t_f > t else truth
    return {
        "capture_time": t_f,
        "planned_t_f": t_f,
        "terminal_position_error": float(np.linalg.norm(r_f - rho_f)),
        "terminal_velocity_error": float(np.linalg.norm(v_f - rho_dot_f)),
        "true_terminal_position_error": float(np.linalg.norm(r_f - true_f.grasp_position)),
        "true_terminal_velocity_error": float(np.linalg.norm(v_f - true_f.grasp_velocity)),
    }


def _status(cfg, t1, plan, capture) -> str:
    if capture is not None:
        return "captured"
    if t1 is None:
        return "not-converged"
    if cfg.guidance.enabled and plan is None:
        return "no-solution"
    return "converged"


# ---------------------------------------------------------------- export


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _json_safe(v):
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    return v


def export(log: RunLog, path) -> tuple[Path, Path]:
    """Write ``epochs.csv`` and ``summary.json`` into directory ``path``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "epochs.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(log.columns)
            for row in log.rows:
                w.writerow([_fmt(v) for v in row])
        json_path = out / "summary.json"
        json_path.write_text(json.dumps(_json_safe(log.summary), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write run output to {out}: {exc}") from exc
    return csv_path, json_path


def read_epochs(path) -> RunLog:
    """Read an ``epochs.csv`` back into a ``RunLog`` (values as floats)."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            rows = [[float(v) for v in r] for r in reader]
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    for i, r in enumerate(rows, 2):
        if len(r) != len(header):
            raise ValueError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
    return RunLog(rows, {}, header)


def read_summary(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- Monte Carlo


def _random_inertia(rng, lo: float, hi: float) -> tuple[float, float, float]:
    while True:
        I = rng.uniform(lo, hi, 3)
        a, b, c = I
        if a + b > 1.001 * c and b + c > 1.001 * a and c + a > 1.001 * b:
            return tuple(float(v) for v in I)


def trial_config(cfg: ScenarioConfig, i: int) -> ScenarioConfig:
    """Config for Monte-Carlo trial ``i``: own seed, optionally random inertia and tumble."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.run.seed, i, 1]))
    data = cfg.model_dump()
    data["run"]["seed"] = cfg.run.seed + i
    mc = cfg.monte_carlo
    if mc.random_inertia:
        data["inertia"] = _random_inertia(rng, *mc.inertia_range)
    if mc.max_rate > 0.0:
        data["initial_state"]["omega"] = tuple(rng.uniform(-mc.max_rate, mc.max_rate, 3))
        q = rng.standard_normal(4)
        data["initial_state"]["q"] = tuple(canonical(q))
    return parse_config(data)


def _trial(args):
    cfg, i, out = args
    c = trial_config(cfg, i)
    log = run(c)
    if out is not None:
        export(log, Path(out) / f"trial_{i:04d}")
    return i, log.summary


def monte_carlo(cfg: ScenarioConfig, trials: int, out=None, jobs: int = 1) -> dict:
    """Run ``trials`` independent scenarios; per-trial outputs go to ``out/trial_NNNN``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    work = [(cfg, i, out) for i in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trial, work))
    else:
        results = [_trial(w) for w in work]
    results.sort(key=lambda r: r[0])
    summaries = [s for _, s in results]
    agg = {
        "trials": trials,
        "sigma_violations": sum(s["sigma_violations"] for s in summaries),
        "sigma_max_abs": max(s["sigma_max_abs"] for s in summaries),
        "constraint_residual_max": max(s["constraint_residual_max"] for s in summaries),
        "converged_trials": sum(s["t1"] is not None for s in summaries),
        "captured_trials": sum(s["status"] == "captured" for s in summaries),
        "per_trial": summaries,
    }
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "mc_summary.json").write_text(json.dumps(_json_safe(agg), indent=2, sort_keys=True) + "\n")
    return agg
