"""Scenario configuration: JSON schema, validation and loading."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from visservo.estimator import DEFAULT_P0_SCALES
from visservo.targetdyn import sigma_from_inertia


class ConfigError(ValueError):
    """Invalid or unreadable scenario configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]


class InitialState(_Strict):
    q: Quat = (0.0, 0.0, 0.0, 1.0)
    omega: Vec3 = (0.0, 0.0, 0.0)
    rho_o: Vec3 = (0.0, 0.0, 3.0)
    rho_o_dot: Vec3 = (0.0, 0.0, 0.0)
    varrho: Vec3 = (0.0, 0.0, 0.0)
    mu: Quat = (0.0, 0.0, 0.0, 1.0)

    @field_validator("q", "mu")
    @classmethod
    def _nonzero(cls, v):
        if not math.isfinite(sum(x * x for x in v)) or sum(x * x for x in v) == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        return v


class NoiseChange(_Strict):
    time: float = Field(gt=0.0)
    factor: float = Field(gt=0.0)


class Frustum(_Strict):
    near: float = Field(default=0.5, gt=0.0)
    far: float = Field(default=6.0, gt=0.0)
    half_fov_deg: float = Field(default=30.0, gt=0.0, lt=90.0)

    @model_validator(mode="after")
    def _order(self):
        if self.far <= self.near:
            raise ValueError("frustum far plane must lie beyond the near plane")
        return self


class CloudConfig(_Strict):
    sensor: Literal["cloud", "pose"] = "cloud"
    points_per_scan: int = Field(default=200, ge=3)
    noise_sigma: float = Field(default=0.002, ge=0.0)
    scan_rate: float = Field(default=10.0, gt=0.0)
    # pose sensor: per-axis position noise [m] and quaternion vector-part noise
    pose_position_sigma: float = Field(default=0.002, ge=0.0)
    pose_attitude_sigma: float = Field(default=0.002, ge=0.0)
    noise_change: NoiseChange | None = None
    frustum: Frustum = Frustum()
    model_file: str | None = None
    model_spacing: float = Field(default=0.02, gt=0.0)


class Fault(_Strict):
    start: float = Field(ge=0.0)
    end: float = Field(gt=0.0)
    kind: Literal["blackout", "outlier-burst", "occlusion-fraction"]
    fraction: float = Field(default=0.3, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _order(self):
        if self.end <= self.start:
            raise ValueError("fault window must end after it starts")
        return self


class EstimatorConfig(_Strict):
    w: int = Field(default=100, ge=1)
    Qc: tuple[float, ...] = (1e-8,) * 3 + (1e-8,) * 3
    R0: tuple[float, ...] = (1e-5,) * 3 + (1e-5,) * 3
    P0_scales: dict[str, float] = Field(default_factory=dict)
    init_error_scale: float = Field(default=1.0, ge=0.0)
    # None: (3 * cloud noise sigma)^2
    eps_th: float | None = Field(default=None, gt=0.0)
    n_max: int = Field(default=30, ge=1)
    # None: 3 * sqrt(trace S) of the current innovation covariance
    alpha_th: float | None = Field(default=None, gt=0.0)
    L: float = Field(default=1.0, gt=0.0)
    converge_threshold: float = Field(default=0.01, gt=0.0)
    projection: Literal["boundary", "printed"] = "boundary"
    adapt: bool = True

    @field_validator("Qc", "R0")
    @classmethod
    def _diag6(cls, v):
        if len(v) != 6 or any(not math.isfinite(x) or x < 0.0 for x in v):
            raise ValueError("expected 6 finite non-negative diagonal entries")
        return v

    @field_validator("P0_scales")
    @classmethod
    def _blocks(cls, v):
        unknown = set(v) - set(DEFAULT_P0_SCALES)
        if unknown:
            raise ValueError(f"unknown covariance blocks {sorted(unknown)}")
        if any(not math.isfinite(x) or x <= 0.0 for x in v.values()):
            raise ValueError("covariance scales must be positive")
        return v


class GuidanceConfig(_Strict):
    enabled: bool = True
    a_max: float = Field(default=0.2, gt=0.0)
    replan_period: int = Field(default=10, ge=1)
    chaser_r: Vec3 = (0.0, 0.0, 0.0)
    chaser_r_dot: Vec3 = (0.0, 0.0, 0.0)
    hamiltonian: Literal["transversality", "printed"] = "transversality"
    rollout_dt: float = Field(default=0.01, gt=0.0)
    # no replanning once less than this much time remains before t_f
    freeze_horizon: float = Field(default=1.0, ge=0.0)


class RunConfig(_Strict):
    duration: float = Field(default=60.0, gt=0.0)
    dt: float = Field(default=0.05, gt=0.0)
    seed: int = Field(default=0, ge=0)


class MonteCarloConfig(_Strict):
    random_inertia: bool = True
    inertia_range: tuple[float, float] = (1.0, 10.0)
    max_rate: float = Field(default=0.3, ge=0.0)


class ScenarioConfig(_Strict):
    inertia: Vec3 = (4.0, 6.0, 5.0)
    initial_state: InitialState = InitialState()
    cloud: CloudConfig = CloudConfig()
    faults: tuple[Fault, ...] = ()
    estimator: EstimatorConfig = EstimatorConfig()
    guidance: GuidanceConfig = GuidanceConfig()
    run: RunConfig = RunConfig()
    monte_carlo: MonteCarloConfig = MonteCarloConfig()

    @field_validator("inertia")
    @classmethod
    def _inertia(cls, v):
        sigma_from_inertia(*v)
        return v

    @model_validator(mode="after")
    def _consistency(self):
        ratio = 1.0 / (self.cloud.scan_rate * self.run.dt)
        if ratio < 1.0 - 1e-9 or abs(ratio - round(ratio)) > 1e-6:
            raise ValueError("scan period must be a whole multiple of run.dt")
        for f in self.faults:
            if f.end > self.run.duration + 1e-12:
                raise ValueError(f"fault window [{f.start}, {f.end}] exceeds the run duration")
            if self.cloud.sensor == "pose" and f.kind != "blackout":
                raise ValueError(f"fault kind {f.kind!r} requires the cloud sensor")
        lo, hi = self.monte_carlo.inertia_range
        if not 0.0 < lo < hi:
            raise ValueError("inertia_range must satisfy 0 < low < high")
        return self

    @property
    def scan_period(self) -> float:
        return 1.0 / self.cloud.scan_rate

    @property
    def n_epochs(self) -> int:
        return int(math.floor(self.run.duration * self.cloud.scan_rate + 1e-9))

    @property
    def eps_threshold(self) -> float:
        if self.estimator.eps_th is not None:
            return self.estimator.eps_th
        return max((3.0 * self.cloud.noise_sigma) ** 2, 1e-12)

    def Qc_matrix(self) -> np.ndarray:
        return np.diag(self.estimator.Qc)

    def R0_matrix(self) -> np.ndarray:
        return np.diag(self.estimator.R0)


def parse_config(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    """Read and validate a JSON scenario file; relative model paths resolve beside it."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    model_file = data.get("cloud", {}).get("model_file") if isinstance(data.get("cloud"), dict) else None
    if model_file:
        mf = Path(model_file)
        if not mf.is_absolute():
            mf = path.parent / mf
        if not mf.is_file():
            raise ConfigError(f"{path}: model file {mf} not found")
        data["cloud"]["model_file"] = str(mf)
    return parse_config(data)
