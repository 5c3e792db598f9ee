"""
Point-to-point ICP registration against a point-sampled surface model.

Registration works in the cloud-to-model direction: it looks for the rigid
transform ``(eta, rho)`` with ``A(eta) c_i + rho ≈ d_i`` where ``c_i`` are
camera-frame cloud points and ``d_i`` their closest model points.  The
filter, however, wants the pose of the grapple frame in the camera frame,
which is the inverse transform.  ``register`` therefore takes its seed and
reports its result in the camera-frame (model-to-cloud) convention and
inverts internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from visservo.rigidmotion import canonical, quat_inverse, rotation_matrix


class AmbiguousFit(ValueError):
    """The absolute-orientation problem has no unique rotation."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    epoch: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


class SurfaceModel:
    """Model points in the grapple frame with a k-d tree for closest-point queries.

    Ties between equidistant model points resolve to the lowest index.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("surface model must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("surface model contains non-finite coordinates")
        self.points = pts
        self.points.setflags(write=False)
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the closest model point to each query."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        k = min(4, len(self.points))
        dist, idx = self._tree.query(queries, k=k)
        if k == 1:
            return idx.astype(int), dist
        d0 = dist[:, :1]
        tie = dist <= d0 * (1.0 + 1e-12) + 1e-15
        # lowest index among the tied candidates
        cand = np.where(tie, idx, np.iinfo(np.int64).max)
        best = cand.min(axis=1)
        full = tie.all(axis=1) & (k < len(self.points))
        for i in np.flatnonzero(full):
            near = self._tree.query_ball_point(queries[i], d0[i, 0] * (1.0 + 1e-12) + 1e-15)
            best[i] = min(near)
        return best.astype(int), d0[:, 0]

    @classmethod
    def from_file(cls, path) -> "SurfaceModel":
        return cls(read_points(path))


@dataclass(frozen=True)
class PoseMeasurement:
    """Registration outcome: grapple pose in the camera frame plus health data."""

    rho_bar: np.ndarray
    eta_bar: np.ndarray
    fit_error: float
    iterations: int
    gamma: int
    history: tuple = field(default=(), compare=False)


def read_points(path) -> np.ndarray:
    """Read whitespace-separated xyz lines; ``#`` starts a comment line."""
    path = Path(path)
    rows = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read point file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        rows.append([float(v) for v in parts])
    return np.array(rows, dtype=float).reshape(-1, 3)


def write_points(path, points, header: str | None = None) -> None:
    path = Path(path)
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in np.asarray(points, float).reshape(-1, 3)]
    path.write_text("\n".join(lines) + "\n")


def predict_initial_pose(est) -> tuple[np.ndarray, np.ndarray]:
    """Coarse grapple pose ``(mu ⊗ q, rho_o + A(q) varrho)`` from a predicted estimate."""
    x = est.x_hat
    return x.grasp_attitude, x.grasp_position


def correspondences(cloud, model: SurfaceModel, eta: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Closest model point to each transformed cloud point ``A(eta) c + rho``."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float).reshape(-1, 3)
    if model is None or len(model) == 0:
        raise ValueError("empty surface model")
    moved = pts @ rotation_matrix(eta).T + rho
    idx, _ = model.nearest(moved)
    return model.points[idx]


def horn_fit(C, D, ambiguity_tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray, float]:
    """Closed-form least-squares rigid fit ``A(eta) c + rho ≈ d``.

    Returns ``(eta, rho, eps)`` where ``eps`` is the mean squared post-fit
    distance.  The rotation is the dominant eigenvector of the symmetric
    4x4 matrix built from the cross-covariance of the two sets.

    Raises
    ------
    AmbiguousFit
        If the two largest eigenvalues coincide (e.g. collinear points).
    """
    C = np.asarray(C, dtype=float).reshape(-1, 3)
    D = np.asarray(D, dtype=float).reshape(-1, 3)
    if len(C) != len(D):
        raise ValueError("point sets must have the same size")
    if len(C) < 3:
        raise AmbiguousFit("at least three point pairs are required")
    m = len(C)
    c_o = C.mean(axis=0)
    d_o = D.mean(axis=0)
    N = C.T @ D / m - np.outer(c_o, d_o)
    tr = np.trace(N)
    n = np.array([N[1, 2] - N[2, 1], N[2, 0] - N[0, 2], N[0, 1] - N[1, 0]])
    M = np.empty((4, 4))
    M[0, 0] = tr
    M[0, 1:] = n
    M[1:, 0] = n
    M[1:, 1:] = N + N.T - tr * np.eye(3)
    lam, V = np.linalg.eigh(M)
    scale = max(abs(lam[-1]), abs(lam[0]), 1e-300)
    if lam[-1] - lam[-2] <= ambiguity_tol * scale:
        raise AmbiguousFit("two largest eigenvalues coincide; rotation is not unique")
    v = V[:, -1]
    # eigenvector is scalar-first
    eta = canonical(np.array([v[1], v[2], v[3], v[0]]))
    A = rotation_matrix(eta)
    rho = d_o - A @ c_o
    r = C @ A.T + rho - D
    eps = float(np.einsum("ij,ij->", r, r) / m)
    return eta, rho, eps


def register(
    cloud,
    model: SurfaceModel,
    eta0: np.ndarray,
    rho0: np.ndarray,
    eps_th: float,
    n_max: int = 30,
) -> PoseMeasurement:
    """Iterate correspondence search and closed-form fit from a predicted pose.

    ``eta0, rho0`` and the returned ``eta_bar, rho_bar`` are the grapple
    pose in the camera frame.  ``gamma`` is 1 when the fit error drops below
    ``eps_th`` within ``n_max`` iterations; any failure along the way
    (empty cloud, degenerate geometry) yields ``gamma = 0`` and the last
    available pose.
    """
    if eps_th <= 0.0 or n_max < 1:
        raise ValueError("eps_th must be positive and n_max >= 1")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float).reshape(-1, 3)
    # cloud -> model transform is the inverse of the camera-frame pose
    eta = quat_inverse(eta0)
    rho = -rotation_matrix(eta) @ np.asarray(rho0, float)
    history: list[float] = []
    eps = math.inf
    gamma = 0
    n = 0
    if len(pts) >= 3:
        try:
            for n in range(1, n_max + 1):
                D = correspondences(pts, model, eta, rho)
                eta, rho, eps = horn_fit(pts, D)
                history.append(eps)
                if eps < eps_th:
                    gamma = 1
                    break
        except ValueError:
            gamma = 0
    eta_bar = quat_inverse(eta)
    rho_bar = -rotation_matrix(eta_bar) @ rho
    return PoseMeasurement(rho_bar, eta_bar, eps, n, gamma, tuple(history))


def weighted_pose_norm(alpha: np.ndarray, L: float) -> float:
    """``|W alpha|`` with ``W = diag(I, L I)``: attitude error scaled to length."""
    alpha = np.asarray(alpha, dtype=float)
    return float(math.sqrt(alpha[:3] @ alpha[:3] + (L * L) * (alpha[3:] @ alpha[3:])))


def fault_detect(
    meas: PoseMeasurement,
    innovation: np.ndarray,
    alpha_th: float,
    L: float,
    eps_th: float,
) -> int:
    """Health flag: 0 when registration failed, or when the fit error and the
    weighted innovation both exceed their thresholds."""
    if L <= 0.0:
        raise ValueError("characteristic length must be positive")
    if meas.gamma == 0:
        return 0
    if meas.fit_error >= eps_th and weighted_pose_norm(innovation, L) >= alpha_th:
        return 0
    return 1
