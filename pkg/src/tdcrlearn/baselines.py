"""Zero-net-extension projection and Jacobian pseudo-inverse controllers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .plant import LAYOUT, N_MOTORS, PlantParams, pcc_forward, rotation_vector

MODES = ("feedback", "feedforward", "hybrid")


def _centering_matrix() -> np.ndarray:
    C = np.eye(N_MOTORS)
    for sec in LAYOUT.sections:
        for i in sec:
            for j in sec:
                C[i, j] -= 1.0 / len(sec)
    return C


CENTER = _centering_matrix()


def project_command(a, u_max: float) -> Tensor:
    """Per-section mean removal then clipping to [-u_max, u_max], as a differentiable op."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    flat = a.ndim == 1
    x = ops.reshape(a, (1, N_MOTORS)) if flat else a
    u = ops.clip(ops.matmul(x, CENTER), -u_max, u_max)
    return ops.reshape(u, (N_MOTORS,)) if flat else u


def project_command_np(a: np.ndarray, u_max: float) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=np.float64) @ CENTER, -u_max, u_max)


def nominal_pose(q: np.ndarray, params: PlantParams) -> np.ndarray:
    """Quasi-static 6-vector (p, phi) of the nominal PCC model; lag, backlash and sag ignored."""
    p, R = pcc_forward(q, params.r, params.L)
    return np.concatenate([p, rotation_vector(R)], axis=-1)


@dataclass
class JacobianEstimate:
    J: np.ndarray
    q: np.ndarray


def numerical_jacobian(q: np.ndarray, params: PlantParams, h: float = 1e-6) -> JacobianEstimate:
    """Central differences of the nominal tip map wrt each tendon displacement."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    q = np.asarray(q, dtype=np.float64)
    steps = np.eye(N_MOTORS) * h
    # one batched call: rows 0..8 are +h, rows 9..17 are -h
    poses = nominal_pose(np.concatenate([q + steps, q - steps]), params)
    J = (poses[:N_MOTORS] - poses[N_MOTORS:]).T / (2.0 * h)
    return JacobianEstimate(J, q.copy())


def damped_pinv(J: np.ndarray, lam: float) -> np.ndarray:
    if lam <= 0:
        raise ValueError("damping must be positive")
    J = np.asarray(J, dtype=np.float64)
    A = J @ J.T + lam * lam * np.eye(J.shape[0])
    return np.linalg.solve(A, J).T


@dataclass(frozen=True)
class BaselineConfig:
    mode: str = "hybrid"
    kp_pos: float = 2.0
    kp_rot: float = 1.0
    dls_lambda: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown baseline mode {self.mode!r}")
        if self.dls_lambda <= 0:
            raise ValueError("dls_lambda must be positive")
        if self.kp_pos < 0 or self.kp_rot < 0:
            raise ValueError("gains must be non-negative")

    @property
    def K(self) -> np.ndarray:
        return np.diag([self.kp_pos] * 3 + [self.kp_rot] * 3)


def control_law(cfg: BaselineConfig, J_pinv: np.ndarray, e: np.ndarray, r_dot: np.ndarray,
                K: np.ndarray | None = None) -> np.ndarray:
    """Raw command a; feedback J+Ke, feedforward J+r', hybrid J+(r' + Ke)."""
    K = cfg.K if K is None else K
    e, r_dot = np.asarray(e, dtype=np.float64), np.asarray(r_dot, dtype=np.float64)
    if cfg.mode == "feedback":
        return J_pinv @ (K @ e)
    if cfg.mode == "feedforward":
        return J_pinv @ r_dot
    return J_pinv @ (r_dot + K @ e)


def pose_error(target: np.ndarray, pose: np.ndarray) -> np.ndarray:
    return np.asarray(target, dtype=np.float64) - np.asarray(pose, dtype=np.float64)


@dataclass
class BaselineController:
    """Re-linearizes the nominal model at the measured motor lengths every step."""

    cfg: BaselineConfig
    params: PlantParams
    jacobian_step: float = 1e-6
    last: JacobianEstimate | None = field(default=None, init=False)

    def act(self, o: np.ndarray, ref: np.ndarray, ref_next: np.ndarray) -> np.ndarray:
        o = np.asarray(o, dtype=np.float64)
        self.last = numerical_jacobian(o[:N_MOTORS], self.params, self.jacobian_step)
        J_pinv = damped_pinv(self.last.J, self.cfg.dls_lambda)
        r_dot = (np.asarray(ref_next) - np.asarray(ref)) / self.params.dt
        a = control_law(self.cfg, J_pinv, pose_error(ref, o[18:24]), r_dot)
        return project_command_np(a, self.params.u_max)
