"""Synthetic three-section tendon-driven continuum robot.

Ground truth for data collection and closed-loop evaluation: first-order
motor lag, play-operator backlash, compliance lag, slow creep, constant
curvature sections and a payload droop term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

N_MOTORS = 9
OBS_DIM = 24
POSE_SLICE = slice(18, 24)
POS_SLICE = slice(18, 21)
ROT_SLICE = slice(21, 24)
SERIES_THRESHOLD = 1e-6


@dataclass(frozen=True)
class ActuationLayout:
    sections: tuple[tuple[int, int, int], ...] = ((0, 1, 2), (3, 4, 5), (6, 7, 8))
    tendon_angles: tuple[float, float, float] = (0.0, 2 * math.pi / 3, 4 * math.pi / 3)

    def __post_init__(self):
        flat = sorted(i for s in self.sections for i in s)
        if flat != list(range(N_MOTORS)):
            raise ValueError("section index sets must partition the nine motors")


LAYOUT = ActuationLayout()


@dataclass(frozen=True)
class PlantParams:
    L: tuple[float, float, float] = (0.256, 0.256, 0.256)
    r: float = 0.02
    tau_m: float = 0.08
    tau_c: float = 0.3
    backlash: float = 0.002
    creep: float = 0.01
    payload: float = 0.0
    sag_gain: float = 0.05
    noise_std: float | tuple[float, float, float, float] = 1e-4
    dt: float = 0.02
    u_max: float = 0.02

    def __post_init__(self):
        if min(self.tau_m, self.tau_c, self.dt) <= 0:
            raise ValueError("time constants and dt must be positive")
        if self.backlash < 0 or self.payload < 0 or self.creep < 0:
            raise ValueError("backlash, payload and creep must be non-negative")
        if min(self.L) <= 0 or self.r <= 0:
            raise ValueError("geometry must be positive")

    @property
    def total_length(self) -> float:
        return float(sum(self.L))

    def noise_vector(self) -> np.ndarray:
        s = self.noise_std
        groups = (s, s, s, s) if np.isscalar(s) else tuple(s)
        return np.concatenate([np.full(9, groups[0]), np.full(9, groups[1]),
                               np.full(3, groups[2]), np.full(3, groups[3])])


@dataclass
class PlantState:
    l: np.ndarray = field(default_factory=lambda: np.zeros(N_MOTORS))
    v: np.ndarray = field(default_factory=lambda: np.zeros(N_MOTORS))
    xi: np.ndarray = field(default_factory=lambda: np.zeros(N_MOTORS))
    q: np.ndarray = field(default_factory=lambda: np.zeros(N_MOTORS))
    c: np.ndarray = field(default_factory=lambda: np.zeros(N_MOTORS))

    def copy(self) -> "PlantState":
        return PlantState(self.l.copy(), self.v.copy(), self.xi.copy(), self.q.copy(), self.c.copy())

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.l, self.v, self.xi, self.q, self.c])


@dataclass(frozen=True)
class Pose:
    p: np.ndarray
    phi: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.phi])


# -- dynamics --------------------------------------------------------------------

def backlash_step(xi: np.ndarray, l: np.ndarray, b: float) -> np.ndarray:
    """Play operator: output moves only when the input leaves the band of half-width b."""
    return np.clip(xi, l - b, l + b)


def plant_step(state: PlantState, u: np.ndarray, params: PlantParams) -> PlantState:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (N_MOTORS,) or not np.isfinite(u).all():
        raise ValueError("command must be a finite 9-vector")
    dt = params.dt
    v = state.v + (dt / params.tau_m) * (u - state.v)
    l = state.l + v * dt
    xi = backlash_step(state.xi, l, params.backlash)
    q = state.q + (dt / params.tau_c) * (xi - state.q)
    c = state.c + dt * params.creep * (q - state.c)
    return PlantState(l, v, xi, q, c)


# -- kinematics --------------------------------------------------------------------

def section_curvature(q_section, r: float, L: float) -> tuple[float, float]:
    """Curvature and bending-plane angle from three tendon displacements at 0/120/240 deg."""
    q1, q2, q3 = (float(x) for x in q_section)
    kx, ky = _curvature_components(q1, q2, q3, r, L)
    return math.hypot(kx, ky), math.atan2(ky, kx)


def _curvature_components(q1, q2, q3, r, L):
    kx = -(2.0 * q1 - q2 - q3) / (3.0 * r * L)
    ky = (q3 - q2) / (math.sqrt(3.0) * r * L)
    return kx, ky


def tendon_displacements(kappa: float, phi_b: float, r: float, L: float) -> np.ndarray:
    """Inverse of :func:`section_curvature` (zero-mean displacements)."""
    return np.array([-r * L * kappa * math.cos(phi_b - psi) for psi in LAYOUT.tendon_angles])


def _arc_factors(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(1 - cos t)/t^2 and sin t / t, with a series below the small-angle threshold."""
    theta = np.asarray(theta, dtype=np.float64)
    small = np.abs(theta) < SERIES_THRESHOLD
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    f1 = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / (t * t))
    f2 = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    return f1, f2


def _section_rt(kx, ky, L):
    """Batched rotation (…,3,3) and translation (…,3) of one constant-curvature arc."""
    kx, ky = np.asarray(kx, dtype=np.float64), np.asarray(ky, dtype=np.float64)
    theta = np.hypot(kx, ky) * L
    f1, f2 = _arc_factors(theta)
    a = L * L * f1
    bx, by = kx * L * f2, ky * L * f2
    R = np.empty(kx.shape + (3, 3))
    R[..., 0, 0] = 1.0 - kx * kx * a
    R[..., 0, 1] = -kx * ky * a
    R[..., 0, 2] = bx
    R[..., 1, 0] = -kx * ky * a
    R[..., 1, 1] = 1.0 - ky * ky * a
    R[..., 1, 2] = by
    R[..., 2, 0] = -bx
    R[..., 2, 1] = -by
    R[..., 2, 2] = 1.0 - theta * theta * f1
    p = np.stack([kx * a, ky * a, L * f2], axis=-1)
    return R, p


def section_transform(kappa: float, phi_b: float, L: float) -> np.ndarray:
    """4x4 transform of an arc: bend by kappa*L in the plane rotated phi_b about z."""
    if L <= 0:
        raise ValueError("section length must be positive")
    R, p = _section_rt(kappa * math.cos(phi_b), kappa * math.sin(phi_b), L)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def pcc_forward(q_eff: np.ndarray, r: float, L) -> tuple[np.ndarray, np.ndarray]:
    """Batched quasi-static tip map: q_eff (…,9) -> position (…,3), rotation (…,3,3)."""
    q_eff = np.asarray(q_eff, dtype=np.float64)
    batch = q_eff.shape[:-1]
    R_tot = np.broadcast_to(np.eye(3), batch + (3, 3)).copy()
    p_tot = np.zeros(batch + (3,))
    for k, idx in enumerate(LAYOUT.sections):
        q1, q2, q3 = (q_eff[..., i] for i in idx)
        kx, ky = _curvature_components(q1, q2, q3, r, L[k])
        R, p = _section_rt(kx, ky, L[k])
        p_tot = p_tot + np.einsum("...ij,...j->...i", R_tot, p)
        R_tot = np.einsum("...ij,...jk->...ik", R_tot, R)
    return p_tot, R_tot


def apply_sag(p: np.ndarray, params: PlantParams) -> np.ndarray:
    if params.payload == 0.0:
        return p
    p = np.array(p, dtype=np.float64)
    reach = np.hypot(p[..., 0], p[..., 1])
    p[..., 2] -= params.payload * params.sag_gain * reach / params.total_length
    return p


def rotation_vector(R: np.ndarray) -> np.ndarray:
    """Matrix log of SO(3) as a rotation vector (batched over leading dims)."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    cos = np.clip((np.trace(Rf, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    ang = np.arccos(cos)
    w = np.stack([Rf[:, 2, 1] - Rf[:, 1, 2], Rf[:, 0, 2] - Rf[:, 2, 0], Rf[:, 1, 0] - Rf[:, 0, 1]], axis=1)
    small = ang < 1e-8
    sin = np.where(small, 1.0, np.sin(ang))
    out = np.where(small[:, None], 0.5 * w, (ang / (2.0 * sin))[:, None] * w)
    for n in np.flatnonzero(ang > math.pi - 1e-6):
        # axis from the symmetric part: R + I ~ 2 k k^T near pi
        S = 0.5 * (Rf[n] + np.eye(3))
        j = int(np.argmax(np.diag(S)))
        k = S[:, j] / math.sqrt(max(S[j, j], 1e-300))
        if np.dot(k, w[n]) < 0:
            k = -k
        out[n] = ang[n] * k / np.linalg.norm(k)
    return out.reshape(batch + (3,))


def rotation_matrix(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a single rotation vector."""
    phi = np.asarray(phi, dtype=np.float64)
    a = float(np.linalg.norm(phi))
    if a < 1e-12:
        return np.eye(3)
    k = phi / a
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(a) * K + (1 - math.cos(a)) * K @ K


def tip_pose(state: PlantState, params: PlantParams) -> Pose:
    p, R = pcc_forward(state.q + state.c, params.r, params.L)
    return Pose(apply_sag(p, params), rotation_vector(R))


def observe(state: PlantState, params: PlantParams, rng: np.random.Generator | None = None) -> np.ndarray:
    pose = tip_pose(state, params)
    o = np.concatenate([state.l, state.v, pose.p, pose.phi])
    sigma = params.noise_vector()
    if rng is not None and sigma.any():
        o = o + rng.normal(size=OBS_DIM) * sigma
    return o


def perturb_params(params: PlantParams, session_seed: int) -> PlantParams:
    """Day-to-day drift: scale compliance lag, backlash and sag gain by factors in [0.9, 1.1]."""
    f = np.random.default_rng(session_seed).uniform(0.9, 1.1, size=3)
    return replace(params, tau_c=params.tau_c * f[0], backlash=params.backlash * f[1],
                   sag_gain=params.sag_gain * f[2])


class Plant:
    """Stateful wrapper: one plant instance, stepped by one caller."""

    def __init__(self, params: PlantParams, seed: int = 0):
        self.params = params
        self.rng = np.random.default_rng(seed)
        self.state = PlantState()

    def reset(self, state: PlantState | None = None) -> None:
        self.state = PlantState() if state is None else state.copy()

    def step(self, u) -> None:
        self.state = plant_step(self.state, u, self.params)

    def observe(self) -> np.ndarray:
        return observe(self.state, self.params, self.rng)

    def pose(self) -> Pose:
        return tip_pose(self.state, self.params)
