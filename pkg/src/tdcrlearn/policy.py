"""Residual recurrent control policy trained through the frozen dynamics model, and its deployment."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, Tape, Tensor, backward, load_checkpoint, no_grad, ops, save_checkpoint
from .baselines import project_command, project_command_np
from .data.harness import Episode, SafetyLimits
from .dynamics import IN_DIM, DynamicsModel, _t, load_dynamics, warmup_with_output
from .nn import Linear, Module, StackedRNN, StackedRnnConfig
from .plant import N_MOTORS, OBS_DIM, Plant, rotation_matrix

POSE = slice(18, 24)
LENGTHS = slice(0, N_MOTORS)
HEAD_INIT_SCALE = 0.01
REACH_MARGIN = 1.01  # the straight pose sits exactly on the reach sphere


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 64
    layers: int = 4
    nf: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.nf < 1:
            raise ValueError("reference preview N_f must be >= 1")


class PolicyNetwork(Module):
    """pi_mu: stacked GRU over (h_t, a_{t-1}/u_max, o_t, r_t) with a small-initialized head.

    The head emits Delta a in units of u_max.
    """

    def __init__(self, cfg: PolicyConfig, dyn_hidden: int):
        super().__init__()
        self.cfg = cfg
        self.dyn_hidden = dyn_hidden
        self.input_dim = dyn_hidden + N_MOTORS + OBS_DIM + 6 * cfg.nf
        rng = np.random.default_rng([cfg.seed, 7])
        self.backbone = StackedRNN(StackedRnnConfig("gru", cfg.layers, cfg.hidden), self.input_dim, rng)
        self.head = Linear(cfg.hidden, N_MOTORS, rng)
        for t in self.head.parameters():
            t.data = t.data * HEAD_INIT_SCALE
        self._modules["backbone"] = self.backbone
        self._modules["head"] = self.head
        self._name_params("pol.")

    def zero_state(self, batch: int):
        return self.backbone.zero_state(batch)


@dataclass
class PolicyContext:
    """Unit conversions shared by training and deployment."""

    u_max: float
    obs_mean: np.ndarray
    obs_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray

    @classmethod
    def from_model(cls, dyn: DynamicsModel, u_max: float) -> "PolicyContext":
        n = dyn.normalizer
        return cls(u_max, n.mean[:OBS_DIM], n.std[:OBS_DIM], n.mean[OBS_DIM:IN_DIM], n.std[OBS_DIM:IN_DIM])

    @property
    def pose_scale(self) -> np.ndarray:
        """One scale for the position triple, one for the rotation triple (keeps the Euclidean norm)."""
        s = self.obs_std[POSE]
        return np.repeat([np.sqrt(np.mean(s[:3] ** 2)), np.sqrt(np.mean(s[3:] ** 2))], 3)

    def loss_pose(self, r: np.ndarray) -> np.ndarray:
        return (r - self.obs_mean[POSE]) / self.pose_scale

    def norm_obs(self, o: np.ndarray) -> np.ndarray:
        return (o - self.obs_mean) / self.obs_std

    def norm_pose(self, r: np.ndarray) -> np.ndarray:
        return (r - self.obs_mean[POSE]) / self.obs_std[POSE]

    def norm_u(self, u):
        if isinstance(u, Tensor):
            return ops.mul(ops.sub(u, self.u_mean), 1.0 / self.u_std)
        return (u - self.u_mean) / self.u_std


def policy_step(policy: PolicyNetwork, h_t, a_prev, zo_t, zr_t, states, u_max: float = 1.0):
    """Delta a = pi(h_t, a_{t-1}, o_t, r_t); a_t = a_{t-1} + Delta a.

    ``zo_t`` and ``zr_t`` are normalized; ``zr_t`` is flattened (B, 6 N_f).
    Returns (delta_a, a_t, new policy states).
    """
    a_prev = a_prev if isinstance(a_prev, Tensor) else _t(np.atleast_2d(a_prev))
    parts = [h_t, ops.mul(a_prev, 1.0 / u_max), zo_t, zr_t]
    dims = [p.shape[-1] for p in parts]
    if dims != [policy.dyn_hidden, N_MOTORS, OBS_DIM, 6 * policy.cfg.nf]:
        raise ValueError(f"policy input dims {dims} do not match the network")
    out, states = policy.backbone.forward(ops.concat(parts, axis=-1), states)
    delta = ops.mul(policy.head(out), u_max)
    return delta, ops.add(a_prev, delta), states


# -- references ------------------------------------------------------------------------------

@dataclass(frozen=True)
class ShiftSpec:
    translation: float = 0.02  # disc radius in the xy plane, m
    yaw_deg: float = 5.0  # rotation of the whole window about the vertical base axis

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        ang = rng.uniform(0.0, 2.0 * math.pi)
        radius = self.translation * math.sqrt(rng.uniform())
        yaw = math.radians(self.yaw_deg) * rng.uniform(-1.0, 1.0)
        return np.array([radius * math.cos(ang), radius * math.sin(ang), 0.0]), yaw


def shift_poses(poses: np.ndarray, offset: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate the window by ``yaw`` about the vertical base axis, then translate by ``offset``.

    Orientations are conjugated (R -> Rz R Rz^T), so a yaw-only shift keeps phi* = 0 references at 0.
    """
    out = np.array(poses, dtype=np.float64)
    if yaw != 0.0:
        Rz = rotation_matrix(np.array([0.0, 0.0, yaw]))
        out[:, :3] = out[:, :3] @ Rz.T
        out[:, 3:] = out[:, 3:] @ Rz.T
    out[:, :3] += offset
    return out


def build_reference(trajectory: np.ndarray, t: int, nf: int, rng: np.random.Generator | None = None,
                    training: bool = False, shift: ShiftSpec = ShiftSpec()) -> np.ndarray:
    """Poses r_{t+1..t+N_f} (N_f, 6); indices past the end repeat the final pose."""
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if len(trajectory) == 0:
        raise ValueError("empty reference trajectory")
    idx = np.minimum(np.arange(t + 1, t + nf + 1), len(trajectory) - 1)
    window = trajectory[idx]
    if training and rng is not None and (shift.translation > 0 or shift.yaw_deg > 0):
        window = shift_poses(window, *shift.sample(rng))
    return window


# -- losses --------------------------------------------------------------------------------

def discount_weights(n: int, lam: float) -> np.ndarray:
    if not 0.0 < lam <= 1.0:
        raise ValueError("discount must lie in (0, 1]")
    return lam ** np.arange(n)


def tracking_loss(preds: list[Tensor], refs: np.ndarray, lam: float) -> Tensor:
    """sum_i lam^(i-1) ||pose_i - ref_i||^2 on scaled pose channels, batch-averaged.

    ``preds`` holds N_r tensors (B, 6); ``refs`` is (B, N_r, 6).
    """
    if len(preds) != refs.shape[1]:
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {refs.shape[1]} references")
    B = refs.shape[0]
    w = discount_weights(len(preds), lam)
    stacked = ops.concat(preds, axis=0)
    tgt = np.concatenate([refs[:, i] for i in range(refs.shape[1])], axis=0)
    weights = np.repeat(w, B)[:, None] * np.ones((1, refs.shape[2])) / B
    return ops.weighted_sq_sum(ops.sub(stacked, tgt), weights)


def support_loss(lengths: list[Tensor], limit: float, scale: np.ndarray, lam: float) -> Tensor:
    """sum_i lam^(i-1) ||(l_i - clip(l_i, -limit, limit)) / scale||^2, batch-averaged.

    Zero while every predicted motor length stays inside the bound; keeps rollouts near the
    region the dynamics model was fitted on.
    """
    if not lengths:
        return Tensor(0.0)
    B = lengths[0].shape[0]
    w = discount_weights(len(lengths), lam)
    stacked = ops.concat(lengths, axis=0)
    excess = ops.sub(stacked, ops.clip(stacked, -limit, limit))
    weights = np.repeat(w, B)[:, None] / (B * np.asarray(scale) ** 2)[None, :] * np.ones((1, stacked.shape[1]))
    return ops.weighted_sq_sum(excess, weights)


def smoothness_loss(actions: list[Tensor], lam: float) -> Tensor:
    """sum_i lam^(i-1) ||a_{i} - a_{i-1}||^2, batch-averaged; zero for fewer than two actions."""
    if len(actions) < 2:
        return Tensor(0.0)
    B = actions[0].shape[0]
    w = discount_weights(len(actions) - 1, lam)
    diffs = ops.concat([ops.sub(actions[i + 1], actions[i]) for i in range(len(actions) - 1)], axis=0)
    weights = np.repeat(w, B)[:, None] * np.ones((1, actions[0].shape[1])) / B
    return ops.weighted_sq_sum(diffs, weights)


# -- training -------------------------------------------------------------------------------

@dataclass
class PolicyTrainConfig:
    nr: int = 250
    lam: float = 0.98
    smooth_weight: float = 0.01
    length_limit: float = 0.006  # m; inside the range the data covers
    length_weight: float = 5.0  # 0 recovers the two-term objective
    epochs: int = 1
    windows_per_epoch: int = 2000
    batch: int = 8
    lr: float = 1e-3
    lr_final: float = 1e-4
    clip: float = 10.0
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0

    def __post_init__(self):
        discount_weights(1, self.lam)
        if self.smooth_weight < 0 or self.length_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.length_limit <= 0:
            raise ValueError("motor-length bound must be positive")
        if self.nr < 1:
            raise ValueError("policy rollout length must be >= 1")


@dataclass
class PolicyWindows:
    """Normalized (o, u) histories plus clean references for policy rollouts."""

    zo: list[np.ndarray]
    zu: list[np.ndarray]
    r: list[np.ndarray]
    starts: np.ndarray
    ni: int
    nr: int
    nf: int

    @classmethod
    def build(cls, episodes, dyn: DynamicsModel, nr: int, nf: int, stride: int = 1) -> "PolicyWindows":
        ni = dyn.cfg.ni
        zo, zu, rs, starts = [], [], [], []
        for k, ep in enumerate(episodes):
            z = dyn.normalizer.normalize(np.hstack([ep.o, ep.u]))
            zo.append(z[:, :OBS_DIM])
            zu.append(z[:, OBS_DIM:])
            rs.append(ep.r)
            for s in range(0, ep.steps - (ni + nr + nf), stride):
                starts.append((k, s))
        if not starts:
            raise ValueError("no episode is long enough for a policy window")
        return cls(zo, zu, rs, np.array(starts), ni, nr, nf)

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, idx, rng: np.random.Generator | None = None, shift: ShiftSpec | None = None):
        """Warm-up histories (B, N_i, .), o_t (B, 24) and reference poses (B, N_r + N_f, 6).

        Reference poses cover r_{t+1..t+N_r+N_f}; a shift is constant per window.
        """
        ni, L = self.ni, self.nr + self.nf
        ho, hu, o_t, refs = [], [], [], []
        for e, s in self.starts[idx]:
            t = s + ni
            ho.append(self.zo[e][s:t])
            hu.append(self.zu[e][s:t])
            o_t.append(self.zo[e][t])
            ref = self.r[e][t + 1:t + 1 + L]
            if rng is not None and shift is not None:
                ref = shift_poses(ref, *shift.sample(rng))
            refs.append(ref)
        return np.stack(ho), np.stack(hu), np.stack(o_t), np.stack(refs)


def policy_rollout(policy: PolicyNetwork, dyn: DynamicsModel, ctx: PolicyContext, ho, hu, zo_t,
                   refs: np.ndarray, nr: int):
    """Warm up h on real data, then roll policy and dynamics jointly on predicted observations.

    Returns (predicted poses in loss units, actions a / u_max, predicted motor lengths in m),
    each a list of N_r tensors.
    """
    nf = policy.cfg.nf
    to_loss = ctx.obs_std[POSE] / ctx.pose_scale
    with no_grad():
        h, dstates = warmup_with_output(dyn, ho, hu)
    zr = ctx.norm_pose(refs)
    B = zo_t.shape[0]
    pstates = policy.zero_state(B)
    a = _t(np.zeros((B, N_MOTORS)))
    o_in = _t(zo_t)
    poses, actions, lengths = [], [], []
    for i in range(nr):
        window = zr[:, i:i + nf].reshape(B, 6 * nf)
        _, a, pstates = policy_step(policy, h, a, o_in, _t(window), pstates, ctx.u_max)
        u = project_command(a, ctx.u_max)
        h, dstates = dyn.step(o_in, ctx.norm_u(u), dstates)
        o_in = dyn.predict(o_in, h)
        poses.append(ops.mul(ops.index(o_in, (slice(None), POSE)), to_loss))
        actions.append(ops.mul(a, 1.0 / ctx.u_max))
        lengths.append(ops.add(ops.mul(ops.index(o_in, (slice(None), LENGTHS)), ctx.obs_std[LENGTHS]),
                               ctx.obs_mean[LENGTHS]))
    return poses, actions, lengths


@dataclass
class RolloutLosses:
    tracking: Tensor
    smoothness: Tensor
    support: Tensor

    def total(self, cfg: PolicyTrainConfig) -> Tensor:
        out = ops.add(self.tracking, ops.mul(self.smoothness, cfg.smooth_weight))
        return ops.add(out, ops.mul(self.support, cfg.length_weight)) if cfg.length_weight > 0 else out


def rollout_losses(policy, dyn, ctx, batch, cfg: PolicyTrainConfig) -> RolloutLosses:
    ho, hu, zo_t, refs = batch
    poses, actions, lengths = policy_rollout(policy, dyn, ctx, ho, hu, zo_t, refs, cfg.nr)
    target = ctx.loss_pose(refs[:, :cfg.nr])
    support = (support_loss(lengths, cfg.length_limit, ctx.obs_std[LENGTHS], cfg.lam) if cfg.length_weight > 0
               else Tensor(0.0))
    return RolloutLosses(tracking_loss(poses, target, cfg.lam), smoothness_loss(actions, cfg.lam), support)


@dataclass
class PolicyTrainResult:
    losses: list[float] = field(default_factory=list)
    tracking: list[float] = field(default_factory=list)
    seconds: float = 0.0


def _require_trained(dyn) -> DynamicsModel:
    if isinstance(dyn, (str, Path)):
        try:
            return load_dynamics(dyn)
        except FileNotFoundError as err:
            raise ValueError(f"refusing to train a policy without a trained dynamics model: {err}") from None
    if not getattr(dyn, "trained", False):
        raise ValueError("refusing to train a policy on an untrained dynamics model")
    return dyn


def train_policy(policy: PolicyNetwork, dyn, windows: PolicyWindows, cfg: PolicyTrainConfig,
                 u_max: float) -> PolicyTrainResult:
    """Adam on L_tracking + w_s L_smooth (+ w_l L_support) through the frozen dynamics model (BPTT over N_r)."""
    dyn = _require_trained(dyn)
    if len(windows) == 0:
        raise ValueError("empty dataset")
    if windows.nr < cfg.nr or windows.nf != policy.cfg.nf:
        raise ValueError("policy windows do not cover N_r + N_f reference steps")
    ctx = PolicyContext.from_model(dyn, u_max)
    rng = np.random.default_rng([cfg.seed, 13])
    opt = Adam(policy.parameters(), lr=cfg.lr, max_grad_norm=cfg.clip)
    iters = max(1, cfg.epochs * cfg.windows_per_epoch // cfg.batch)
    flags = [t.requires_grad for t in dyn.parameters()]
    dyn.requires_grad_(False)
    res = PolicyTrainResult()
    t0 = time.perf_counter()
    try:
        for it in range(iters):
            opt.state.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * it / iters))
            batch = windows.batch(rng.integers(len(windows), size=cfg.batch), rng, cfg.shift)
            opt.zero_grad()
            with Tape():
                parts = rollout_losses(policy, dyn, ctx, batch, cfg)
                loss = parts.total(cfg)
                backward(loss)
            opt.step()
            res.losses.append(loss.item())
            res.tracking.append(parts.tracking.item())
    finally:
        for t, f in zip(dyn.parameters(), flags):
            t.requires_grad = f
    res.seconds = time.perf_counter() - t0
    return res


def evaluate_tracking_loss(policy: PolicyNetwork, dyn: DynamicsModel, windows: PolicyWindows,
                           cfg: PolicyTrainConfig, u_max: float, batch: int = 64) -> float:
    """Mean model-predicted tracking loss on unshifted references."""
    ctx = PolicyContext.from_model(dyn, u_max)
    total, n = 0.0, 0
    with no_grad():
        for b in range(0, len(windows), batch):
            idx = np.arange(b, min(b + batch, len(windows)))
            track = rollout_losses(policy, dyn, ctx, windows.batch(idx), cfg).tracking
            total += track.item() * len(idx)
            n += len(idx)
    return total / n


# -- deployment -----------------------------------------------------------------------------

@dataclass
class DeployResult:
    episode: Episode
    completed: bool
    reason: str = ""
    step_seconds: float = 0.0


def deploy_closed_loop(policy: PolicyNetwork, dyn: DynamicsModel, plant: Plant, reference: np.ndarray,
                       limits: SafetyLimits = SafetyLimits(), warmup_steps: int | None = None,
                       seed: int = 0) -> DeployResult:
    """Run the policy on the plant over ``reference`` (steps + 1 poses).

    A zero-command warm-up of N_i steps first drives h from real observations. Afterwards every
    step observes the plant, acts, projects, actuates, then advances h with the real (o, u).
    A divergent plant aborts the run with ``completed`` false; it never raises.
    """
    p = plant.params
    ctx = PolicyContext.from_model(dyn, p.u_max)
    nf = policy.cfg.nf
    reference = np.asarray(reference, dtype=np.float64)
    steps = len(reference) - 1
    plant.rng = np.random.default_rng([seed, 3])
    n_warm = dyn.cfg.ni if warmup_steps is None else warmup_steps
    with no_grad():
        dstates = dyn.zero_state(1)
        h = _t(np.zeros((1, dyn.hidden)))
        zero = np.zeros(N_MOTORS)
        for _ in range(n_warm):
            o = plant.observe()
            h, dstates = dyn.step(_t(ctx.norm_obs(o)[None]), _t(ctx.norm_u(zero)[None]), dstates)
            plant.step(zero)
        pstates = policy.zero_state(1)
        a = np.zeros((1, N_MOTORS))
        U, O, R = [], [], []
        completed, reason = True, ""
        t0 = time.perf_counter()
        for k in range(steps):
            o = plant.observe()
            if not np.isfinite(o).all():
                completed, reason = False, f"non-finite observation at step {k}"
                break
            err = float(np.linalg.norm(o[18:21] - reference[k, :3]))
            if np.abs(o[:N_MOTORS]).max() > limits.max_motor_length:
                completed, reason = False, f"motor length limit exceeded at step {k}"
                break
            if err > limits.max_position_error or np.linalg.norm(o[18:21]) > REACH_MARGIN * p.total_length:
                completed, reason = False, f"tip left the safe region at step {k} (error {err * 1000:.1f} mm)"
                break
            zo = _t(ctx.norm_obs(o)[None])
            zr = ctx.norm_pose(build_reference(reference, k, nf)).reshape(1, 6 * nf)
            _, a_t, pstates = policy_step(policy, h, a, zo, _t(zr), pstates, p.u_max)
            a = a_t.data
            u = project_command_np(a[0], p.u_max)
            h, dstates = dyn.step(zo, _t(ctx.norm_u(u)[None]), dstates)
            U.append(u)
            O.append(o)
            R.append(reference[k])
            plant.step(u)
        elapsed = time.perf_counter() - t0
    m = len(U)
    ep = Episode(t=np.arange(m) * p.dt, u=np.array(U).reshape(m, N_MOTORS), o=np.array(O).reshape(m, OBS_DIM),
                 r=np.array(R).reshape(m, 6), seed=seed, valid=completed, controller={"policy": "neural"})
    return DeployResult(ep, completed, reason, elapsed / max(m, 1))


# -- persistence ----------------------------------------------------------------------------

def save_policy(path, policy: PolicyNetwork) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, policy.state_dict("pol."))
    meta = {**asdict(policy.cfg), "dyn_hidden": policy.dyn_hidden}
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def load_policy(path) -> PolicyNetwork:
    path = Path(path)
    meta = path.with_suffix(".json")
    if not path.exists() or not meta.exists():
        raise FileNotFoundError(f"policy checkpoint missing: {path}")
    d = json.loads(meta.read_text())
    dyn_hidden = d.pop("dyn_hidden")
    policy = PolicyNetwork(PolicyConfig(**d), dyn_hidden)
    policy.load_state_dict(load_checkpoint(path), "pol.")
    return policy
