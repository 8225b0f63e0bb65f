"""Recurrent dynamics model with residual output head, its rollout, training and evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, Tape, Tensor, backward, load_checkpoint, no_grad, ops, save_checkpoint
from .nn import MLP, Linear, Module, Normalizer, StackedRNN, StackedRnnConfig
from .plant import OBS_DIM, N_MOTORS
from .metrics import pose_errors

IN_DIM = OBS_DIM + N_MOTORS
HEAD_INIT_SCALE = 0.01


@dataclass(frozen=True)
class VariantSpec:
    kind: str
    residual: bool
    feedback: str  # "pred" keeps gradients, "detached" cuts them, "truth" teacher-forces
    backbone: str  # gru | lstm | rnn | mlp


VARIANTS = {
    "MultiResGRU": VariantSpec("MultiResGRU", True, "pred", "gru"),
    "ResGRU": VariantSpec("ResGRU", True, "detached", "gru"),
    "ResGRU_TF": VariantSpec("ResGRU_TF", True, "truth", "gru"),
    "MultiGRU": VariantSpec("MultiGRU", False, "pred", "gru"),
    "GRU": VariantSpec("GRU", False, "truth", "gru"),
    "MultiResLSTM": VariantSpec("MultiResLSTM", True, "pred", "lstm"),
    "MultiResRNN": VariantSpec("MultiResRNN", True, "pred", "rnn"),
    "ResMLP": VariantSpec("ResMLP", True, "pred", "mlp"),
}


@dataclass(frozen=True)
class RolloutConfig:
    ni: int = 50
    nr: int = 50

    def __post_init__(self):
        if self.ni < 1 or self.nr < 1:
            raise ValueError("warm-up and auto-regressive lengths must be >= 1")


@dataclass(frozen=True)
class DynamicsConfig:
    variant: str = "MultiResGRU"
    hidden: int = 64
    layers: int = 4
    dropout: float = 0.0
    ni: int = 50
    nr: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        RolloutConfig(self.ni, self.nr)

    @property
    def spec(self) -> VariantSpec:
        return VARIANTS[self.variant]

    @property
    def rollout(self) -> RolloutConfig:
        return RolloutConfig(self.ni, self.nr)


class DynamicsModel(Module):
    """f_theta (stacked RNN or MLP window) plus linear head g_psi, in normalized units."""

    def __init__(self, cfg: DynamicsConfig, normalizer: Normalizer):
        super().__init__()
        if normalizer.mean.shape != (IN_DIM,):
            raise ValueError(f"normalizer must cover {IN_DIM} (o, u) channels")
        self.cfg = cfg
        self.spec = cfg.spec
        self.normalizer = normalizer
        rng = np.random.default_rng(cfg.seed)
        if self.spec.backbone == "mlp":
            self.backbone = MLP(cfg.ni * IN_DIM, cfg.hidden, 4, cfg.dropout, rng)
        else:
            self.backbone = StackedRNN(
                StackedRnnConfig(self.spec.backbone, cfg.layers, cfg.hidden, cfg.dropout), IN_DIM, rng)
        self.head = Linear(cfg.hidden, OBS_DIM, rng)
        for t in self.head.parameters():
            t.data = t.data * HEAD_INIT_SCALE
        self._modules["backbone"] = self.backbone
        self._modules["head"] = self.head
        self._name_params("dyn.")
        self.trained = False

    @property
    def hidden(self) -> int:
        return self.cfg.hidden

    @property
    def recurrent(self) -> bool:
        return self.spec.backbone != "mlp"

    def zero_state(self, batch: int):
        return self.backbone.zero_state(batch) if self.recurrent else []

    def step(self, zo, zu, states, training: bool = False, rng=None):
        """One transition h' = f(h, o, u); returns (top-layer output, new states)."""
        x = ops.concat([zo, zu], axis=-1)
        return self.backbone.forward(x, states, training, rng)

    def predict(self, zo, out) -> Tensor:
        g = self.head(out)
        return ops.add(zo, g) if self.spec.residual else g

    def state_dict_full(self) -> dict[str, np.ndarray]:
        sd = self.state_dict("dyn.")
        sd.update(self.normalizer.state_dict("dyn.norm"))
        return sd


def _t(x: np.ndarray) -> Tensor:
    return Tensor._wrap(np.ascontiguousarray(x, dtype=np.float64))


def normalize_episode(nrm: Normalizer, o: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = nrm.normalize(np.hstack([o, u]))
    return z[:, :OBS_DIM], z[:, OBS_DIM:]


# -- rollout ------------------------------------------------------------------------------

def warmup(model: DynamicsModel, zo: np.ndarray, zu: np.ndarray, training: bool = False, rng=None):
    """Drive the hidden state from zero over ground-truth (o, u) pairs; (B, N, .) arrays."""
    return warmup_with_output(model, zo, zu, training, rng)[1]


def warmup_with_output(model: DynamicsModel, zo: np.ndarray, zu: np.ndarray, training: bool = False,
                       rng=None):
    """Warm-up that also returns the final top-layer output (the policy's view of h)."""
    if zo.shape[1] < 1:
        raise ValueError("warm-up history is empty")
    states = model.zero_state(zo.shape[0])
    if not model.recurrent:
        return None, states
    out = None
    for k in range(zo.shape[1]):
        out, states = model.step(_t(zo[:, k]), _t(zu[:, k]), states, training, rng)
    return out, states


def autoregress(model: DynamicsModel, states, zo_t, zu: np.ndarray, feedback: str | None = None,
                truth: np.ndarray | None = None, training: bool = False, rng=None,
                history: tuple[np.ndarray, np.ndarray] | None = None) -> list[Tensor]:
    """Predict N_r normalized observations from o_t under controls zu (B, N_r, 9).

    ``feedback`` defaults to the variant's training channel; "truth" needs ``truth``
    (B, N_r, 24) holding o_{t+1..t+N_r}. ResMLP needs ``history`` = the N_i pairs ending at t.
    """
    feedback = feedback or "pred"
    if feedback == "truth" and (truth is None or truth.shape[1] < zu.shape[1] - 1):
        raise ValueError("teacher forcing needs ground-truth observations for the horizon")
    o_in = zo_t if isinstance(zo_t, Tensor) else _t(zo_t)
    preds = []
    if model.recurrent:
        for i in range(zu.shape[1]):
            out, states = model.step(o_in, _t(zu[:, i]), states, training, rng)
            pred = model.predict(o_in, out)
            preds.append(pred)
            o_in = _feed(pred, feedback, truth, i)
        return preds
    if history is None:
        raise ValueError("window model needs its input history")
    ho, hu = history
    buf = [ops.concat([_t(ho[:, k]), _t(hu[:, k])], axis=-1) for k in range(ho.shape[1] - 1)]
    for i in range(zu.shape[1]):
        buf.append(ops.concat([o_in, _t(zu[:, i])], axis=-1))
        out = model.backbone.forward(ops.concat(buf[-model.cfg.ni:], axis=-1), training, rng)
        pred = model.predict(o_in, out)
        preds.append(pred)
        o_in = _feed(pred, feedback, truth, i)
    return preds


def _feed(pred: Tensor, feedback: str, truth, i: int) -> Tensor:
    if feedback == "pred":
        return pred
    if feedback == "detached":
        return ops.detach(pred)
    if feedback == "truth":
        return _t(truth[:, i])
    raise ValueError(f"unknown feedback channel {feedback!r}")


def window_rollout(model: DynamicsModel, zo: np.ndarray, zu: np.ndarray, feedback: str | None = None,
                   training: bool = False, rng=None) -> list[Tensor]:
    """Full window: zo (B, N_i + N_r + 1, 24), zu (B, N_i + N_r, 9)."""
    ni, nr = model.cfg.ni, zu.shape[1] - model.cfg.ni
    if nr < 1 or zo.shape[1] != ni + nr + 1:
        raise ValueError("window length does not match N_i + N_r")
    feedback = feedback or model.spec.feedback
    truth = zo[:, ni + 1:]
    if model.recurrent:
        states = warmup(model, zo[:, :ni], zu[:, :ni], training, rng)
        return autoregress(model, states, zo[:, ni], zu[:, ni:], feedback, truth, training, rng)
    history = (zo[:, 1:ni + 1], zu[:, 1:ni + 1])
    return autoregress(model, None, zo[:, ni], zu[:, ni:], feedback, truth, training, rng,
                       history=history)


def modeling_loss(preds: list[Tensor], targets: np.ndarray) -> Tensor:
    """Sum over steps and features of squared error, averaged over the batch."""
    if len(preds) != targets.shape[1]:
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {targets.shape[1]} targets")
    B = targets.shape[0]
    stacked = ops.concat(preds, axis=0)
    tgt = np.concatenate([targets[:, i] for i in range(targets.shape[1])], axis=0)
    return ops.mul(ops.reduce_mse(stacked, tgt), 1.0 / B)


# -- data windows ------------------------------------------------------------------------------

@dataclass
class WindowSet:
    """Normalized episodes plus every admissible window start."""

    zo: list[np.ndarray]
    zu: list[np.ndarray]
    starts: np.ndarray  # (n, 2): episode index, start step
    length: int

    @classmethod
    def build(cls, episodes, nrm: Normalizer, ni: int, nr: int, stride: int = 1) -> "WindowSet":
        zo, zu, starts = [], [], []
        length = ni + nr
        for k, ep in enumerate(episodes):
            a, b = normalize_episode(nrm, ep.o, ep.u)
            zo.append(a)
            zu.append(b)
            for s in range(0, ep.steps - length, stride):
                starts.append((k, s))
        if not starts:
            raise ValueError("no episode is long enough for a single window")
        return cls(zo, zu, np.array(starts), length)

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        L = self.length
        zo = np.stack([self.zo[e][s:s + L + 1] for e, s in self.starts[idx]])
        zu = np.stack([self.zu[e][s:s + L] for e, s in self.starts[idx]])
        return zo, zu


# -- training ------------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    windows_per_epoch: int = 2000
    batch: int = 32
    lr: float = 2e-3
    lr_final: float = 2e-4
    clip: float = 10.0
    seed: int = 0


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train_dynamics(model: DynamicsModel, windows: WindowSet, tc: TrainConfig,
                   feedback: str | None = None) -> TrainResult:
    """Adam on the multi-step loss with BPTT over the whole window; cosine-decayed rate."""
    if len(windows) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([tc.seed, 11])
    params = model.parameters()
    opt = Adam(params, lr=tc.lr, max_grad_norm=tc.clip)
    iters = max(1, tc.epochs * tc.windows_per_epoch // tc.batch)
    res = TrainResult()
    t0 = time.perf_counter()
    for it in range(iters):
        opt.state.lr = tc.lr_final + 0.5 * (tc.lr - tc.lr_final) * (1 + np.cos(np.pi * it / iters))
        zo, zu = windows.batch(rng.integers(len(windows), size=tc.batch))
        opt.zero_grad()
        with Tape():
            preds = window_rollout(model, zo, zu, feedback, training=True, rng=rng)
            loss = modeling_loss(preds, zo[:, model.cfg.ni + 1:])
            backward(loss)
        opt.step()
        res.losses.append(loss.item())
    res.seconds = time.perf_counter() - t0
    model.trained = True
    return res


# -- evaluation -----------------------------------------------------------------------------------

@dataclass
class PredictionReport:
    pos_err: np.ndarray  # (N_r,) mean metres per horizon step
    rot_err: np.ndarray  # (N_r,) mean radians per horizon step
    n_windows: int

    @property
    def first_step(self) -> tuple[float, float]:
        return float(self.pos_err[0]), float(self.rot_err[0])

    @property
    def mean(self) -> tuple[float, float]:
        return float(self.pos_err.mean()), float(self.rot_err.mean())


def _errors(model: DynamicsModel, preds: list[Tensor], truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nrm = model.normalizer.slice(slice(0, OBS_DIM))
    P = np.stack([nrm.denormalize(p.data) for p in preds], axis=1)
    T = nrm.denormalize(truth)
    return pose_errors(P[..., 18:24], T[..., 18:24])


def evaluate_prediction(model: DynamicsModel, windows: WindowSet, feedback: str = "pred",
                        batch: int = 256) -> PredictionReport:
    """Per-step position/rotation errors over every window of ``windows`` (eval mode)."""
    pos, rot = [], []
    with no_grad():
        for b in range(0, len(windows), batch):
            zo, zu = windows.batch(np.arange(b, min(b + batch, len(windows))))
            preds = window_rollout(model, zo, zu, feedback)
            p, r = _errors(model, preds, zo[:, model.cfg.ni + 1:])
            pos.append(p)
            rot.append(r)
    pos, rot = np.vstack(pos), np.vstack(rot)
    return PredictionReport(pos.mean(0), rot.mean(0), len(pos))


@dataclass
class LongHorizonReport:
    pos_err: np.ndarray  # per step over all three phases
    rot_err: np.ndarray
    phases: tuple[int, int, int]

    def phase_mean(self, k: int) -> float:
        a = sum(self.phases[:k])
        return float(self.pos_err[a:a + self.phases[k]].mean())


def long_horizon(model: DynamicsModel, o: np.ndarray, u: np.ndarray,
                 phases: tuple[int, int, int]) -> LongHorizonReport:
    """Teacher-forced one-step phase, then pure auto-regression, then one-step again."""
    n1, n2, n3 = phases
    total = n1 + n2 + n3
    if len(o) < total + 1 or len(u) < total:
        raise ValueError("episode shorter than the three phases")
    if not model.recurrent:
        raise ValueError("long-horizon protocol needs a recurrent model")
    nrm = model.normalizer
    zo = nrm.slice(slice(0, OBS_DIM)).normalize(o[:total + 1])[None]
    zu = nrm.slice(slice(OBS_DIM, IN_DIM)).normalize(u[:total])[None]
    preds = []
    with no_grad():
        states = model.zero_state(1)
        o_in = _t(zo[:, 0])
        for k in range(total):
            out, states = model.step(o_in, _t(zu[:, k]), states)
            pred = model.predict(o_in, out)
            preds.append(pred)
            o_in = pred if n1 < k + 1 < n1 + n2 else _t(zo[:, k + 1])
    p, r = _errors(model, preds, zo[:, 1:])
    return LongHorizonReport(p[0], r[0], phases)


# -- persistence ----------------------------------------------------------------------------------

def save_dynamics(path, model: DynamicsModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model.state_dict_full())
    path.with_suffix(".json").write_text(json.dumps(asdict(model.cfg), sort_keys=True))


def load_dynamics(path) -> DynamicsModel:
    path = Path(path)
    meta = path.with_suffix(".json")
    if not path.exists() or not meta.exists():
        raise FileNotFoundError(f"dynamics checkpoint missing: {path}")
    cfg = DynamicsConfig(**json.loads(meta.read_text()))
    state = load_checkpoint(path)
    model = DynamicsModel(cfg, Normalizer.from_state(state, "dyn.norm"))
    model.load_state_dict(state, "dyn.")
    model.trained = True
    return model
