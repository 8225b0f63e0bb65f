"""Recurrent cells, the stacked LayerNorm/tanh/dropout backbone, heads, normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tensor, ops

CELL_KINDS = ("gru", "lstm", "rnn")
GRU_GATES = ("W_z", "b_z", "W_r", "b_r", "W_n", "b_n", "U_n", "c_n")
LSTM_GATES = ("W_i", "b_i", "W_f", "b_f", "W_g", "b_g", "W_o", "b_o")
RNN_GATES = ("W", "b")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    k = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=shape), requires_grad=True)


class Module:
    """Minimal parameter container: ``_params`` plus child ``_modules``."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, Module] = {}

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, t in self._params.items():
            out[prefix + k] = t
        for k, m in self._modules.items():
            out.update(m.named_parameters(prefix + k + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters(prefix).items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters(prefix)
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"missing tensors in state: {missing[:5]}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def requires_grad_(self, flag: bool) -> "Module":
        for t in self.parameters():
            t.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def _name_params(self, prefix: str = "") -> None:
        for k, t in self.named_parameters(prefix).items():
            t.name = k


# -- cells -------------------------------------------------------------------

class GRUCell(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        xh = input_dim + hidden_dim
        p = self._params
        p["W_z"] = _uniform(rng, xh, (xh, hidden_dim))
        p["b_z"] = _uniform(rng, xh, (hidden_dim,))
        p["W_r"] = _uniform(rng, xh, (xh, hidden_dim))
        p["b_r"] = _uniform(rng, xh, (hidden_dim,))
        p["W_n"] = _uniform(rng, input_dim, (input_dim, hidden_dim))
        p["b_n"] = _uniform(rng, input_dim, (hidden_dim,))
        p["U_n"] = _uniform(rng, hidden_dim, (hidden_dim, hidden_dim))
        p["c_n"] = _uniform(rng, hidden_dim, (hidden_dim,))

    def zero_state(self, batch: int):
        return Tensor._wrap(np.zeros((batch, self.hidden_dim)))

    def step(self, x, state):
        h = gru_cell_step(self._params, x, state)
        return h, h


class LSTMCell(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        xh = input_dim + hidden_dim
        for gate in "ifgo":
            self._params[f"W_{gate}"] = _uniform(rng, xh, (xh, hidden_dim))
            self._params[f"b_{gate}"] = _uniform(rng, xh, (hidden_dim,))

    def zero_state(self, batch: int):
        z = Tensor._wrap(np.zeros((batch, self.hidden_dim)))
        return (z, z)

    def step(self, x, state):
        h, c = lstm_cell_step(self._params, x, *state)
        return h, (h, c)


class RNNCell(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        xh = input_dim + hidden_dim
        self._params["W"] = _uniform(rng, xh, (xh, hidden_dim))
        self._params["b"] = _uniform(rng, xh, (hidden_dim,))

    def zero_state(self, batch: int):
        return Tensor._wrap(np.zeros((batch, self.hidden_dim)))

    def step(self, x, state):
        h = rnn_cell_step(self._params, x, state)
        return h, h


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    return ops.reshape(t, (1, -1)) if t.ndim == 1 else t


def gru_cell_step(params: Mapping[str, Tensor], x, h) -> Tensor:
    """h' = (1-z) n + z h with z, r gates on [x;h] and the reset gate inside n."""
    x, h = _as_batch(x), _as_batch(h)
    return ops.gru_cell(x, h, *(params[g] for g in GRU_GATES))


def lstm_cell_step(params: Mapping[str, Tensor], x, h, c) -> tuple[Tensor, Tensor]:
    x, h, c = _as_batch(x), _as_batch(h), _as_batch(c)
    hc = ops.lstm_cell(x, h, c, *(params[g] for g in LSTM_GATES))
    n = h.shape[-1]
    return hc[:, :n], hc[:, n:]


def rnn_cell_step(params: Mapping[str, Tensor], x, h) -> Tensor:
    x, h = _as_batch(x), _as_batch(h)
    return ops.rnn_cell(x, h, params["W"], params["b"])


_CELLS = {"gru": GRUCell, "lstm": LSTMCell, "rnn": RNNCell}


# -- normalization / dropout -------------------------------------------------

class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("layer norm epsilon must be positive")
        self.eps = eps
        self._params["ln_scale"] = Tensor(np.ones(dim), requires_grad=True)
        self._params["ln_shift"] = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return layer_norm(self._params["ln_scale"], self._params["ln_shift"], x, self.eps)


def layer_norm(scale, shift, x, eps: float = 1e-5) -> Tensor:
    return ops.layer_norm(x, scale, shift, eps)


def dropout_apply(rate: float, x, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    return ops.mul(x, keep / (1.0 - rate))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self._params["W"] = _uniform(rng, in_dim, (in_dim, out_dim))
        self._params["b"] = _uniform(rng, in_dim, (out_dim,))

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self._params["W"], self._params["b"])

    def zero_(self) -> None:
        for t in self._params.values():
            t.data = np.zeros_like(t.data)


# -- stacked backbone ----------------------------------------------------------

@dataclass(frozen=True)
class StackedRnnConfig:
    cell: str = "gru"
    layers: int = 4
    hidden: int = 64
    dropout: float = 0.0
    layernorm: bool = True

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.cell!r}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


class StackedRNN(Module):
    """Recurrent layers, each followed by LayerNorm -> tanh -> dropout.

    Recurrent state holds the raw cell state; the post-processed output is
    what feeds the next layer (and the head, for the top layer).
    """

    def __init__(self, cfg: StackedRnnConfig, input_dim: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.input_dim = input_dim
        self.cells = []
        self.norms = []
        dim = input_dim
        for i in range(cfg.layers):
            layer = Module()
            cell = _CELLS[cfg.cell](dim, cfg.hidden, rng)
            layer._params.update(cell._params)
            if cfg.layernorm:
                ln = LayerNorm(cfg.hidden)
                layer._params.update(ln._params)
                self.norms.append(ln)
            self._modules[f"layer{i}"] = layer
            self.cells.append(cell)
            dim = cfg.hidden

    def zero_state(self, batch: int) -> list:
        return [c.zero_state(batch) for c in self.cells]

    def forward(self, x, states: list, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, list]:
        if len(states) != len(self.cells):
            raise ValueError(f"expected {len(self.cells)} hidden states, got {len(states)}")
        out = _as_batch(x)
        new_states = []
        for i, cell in enumerate(self.cells):
            h, st = cell.step(out, states[i])
            new_states.append(st)
            y = self.norms[i](h) if self.cfg.layernorm else h
            y = ops.tanh(y)
            out = dropout_apply(self.cfg.dropout, y, rng, training)
        return out, new_states


def stacked_forward(net: StackedRNN, x, states: list, training: bool = False,
                    rng: np.random.Generator | None = None) -> tuple[Tensor, list]:
    return net.forward(x, states, training, rng)


class MLP(Module):
    """Feed-forward stack with the same LayerNorm -> tanh -> dropout blocks."""

    def __init__(self, input_dim: int, hidden: int, layers: int, dropout: float,
                 rng: np.random.Generator):
        super().__init__()
        self.dropout = dropout
        self.blocks = []
        dim = input_dim
        for i in range(layers):
            layer = Module()
            lin = Linear(dim, hidden, rng)
            ln = LayerNorm(hidden)
            layer._params.update(lin._params)
            layer._params.update(ln._params)
            self._modules[f"layer{i}"] = layer
            self.blocks.append((lin, ln))
            dim = hidden

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        out = _as_batch(x)
        for lin, ln in self.blocks:
            out = dropout_apply(self.dropout, ops.tanh(ln(lin(out))), rng, training)
        return out


# -- dataset normalization -----------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if (self.std <= 0).any():
            raise ValueError("normalizer std must be positive")

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            raise ValueError("cannot fit a normalizer on zero rows")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # constant channels keep unit scale
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def normalize(self, o):
        if isinstance(o, Tensor):
            return ops.mul(ops.sub(o, self.mean), 1.0 / self.std)
        return (np.asarray(o) - self.mean) / self.std

    def denormalize(self, z):
        if isinstance(z, Tensor):
            return ops.add(ops.mul(z, self.std), self.mean)
        return np.asarray(z) * self.std + self.mean

    def slice(self, sl) -> "Normalizer":
        return Normalizer(self.mean[sl], self.std[sl])

    def state_dict(self, prefix: str = "norm") -> dict[str, np.ndarray]:
        return {f"{prefix}.mean": self.mean.copy(), f"{prefix}.std": self.std.copy()}

    @classmethod
    def from_state(cls, state: Mapping[str, np.ndarray], prefix: str = "norm") -> "Normalizer":
        return cls(state[f"{prefix}.mean"], state[f"{prefix}.std"])


def normalize(nrm: Normalizer, o):
    return nrm.normalize(o)


def denormalize(nrm: Normalizer, z):
    return nrm.denormalize(z)


def iter_params(*modules: Module) -> Iterator[Tensor]:
    for m in modules:
        yield from m.parameters()
