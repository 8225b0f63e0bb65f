"""Gradient-fidelity battery: every op, each cell, the stack, a model rollout and the policy chain."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor, grad_check, ops
from .baselines import project_command
from .dynamics import IN_DIM, DynamicsConfig, DynamicsModel, modeling_loss, window_rollout
from .nn import GRUCell, LSTMCell, Normalizer, RNNCell, StackedRNN, StackedRnnConfig
from .policy import PolicyConfig, PolicyContext, PolicyNetwork, PolicyTrainConfig, ShiftSpec, rollout_losses


def _p(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    row = _p(rng, 4)
    m1, m2 = _p(rng, 3, 5), _p(rng, 5, 2)
    bias = _p(rng, 2)
    # clip inputs kept away from the kinks, where finite differences are undefined
    c = Tensor(np.array([[-2.0, -0.3, 0.4, 1.7]]), requires_grad=True)
    tgt = rng.normal(size=(3, 4))
    w = np.abs(rng.normal(size=(3, 4)))
    cases = {
        "add": (lambda: ops.sum(ops.square(ops.add(a, row))), [a, row]),
        "sub": (lambda: ops.sum(ops.square(ops.sub(a, b))), [a, b]),
        "mul": (lambda: ops.sum(ops.mul(a, b)), [a, b]),
        "neg": (lambda: ops.sum(ops.mul(ops.neg(a), b)), [a]),
        "square": (lambda: ops.sum(ops.square(a)), [a]),
        "sigmoid": (lambda: ops.sum(ops.mul(ops.sigmoid(a), b)), [a]),
        "tanh": (lambda: ops.sum(ops.mul(ops.tanh(a), b)), [a]),
        "clip": (lambda: ops.sum(ops.square(ops.clip(c, -1.0, 1.0))), [c]),
        "matmul": (lambda: ops.sum(ops.square(ops.matmul(m1, m2))), [m1, m2]),
        "linear": (lambda: ops.sum(ops.square(ops.linear(m1, m2, bias))), [m1, m2, bias]),
        "sum": (lambda: ops.sum(ops.square(ops.sum(a, axis=0))), [a]),
        "mean": (lambda: ops.sum(ops.square(ops.mean(a, axis=1))), [a]),
        "reduce_mse": (lambda: ops.reduce_mse(a, tgt), [a]),
        "weighted_sq_sum": (lambda: ops.weighted_sq_sum(a, w), [a]),
        "concat": (lambda: ops.sum(ops.square(ops.concat([a, b], axis=1))), [a, b]),
        "index": (lambda: ops.sum(ops.square(ops.index(a, (slice(0, 2), slice(1, 3))))), [a]),
        "reshape": (lambda: ops.sum(ops.mul(ops.reshape(a, (4, 3)), b.data.reshape(4, 3))), [a]),
        "layer_norm": None,
        "project_command": None,
    }
    ln_x, ln_s, ln_t = _p(rng, 3, 6), _p(rng, 6), _p(rng, 6)
    ln_tgt = rng.normal(size=(3, 6))
    cases["layer_norm"] = (lambda: ops.reduce_mse(ops.layer_norm(ln_x, ln_s, ln_t), ln_tgt), [ln_x, ln_s, ln_t])
    pa = Tensor(rng.normal(size=(2, 9)) * 0.01, requires_grad=True)
    pa.data[0, 0] = 0.08  # one entry far past the bound after centering
    ptgt = rng.normal(size=(2, 9)) * 0.01
    cases["project_command"] = (lambda: ops.reduce_mse(project_command(pa, 0.02), ptgt), [pa])

    x, h = _p(rng, 2, 3), _p(rng, 2, 4)
    cell_tgt = rng.normal(size=(2, 4))
    for name, cls in (("gru_cell", GRUCell), ("lstm_cell", LSTMCell), ("rnn_cell", RNNCell)):
        cell = cls(3, 4, rng)
        params = cell.parameters()

        def build(cell=cell):
            st = cell.zero_state(2)
            if isinstance(st, tuple):
                st = (h, st[1])
            else:
                st = h
            out, _ = cell.step(x, st)
            return ops.reduce_mse(out, cell_tgt)

        cases[name] = (build, params + [x, h])

    stack = StackedRNN(StackedRnnConfig("gru", 4, 5), 3, rng)
    seq = rng.normal(size=(4, 2, 3))
    stack_tgt = rng.normal(size=(2, 5))

    def build_stack():
        st = stack.zero_state(2)
        out = None
        for k in range(4):
            out, st = stack.forward(seq[k], st)
        return ops.reduce_mse(out, stack_tgt)

    cases["stacked_rnn_4layer"] = (build_stack, stack.parameters())

    nrm = Normalizer(np.zeros(IN_DIM), np.ones(IN_DIM))
    dyn = DynamicsModel(DynamicsConfig("MultiResGRU", 6, 2, 0.0, 3, 10, seed), nrm)
    for t in dyn.head.parameters():
        t.data = t.data * 50.0  # undo the small head init so every path carries signal
    zo = rng.normal(size=(2, 14, 24))
    zu = rng.normal(size=(2, 13, 9))
    cases["multiresgru_rollout_10"] = (
        lambda: modeling_loss(window_rollout(dyn, zo, zu), zo[:, 4:]), dyn.parameters())

    dyn.trained = True
    pol = PolicyNetwork(PolicyConfig(5, 2, 3, seed), dyn.hidden)
    for t in pol.head.parameters():
        t.data = t.data * 100.0
    ctx = PolicyContext(0.02, np.zeros(24), np.ones(24), np.zeros(9), np.full(9, 0.02))
    # a bound well inside the unit-normalized lengths so the support term is active
    pcfg = PolicyTrainConfig(nr=5, length_limit=0.3, shift=ShiftSpec(0.0, 0.0))
    batch = (rng.normal(size=(2, 3, 24)), rng.normal(size=(2, 3, 9)), rng.normal(size=(2, 24)),
             rng.normal(size=(2, 8, 6)))

    def build_chain():
        return rollout_losses(pol, dyn, ctx, batch, pcfg).total(pcfg)

    cases["policy_projection_dynamics"] = (build_chain, pol.parameters())
    return cases


def gradient_fidelity(seed: int = 0, max_entries: int = 24) -> dict[str, float]:
    """Max norm-wise relative error per case (central differences, h = 1e-5)."""
    out = {}
    for name, (build, params) in _cases(seed).items():
        out[name] = grad_check(build, params, max_entries=max_entries, seed=seed).max_rel_err
    return out
