from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad

FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    n_checked: int

    def ok(self, rtol: float) -> bool:
        return self.max_rel_err < rtol


def grad_check(build: Callable[[], Tensor], params: Sequence[Tensor], rtol: float = 1e-5,
               h: float = FD_STEP, max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare backward() against central differences, parameter by parameter.

    ``build`` must rebuild the scalar graph from the current parameter values.
    Each parameter tensor gets the norm-wise relative error
    ||a - n|| / max(||a||, ||n||, 1e-12) over its checked entries, so a few
    near-zero entries dominated by round-off cannot swamp the result.
    ``max_entries`` caps the perturbed entries per parameter (chosen with ``seed``).
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = build()
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    worst, count = 0.0, 0
    with no_grad():
        for k, (p, a) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = build().item()
                flat[i] = orig - h
                fm = build().item()
                flat[i] = orig
                num[j] = (fp - fm) / (2.0 * h)
            ana = a.reshape(-1)[idx]
            denom = max(float(np.linalg.norm(ana)), float(np.linalg.norm(num)), 1e-12)
            err = float(np.linalg.norm(ana - num)) / denom
            count += len(idx)
            name = p.name or f"param{k}"
            per_param[name] = err
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return GradCheckReport(worst, per_param, count)
