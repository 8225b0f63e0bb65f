"""Differentiable ops over :class:`Tensor`.

Binary ops broadcast like numpy; gradients are summed back to operand shape.
The recurrent cells and layer norm are fused: one tape node per call with a
hand-written backward. ``tests/test_autodiff.py`` checks each fused op against
both finite differences and the same math built from primitive ops.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return result(a.data + b.data, "add", (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return result(a.data - b.data, "sub", (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return result(ad * bd, "mul", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return result(-a.data, "neg", (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return result(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return result(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes (=1) on the closed interval, 0 outside."""
    a = as_tensor(a)
    if lo > hi:
        raise ValueError("clip bounds inverted")
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return result(np.clip(ad, lo, hi), "clip", (a,), lambda g: (g * inside,))


def elementwise(kind: str, *operands, lo: float | None = None, hi: float | None = None) -> Tensor:
    binary = {"add": add, "mul": mul, "sub": sub}
    unary = {"sigmoid": sigmoid, "tanh": tanh}
    if kind in binary:
        if len(operands) != 2:
            raise ValueError(f"{kind} takes two operands")
        return binary[kind](*operands)
    if kind in unary:
        return unary[kind](*operands)
    if kind == "clip":
        if lo is None or hi is None:
            raise ValueError("clip needs lo and hi")
        return clip(operands[0], lo, hi)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- linear algebra / reductions ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return result(ad @ bd, "matmul", (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """x @ w + b for row-batched x of shape (batch, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: dimension mismatch {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    inputs: tuple = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return result(out, "linear", inputs, bw)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return result(np.asarray(a.data.sum(axis=axis)), "sum", (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reduce_mse(pred, target) -> Tensor:
    """Sum of squared differences (unnormalized)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"reduce_mse: shape mismatch {pred.shape} vs {target.shape}")
    d = pred.data - target.data

    def bw(g):
        gd = 2.0 * d * g
        return (gd if pred.requires_grad else None, -gd if target.requires_grad else None)

    return result(np.asarray(np.dot(d.ravel(), d.ravel())), "reduce_mse", (pred, target), bw)


def weighted_sq_sum(a, weights) -> Tensor:
    """sum_b sum_j w_j * a[b, j]^2, with constant per-column weights."""
    a = as_tensor(a)
    w = np.asarray(weights, dtype=np.float64)
    ad = a.data
    return result(np.asarray((ad * ad * w).sum()), "weighted_sq_sum", (a,),
                  lambda g: (2.0 * ad * w * g,))


# -- shape ---------------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return result(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts), bw)


def index(a, idx) -> Tensor:
    """Basic (slice/int) indexing; advanced indices accumulate via np.add.at."""
    a = as_tensor(a)
    shape = a.shape
    basic = all(isinstance(i, (slice, int, type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return result(np.array(a.data[idx]), "index", (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def detach(a) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor._wrap(as_tensor(a).data)


# -- fused recurrent cells -----------------------------------------------------

def _any_grad(ts) -> bool:
    return any(t.requires_grad for t in ts)


def gru_cell(x, h, wz, bz, wr, br, wn, bn, un, cn) -> Tensor:
    """One GRU step on row-batched inputs.

    z = sig([x,h] wz + bz), r = sig([x,h] wr + br),
    n = tanh(x wn + bn + r * (h un + cn)), h' = (1 - z) n + z h.
    """
    ins = tuple(as_tensor(t) for t in (x, h, wz, bz, wr, br, wn, bn, un, cn))
    x, h, wz, bz, wr, br, wn, bn, un, cn = ins
    nx = x.shape[-1]
    if h.shape[-1] != un.shape[0] or wz.shape[0] != nx + h.shape[-1] or wn.shape[0] != nx:
        raise ValueError(f"gru_cell: dims x={x.shape} h={h.shape} wz={wz.shape} wn={wn.shape}")
    xd, hd = x.data, h.data
    nh = hd.shape[-1]
    xh = np.concatenate([xd, hd], axis=-1)
    wzr = np.concatenate([wz.data, wr.data], axis=1)
    zr = _sigmoid(xh @ wzr + np.concatenate([bz.data, br.data]))
    z, r = zr[:, :nh], zr[:, nh:]
    hn = hd @ un.data + cn.data
    n = np.tanh(xd @ wn.data + bn.data + r * hn)
    out = n + z * (hd - n)

    def bw(g):
        dan = g * (1.0 - z) * (1.0 - n * n)
        dhn = dan * r
        dzr = np.empty_like(zr)
        dzr[:, :nh] = g * (hd - n) * z * (1.0 - z)
        dzr[:, nh:] = dan * hn * r * (1.0 - r)
        dxh = dzr @ wzr.T
        gx = dxh[:, :nx] + dan @ wn.data.T
        gh = dxh[:, nx:] + dhn @ un.data.T + g * z
        pg = [None] * 8
        if _any_grad(ins[2:]):
            gw = xh.T @ dzr
            gb = dzr.sum(0)
            pg = [gw[:, :nh], gb[:nh], gw[:, nh:], gb[nh:],
                  xd.T @ dan, dan.sum(0), hd.T @ dhn, dhn.sum(0)]
        return (gx, gh, *pg)

    return result(out, "gru_cell", ins, bw)


def lstm_cell(x, h, c, wi, bi, wf, bf, wg, bg, wo, bo) -> Tensor:
    """One LSTM step; returns concat([h', c'], axis=-1)."""
    ins = tuple(as_tensor(t) for t in (x, h, c, wi, bi, wf, bf, wg, bg, wo, bo))
    x, h, c, wi, bi, wf, bf, wg, bg, wo, bo = ins
    nx, nh = x.shape[-1], h.shape[-1]
    if wi.shape != (nx + nh, nh) or c.shape != h.shape:
        raise ValueError(f"lstm_cell: dims x={x.shape} h={h.shape} c={c.shape} wi={wi.shape}")
    xh = np.concatenate([x.data, h.data], axis=-1)
    cd = c.data
    i = _sigmoid(xh @ wi.data + bi.data)
    f = _sigmoid(xh @ wf.data + bf.data)
    gg = np.tanh(xh @ wg.data + bg.data)
    o = _sigmoid(xh @ wo.data + bo.data)
    c2 = f * cd + i * gg
    tc = np.tanh(c2)
    h2 = o * tc

    def bw(g):
        gh2, gc2 = g[:, :nh], g[:, nh:]
        dc2 = gc2 + gh2 * o * (1.0 - tc * tc)
        dao = gh2 * tc * o * (1.0 - o)
        daf = dc2 * cd * f * (1.0 - f)
        dai = dc2 * gg * i * (1.0 - i)
        dag = dc2 * i * (1.0 - gg * gg)
        dxh = dai @ wi.data.T + daf @ wf.data.T + dag @ wg.data.T + dao @ wo.data.T
        pg = [None] * 8
        if _any_grad(ins[3:]):
            pg = [xh.T @ dai, dai.sum(0), xh.T @ daf, daf.sum(0),
                  xh.T @ dag, dag.sum(0), xh.T @ dao, dao.sum(0)]
        return (dxh[:, :nx], dxh[:, nx:], dc2 * f, *pg)

    return result(np.concatenate([h2, c2], axis=-1), "lstm_cell", ins, bw)


def rnn_cell(x, h, w, b) -> Tensor:
    """h' = tanh([x,h] w + b)."""
    ins = tuple(as_tensor(t) for t in (x, h, w, b))
    x, h, w, b = ins
    nx = x.shape[-1]
    if w.shape != (nx + h.shape[-1], h.shape[-1]):
        raise ValueError(f"rnn_cell: dims x={x.shape} h={h.shape} w={w.shape}")
    xh = np.concatenate([x.data, h.data], axis=-1)
    out = np.tanh(xh @ w.data + b.data)

    def bw(g):
        da = g * (1.0 - out * out)
        dxh = da @ w.data.T
        if _any_grad(ins[2:]):
            return dxh[:, :nx], dxh[:, nx:], xh.T @ da, da.sum(0)
        return dxh[:, :nx], dxh[:, nx:], None, None

    return result(out, "rnn_cell", ins, bw)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine."""
    ins = tuple(as_tensor(t) for t in (x, scale, shift))
    x, scale, shift = ins
    if x.shape[-1] != scale.shape[-1]:
        raise ValueError(f"layer_norm: feature dim {x.shape[-1]} vs {scale.shape[-1]}")
    xd = x.data
    k = 1.0 / xd.shape[-1]
    xc = xd - xd.sum(axis=-1, keepdims=True) * k
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", xc, xc)[..., None] * k + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def bw(g):
        dxhat = g * scale.data
        gx = inv * (dxhat - dxhat.sum(-1, keepdims=True) * k
                    - xhat * (np.einsum("...i,...i->...", dxhat, xhat)[..., None] * k))
        gs = (g * xhat).reshape(-1, xd.shape[-1]).sum(0) if scale.requires_grad else None
        gb = g.reshape(-1, xd.shape[-1]).sum(0) if shift.requires_grad else None
        return gx, gs, gb

    return result(out, "layer_norm", ins, bw)
