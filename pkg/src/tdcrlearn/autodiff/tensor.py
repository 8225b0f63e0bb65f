"""Dense float64 tensors recorded on an append-only tape for reverse-mode AD."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class Node:
    __slots__ = ("op", "inputs", "out", "backward", "index", "tape")

    def __init__(self, op, inputs, out, backward, index, tape):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.index = index
        self.tape = tape


class Tape:
    """Append-only record of differentiable ops.

    Ops executed while a tape is active (``with Tape():``) and touching at
    least one tensor with ``requires_grad`` are appended in execution order,
    so the node list is topologically sorted by construction. Outside any
    tape, ops run eagerly with no bookkeeping (inference mode).
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, out: "Tensor", backward: Callable) -> None:
        node = Node(op, inputs, out, backward, len(self.nodes), self)
        self.nodes.append(node)
        out._node = node


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Op outputs skip the finiteness scan; backward() checks the loss.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)


def _not_scalar():
    raise ValueError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                tape.record(op, tuple(inputs), out, backward)
                break
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each leaf touched by this pass to its accumulated
    gradient. Calling twice on the same tape adds the gradients again.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    touched: dict[int, Tensor] = {}
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            touched[id(loss)] = loss
        return {t: t.grad for t in touched.values()}
    node = loss._node
    nodes = node.tape.nodes
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for i in range(node.index, -1, -1):
        n = nodes[i]
        g = grads.pop(id(n.out), None)
        if g is None:
            continue
        in_grads = n.backward(g)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
                touched[id(t)] = t
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    return {t: t.grad for t in touched.values()}
