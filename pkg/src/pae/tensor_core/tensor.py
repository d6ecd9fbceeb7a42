"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how frozen weights and inference passes stay off the graph.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y, [x])[0]
    array([6.])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_ACTIVE: list["Tape"] = []

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of primitive operations.

    Nodes are stored in creation order, which is a valid topological order
    since an op can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, node: "Tensor") -> None:
        node.node_id = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def backward(self, root: "Tensor", leaves: Iterable["Tensor"] = (),
                 retain_graph: bool = False) -> list[np.ndarray]:
        """Propagate d(root)/d(.) to every leaf.

        Leaves receive their gradient in ``.grad`` (accumulated). The return
        value lists the gradients of ``leaves`` in order; a leaf the root does
        not depend on gets zeros. Unless ``retain_graph`` is set the recorded
        graph is released afterwards, so the tape can't be replayed.
        """
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise ContractError("root was not produced on this tape")
        leaves = list(leaves)
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)

        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        for node in reversed(self.nodes[: root.node_id + 1]):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape is self and parent.node_id is not None:
                    if parent.node_id in grads:
                        grads[parent.node_id] = grads[parent.node_id] + pg
                    else:
                        grads[parent.node_id] = pg
                else:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
        if not retain_graph:
            self.release()
        return [leaf.grad for leaf in leaves]

    def release(self) -> None:
        """Drop closures and parent links; node <-> tape cycles pin large buffers."""
        for node in self.nodes:
            node.parents = ()
            node.backward_fn = None
            node.tape = None
        self.nodes = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(root: "Tensor", leaves: Iterable["Tensor"] = ()) -> list[np.ndarray]:
    """Run the backward pass on the tape that produced ``root``."""
    if root.tape is None:
        raise ContractError("root is not recorded on any tape")
    return root.tape.backward(root, leaves)


class Tensor:
    """Row-major float64 array plus an optional gradient slot."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g, b.shape) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
    return _make(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    active = x.data > 0
    return _make(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    c = np.sqrt(2.0 / np.pi)
    x3 = x.data * x.data * x.data
    th = np.tanh(c * (x.data + 0.044715 * x3))
    out = 0.5 * x.data * (1.0 + th)

    def bw(g):
        dth = (1.0 - th * th) * c * (1.0 + 3 * 0.044715 * x.data * x.data)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * dth),)
    return _make(out, (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # (..., m, k) @ (k, n): one GEMM over the flattened leading axes
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb
        return _make(out, (a, b), bw2)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(a.data @ b.data, (a, b), bw)


def swap_last(x: Tensor) -> Tensor:
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return _make(x.data[idx], (x,), bw)


def trace(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"trace needs a square matrix, got {x.shape}")
    eye = np.eye(x.shape[0])
    return _make(np.array(np.trace(x.data)), (x,), lambda g: (g * eye,))


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def frobenius_norm_sq(x: Tensor) -> Tensor:
    """Sum of squared entries; gradient 2x."""
    return _make(np.asarray(np.sum(x.data * x.data)), (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------- fused network ops

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx,
                _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None,
                _unbroadcast(g, beta.shape) if beta.requires_grad else None)
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def log_softmax(x: Tensor) -> np.ndarray:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (n x C)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)
    return _make(np.asarray(loss), (logits,), bw)
