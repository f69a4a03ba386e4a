"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the handful of operations the adaptation pipeline needs are provided.
A fresh tape is built on every forward pass; nodes that do not depend on a
trainable leaf are not recorded at all, so gradient-free passes cost nothing
beyond the numpy arithmetic.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
NORMALIZATION_TOL = 1e-9


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], tuple] | None = None,
    ):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by '{op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording it on the tape only when some input is trainable."""
    tracked = any(p.requires_grad for p in parents)
    if tracked:
        return Tensor(value, True, op=op, parents=tuple(parents), backward=backward)
    return Tensor(value, False, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        if b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(a.data.sum(axis=axis), "sum", (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n) if n else sum(a, axis)


def detach(a: Tensor) -> Tensor:
    """Same value, no route back to ``a`` on the tape."""
    return Tensor(a.data, False, op="detach")


def take_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], "take", (a,), backward)


# --------------------------------------------------------------------------
# normalization


def normalize(x: Tensor, axis: int, eps: float = 1e-5) -> Tensor:
    """Zero-mean/unit-variance standardization along ``axis`` (biased variance).

    ``axis=0`` is batch normalization over the batch, ``axis=1`` layer
    normalization over features.
    """
    if x.ndim != 2:
        raise ShapeError(f"normalize expects a 2-d input, got {x.shape}")
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, "normalization", (x,), backward)


# --------------------------------------------------------------------------
# probability ops (last axis is the class axis)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Tensor) -> Tensor:
    y = _softmax(z.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, "softmax", (z,), backward)


def log_softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _node(out, "log-softmax", (z,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample softmax cross-entropy, shape ``[B]``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    rows = np.arange(labels.size)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = lse - shifted[rows, labels]
    y = _softmax(logits.data)

    def backward(g):
        grad = y.copy()
        grad[rows, labels] -= 1.0
        return (grad * g[:, None],)

    return _node(loss, "softmax-cross-entropy", (logits,), backward)


def check_distribution(p: np.ndarray, name: str = "probs") -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > NORMALIZATION_TOL):
        raise ValueError(f"{name} is not a probability vector along its last axis")


def entropy(probs: Tensor) -> Tensor:
    """Shannon entropy along the class axis, probabilities floored at 1e-12."""
    p = probs.data
    check_distribution(p)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    dlog = np.where(p > PROB_FLOOR, logp + 1.0, logp)

    def backward(g):
        return (-np.expand_dims(g, -1) * dlog,)

    return _node(-(p * logp).sum(axis=-1), "entropy", (probs,), backward)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) along the class axis, with 0 log 0 := 0."""
    check_distribution(p.data, "p")
    check_distribution(q.data, "q")
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape}")
    logp = np.log(np.maximum(p.data, PROB_FLOOR))
    logq = np.log(np.maximum(q.data, PROB_FLOOR))
    value = (p.data * (logp - logq)).sum(axis=-1)
    # numerical noise can dip a hair below zero when p == q
    value = np.maximum(value, 0.0)
    dp = np.where(p.data > PROB_FLOOR, logp + 1.0, logp) - logq
    dq = np.where(q.data > PROB_FLOOR, -p.data / np.maximum(q.data, PROB_FLOOR), 0.0)

    def backward(g):
        g = np.expand_dims(g, -1)
        return g * dp, g * dq

    return _node(value, "kl-divergence", (p, q), backward)


# --------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``root`` w.r.t. every trainable leaf reachable from it."""
    if root.data.size != 1 or root.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for g in leaves.values():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    return leaves


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` for each tensor in ``wrt`` (zeros where unreachable)."""
    found = backward(root)
    return [found.get(t, np.zeros_like(t.data)) for t in wrt]
