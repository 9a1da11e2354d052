"""Small reverse-mode differentiation engine over float64 numpy arrays.

Each primitive builds a new :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients. ``backward`` walks
the recorded graph once in reverse topological order and accumulates into
the ``grad`` buffers of leaf tensors only, so calling it twice on the same
loss doubles the leaf gradients and nothing else.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, DomainError, NumericalError, ShapeError

NORM_EPS = 1e-12

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Leaf tensor owned by a model, tagged with a learning-rate group."""

    __slots__ = ("name", "group")

    def __init__(self, data, name: str, group: str, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name
        self.group = group

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, group={self.group!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError("operation produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# -- primitives ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def row_mean(a) -> Tensor:
    """Mean over rows: (n, d) -> (d,)."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"row_mean expects a nonempty matrix, got shape {a.shape}")
    return mean(a, axis=0)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(data, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), grad_fn)


def pick(a, index) -> Tensor:
    """Per-row element selection: ``out[i] = a[i, index[i]]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, index), g)
        return (out,)

    return _result(a.data[rows, index], (a,), grad_fn)


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp along ``axis``; entries where ``mask`` is False are skipped."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=axis).all():
            raise DomainError("logsumexp over an empty set")
        x = np.where(mask, x, -np.inf)
    top = np.max(x, axis=axis, keepdims=True)
    w = np.exp(x - top)
    s = w.sum(axis=axis, keepdims=True)
    out = np.squeeze(top + np.log(s), axis=axis)
    soft = w / s

    def grad_fn(g):
        return (np.expand_dims(g, axis) * soft,)

    return _result(out, (a,), grad_fn)


def l2_normalize(a) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateVectorError("cannot normalize a vector of (near) zero norm")
    u = x / norm

    def grad_fn(g):
        # d(x/|x|) = (g - u <u, g>) / |x|
        return ((g - u * np.sum(u * g, axis=-1, keepdims=True)) / norm,)

    return _result(u, (a,), grad_fn)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity of two vectors, differentiable in both."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {a.shape}, {b.shape}")
    return sum(mul(l2_normalize(a), l2_normalize(b)))


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows of (n, d) and (c, d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix needs (n,d),(c,d) matrices, got {a.shape}, {b.shape}")
    return matmul(l2_normalize(a), _transpose(l2_normalize(b)))


def _transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda g: (g.T,))


# -- backward -------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns the leaves that received a gradient, in discovery order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    return leaves


def finite_diff_check(
    objective: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
) -> float:
    """Max coordinate-wise relative error of analytic vs central-difference gradients.

    ``objective`` rebuilds the scalar loss from the current parameter values.
    When ``analytic`` is omitted the gradients come from :func:`backward`;
    pass explicit arrays to audit a gradient computed elsewhere.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    params = list(params)
    if analytic is None:
        saved = [p.grad.copy() for p in params]
        for p in params:
            p.zero_grad()
        backward(objective())
        analytic = [p.grad.copy() for p in params]
        for p, s in zip(params, saved):
            p.grad[...] = s
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga = np.asarray(ga).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective().item()
            flat[i] = orig - step
            fm = objective().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError("objective returned a non-finite value")
            num = (fp - fm) / (2.0 * step)
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
    return worst
