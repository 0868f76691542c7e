"""Small reverse-mode autodiff layer over float64 numpy arrays, plus AdamW.

Every differentiable operation returns a :class:`Node`.  A node keeps its
value, the nodes it was computed from and a closure mapping the upstream
gradient onto each parent.  :func:`backward` sweeps the graph in reverse
topological order and accumulates into the ``grad`` of leaf nodes that
require gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEGENERATE_NORM = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateVectorError(ArithmeticError):
    """A vector with (near) zero norm was passed to l2_normalize."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class Node:
    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Node, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single-element node, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # operator sugar keeps the loss code readable
    def __add__(self, other):
        return add(self, _as_node(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_node(other, like=self))

    def __mul__(self, other):
        if isinstance(other, Node):
            if other.value.size == 1 and self.value.size != 1:
                return scale_by(self, other)
            if self.value.size == 1 and other.value.size != 1:
                return scale_by(other, self)
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Node(arr)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def parameter(x, name: str | None = None) -> Node:
    return Node(x, requires_grad=True, name=name)


def _make(value: np.ndarray, op: str, parents: tuple[Node, ...], backward_fn) -> Node:
    out = Node(value)
    out.op = op
    out.parents = parents
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), back)


def transpose(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _make(x.value.T.copy(), "transpose", (x,), lambda g: (g.T,))


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape(a, b, "add")
    return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape(a, b, "sub")
    return _make(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def add_bias(x: Node, bias: Node) -> Node:
    """Add a row vector to every row of a matrix (the only broadcast supported)."""
    if x.value.ndim != 2 or bias.value.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: cannot add {bias.shape} to rows of {x.shape}")
    return _make(x.value + bias.value, "add_bias", (x, bias), lambda g: (g, g.sum(axis=0)))


def mul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return _make(x.value * c, "scale", (x,), lambda g: (g * c,))


def scale_by(x: Node, s: Node) -> Node:
    """Multiply every entry of ``x`` by the single-element node ``s``."""
    if s.value.size != 1:
        raise ShapeError(f"scale_by expects a scalar factor, got {s.shape}")
    xv, sv = x.value, float(s.value.reshape(-1)[0])

    def back(g):
        return g * sv, np.array([np.sum(g * xv)]).reshape(s.shape)

    return _make(xv * sv, "scale_by", (x, s), back)


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Node) -> Node:
    m = x.value > 0
    return _make(np.where(m, x.value, 0.0), "relu", (x,), lambda g: (g * m,))


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def reciprocal(x: Node) -> Node:
    y = 1.0 / x.value
    return _make(y, "reciprocal", (x,), lambda g: (-g * y * y,))


def total(x: Node) -> Node:
    """Sum of all entries, as a scalar node."""
    shape = x.shape
    return _make(np.array([x.value.sum()]), "sum", (x,), lambda g: (np.full(shape, g[0]),))


def mean(x: Node) -> Node:
    return scale(total(x), 1.0 / x.value.size)


def diag(x: Node) -> Node:
    if x.value.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diag expects a square matrix, got {x.shape}")
    n = x.shape[0]

    def back(g):
        out = np.zeros((n, n))
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _make(np.diagonal(x.value).copy(), "diag", (x,), back)


def logsumexp_rows(x: Node) -> Node:
    """Row-wise log-sum-exp of a matrix, computed with the max shift."""
    if x.value.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects a matrix, got {x.shape}")
    xv = x.value
    mx = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - mx)
    s = e.sum(axis=1, keepdims=True)
    soft = e / s
    return _make((mx + np.log(s)).reshape(-1), "logsumexp", (x,), lambda g: (soft * g[:, None],))


def concat_rows(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: {a.shape} and {b.shape} do not stack")
    n = a.shape[0]
    return _make(np.vstack([a.value, b.value]), "concat", (a, b), lambda g: (g[:n], g[n:]))


def l2_normalize(x: Node) -> Node:
    """Scale a vector, or every row of a matrix, to unit Euclidean norm."""
    xv = x.value
    norms = np.linalg.norm(xv, axis=-1, keepdims=True)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateVectorError(
            f"cannot normalize: min norm {float(norms.min()):.3e} below {DEGENERATE_NORM}"
        )
    u = xv / norms

    def back(g):
        # (I - u u^T) g / |x|, applied per row
        return ((g - u * np.sum(g * u, axis=-1, keepdims=True)) / norms,)

    return _make(u, "l2_normalize", (x,), back)


_ELEMENTWISE = {
    "tanh": tanh,
    "relu": relu,
}


def elementwise(x: Node, fn: str, other=None) -> Node:
    """Dispatch by name: ``tanh``, ``relu``, ``add`` (needs ``other``), ``scale`` (needs a factor)."""
    if fn in _ELEMENTWISE:
        return _ELEMENTWISE[fn](x)
    if fn == "add":
        return add(x, _as_node(other, like=x))
    if fn == "scale":
        return scale(x, 1.0 if other is None else other)
    raise ValueError(f"unknown elementwise function {fn!r}")


# ---------------------------------------------------------------------------
# reverse sweep


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every trainable leaf's ``grad``.

    Returns a mapping from each reached leaf to the gradient contributed by
    this call.  Repeated calls add up in ``leaf.grad`` until the caller
    zeroes them.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    contributed: dict[Node, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = node.grad + g
                contributed[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            upstream[key] = upstream[key] + pg if key in upstream else pg
    return contributed


def numerical_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied to the parameter first (``p -= lr * wd * p``), then the
    bias-corrected Adam update from the current gradient.
    """

    def __init__(self, params: Iterable[Node], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.value.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {p.value.shape}")
            if self.weight_decay:
                p.value -= self.lr * self.weight_decay * p.value
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def adamw_step(params: Sequence[Node], grads: Sequence[np.ndarray], state: AdamW) -> None:
    """Functional spelling of ``state.step(grads)``; ``state`` carries lr, betas, decay and moments."""
    if list(params) != state.params:
        raise ContractError("optimizer state was built for a different parameter list")
    state.step(grads)
