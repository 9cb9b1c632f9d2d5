"""Dense float64 tensors with tape-based reverse-mode differentiation.

Storage is a plain ``numpy.ndarray`` (float64, C order). A :class:`Node`
wraps one array together with the local vector-Jacobian products that link it
to its parents. Calling :func:`backward` on a scalar node walks the graph once
in reverse topological order and returns a ``{leaf: gradient}`` map.

Every op refuses to produce non-finite values: :class:`NonFiniteError` is
raised at the op that created them instead of letting NaN/Inf propagate.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "NonFiniteError",
    "Node",
    "Rng",
    "as_node",
    "constant",
    "parameter",
    "stop_gradient",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "softmax",
    "softmax_rows",
    "log_softmax",
    "logsumexp",
    "normal_cdf",
    "gelu",
    "take_along_axis",
    "concat",
    "argmax",
    "topk_indices",
    "gaussian_noise",
    "finite_difference_check",
]

Array = np.ndarray


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _finite(value: Array, op: str) -> Array:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return value


class Node:
    """A value in the differentiation graph.

    ``parents`` holds ``(parent, vjp)`` pairs where ``vjp`` maps the gradient
    of this node to the gradient contribution for ``parent``.
    """

    __slots__ = ("value", "parents", "requires_grad", "stop_gradient", "grad", "name")
    __array_priority__ = 100

    def __init__(
        self,
        value,
        parents: Sequence[tuple["Node", Callable[[Array], Array]]] = (),
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64, order="C")
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.stop_gradient = False
        self.grad: Array | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> Array:
        return self.value

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Node":
        return transpose(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x, name: str | None = None) -> Node:
    return Node(np.array(x, dtype=np.float64), name=name)


def parameter(x, name: str | None = None) -> Node:
    """A differentiable leaf."""
    return Node(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def stop_gradient(x) -> Node:
    """Same value as ``x``; nothing upstream of it receives gradient."""
    x = as_node(x)
    out = Node(x.value)
    out.stop_gradient = True
    return out


def _toposort(root: Node) -> list[Node]:
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
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> dict[Node, Array]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns gradients for every ``requires_grad`` leaf reachable from ``loss``
    and also stores them on ``leaf.grad``.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[Node, Array] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = g
                node.grad = g
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return leaves


# -- elementwise ---------------------------------------------------------------


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = _finite(a.value + b.value, "add")
    return Node(
        out,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = _finite(a.value - b.value, "sub")
    return Node(
        out,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))],
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = _finite(a.value * b.value, "mul")
    return Node(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _finite(a.value / b.value, "div")
    return Node(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
        ],
    )


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, [(a, lambda g: -g)])


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = _finite(np.exp(a.value), "exp")
    return Node(out, [(a, lambda g: g * out)])


def log(a) -> Node:
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _finite(np.log(a.value), "log")
    return Node(out, [(a, lambda g: g / a.value)])


def normal_cdf(a, scale: float = 1.0) -> Node:
    """CDF of N(0, scale**2) evaluated elementwise."""
    a = as_node(a)
    z = a.value / scale
    out = special.ndtr(z)
    dens = np.exp(-0.5 * z * z) / (scale * np.sqrt(2.0 * np.pi))
    return Node(out, [(a, lambda g: g * dens)])


def gelu(a) -> Node:
    """Exact GELU, ``x * Phi(x)``."""
    a = as_node(a)
    x = a.value
    cdf = special.ndtr(x)
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return Node(x * cdf, [(a, lambda g: g * (cdf + x * pdf))])


# -- linear algebra and shape --------------------------------------------------


def matmul(a, b) -> Node:
    """Matrix product; 3-d operands are treated as stacks of matrices."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _finite(np.matmul(a.value, b.value), "matmul")

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)

    return Node(out, [(a, grad_a), (b, grad_b)])


def transpose(a, axes: Sequence[int] | None = None) -> Node:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_node(a)
    if axes is None:
        out = np.swapaxes(a.value, -1, -2)
        return Node(out, [(a, lambda g: np.swapaxes(g, -1, -2))])
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Node(np.transpose(a.value, axes), [(a, lambda g: np.transpose(g, inverse))])


def reshape(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    return Node(a.value.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def concat(nodes: Iterable[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])
    parents = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(lo, hi)
        parents.append((n, lambda g, sl=tuple(sl): g[sl]))
    return Node(out, parents)


def take_along_axis(a, indices: Array, axis: int) -> Node:
    """Gather ``a`` at integer ``indices`` along ``axis``; gradient scatters back."""
    a = as_node(a)
    indices = np.asarray(indices)
    out = np.take_along_axis(a.value, indices, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.value)
        # duplicate indices must accumulate, so no put_along_axis
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis % a.ndim] = indices
        np.add.at(full, tuple(idx), g)
        return full

    return Node(out, [(a, vjp)])


# -- reductions ----------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return Node(out, [(a, vjp)])


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = special.logsumexp(a.value, axis=axis, keepdims=True)
    weights = np.exp(a.value - out)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * weights

    return Node(_finite(out, "logsumexp"), [(a, vjp)])


def softmax(a, axis: int = -1) -> Node:
    """Max-shifted softmax along ``axis``."""
    a = as_node(a)
    z = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - np.sum(g * out, axis=axis, keepdims=True))

    return Node(_finite(out, "softmax"), [(a, vjp)])


def softmax_rows(logits) -> Node:
    logits = as_node(logits)
    if logits.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {logits.shape}")
    return softmax(logits, axis=1)


def log_softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    lse = special.logsumexp(a.value, axis=axis, keepdims=True)
    out = a.value - lse
    probs = np.exp(out)

    def vjp(g):
        return g - probs * np.sum(g, axis=axis, keepdims=True)

    return Node(_finite(out, "log_softmax"), [(a, vjp)])


# -- non-differentiable selection ----------------------------------------------


def argmax(a, axis: int = -1) -> tuple[Array, Array]:
    """``(values, indices)`` of the maximum along ``axis``; lowest index wins ties."""
    arr = a.value if isinstance(a, Node) else np.asarray(a)
    idx = np.argmax(arr, axis=axis)
    vals = np.take_along_axis(arr, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return vals, idx


def topk_indices(a, k: int, axis: int = -1) -> Array:
    """Indices of the ``k`` largest entries along ``axis`` in descending order.

    Equal scores are ordered by ascending index.
    """
    arr = a.value if isinstance(a, Node) else np.asarray(a)
    if not 1 <= k <= arr.shape[axis]:
        raise ValueError(f"k={k} out of range for axis of size {arr.shape[axis]}")
    order = np.argsort(-arr, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


# -- randomness ----------------------------------------------------------------


class Rng:
    """Seeded counter-based generator (Philox).

    Two instances built from the same seed produce bit-identical streams for
    the same call sequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, stddev: float = 1.0) -> Array:
        return stddev * self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Array:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> Array:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def child(self, stream: int) -> "Rng":
        """Independent generator derived from this seed and a stream id."""
        return Rng(int(np.random.SeedSequence([self.seed, stream]).generate_state(1, np.uint64)[0]))


def gaussian_noise(rng: Rng, shape, stddev: float) -> Array:
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    if stddev == 0:
        return np.zeros(shape)
    return rng.normal(shape, stddev)


# -- gradient checking ---------------------------------------------------------


def finite_difference_check(f: Callable[[Node], Node], x, step: float = 1e-5) -> float:
    """Max relative disagreement between the tape gradient and central differences.

    ``f`` maps a Node to a scalar Node. The error per coordinate is
    ``|analytic - fd| / max(1, |fd|)``.
    """
    x = np.array(x, dtype=np.float64)
    leaf = parameter(x)
    grads = backward(f(leaf))
    analytic = grads.get(leaf, np.zeros_like(x))
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(constant(x)).value)
        flat[i] = orig - step
        lo = float(f(constant(x)).value)
        flat[i] = orig
        fd = (hi - lo) / (2 * step)
        worst = max(worst, abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd)))
    return worst
