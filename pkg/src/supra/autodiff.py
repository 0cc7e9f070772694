"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Every differentiable computation in the package is built from the primitives
here.  A :class:`Tape` records one forward pass; :func:`backward` replays it in
reverse order, accumulating vector-Jacobian products into the leaf parameters.
Accumulation order is fixed by the recording order, so gradients are
bit-reproducible for identical forwards.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "GradCheckError",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "sqrt",
    "square",
    "tsum",
    "mean",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "instance_norm",
    "linear_op",
    "slice_cols",
    "concat_cols",
    "backward",
    "grad_check",
]

_GELU_C = float(np.sqrt(2.0 / np.pi))


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradCheckError(RuntimeError):
    """Finite-difference probe hit non-finite values."""


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended in creation order, which is a topological order by
    construction: an operation can only consume tensors that already exist.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def _register(self, t: "Tensor") -> None:
        t._index = len(self.nodes)
        self.nodes.append(t)

    def leaf(self, data, requires_grad: bool = False) -> "Tensor":
        """Wrap an array as a leaf (constant or trainable parameter)."""
        return Tensor(self, np.asarray(data, dtype=np.float64), requires_grad=requires_grad)

    def param(self, data) -> "Tensor":
        return self.leaf(data, requires_grad=True)

    def constant(self, data) -> "Tensor":
        return self.leaf(data, requires_grad=False)


class Tensor:
    """Immutable dense float64 array recorded on a tape.

    Do not mutate ``value`` after construction; downstream nodes cache it for
    their backward rules.
    """

    __slots__ = ("tape", "value", "requires_grad", "grad", "_parents", "_vjp",
                 "_index", "_needs")

    def __init__(self, tape: Tape, value: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), vjp: Callable | None = None):
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp
        # does any leaf parameter feed this node? dead branches skip backward
        self._needs = requires_grad or any(p._needs for p in parents)
        tape._register(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # operator sugar; scalars are promoted to constants on the same tape
    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    def __radd__(self, other):
        return add(_wrap(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _wrap(self.tape, other))

    def __rsub__(self, other):
        return sub(_wrap(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    def __rmul__(self, other):
        return mul(_wrap(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _wrap(self.tape, other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(self.tape, other))

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _wrap(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _node(tape: Tape, value: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    return Tensor(tape, value, requires_grad=False, parents=parents, vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value
    na, nb = a._needs, b._needs
    return _node(a.tape, out, (a, b),
                 lambda g: (_unbroadcast(g, a.value.shape) if na else None,
                            _unbroadcast(g, b.value.shape) if nb else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.value - b.value
    na, nb = a._needs, b._needs
    return _node(a.tape, out, (a, b),
                 lambda g: (_unbroadcast(g, a.value.shape) if na else None,
                            _unbroadcast(-g, b.value.shape) if nb else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.value * b.value
    na, nb = a._needs, b._needs
    return _node(a.tape, out, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.value.shape) if na else None,
                            _unbroadcast(g * a.value, b.value.shape) if nb else None))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.value / b.value
    na, nb = a._needs, b._needs
    return _node(a.tape, out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.value.shape) if na else None,
                            _unbroadcast(-g * out / b.value, b.value.shape) if nb else None))


def neg(a: Tensor) -> Tensor:
    return _node(a.tape, -a.value, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {av.shape[0]}x{av.shape[1]} @ "
            f"{bv.shape[0]}x{bv.shape[1]}")
    out = av @ bv
    na, nb = a._needs, b._needs
    return _node(a.tape, out, (a, b),
                 lambda g: (g @ bv.T if na else None, av.T @ g if nb else None))


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.value.shape}")
    return _node(a.tape, np.ascontiguousarray(a.value.T), (a,),
                 lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.value.shape
    return _node(a.tape, a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(a.tape, out, (a,), lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _node(a.tape, out, (a,), lambda g: (g * (0.5 / out),))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _node(a.tape, out, (a,), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x2)))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + (0.5 * _GELU_C) * x * (1.0 - t * t) * (1.0 + 0.134145 * x2)
        return (g * d,)

    return _node(a.tape, out, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor, stabilized by row-max subtraction."""
    x = a.value
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got shape {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        # dX = S * (g - sum(g*S) per row)
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _node(a.tape, out, (a,), vjp)


def linear_op(a: Tensor, forward_fn: Callable, adjoint_fn: Callable) -> Tensor:
    """Apply a linear map with a known adjoint as a single taped node.

    ``adjoint_fn`` must be the exact transpose of ``forward_fn``; the
    finite-difference checker is the way to validate a new pair.
    """
    out = forward_fn(a.value)
    return _node(a.tape, out, (a,), lambda g: (adjoint_fn(g),))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-d tensor, got shape {a.value.shape}")
    out = a.value[:, start:stop].copy()
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _node(a.tape, out, (a,), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    tape = parts[0].tape
    widths = [p.value.shape[1] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _node(tape, out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# normalizations (composites; gradients flow through the primitives)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row over its columns, then apply per-column gain/bias.

    For a C x N input this normalizes every token's N coordinates to zero mean
    and unit variance; ``eps`` keeps constant rows finite.
    """
    if x.value.ndim != 2 or x.value.shape[1] < 2:
        raise ShapeError(f"layer_norm expects a 2-d tensor with >=2 columns, got {x.value.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = mean(x, axis=1, keepdims=True)
    centered = sub(x, mu)
    var = mean(square(centered), axis=1, keepdims=True)
    normed = div(centered, sqrt(var + eps))
    return add(mul(normed, gain), bias)


def instance_norm(u: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each channel over its sample points, affine per channel.

    Statistics are taken along axis 1 (the M spatial samples); ``gain`` and
    ``bias`` have one entry per channel and broadcast as column vectors.
    """
    if u.value.ndim != 2 or u.value.shape[1] < 2:
        raise ShapeError(f"instance_norm expects a 2-d tensor with >=2 columns, got {u.value.shape}")
    if eps <= 0:
        raise ValueError("instance_norm eps must be positive")
    mu = mean(u, axis=1, keepdims=True)
    centered = sub(u, mu)
    var = mean(square(centered), axis=1, keepdims=True)
    normed = div(centered, sqrt(var + eps))
    c = u.value.shape[0]
    gcol = reshape(gain, (c, 1))
    bcol = reshape(bias, (c, 1))
    return add(mul(normed, gcol), bcol)


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar ``root`` into every reachable node.

    Walks the tape in reverse creation order (reverse-topological by
    construction) and sums vector-Jacobian products in that fixed order, so
    repeated runs on identical forwards give bit-identical gradients.
    """
    if root.value.ndim != 0 and root.value.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.value.shape}")
    tape = root.tape
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root._index] = np.ones_like(root.value)
    for node in reversed(tape.nodes[: root._index + 1]):
        g = grads[node._index]
        if g is None or node._vjp is None or not node._needs:
            continue
        if g.shape != node.value.shape:
            raise ShapeError(
                f"adjoint shape {g.shape} does not match value shape {node.value.shape}")
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if grads[parent._index] is None:
                grads[parent._index] = pg
            else:
                grads[parent._index] = grads[parent._index] + pg
    for node in tape.nodes[: root._index + 1]:
        if node.requires_grad:
            g = grads[node._index]
            node.grad = np.zeros_like(node.value) if g is None else g


def grad_check(f: Callable[[Tape, Tensor], Tensor], theta: np.ndarray,
               h: float = 1e-5) -> float:
    """Compare the taped gradient of ``f`` against central differences.

    ``f`` receives a fresh tape and the wrapped parameter vector and must
    return a scalar tensor.  Returns the maximum componentwise relative error,
    with denominator max(|gradient|, 1e-8).
    """
    if not (1e-7 <= h <= 1e-4):
        raise ValueError(f"grad_check step h={h} outside [1e-7, 1e-4]")
    theta = np.asarray(theta, dtype=np.float64)

    tape = Tape()
    t = tape.param(theta)
    loss = f(tape, t)
    backward(loss)
    analytic = t.grad.reshape(-1)

    flat = theta.reshape(-1).copy()
    fd = np.empty_like(flat)
    bad: list[int] = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval_scalar(f, flat.reshape(theta.shape))
        flat[i] = orig - h
        fm = _eval_scalar(f, flat.reshape(theta.shape))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(i)
            fd[i] = np.nan
        else:
            fd[i] = (fp - fm) / (2.0 * h)
    if bad:
        raise GradCheckError(f"non-finite f at perturbed points for components {bad}")

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))


def _eval_scalar(f, theta: np.ndarray) -> float:
    tape = Tape()
    return float(f(tape, tape.param(theta)).value)
