"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op computes its value with numpy and, when a tape is active and any input requires a
gradient, records a node holding the parents and a closure mapping the output gradient to the
parent gradients. ``backward`` walks the tape once in reverse recording order.

Broadcasting is deliberately absent except for scalar-by-tensor products; row expansion is an
explicit op (``repeat_rows``).
"""

import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence
from contextlib import contextmanager

import numpy as np

from .config import settings
from .errors import ContractError, DeterminismError, DomainError, NonFiniteError, ShapeError

_node_ids = itertools.count()
_local = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

GradFn = Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "grad", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.grad: np.ndarray | None = None
        self.name = name
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class _Node:
    op: str
    output: Tensor
    parents: tuple[Tensor, ...]
    grad_fn: GradFn


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    A tape is used from a single thread. Independent tapes may run concurrently as long as they
    only read shared parameters; combining their gradients is the caller's reduction step.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, op: str, output: Tensor, parents: tuple[Tensor, ...], grad_fn: GradFn) -> None:
        output.tape = self
        self.nodes.append(_Node(op, output, parents, grad_fn))

    def backward(self, loss: Tensor, *, accumulate: bool = True) -> dict[int, np.ndarray]:
        """Return gradients of ``loss`` for every requires-grad leaf reached.

        With ``accumulate`` the gradients are also added into ``leaf.grad``; calling backward
        twice without ``zero_grad`` therefore sums both passes.
        """

        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and loss.tape is not self:
            leaves[loss.node_id] = loss

        for node in reversed(self.nodes):
            upstream = grads.pop(node.output.node_id, None)
            if upstream is None:
                continue
            for parent, parent_grad in zip(node.parents, node.grad_fn(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.reshape(parent_grad, parent.shape)
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + parent_grad
                else:
                    grads[parent.node_id] = parent_grad
                if parent.tape is not self:
                    leaves[parent.node_id] = parent

        result = {node_id: grads[node_id] for node_id in leaves if node_id in grads}
        if accumulate:
            for node_id, grad in result.items():
                leaf = leaves[node_id]
                leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
        return result


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording, even inside an enclosing tape."""

    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def backward(loss: Tensor, *, accumulate: bool = True) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        if not loss.requires_grad:
            raise ContractError("loss was not recorded on a tape")
        grad = np.ones_like(loss.data)
        if accumulate:
            loss.grad = grad.copy() if loss.grad is None else loss.grad + grad
        return {loss.node_id: grad}
    return loss.tape.backward(loss, accumulate=accumulate)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(op: str, value, parents: tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    out = Tensor(value)
    if settings.check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {out.shape})")
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(op, out, parents, grad_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# Linear algebra and elementwise arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data
    return _result("matmul", np.matmul(av, bv), (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either side may be a single-element tensor."""

    av, bv = a.data, b.data
    if a.shape == b.shape:
        return _result("mul", av * bv, (a, b), lambda g: (g * bv, g * av))
    if a.size == 1:
        s = av.reshape(())
        return _result("mul", s * bv, (a, b), lambda g: (np.sum(g * bv), g * s))
    if b.size == 1:
        s = bv.reshape(())
        return _result("mul", av * s, (a, b), lambda g: (g * s, np.sum(g * av)))
    raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result("add_scalar", a.data + c, (a,), lambda g: (g,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    if axis is None:
        return _result("sum", np.sum(a.data), (a,), lambda g: (np.full(shape, g, dtype=np.float64),))
    value = np.sum(a.data, axis=axis, keepdims=True)
    return _result("sum", value, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        other = [d for i, d in enumerate(t.shape) if i != ax]
        first = [d for i, d in enumerate(tensors[0].shape) if i != ax]
        if t.data.ndim != ndim or other != first:
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {original} as {shape}") from exc
    return _result("reshape", value, (a,), lambda g: (g.reshape(original),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, index, g)
        return (out,)

    return _result("getitem", a.data[index], (a,), grad_fn)


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of a vector into an ``n x k`` matrix."""

    if a.data.ndim != 1:
        raise ShapeError(f"repeat_rows: expected a vector, got shape {a.shape}")
    return _result("repeat_rows", np.tile(a.data, (n, 1)), (a,), lambda g: (g.sum(axis=0),))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} vs tensor shape {a.shape}")
    keep = ~mask
    return _result("masked_fill", np.where(mask, value, a.data), (a,), lambda g: (g * keep,))


# Nonlinearities


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""

    x = a.data
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result("softmax", y, (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""

    x = a.data
    th = np.tanh(GELU_C * (x + GELU_K * x**3))
    y = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        du = GELU_C * (1.0 + 3.0 * GELU_K * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _result("gelu", y, (a,), grad_fn)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result("softplus", y, (a,), lambda g: (g * sig,))


def ln(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("ln: input must be strictly positive")
    return _result("ln", np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    if float(exponent).is_integer():
        k = int(exponent)
        if k < 0 and np.any(x == 0):
            raise DomainError("power: zero base with negative exponent")
        if k == 0:
            return _result("power", np.ones_like(x), (a,), lambda g: (np.zeros_like(x),))
        return _result("power", x**k, (a,), lambda g: (g * k * x ** (k - 1),))
    if np.any(x <= 0):
        raise DomainError("power: non-integer exponent needs a strictly positive base")
    y = x**exponent
    return _result("power", y, (a,), lambda g: (g * exponent * y / x,))


# Gradient checking


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        return f().item()


def finite_difference(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5,
                      coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of ``f`` with respect to ``param`` (flattened coordinates)."""

    param.data = np.ascontiguousarray(param.data)
    flat = param.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size, dtype=np.float64)
    for i in indices:
        original = flat[i]
        flat[i] = original + eps
        plus = _evaluate(f)
        flat[i] = original - eps
        minus = _evaluate(f)
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return out.reshape(param.shape)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, *,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``max_coords`` limits the check to a seeded sample of coordinates per parameter, which keeps
    full-model checks fast.
    """

    first, second = _evaluate(f), _evaluate(f)
    if first != second:
        raise DeterminismError(f"function is not deterministic: {first!r} != {second!r}")

    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss, accumulate=False)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for param in params:
        size = param.size
        if max_coords is not None and size > max_coords:
            coords = sorted(rng.choice(size, size=max_coords, replace=False).tolist())
        else:
            coords = list(range(size))
        analytic = grads.get(param.node_id, np.zeros(param.shape)).reshape(-1)
        numeric = finite_difference(f, param, eps, coords).reshape(-1)
        for i in coords:
            denom = max(1e-8, abs(analytic[i]) + abs(numeric[i]))
            worst = max(worst, abs(analytic[i] - numeric[i]) / denom)
    return worst
