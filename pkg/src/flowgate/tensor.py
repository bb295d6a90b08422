"""Dense tensors with a dynamic reverse-mode tape.

Every differentiable operation returns a :class:`Tensor` whose ``node`` records
the inputs it consumed and a closure mapping the output gradient to input
gradients. :func:`backward` walks that record in reverse topological order.

Values live in row-major numpy buffers (last axis fastest). Training uses
float32; gradient checks build the same graph at float64.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the discrete choices (ReLU masks, pooling argmaxes) made inside the block."""
    prev = getattr(_state, "branches", None)
    log: list[np.ndarray] = []
    _state.branches = log
    try:
        yield log
    finally:
        _state.branches = prev


def note_branch(choice: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(np.array(choice, copy=True))


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass(eq=False)
class Node:
    """One entry of the forward record."""

    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    cache: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def linear_index(self, coord: Sequence[int]) -> int:
        """Row-major offset of ``coord`` into the value buffer."""
        return int(np.ravel_multi_index(tuple(coord), self.shape))

    def coord(self, index: int) -> tuple:
        return tuple(int(i) for i in np.unravel_index(index, self.shape))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return elementwise_mul(self, other) if _same_shape(self, other) else scale_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _same_shape(a, b) -> bool:
    return isinstance(b, Tensor) and a.shape == b.shape


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str, **cache) -> Tensor:
    """Wrap ``data`` and attach a tape node if any input requires grad."""
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn, cache)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementary ops ------------------------------------------------------

def add(a, b) -> Tensor:
    """Sum with trailing-axis broadcasting (used for bias addition)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), bw, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        return g * b.data, g * a.data

    return make_result(a.data * b.data, (a, b), bw, "mul")


def scale_mul(a: Tensor, s) -> Tensor:
    """Multiply by a Python/numpy scalar constant."""
    if isinstance(s, Tensor):
        raise ValueError(f"elementwise_mul shape mismatch: {a.shape} vs {s.shape}")
    s = float(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return make_result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return make_result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def take_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along the last axis."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return make_result(np.ascontiguousarray(a.data[..., start:stop]), (a,), bw, "take_last")


# -- reverse pass ---------------------------------------------------------

def _topological(loss: Tensor) -> list:
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate, so several records can be summed into the same
    parameters before an optimizer step.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise RuntimeError("backward called on a tensor without a forward record")
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(_topological(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- numerical oracle ------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-6,
                     indices: Sequence[int] | None = None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place and restored. With ``indices`` only those
    flat coordinates are probed; the others stay zero in the result.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return Tensor(out.reshape(x.shape), dtype=np.float64)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data.reshape(()))
    return float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|) over coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
                   max_coords: int | None = None, rng: np.random.Generator | None = None,
                   avoid_kinks: bool = False, stats: dict | None = None) -> float:
    """Compare backward() against central differences for each tensor in ``params``.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar. Returns the worst relative error across the probed coordinates.

    With ``avoid_kinks`` a coordinate whose +-h probes take a different
    piecewise branch (a ReLU flips sign or a max-pool argmax moves) than the
    unperturbed forward is skipped and another one drawn, since the central
    difference there straddles a point of non-differentiability. ``stats``
    receives the numbers of probed and skipped coordinates.
    """
    for p in params:
        p.grad = None
    with record_branches() as base:
        loss = f()
    backward(loss)
    rng = rng or np.random.default_rng(0)
    worst, probed, skipped = 0.0, 0, 0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1)
        want = p.size if max_coords is None else min(max_coords, p.size)
        if not avoid_kinks:
            idx = np.arange(p.size) if want == p.size else np.sort(rng.choice(p.size, size=want, replace=False))
            numeric = finite_diff_grad(lambda _x: f(), p, h, indices=idx).data.reshape(-1)
            worst = max(worst, relative_error(analytic[idx], numeric[idx]))
            probed += idx.size
            continue
        order = np.arange(p.size) if want == p.size else rng.permutation(p.size)
        flat = p.data.reshape(-1)
        accepted = 0
        with no_grad():
            for i in order:
                if accepted == want:
                    break
                orig = flat[i]
                flat[i] = orig + h
                with record_branches() as plus:
                    fp = _scalar(f())
                flat[i] = orig - h
                with record_branches() as minus:
                    fm = _scalar(f())
                flat[i] = orig
                if not (_same_branches(base, plus) and _same_branches(base, minus)):
                    skipped += 1
                    continue
                worst = max(worst, relative_error(analytic[i:i + 1], np.array([(fp - fm) / (2 * h)])))
                accepted += 1
                probed += 1
    if stats is not None:
        stats["probed"] = stats.get("probed", 0) + probed
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst
