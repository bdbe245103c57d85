"""Dense float64 tensors with a reverse-mode tape and a finite-difference checker.

Every numeric path in the package goes through the ops defined here. Storage is a
row-major ``numpy.ndarray`` of doubles; differentiation is our own tape.

Recording is explicit::

    with GradTape() as tape:
        loss = some_function(params)
    grads = backward(loss, tape)

Ops executed outside an active tape simply compute values.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "TapeError",
    "Tensor",
    "GradTape",
    "CounterRNG",
    "tensor",
    "parameter",
    "init_uniform",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "add_constant",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "concat",
    "split",
    "mean_pool",
    "masked_mean",
    "sum_all",
    "square",
    "reshape",
    "transpose",
    "take",
    "gather_rows",
    "outer_augmented",
    "backward",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of a gradient tape (stale tape, non-scalar loss)."""


class Tensor:
    """Immutable dense array of doubles.

    ``requires_grad`` marks leaves (parameters) whose gradients ``backward``
    reports. Intermediate tensors produced on a tape carry a reference to the
    node that made them.
    """

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t._node = None
        return t

    def _assign(self, arr: np.ndarray) -> None:
        # Optimizer-only: swap in new values between tapes. Recorded closures keep the old array.
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"cannot assign {arr.shape} into {self.data.shape}")
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor) and other.data.size != 1:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# --------------------------------------------------------------------------- tape


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Records differentiable ops in execution order (hence topologically sorted)."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "GradTape":
        stack = _active_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_stack().pop()


_local = threading.local()


def _active_stack() -> list[GradTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    result = Tensor._wrap(out)
    if not np.all(np.isfinite(result.data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    stack = _active_stack()
    if stack and any(_tracked(t) for t in inputs):
        tape = stack[-1]
        if tape.consumed:
            raise TapeError("tape already consumed by backward(); record a new one")
        node = _Node(op, inputs, result, vjp)
        result._node = node
        tape.nodes.append(node)
    return result


def backward(
    loss: Tensor, tape: GradTape, params: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from every ``requires_grad`` tensor reachable from the loss to
    its gradient (same shape as the tensor). When ``params`` is given, each of
    them gets an entry, zeros if the loss does not depend on it. A tape supports
    one sweep.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("stale tape: backward() already ran on it")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    grads[id(loss)] = np.ones_like(loss.data)
    if loss.requires_grad:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not _tracked(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if inp.requires_grad:
                leaves[key] = inp

    result = {t: grads[key] for key, t in leaves.items()}
    for p in params or ():
        if p not in result:
            result[p] = np.zeros_like(p.data)
    return result


# --------------------------------------------------------------------------- rng


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class CounterRNG:
    """Counter-based generator: draw ``i`` of stream ``key`` is SplitMix64(key*φ + i).

    The key is derived from ``seed`` and an optional string label via BLAKE2b, so
    independent consumers (``rng.child("shuffle")``) get decorrelated streams
    without sharing state. Uniforms use the top 53 bits. Output is identical on
    every platform with IEEE doubles.
    """

    def __init__(self, seed: int, label: str = ""):
        self.seed = int(seed)
        self.label = label
        digest = hashlib.blake2b(f"{self.seed}/{label}".encode(), digest_size=8).digest()
        self._key = np.uint64(int.from_bytes(digest, "little"))
        self._counter = 0

    def child(self, label: str) -> "CounterRNG":
        return CounterRNG(self.seed, f"{self.label}/{label}" if self.label else label)

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _splitmix64(self._key * _GOLDEN + idx)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Box-Muller on pairs of uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # in (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.bits(n)
        return np.argsort(keys, kind="stable")


def init_uniform(rng: CounterRNG, shape: Sequence[int], fan_in: int | None = None) -> Tensor:
    """Parameter drawn from U[-1/sqrt(fan_in), 1/sqrt(fan_in)]; fan_in defaults to shape[0]."""
    fan_in = shape[0] if fan_in is None else fan_in
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(shape, -bound, bound))


# --------------------------------------------------------------------------- ops


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has exactly ``a``'s leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = _sum_to(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _emit("matmul", A @ B, (a, b), vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, s) -> Tensor:
    """Scalar times tensor. ``s`` is a float or a single-element Tensor."""
    if not isinstance(s, Tensor):
        s = float(s)
        return _emit("scale", x.data * s, (x,), lambda g: (g * s,))
    if s.data.size != 1:
        raise DimensionError(f"scale factor must have one element, got shape {s.shape}")
    sv = float(s.data.reshape(-1)[0])
    X = x.data
    return _emit(
        "scale",
        X * sv,
        (x, s),
        lambda g: (g * sv, np.full(s.shape, float(np.sum(g * X)))),
    )


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n]: the one sanctioned row broadcast (dense-layer bias)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias shape {b.shape} does not fit {x.shape}")
    n = b.shape[0]
    return _emit(
        "add_bias", x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0))
    )


def add_constant(x: Tensor, c) -> Tensor:
    """x + c for a non-differentiable numpy constant of x's shape (e.g. an attention mask)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise DimensionError(f"constant shape {c.shape} does not match {x.shape}")
    return _emit("add_constant", x.data + c, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    X = x.data
    return _emit("relu", np.maximum(X, 0.0), (x,), lambda g: (g * (X > 0),))


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    e = np.exp(-np.abs(X))
    out = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit(
        "log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    first = tensors[0]
    axis = _axis(first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {first.shape} and {t.shape} disagree"
            )
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: np.split(g, cuts, axis=axis),
    )


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of ``concat``: slice ``x`` into consecutive pieces of the given sizes."""
    axis = _axis(x, axis)
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def vjp(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        out.append(_emit("slice", x.data[index], (x,), vjp))
        start += size
    return out


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean along ``axis`` (the sequence axis of a ``[seq, d]`` tensor)."""
    axis = _axis(x, axis)
    n = x.shape[axis]
    if x.ndim == 1:
        raise DimensionError("mean_pool needs a sequence axis and a feature axis")
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit("mean_pool", x.data.mean(axis=axis), (x,), vjp)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``x[..., seq, d]`` counting only rows where ``mask`` is true.

    With an all-true mask this equals ``mean_pool(x, axis=-2)``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match {x.shape[:-1]}")
    counts = mask.sum(axis=-1, keepdims=True).astype(np.float64)
    if np.any(counts == 0):
        raise DimensionError("masked_mean over an empty sequence")
    w = mask[..., None] / counts[..., None]
    return _emit("masked_mean", (x.data * w).sum(axis=-2), (x,), lambda g: (np.expand_dims(g, -2) * w,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(np.reshape(g, -1)[0])),))


def square(x: Tensor) -> Tensor:
    X = x.data
    return _emit("square", X * X, (x,), lambda g: (2.0 * g * X,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take(x: Tensor, index: int) -> Tensor:
    """Single element of a 1-D tensor, as a shape-(1,) tensor."""
    if x.ndim != 1:
        raise DimensionError(f"take expects a vector, got {x.shape}")
    size = x.shape[0]
    if not 0 <= index < size:
        raise DimensionError(f"index {index} out of range for length {size}")

    def vjp(g):
        full = np.zeros(size)
        full[index] = float(g.reshape(-1)[0])
        return (full,)

    return _emit("take", x.data[index : index + 1], (x,), vjp)


def gather_rows(x: Tensor, labels: np.ndarray) -> Tensor:
    """x[i, labels[i]] for a ``[n, K]`` tensor; result has shape ``[n]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError(f"gather_rows: {x.shape} with labels {labels.shape}")
    rows = np.arange(x.shape[0])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[rows, labels] = g
        return (full,)

    return _emit("gather_rows", x.data[rows, labels], (x,), vjp)


def outer_augmented(a: Tensor, t: Tensor) -> Tensor:
    """Flattened ``[a; 1] ⊗ [t; 1]`` (row-major), length ``(da+1)*(dt+1)``.

    Leading batch axes are allowed as long as ``a`` and ``t`` share them.
    """
    if a.shape[:-1] != t.shape[:-1]:
        raise DimensionError(f"outer_augmented batch axes differ: {a.shape} vs {t.shape}")
    A, T = a.data, t.data
    lead = A.shape[:-1]
    a1 = np.concatenate([A, np.ones(lead + (1,))], axis=-1)
    t1 = np.concatenate([T, np.ones(lead + (1,))], axis=-1)
    outer = a1[..., :, None] * t1[..., None, :]
    da, dt = a1.shape[-1], t1.shape[-1]

    def vjp(g):
        G = g.reshape(lead + (da, dt))
        ga = (G * t1[..., None, :]).sum(axis=-1)[..., :-1]
        gt = (G * a1[..., :, None]).sum(axis=-2)[..., :-1]
        return ga, gt

    return _emit("outer_augmented", outer.reshape(lead + (da * dt,)), (a, t), vjp)


# --------------------------------------------------------------------------- checking


def finite_diff_check(
    f: Callable[..., Tensor],
    point: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``f`` maps the point tensor(s) to a scalar Tensor. Analytic gradients come
    from one taped evaluation; the numerical side re-evaluates ``f`` on plain
    perturbed copies.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    leaves = [parameter(p.data) for p in points]
    with GradTape() as tape:
        out = f(*leaves)
    grads = backward(out, tape)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(leaf.data)).reshape(-1)
        base = leaf.data.reshape(-1)
        for j in range(base.size):
            bumped = []
            for sign in (1.0, -1.0):
                probe = base.copy()
                probe[j] += sign * eps
                args = [Tensor(p.data) for p in leaves]
                args[i] = Tensor(probe.reshape(leaf.shape))
                bumped.append(f(*args).item())
            numeric = (bumped[0] - bumped[1]) / (2.0 * eps)
            err = abs(analytic[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
