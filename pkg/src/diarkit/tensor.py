"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Values are float64 numpy arrays. Every operation returns a new ``Tensor``
carrying a backward closure; ``backward(loss)`` replays the closures in
reverse topological order and accumulates gradients additively, so a tensor
used twice receives the sum of both contributions.

Elementwise arithmetic accepts exact-shape operands plus python scalars,
nothing else. Anything that looks like broadcasting (bias rows, depthwise
convolution, layer normalisation) is its own named operation with an
explicit backward rule.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad and _grad_enabled
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; scalar operands only besides exact shapes.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named, trainable tensor.

    Models register each Parameter exactly once (by object identity), which
    is what makes parameter-count comparisons across sharing configurations
    meaningful.
    """

    def __init__(self, data, name: str = ""):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def size(self) -> int:
        return self.tensor.size

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, float(b))
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, -float(b))
    _check_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        x.accumulate_grad(g * c)

    return _make(x.data * c, (x,), backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        x.accumulate_grad(g)

    return _make(x.data + c, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got {x.shape}")

    def backward(g):
        x.accumulate_grad(g.T)

    return _make(x.data.T.copy(), (x,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-D bias vector to every row of a (..., D) tensor."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} with bias {b.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        x.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        x.accumulate_grad(g * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), backward)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x), the conformer feed-forward activation."""
    s = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))
    out = x.data * s

    def backward(g):
        x.accumulate_grad(g * (s + x.data * s * (1.0 - s)))

    return _make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        x.accumulate_grad(g / x.data)

    return _make(np.log(x.data), (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where clamping engaged."""
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        x.accumulate_grad(g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        x.accumulate_grad(out * (g - inner))

    return _make(out, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each position over the last axis, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain/bias {gain.shape}/{bias.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad((gy - m1 - xhat * m2) * inv)

    return _make(out, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = rng.random(x.shape) >= p
    mask = keep / (1.0 - p)

    def backward(g):
        x.accumulate_grad(g * mask)

    return _make(x.data * mask, (x,), backward)


# ---------------------------------------------------------------------------
# reductions / shape ops


def tensor_sum(x: Tensor) -> Tensor:
    def backward(g):
        x.accumulate_grad(np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        x.accumulate_grad(np.full_like(x.data, float(g) / n))

    return _make(np.asarray(x.data.mean()), (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows: empty input")
    width = parts[0].shape[-1]
    for p in parts:
        if p.ndim != 2 or p.shape[1] != width:
            raise DimensionError("concat_rows: all parts must be 2-D with equal width")
    counts = [p.shape[0] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, counts):
            if p.requires_grad:
                p.accumulate_grad(g[offset : offset + n])
            offset += n

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_cols: empty input")
    height = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != height:
            raise DimensionError("concat_cols: all parts must be 2-D with equal height")
    widths = [p.shape[1] for p in parts]

    def backward(g):
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate_grad(g[:, offset : offset + w])
            offset += w

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(f"slice_cols: [{start}:{stop}] of {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate_grad(full)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def depthwise_conv1d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 1-D convolution along rows with same zero padding.

    x is (T, D), w is (K, D) with K odd, bias is (D,).
    """
    t, d = x.shape
    k = w.shape[0]
    if w.ndim != 2 or w.shape[1] != d or k % 2 == 0:
        raise DimensionError(f"depthwise_conv1d: kernel {w.shape} for input {x.shape}")
    pad = k // 2
    xp = np.zeros((t + 2 * pad, d))
    xp[pad : pad + t] = x.data
    out = np.zeros((t, d))
    for j in range(k):
        out += w.data[j] * xp[j : j + t]
    out += bias.data

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for j in range(k):
                gx[j : j + t] += w.data[j] * g
            x.accumulate_grad(gx[pad : pad + t])
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[j] = (g * xp[j : j + t]).sum(axis=0)
            w.accumulate_grad(gw)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _make(out, (x, w, bias), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from a scalar loss."""
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any trainable tensor")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# module / parameter registry


class Module:
    """Base class for parameterised components.

    Children and parameters are discovered from instance attributes in
    definition order, so registries (and checkpoints) are deterministic.
    Shared sub-modules appear once, keyed by the first name that reached
    them.
    """

    def __init__(self):
        self.training = False

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        found: list[tuple[str, Parameter]] = []
        seen: set[int] = set()
        self._collect("", found, seen)
        return found

    def _collect(self, prefix: str, found: list, seen: set) -> None:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            self._collect_value(name, value, found, seen)

    def _collect_value(self, name: str, value, found: list, seen: set) -> None:
        if isinstance(value, Parameter):
            if id(value) not in seen:
                seen.add(id(value))
                value.name = value.name or name
                found.append((name, value))
        elif isinstance(value, Module):
            if id(value) not in seen:
                seen.add(id(value))
                value._collect(f"{name}.", found, seen)
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                self._collect_value(f"{name}.{i}", item, found, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for _, value in vars(self).items():
            if isinstance(value, Module):
                value.set_training(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.set_training(flag)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Fan-balanced uniform init for 2-D weights; 1/sqrt(n) band otherwise."""
    if len(shape) == 2:
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    else:
        limit = np.sqrt(1.0 / max(1, int(np.prod(shape[:-1]))))
    return rng.uniform(-limit, limit, size=shape)
