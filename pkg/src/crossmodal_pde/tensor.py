"""Dense float32 tensors with reverse-mode autodiff and the SGD/Adam/AdamW optimizers.

Storage is 32-bit; reductions (sum, mean, softmax/logsumexp normalizers,
layer-norm statistics) accumulate in 64-bit before casting back.  The tape is
built per forward pass and freed by ``backward``; there are no higher-order
gradients.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation was called outside its contract (non-shape)."""


_tape_state = threading.local()  # tapes are thread-confined, so is this flag


def grad_enabled() -> bool:
    return getattr(_tape_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (pure-numpy forward)."""
    prev = grad_enabled()
    _tape_state.enabled = False
    try:
        yield
    finally:
        _tape_state.enabled = prev


class Tensor:
    """A dense n-dimensional float32 array, optionally on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def validate_finite(self) -> None:
        """Raise if the payload contains NaN or Inf."""
        if not np.all(np.isfinite(self.data)):
            bad = int(np.count_nonzero(~np.isfinite(self.data)))
            raise ContractError(f"tensor has {bad} non-finite entries")

    def copy(self) -> "Tensor":
        """Leaf copy of the current values (off the tape)."""
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from this scalar.

        Repeated calls (on fresh tapes) accumulate into existing ``grad``
        buffers.  The tape below this node is freed afterwards.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    buf = flowing.get(id(parent))
                    if buf is None:
                        flowing[id(parent)] = pg.astype(np.float32, copy=True)
                    else:
                        buf += pg
        # free the tape
        for node in topo:
            node._parents = ()
            node._backward = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        )

    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: ((a, g * 2.0 * a.data),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return ((a, g * (0.5 / out)),)

    return _make(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


_INV_SQRT2 = np.float32(0.7071067811865476)
_INV_SQRT_2PI = np.float32(0.3989422804014327)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data.astype(np.float64) * 0.7071067811865476)).astype(np.float32)
    out = a.data * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(np.float32(-0.5) * a.data * a.data)
        return ((a, g * (cdf + a.data * pdf)),)

    return _make(out, (a,), bwd)


def maximum_const(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = _as_tensor(a)
    out = np.maximum(a.data, np.float32(floor))
    keep = a.data > np.float32(floor)

    def bwd(g):
        return ((a, g * keep),)

    return _make(out, (a,), bwd)


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; supports identical leading batch dims (no batch broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs at least 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return (
            (a, g @ np.swapaxes(b.data, -1, -2)),
            (b, np.swapaxes(a.data, -1, -2) @ g),
        )

    return _make(out, (a, b), bwd)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return ((a, np.ascontiguousarray(g.transpose(inv))),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def transpose_last2(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.ndim
    axes = tuple(range(n - 2)) + (n - 1, n - 2)
    return transpose(a, axes)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def bwd(g):
        return ((a, g.reshape(old)),)

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            slicer[axis] = slice(lo, hi)
            grads.append((p, g[tuple(slicer)]))
        return tuple(grads)

    return _make(out, tuple(parts), bwd)


def take_rows(a, idx) -> Tensor:
    """Gather rows (axis 0) by integer index; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return ((a, acc),)

    return _make(out, (a,), bwd)


def take_cols(a, idx) -> Tensor:
    """Gather columns (axis 1) of a 2-D tensor by integer index."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("take_cols expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[:, idx]

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc.T, idx, g.T)
        return ((a, acc),)

    return _make(out, (a,), bwd)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data[start:stop].copy()

    def bwd(g):
        acc = np.zeros_like(a.data)
        acc[start:stop] = g
        return ((a, acc),)

    return _make(out, (a,), bwd)


def gather_lastdim(a, idx) -> Tensor:
    """Pick one entry per row along the last dim: out[...] = a[..., idx[...]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} must match leading dims {a.data.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.put_along_axis(acc, idx[..., None], g[..., None], axis=-1)
        return ((a, acc),)

    return _make(out, (a,), bwd)


# -- reductions (64-bit accumulation) ----------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.data.shape)),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else int(np.prod([a.data.shape[i] for i in axis]))

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, a.data.shape)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / n, a.data.shape)),)

    return _make(out, (a,), bwd)


def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last dim.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    weight exactly 0.0 and are excluded from the normalizer, so masked
    positions have bit-exact zero influence downstream.
    """
    x = _as_tensor(x)
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)  # exp(-inf) == 0.0 exactly
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    out = (e / denom).astype(np.float32)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
        return ((x, out * (g - dot)),)

    return _make(out, (x,), bwd)


def logsumexp_lastdim(x, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    zmax = x.data.max(axis=-1, keepdims=True)
    e = np.exp((x.data - zmax).astype(np.float64))
    s = e.sum(axis=-1, keepdims=True)
    out64 = np.log(s) + zmax
    soft = (e / s).astype(np.float32)
    out = out64.astype(np.float32) if keepdims else out64[..., 0].astype(np.float32)

    def bwd(g):
        gg = g if keepdims else g[..., None]
        return ((x, gg * soft),)

    return _make(out, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-dim row to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    x64 = x.data.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = ((x64 - mean) * inv).astype(np.float32)
    out = xhat * gain.data + bias.data

    def bwd(g):
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
        dx = inv * (gx - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes, dtype=np.float64).astype(np.float32)
        dbias = g.sum(axis=axes, dtype=np.float64).astype(np.float32)
        return ((x, dx), (gain, dgain), (bias, dbias))

    return _make(out, (x, gain, bias), bwd)


# -- optimizers --------------------------------------------------------

OPTIMIZER_KINDS = ("sgd", "adam", "adamw")


@dataclass
class OptimizerState:
    """State for one optimizer bound to a fixed parameter list (by position)."""

    kind: str
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")


def optimizer_step(state: OptimizerState, params: list[Tensor]) -> None:
    """Apply one update to every parameter; all must carry gradients."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} has no gradient")
    state.step_count += 1
    t = state.step_count
    lr = np.float32(state.learning_rate)
    if state.kind == "sgd":
        for p in params:
            p.data -= lr * p.grad
        return
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    eps = np.float32(state.eps)
    c1 = np.float32(1.0 - state.beta1**t)
    c2 = np.float32(1.0 - state.beta2**t)
    for i, p in enumerate(params):
        m, v = state.moments.get(i, (None, None))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (np.float32(1.0) - b1) * p.grad
        v = b2 * v + (np.float32(1.0) - b2) * (p.grad * p.grad)
        state.moments[i] = (m, v)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if state.kind == "adamw" and state.weight_decay > 0:
            p.data -= lr * np.float32(state.weight_decay) * p.data
        p.data -= lr * update


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
