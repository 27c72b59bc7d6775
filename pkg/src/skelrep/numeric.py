"""Dense float64 tensor kernel with reverse-mode gradients.

Everything downstream (recurrent encoders, contrastive and reconstruction
losses, the optimizer) is built on this module. The design is deliberately
small: a `Tensor` wraps a numpy array and remembers how to push a gradient
to its parents, `backward()` walks the tape once, and `finite_diff_grad`
provides the independent derivative oracle used by the test suite. There is
no support for arbitrary graphs beyond the operations defined here, no
broadcasting beyond bias addition, and no dtype other than float64.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, OracleError, ShapeError

_MASK64 = (1 << 64) - 1

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (stop-gradient)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus an optional position on the gradient tape.

    `data` is treated as immutable after construction; only `Parameter`
    values are mutated, and only by the optimizer and momentum updates.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad for every reachable leaf."""
        if self.data.size != 1:
            raise ArgumentError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf: value, accumulated gradient, optimizer momentum buffer."""

    __slots__ = ("momentum_buf",)

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.momentum_buf = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)  # own the buffer; g may be a view into live storage
    else:
        t.grad += g


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Create a tape node; `backward` receives the node's output gradient.

    Intended for fused kernels (the recurrent layer) that compute their own
    parent gradients in one pass. When the tape is disabled or no parent
    requires a gradient, a detached tensor is returned and `backward` is
    dropped.
    """
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(p for p in parents if p.requires_grad)

    def _run():
        backward(out.grad)

    out._backward = _run
    return out


# ---------------------------------------------------------------------------
# primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the last axis."""
    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape[-1:] == b.shape):
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g)
        if b.shape == a.shape:
            _accumulate(b, g)
        else:
            _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return make_node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return make_node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return make_node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accumulate(a, g * c)

    return make_node(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; a 1-D left operand is treated as a single row."""
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.data.T)
        if a.data.ndim == 1:
            _accumulate(b, np.outer(a.data, g))
        else:
            _accumulate(b, a.data.T @ g)

    return make_node(a.data @ b.data, (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    t = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def bw(g):
        _accumulate(x, g * y * (1.0 - y))

    return make_node(y, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - y * y))

    return make_node(y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accumulate(x, g * mask)

    return make_node(np.where(mask, x.data, 0.0), (x,), bw)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity, kind in {sigmoid, tanh, relu}."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ArgumentError(f"unknown activation kind {kind!r}") from None
    return fn(x)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        _accumulate(x, np.full_like(x.data, float(g) / n))

    return make_node(np.asarray(x.data.mean()), (x,), bw)


def mean_axis0(x: Tensor) -> Tensor:
    n = x.data.shape[0]

    def bw(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape).copy())

    return make_node(x.data.mean(axis=0), (x,), bw)


def sum_last_keepdim(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return make_node(x.data.sum(axis=-1, keepdims=True), (x,), bw)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[..., lo:hi])

    return make_node(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bw)


def concat_axis0(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return make_node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def slice_axis1(x: Tensor, start: int, stop: int) -> Tensor:
    """Select [start:stop) along axis 1 of a 3-D tensor."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return make_node(x.data[:, start:stop].copy(), (x,), bw)


def reverse_time(x: Tensor) -> Tensor:
    """Flip axis 0 (the time axis)."""

    def bw(g):
        _accumulate(x, g[::-1].copy())

    return make_node(x.data[::-1].copy(), (x,), bw)


def repeat_time(x: Tensor, steps: int) -> Tensor:
    """Tile a (B,H) state into a (steps,B,H) constant sequence."""

    def bw(g):
        _accumulate(x, g.sum(axis=0))

    return make_node(np.broadcast_to(x.data, (steps,) + x.data.shape).copy(), (x,), bw)


def index_time(x: Tensor, t: int) -> Tensor:
    """Select step t from a (T,...) tensor."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[t] = g
        _accumulate(x, full)

    return make_node(x.data[t].copy(), (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        _accumulate(x, g.reshape(x.data.shape))

    return make_node(x.data.reshape(shape), (x,), bw)


def hadamard_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array (dropout masks and similar)."""
    if x.shape != arr.shape:
        raise ShapeError(f"hadamard_const: {x.shape} vs {arr.shape}")

    def bw(g):
        _accumulate(x, g * arr)

    return make_node(x.data * arr, (x,), bw)


# ---------------------------------------------------------------------------
# composite operations


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise x @ w + b."""
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: x {x.shape}, w {w.shape}, b {b.shape}")
    return add(matmul(x, w), b)


def softmax_xent(logits: Tensor, target) -> Tensor:
    """Cross-entropy of softmax(logits) against an integer target.

    Accepts a single logit vector with a scalar target, or a (B,n) batch
    with a length-B target array; the batched loss is the per-row mean.
    Softmax is computed with max subtraction. The logits gradient is
    (softmax - onehot), divided by B in the batched case.
    """
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
        targets = np.array([int(target)])
        batched = False
    else:
        targets = np.asarray(target, dtype=np.int64)
        if targets.shape != (z.shape[0],):
            raise ArgumentError(
                f"softmax_xent: expected {z.shape[0]} targets, got {targets.shape}"
            )
        batched = True
    n = z.shape[1]
    if np.any(targets < 0) or np.any(targets >= n):
        raise ArgumentError(f"softmax_xent: target out of range [0, {n})")

    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    logsumexp = np.log(expz.sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[rows, targets]))

    def bw(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        d *= float(g) / z.shape[0]
        _accumulate(logits, d if batched else d[0])

    return make_node(np.asarray(loss), (logits,), bw)


DEGENERATE_NORM_EPS = 1e-12


def l2_normalize(v: Tensor) -> tuple[Tensor, bool]:
    """Scale a vector to unit norm; near-zero input maps to zero, flagged."""
    if v.data.ndim != 1:
        raise ShapeError(f"l2_normalize expects a vector, got {v.shape}")
    norm = float(np.linalg.norm(v.data))
    if norm <= DEGENERATE_NORM_EPS:
        def bw_zero(g):
            _accumulate(v, np.zeros_like(v.data))

        return make_node(np.zeros_like(v.data), (v,), bw_zero), True
    y = v.data / norm

    def bw(g):
        _accumulate(v, (g - np.dot(g, y) * y) / norm)

    return make_node(y, (v,), bw), False


def l2_normalize_rows(m: Tensor) -> tuple[Tensor, np.ndarray]:
    """Row-wise unit normalization; returns a boolean mask of degenerate rows."""
    norms = np.linalg.norm(m.data, axis=1, keepdims=True)
    degenerate = norms[:, 0] <= DEGENERATE_NORM_EPS
    safe = np.where(degenerate[:, None], 1.0, norms)
    y = np.where(degenerate[:, None], 0.0, m.data / safe)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        d = (g - dot * y) / safe
        d[degenerate] = 0.0
        _accumulate(m, d)

    return make_node(y, (m,), bw), degenerate


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(
    params: Iterable[Parameter],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """Heavy-ball SGD: g += wd*value; buf = momentum*buf + g; value -= lr*buf.

    Weight decay is folded into the gradient before the momentum
    accumulation. Gradients are zeroed afterwards.
    """
    if lr < 0:
        raise ArgumentError(f"learning rate must be >= 0, got {lr}")
    for p in params:
        g = p.grad + weight_decay * p.data
        p.momentum_buf *= momentum
        p.momentum_buf += g
        p.data -= lr * p.momentum_buf
        p.zero_grad()


# ---------------------------------------------------------------------------
# reproducible randomness


class RngStream:
    """Counter-based random stream: (seed, counter) fully determines draws.

    Every draw spins up a fresh Philox generator keyed on (seed, counter)
    and bumps the counter, so sequences are reproducible regardless of how
    calls interleave across objects. `substream` derives an independent
    child stream from hashed tags, which lets per-epoch / per-batch streams
    be reconstructed exactly when resuming a run.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64

    def _next(self) -> np.random.Generator:
        key = np.array([self.seed, self.counter], dtype=np.uint64)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._next().normal(loc, scale, shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._next().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def substream(self, *tags) -> "RngStream":
        h = hashlib.blake2b(digest_size=8)
        h.update(self.seed.to_bytes(8, "little"))
        for t in tags:
            h.update(repr(t).encode("utf-8"))
            h.update(b"\x1f")
        return RngStream(int.from_bytes(h.digest(), "little"))


# ---------------------------------------------------------------------------
# derivative oracle


def finite_diff_grad(f, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    Kept independent of the tape on purpose: it re-evaluates `f` on
    perturbed copies of `x.data` and never inspects analytic gradients.
    """
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        val = float(out.data) if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise OracleError("finite_diff_grad: function returned non-finite value")
        return val

    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    work = base.reshape(-1)
    for i in range(work.size):
        orig = work[i]
        work[i] = orig + eps
        hi = evaluate(base)
        work[i] = orig - eps
        lo = evaluate(base)
        work[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Worst per-coordinate relative error, floored to absorb fd noise near 0."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_finite(arr: np.ndarray, what: str = "array") -> None:
    from .errors import NumericError

    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
