"""Dense float64 tensors with reverse-mode differentiation.

Every trainable component in the package (encoder pretraining, projection,
decoder, linear-probe head) goes through this module.  Tensors form an
implicit tape: each op output records its parents and a backward closure,
and `backward` walks the tape exactly once in reverse topological order.

All values are float64.  Any op that produces a NaN or Inf raises
`NonFiniteError` naming the op; training loops add the step index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf values."""


_node_ids = itertools.count()


class Tensor:
    """A float64 array plus autodiff bookkeeping.

    `trainable` marks leaves whose gradients `backward` should report.
    Intermediate tensors carry `_grad_fn`, a closure mapping the output
    gradient to per-parent gradients (None for parents that need none).
    """

    __slots__ = ("values", "grad", "trainable", "name", "node_id",
                 "_parents", "_grad_fn", "_op", "_needs_grad")

    def __init__(self, values, trainable: bool = False, name: str | None = None, *,
                 _op: str = "leaf",
                 _parents: tuple["Tensor", ...] = (),
                 _grad_fn: Callable | None = None):
        vals = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError(f"non-finite values entering op '{_op}'")
        self.values = vals
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.name = name
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._op = _op
        self._needs_grad = trainable or any(p._needs_grad for p in _parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(op={self._op!r}, shape={self.values.shape}, trainable={self.trainable})"


def _make(values: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    return Tensor(values, _op=op, _parents=parents, _grad_fn=grad_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {av.shape} and {bv.shape}")
    inner_b = bv.shape[1] if transpose_b else bv.shape[0]
    if av.shape[1] != inner_b:
        raise ValueError(f"matmul shape mismatch: {av.shape} x {bv.shape} (transpose_b={transpose_b})")
    out = av @ (bv.T if transpose_b else bv)

    def grad_fn(g):
        ga = gb = None
        if a._needs_grad:
            ga = g @ (bv if transpose_b else bv.T)
        if b._needs_grad:
            gb = g.T @ av if transpose_b else av.T @ g
        return ga, gb

    return _make(out, "matmul", (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.values + b.values

    def grad_fn(g):
        ga = _unbroadcast(g, a.values.shape) if a._needs_grad else None
        gb = _unbroadcast(g, b.values.shape) if b._needs_grad else None
        return ga, gb

    return _make(out, "add", (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.values * b.values

    def grad_fn(g):
        ga = _unbroadcast(g * b.values, a.values.shape) if a._needs_grad else None
        gb = _unbroadcast(g * a.values, b.values.shape) if b._needs_grad else None
        return ga, gb

    return _make(out, "mul", (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    if not math.isfinite(c):
        raise ValueError("scale factor must be finite")
    out = a.values * c

    def grad_fn(g):
        return (g * c if a._needs_grad else None,)

    return _make(out, "scale", (a,), grad_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def grad_fn(g):
        return (g * (1.0 - out * out) if a._needs_grad else None,)

    return _make(out, "tanh", (a,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = a.values
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        if not a._needs_grad:
            return (None,)
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * d,)

    return _make(out, "gelu", (a,), grad_fn)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis, computed with max-subtraction.

    `mask` is a bool array broadcastable to `a` marking allowed positions;
    disallowed positions get probability exactly 0.0 (no -inf tensors ever
    enter the graph, and causality stays bitwise).
    """
    x = a.values
    if x.ndim != 2:
        raise ValueError(f"softmax expects a 2-d tensor, got shape {x.shape}")
    if mask is not None:
        mk = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mk.any(axis=-1).all():
            raise ValueError("softmax mask disallows an entire row")
        m = np.where(mk, x, -np.inf).max(axis=-1, keepdims=True)
        z = np.where(mk, x - m, -np.inf)
        with np.errstate(invalid="ignore"):
            e = np.exp(z)
    else:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        if not a._needs_grad:
            return (None,)
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _make(p, "softmax", (a,), grad_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization with learned gain/bias."""
    x = a.values
    if x.ndim != 2:
        raise ValueError(f"layer_norm expects a 2-d tensor, got shape {x.shape}")
    if gain.values.shape != (x.shape[1],) or bias.values.shape != (x.shape[1],):
        raise ValueError("layer_norm gain/bias must match the feature dim")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.values + bias.values

    def grad_fn(g):
        ga = gg = gb = None
        if a._needs_grad:
            gy = g * gain.values
            ga = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        if gain._needs_grad:
            gg = (g * xhat).sum(axis=0)
        if bias._needs_grad:
            gb = g.sum(axis=0)
        return ga, gg, gb

    return _make(out, "layer_norm", (a, gain, bias), grad_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray | Sequence[int]) -> Tensor:
    idv = np.asarray(ids, dtype=np.int64)
    if idv.ndim != 1:
        raise ValueError("embedding ids must be 1-d")
    V = table.values.shape[0]
    if idv.size and (idv.min() < 0 or idv.max() >= V):
        raise ValueError(f"embedding id out of range [0, {V})")
    out = table.values[idv]

    def grad_fn(g):
        if not table._needs_grad:
            return (None,)
        gt = np.zeros_like(table.values)
        np.add.at(gt, idv, g)
        return (gt,)

    return _make(out, "embedding_lookup", (table,), grad_fn)


def gather(a: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; the index array's shape is the output shape.

    Backward is scatter-add.  This is what lets the conv encoder stages be
    expressed as im2col + matmul without a dedicated conv op.
    """
    idx = np.asarray(flat_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.values.size):
        raise ValueError("gather index out of range")
    out = a.values.reshape(-1)[idx]

    def grad_fn(g):
        if not a._needs_grad:
            return (None,)
        flat = np.zeros(a.values.size, dtype=np.float64)
        np.add.at(flat, idx.reshape(-1), g.reshape(-1))
        return (flat.reshape(a.values.shape),)

    return _make(out, "gather", (a,), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.values.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.values.shape) if a._needs_grad else None,)

    return _make(out, "reshape", (a,), grad_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along the sequence (row) axis."""
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    cols = {p.values.shape[1] for p in parts if p.values.ndim == 2}
    if any(p.values.ndim != 2 for p in parts) or len(cols) != 1:
        raise ValueError("concat_rows parts must be 2-d with equal column counts")
    out = np.concatenate([p.values for p in parts], axis=0)
    sizes = [p.values.shape[0] for p in parts]

    def grad_fn(g):
        grads = []
        start = 0
        for p, n in zip(parts, sizes):
            grads.append(g[start:start + n] if p._needs_grad else None)
            start += n
        return tuple(grads)

    return _make(out, "concat_rows", tuple(parts), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.values.sum())

    def grad_fn(g):
        return (np.full(a.values.shape, float(g)) if a._needs_grad else None,)

    return _make(out, "sum_all", (a,), grad_fn)


def token_cross_entropy(probs: Tensor, targets: np.ndarray | Sequence[int],
                        mask: np.ndarray | Sequence[bool]) -> Tensor:
    """-(1/m) * sum over masked positions of log p(target).

    `probs` are post-softmax rows over the vocabulary; `mask` picks the
    answer-span positions that contribute to the loss (m = mask.sum()).
    """
    tv = np.asarray(targets, dtype=np.int64)
    mk = np.asarray(mask, dtype=bool)
    pv = probs.values
    if pv.ndim != 2:
        raise ValueError("token_cross_entropy expects 2-d probabilities")
    n, V = pv.shape
    if tv.shape != (n,) or mk.shape != (n,):
        raise ValueError("targets/mask must be 1-d with one entry per row")
    if tv.size and (tv.min() < 0 or tv.max() >= V):
        raise ValueError(f"target id out of range [0, {V})")
    m = int(mk.sum())
    if m == 0:
        raise ValueError("answer-span mask selects no positions")
    rows = np.nonzero(mk)[0]
    picked = pv[rows, tv[rows]]
    with np.errstate(divide="ignore"):
        out = np.asarray(-np.log(picked).sum() / m)

    def grad_fn(g):
        if not probs._needs_grad:
            return (None,)
        gp = np.zeros_like(pv)
        gp[rows, tv[rows]] = -float(g) / (m * picked)
        return (gp,)

    return _make(out, "token_cross_entropy", (probs,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS: parents always precede children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Gradients are zeroed before accumulation and every node is visited
    exactly once.  Returns gradients for named trainable leaves; `.grad`
    is also left populated on every trainable tensor in the graph.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    order = _topo_order(loss)
    for t in order:
        t.grad = None
    loss.grad = np.ones_like(loss.values)
    for t in reversed(order):
        if t._grad_fn is None or t.grad is None or not t._needs_grad:
            continue
        for parent, g in zip(t._parents, t._grad_fn(t.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    named: dict[str, np.ndarray] = {}
    for t in order:
        if t.trainable:
            if t.grad is None:
                t.grad = np.zeros_like(t.values)
            if t.name is not None:
                named[t.name] = t.grad
    return named


def grad_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
               epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error uses denominator max(|a|, |b|, 1e-8).  `build_loss` must
    rebuild the forward graph from the live `params` values on every call.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError("epsilon out of range")
    loss = build_loss()
    if loss.values.size != 1:
        raise ValueError("grad_check requires a scalar loss")
    backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.values.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(build_loss().values)
            flat[i] = orig - epsilon
            f_minus = float(build_loss().values)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(aflat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Plain SGD with a cosine learning-rate schedule."""

    lr_base: float
    total_steps: int
    step: int = 0
    lr_min: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (0 <= self.step <= self.total_steps):
            raise ValueError("step out of [0, total_steps]")
        if self.lr_min > self.lr_base:
            raise ValueError("lr_min must be <= lr_base")


def cosine_lr(step: int, total: int, lr_base: float, lr_min: float = 0.0) -> float:
    """lr_min + 0.5*(lr_base - lr_min)*(1 + cos(pi*step/total))."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not (0 <= step <= total):
        raise ValueError(f"step {step} out of [0, {total}]")
    if lr_min > lr_base:
        raise ValueError("lr_min must be <= lr_base")
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + math.cos(math.pi * step / total))


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
             state: OptimizerState) -> None:
    """p <- p - lr(step) * g for each pair; increments state.step."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    lr = cosine_lr(state.step, state.total_steps, state.lr_base, state.lr_min)
    for p, g in zip(params, grads):
        gv = np.asarray(g, dtype=np.float64)
        if gv.shape != p.values.shape:
            raise ValueError(f"gradient shape {gv.shape} does not match param {p.values.shape}")
        p.values = p.values - lr * gv
    state.step += 1
