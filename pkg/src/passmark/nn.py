"""Dense float32 tensors with reverse-mode gradients, plus AdamW.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient back onto the inputs.  The
graph lives only as long as the loss tensor that owns it.

Ops raise :class:`NonFiniteError` as soon as a NaN or Inf appears, naming the
op that produced it.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only fall back to the full scan
    # when the sum overflowed or went NaN
    with np.errstate(over="ignore", invalid="ignore"):
        s = arr.sum()
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Tensor:
    """An n-d float array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "grad")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A leaf tensor owned by a model.

    ``trainable`` controls whether the optimizer may touch it; ``decay``
    controls whether decoupled weight decay applies.
    """

    __slots__ = ("trainable", "decay", "_touched")

    def __init__(self, data, trainable: bool = True, decay: bool = True, dtype=DTYPE):
        super().__init__(np.array(data, dtype=dtype), requires_grad=trainable, op="param")
        self.trainable = trainable
        self.decay = decay
        self.grad = np.zeros_like(self.data)
        self._touched = False

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 1.0 - t * t
        d *= dinner
        d *= xd
        d += 1.0 + t
        d *= 0.5
        return (g * d,)

    return _make(y, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def take(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter back with ``np.add.at``."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "take")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    n = weight.shape[0]

    def bw(g):
        flat = g.reshape(-1, g.shape[-1])
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), flat)
        return (out,)

    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")
    return _make(weight.data[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(x.data.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.data.dtype),), "mean")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    y = x2 @ wd
    if b is not None:
        y += b.data
    y = y.reshape(lead + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw, "linear")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def bw(g):
        m = xd.shape[-1]
        gh = g * gain.data
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, m)
        return gx, (g2 * xhat.reshape(-1, m)).sum(axis=0), g2.sum(axis=0)

    return _make(y.astype(xd.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    p = _softmax_np(x.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a causal mask.

    q, k, v have shape (..., T, d); position t attends to positions <= t.
    """
    qd, kd, vd = q.data, k.data, v.data
    t, d = qd.shape[-2], qd.shape[-1]
    scale = 1.0 / math.sqrt(d)
    scores = (qd @ np.swapaxes(kd, -1, -2)) * scale
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    p = _softmax_np(scores).astype(qd.dtype, copy=False)
    out = p @ vd

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    return _make(out, (q, k, v), bw, "causal_attention")


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token negative log-likelihood in nats over masked positions.

    ``logits`` is (..., V); ``targets`` and ``mask`` match its leading shape.
    """
    ld = logits.data
    v = ld.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != ld.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {ld.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: empty mask")
    if targets[mask].size and (targets[mask].min() < 0 or targets[mask].max() >= v):
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    flat = ld.reshape(-1, v)
    tf = np.where(mask, targets, 0).reshape(-1)
    mf = mask.reshape(-1)
    logp = log_softmax_np(flat)
    nll = -logp[np.arange(tf.size), tf]
    loss = np.asarray((nll * mf).sum() / n, dtype=ld.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(tf.size), tf] -= 1.0
        p *= (mf[:, None] * (g / n))
        return (p.reshape(ld.shape).astype(ld.dtype, copy=False),)

    return _make(loss, (logits,), bw, "cross_entropy")


def mse(a, b) -> Tensor:
    """Mean squared error over all elements; ``b`` broadcasts against ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and np.broadcast_shapes(a.shape, b.shape) != a.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    loss = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def bw(g):
        ga = (2.0 * g / n) * diff
        return ga, _unbroadcast(-ga, b.shape)

    return _make(loss, (a, b), bw, "mse")


def masked_mse(a: Tensor, target, mask: np.ndarray) -> Tensor:
    """MSE over the rows of ``a`` selected by a boolean ``mask`` on its leading dims.

    ``target`` broadcasts against the trailing feature dimension.  Each
    selected row contributes all its features to the mean.
    """
    ad = a.data
    mask = np.asarray(mask, dtype=bool)
    target = np.asarray(target, dtype=ad.dtype)
    rows = int(mask.sum())
    if rows == 0:
        raise ValueError("masked_mse: empty mask")
    n = rows * ad.shape[-1]
    diff = (ad - target) * mask[..., None]
    loss = np.asarray((diff * diff).sum() / n, dtype=ad.dtype)
    return _make(loss, (a,), lambda g: ((2.0 * g / n) * diff,), "masked_mse")


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable trainable Parameter."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if node.trainable:
                node.grad = node.grad + g if node._touched else g.astype(node.data.dtype, copy=True)
                node._touched = True
            continue
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            _check_finite(pg, f"{node.op}.backward")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # release the closure so activations can be collected
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    base_lr: float
    weight_decay: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def lr_at(step: int, state: OptimizerState) -> float:
    """Linear warmup from 0 to ``base_lr`` then linear decay to 0 at ``total_steps``."""
    step = min(max(step, 0), state.total_steps)
    if state.warmup_steps > 0 and step < state.warmup_steps:
        return state.base_lr * step / state.warmup_steps
    span = max(state.total_steps - state.warmup_steps, 1)
    return state.base_lr * max(state.total_steps - step, 0) / span


class AdamW:
    """Decoupled weight-decay Adam over a fixed list of parameters."""

    def __init__(self, params: Iterable[Parameter], lr: float, weight_decay: float = 0.0,
                 warmup_steps: int = 0, total_steps: int = 1,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(
            base_lr=lr, weight_decay=weight_decay, warmup_steps=warmup_steps,
            total_steps=total_steps, beta1=betas[0], beta2=betas[1], eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        live = [p for p in self.params if p.trainable]
        if live and not any(p._touched for p in live):
            raise RuntimeError("optimizer step called before any backward pass")
        st = self.state
        st.step += 1
        lr = lr_at(st.step, st)
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p, m, v in zip(self.params, st.m, st.v):
            if not p.trainable:
                continue
            g = p.grad
            if p.decay and st.weight_decay:
                p.data *= DTYPE(1.0 - lr * st.weight_decay)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.data.dtype, copy=False)
            _check_finite(p.data, "adamw_step")
        return lr
