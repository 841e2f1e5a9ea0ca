"""Dense float64 tensors with reverse-mode differentiation.

Only the operations this package needs are provided. Every op stores a closure
that maps the upstream gradient to one gradient per parent; ``Tensor.backward``
walks the graph in reverse topological order. Parent gradients are accumulated
in the order the parents were recorded, so identical programs produce
bit-identical gradients.

Reductions: block means in :func:`adaptive_avg_pool2d` sum each block with
``numpy.sum`` over the (row, column) block axes before dividing by the block
size; all other reductions are plain ``numpy`` sums along the named axis.
"""
from __future__ import annotations

import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._op(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._op(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, so finite differences behave)."""
    v = x.data
    v2 = v * v
    inner = v2 * (_GELU_C * 0.044715)
    inner += _GELU_C
    inner *= v
    t = np.tanh(inner, out=inner)
    half = t + 1.0
    half *= 0.5
    out = half * v

    def bw(g):
        dinner = v2 * (_GELU_C * 3 * 0.044715)
        dinner += _GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        dinner *= sech2
        dinner *= 0.5 * v
        dinner += half
        dinner *= g
        return (dinner,)

    return Tensor._op(out, (x,), bw)


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._op(np.array(out, dtype=DTYPE), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    n = len(tensors)
    return Tensor._op(
        out, tensors,
        lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)),
    )


def replace_rows(base: Tensor, positions: Sequence[int], values: Tensor) -> Tensor:
    """Copy of ``base`` (L, D) with rows ``positions`` replaced by the rows of ``values``."""
    pos = np.asarray(positions, dtype=np.int64)
    if values.shape != (len(pos),) + base.shape[1:]:
        raise DimensionError(f"values shape {values.shape} does not fit {len(pos)} rows of {base.shape}")
    out = base.data.copy()
    out[pos] = values.data

    def bw(g):
        gb = g.copy()
        gb[pos] = 0.0
        return gb, g[pos]

    return Tensor._op(out, (base, values), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor._op(table.data[ids], (table,), bw)


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._op(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# --------------------------------------------------------------- linear maps

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._op(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._op(out, parents, bw)


class LinearLayer:
    """Affine map ``in_dim -> out_dim``. ``bias=False`` gives an exactly zero-preserving map."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None):
        std = 1.0 / math.sqrt(in_dim) if std is None else std
        self.weight = parameter(rng.normal(0.0, std, size=(out_dim, in_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params


# ------------------------------------------------------------ normalisation

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        n = x.shape[-1]
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xhat.reshape(-1, n)).sum(0), flat_g.sum(0)

    return Tensor._op(out, (x, gamma, beta), bw)


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


# ------------------------------------------------------- softmax & attention

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    p = _softmax(x.data)
    return Tensor._op(p, (x,), lambda g: (p * (g - (g * p).sum(-1, keepdims=True)),))


@functools.lru_cache(maxsize=8)
def _causal_mask(L: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf above it."""
    mask = np.zeros((L, L))
    mask[np.triu_indices(L, k=1)] = -np.inf
    mask.flags.writeable = False
    return mask


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (..., L, d) with a strict causal mask."""
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise DimensionError(f"attention shapes disagree: {q.shape} {k.shape} {v.shape}")
    L, d = q.shape[-2], q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    scores = q.data @ np.swapaxes(k.data, -1, -2)
    scores *= scale
    scores += _causal_mask(L)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores, out=scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gp -= (gp * p).sum(-1, keepdims=True)
        gp *= p
        gs = gp
        gs *= scale
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    return Tensor._op(out, (q, k, v), bw)


def _check_distribution(target: np.ndarray) -> None:
    if np.any(target < 0) or not np.all(np.isfinite(target)):
        raise ValidationError("target distribution has negative or non-finite entries")
    if np.any(np.abs(target.sum(axis=-1) - 1.0) > 1e-9):
        raise ValidationError("target distribution does not sum to 1 within 1e-9")


def softmax_cross_entropy_soft(logits: Tensor, target) -> Tensor:
    """Mean over leading positions of ``-sum_k target_k log softmax(logits)_k``.

    For a single vector of K logits the result is the plain soft cross-entropy.
    """
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != logits.shape:
        raise DimensionError(f"target shape {target.shape} != logits shape {logits.shape}")
    _check_distribution(target)
    n = logits.data.size // logits.shape[-1]
    logp = _log_softmax(logits.data)
    loss = -(target * logp).sum() / n

    def bw(g):
        return (g * (np.exp(logp) - target) / n,)

    return Tensor._op(np.asarray(loss), (logits,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} != logits positions {logits.shape[:-1]}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValidationError("loss mask selects no positions")
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * grad * mask[..., None] / n,)

    return Tensor._op(np.asarray(loss), (logits,), bw)


# ------------------------------------------------------------------- pooling

def adaptive_bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """[floor(i*n_in/n_out), ceil((i+1)*n_in/n_out)) for each output index."""
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling over the last two axes of ``x``."""
    if x.ndim < 2:
        raise DimensionError("adaptive_avg_pool2d needs at least two axes")
    h0, w0 = x.shape[-2:]
    if out_h <= 0 or out_w <= 0:
        raise DimensionError("pooled output must be non-empty")
    if out_h > h0 or out_w > w0:
        raise DimensionError(f"cannot pool {h0}x{w0} up to {out_h}x{out_w}")
    lead = x.shape[:-2]

    if h0 % out_h == 0 and w0 % out_w == 0:
        kh, kw = h0 // out_h, w0 // out_w
        blocks = x.data.reshape(lead + (out_h, kh, out_w, kw))
        out = blocks.sum(axis=(-3, -1)) / (kh * kw)

        def bw(g):
            gb = np.broadcast_to((g / (kh * kw))[..., :, None, :, None], blocks.shape)
            return (gb.reshape(x.shape).copy(),)

        return Tensor._op(out, (x,), bw)

    rows, cols = adaptive_bins(h0, out_h), adaptive_bins(w0, out_w)
    out = np.empty(lead + (out_h, out_w), dtype=DTYPE)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[..., i, j] = x.data[..., r0:r1, c0:c1].sum(axis=(-2, -1)) / ((r1 - r0) * (c1 - c0))

    def bw(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[..., r0:r1, c0:c1] += (g[..., i, j] / ((r1 - r0) * (c1 - c0)))[..., None, None]
        return (gx,)

    return Tensor._op(out, (x,), bw)


# ----------------------------------------------------------------- optimiser

class Adam:
    """Adam with bias correction. Parameters whose ``grad`` is None are left untouched."""

    def __init__(self, params: Iterable[Tensor], lr: float = 5e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValidationError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------ gradient check

def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def grad_check_groups(f: Callable[[], Tensor], params: dict[str, Tensor],
                      h: float = 1e-5) -> dict[str, float]:
    """Max relative error between backprop and central differences, per named parameter.

    ``f`` must rebuild the scalar loss from the current parameter values on every call.
    """
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    for p in params.values():
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the check point")
    loss.backward()
    report = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric.flat[i] = (fp - fm) / (2.0 * h)
        if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
            raise NumericError(f"non-finite gradient for {name}")
        report[name] = float(_relative_error(analytic, numeric).max()) if p.data.size else 0.0
    return report


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5) -> float:
    """Max relative error over all entries of ``params`` (a list or a name->tensor dict)."""
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    report = grad_check_groups(f, params, h)
    return max(report.values(), default=0.0)
