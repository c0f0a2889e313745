"""Dense float tensors with reverse-mode automatic differentiation.

Just enough operator coverage for a small transformer encoder and its
losses: matmul, suffix-broadcast addition, GELU, layer normalization,
softmax, embedding row-gather with trainable-row overrides, batched row
extraction, weighted pooling, cross-entropy and mean-squared-error.

Arrays are numpy, so matmul inherits numpy's fixed accumulation order and
repeated runs are bit-identical on the same build. Gradients accumulate
with += when a tensor is reused; callers zero grads between optimization
steps. Broadcasting is deliberately narrow: operand shapes must be equal,
or one shape must be a trailing suffix of the other (a bias spread over
leading batch dimensions). Anything else raises.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Disables graph recording inside the block (inference paths)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """An n-d float array with an optional same-shape gradient buffer.

    Tensors are immutable once created except for their grad buffer; the
    optimizer updates parameter data in place between graph builds. A
    tensor with requires_grad=False never receives a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def backward(self) -> None:
        """Backpropagate from a scalar through the recorded graph.

        Nodes are visited in exact reverse topological order; every
        reachable tensor with requires_grad=True ends up with a grad.
        """
        if self.data.shape != ():
            raise ValueError("backward() expects a scalar tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a graph with no trainable inputs")
        order = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            nxt = next(parents, None)
            if nxt is None:
                stack.pop()
                order.append(node)
            elif id(nxt) not in seen:
                seen.add(id(nxt))
                stack.append((nxt, iter(nxt._parents)))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _record(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_suffix_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ValueError(f"shapes {sa} and {sb} only broadcast over leading batch dims")


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed tensor dtypes {sorted(str(d) for d in dtypes)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _check_suffix_broadcast(a, b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = a.data * factor

    def backward(g):
        _accum(a, g * factor)

    return _record(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes.

    Leading axes must match exactly or one operand must be 2-d (a shared
    weight applied across the batch).
    """
    _check_same_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects tensors of rank >= 2")
    if a.data.ndim != b.data.ndim and min(a.data.ndim, b.data.ndim) != 2:
        raise ValueError(f"matmul rank mismatch: {a.data.shape} @ {b.data.shape}")
    if a.data.ndim == b.data.ndim and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    out = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        local = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * pdf
        _accum(a, g * local)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    _check_same_dtype(a, gamma, beta)
    x = a.data
    if gamma.data.shape != x.shape[-1:] or beta.data.shape != x.shape[-1:]:
        raise ValueError("layer_norm gamma/beta must match the last axis")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(a, (dxhat - m1 - xhat * m2) * inv)

    return _record(out, (a, gamma, beta), backward)


def softmax(a: Tensor) -> Tensor:
    """Probabilities over the last axis, computed with max-subtraction."""
    x = a.data
    if not np.isfinite(x).all():
        raise ValueError("softmax received NaN/Inf logits; upstream state is corrupted")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accum(a, p * (g - inner))

    return _record(p, (a,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer class targets.

    Accepts a single logit vector with an int target, or a [batch, C]
    matrix with one target per row. Gradient wrt the logits is
    (softmax - one_hot) / batch.
    """
    squeeze = logits.data.ndim == 1
    x = logits.data.reshape(1, -1) if squeeze else logits.data
    if x.ndim != 2:
        raise ValueError("cross_entropy expects rank-1 or rank-2 logits")
    if not np.isfinite(x).all():
        raise ValueError("cross_entropy received NaN/Inf logits")
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (x.shape[0],):
        raise ValueError(f"targets shape {t.shape} does not match batch {x.shape[0]}")
    if (t < 0).any() or (t >= x.shape[1]).any():
        raise IndexError(f"class target out of range [0, {x.shape[1]})")
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(x.shape[0])
    loss = np.asarray(-logp[rows, t].mean(), dtype=x.dtype)

    def backward(g):
        dx = np.exp(logp)
        dx[rows, t] -= 1.0
        dx *= g / x.shape[0]
        _accum(logits, dx.reshape(logits.data.shape))

    return _record(loss, (logits,), backward)


def mse(pred: Tensor, targets) -> Tensor:
    """Mean squared error against constant targets."""
    t = np.asarray(targets, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise ValueError(f"targets shape {t.shape} != predictions shape {pred.data.shape}")
    diff = pred.data - t
    loss = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    n = max(pred.data.size, 1)

    def backward(g):
        _accum(pred, (2.0 / n) * diff * g)

    return _record(loss, (pred,), backward)


def mixed_embed(weights: Tensor, ids: np.ndarray, prompt: Tensor | None, placements) -> Tensor:
    """Gather embedding rows by id, overriding some positions with trainable rows.

    ids is an int array [batch, length]; placements is a list of
    (batch, position, prompt_row) triples whose embeddings come from the
    prompt tensor instead of the vocabulary. The backward rule scatters
    gradients only to gathered vocabulary rows and placed prompt rows.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("mixed_embed expects ids of shape [batch, length]")
    if ids.size and (ids.min() < 0 or ids.max() >= weights.data.shape[0]):
        raise IndexError("token id out of vocabulary range")
    out = weights.data[ids]
    if placements:
        if prompt is None:
            raise ValueError("placements given without a prompt tensor")
        for b, pos, row in placements:
            out[b, pos] = prompt.data[row]
    parents = (weights,) if prompt is None else (weights, prompt)

    def backward(g):
        if prompt is not None and prompt.requires_grad:
            gp = np.zeros_like(prompt.data)
            for b, pos, row in placements:
                gp[row] += g[b, pos]
            _accum(prompt, gp)
        if weights.requires_grad:
            gw = np.zeros_like(weights.data)
            keep = np.ones(ids.shape, dtype=bool)
            for b, pos, _ in placements:
                keep[b, pos] = False
            np.add.at(gw, ids[keep], g[keep])
            _accum(weights, gw)

    return _record(out, parents, backward)


def gather_bt(a: Tensor, pairs) -> Tensor:
    """Extract rows a[b, t] for each (b, t) pair from a [B, T, E] tensor."""
    bs = np.asarray([p[0] for p in pairs], dtype=np.int64)
    ts = np.asarray([p[1] for p in pairs], dtype=np.int64)
    B, T = a.data.shape[0], a.data.shape[1]
    if bs.size and (bs.min() < 0 or bs.max() >= B or ts.min() < 0 or ts.max() >= T):
        raise IndexError("gather position out of range")
    out = a.data[bs, ts]

    def backward(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (bs, ts), g)
        _accum(a, da)

    return _record(out, (a,), backward)


def pool_rows(a: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted sum over the time axis: [B, T, E] with [B, T] weights -> [B, E]."""
    w = np.asarray(weights, dtype=a.data.dtype)
    if w.shape != a.data.shape[:2]:
        raise ValueError(f"pool weights {w.shape} != leading dims {a.data.shape[:2]}")
    out = np.einsum("bte,bt->be", a.data, w)

    def backward(g):
        _accum(a, w[:, :, None] * g[:, None, :])

    return _record(out, (a,), backward)


def collect_trainable_leaves(root: Tensor) -> list[Tensor]:
    """All leaf tensors with requires_grad reachable from a graph root."""
    leaves, seen, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._parents:
            stack.extend(node._parents)
        elif node.requires_grad:
            leaves.append(node)
    return leaves


def global_norm_clip(tensors, max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most max_norm."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= factor
    return norm


def finite_difference_check(loss_fn, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients with central differences.

    loss_fn rebuilds the forward pass from the current parameter data and
    returns a scalar tensor. Parameters must be float64 leaves. Returns
    the max over all parameter entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    params = list(params)
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("finite_difference_check requires float64 parameters")
        if not p.requires_grad:
            raise ValueError("finite_difference_check got a non-trainable parameter")
    first = loss_fn().data.copy()
    second = loss_fn().data.copy()
    if first.tobytes() != second.tobytes():
        raise ValueError("loss_fn is not deterministic; disable any randomness first")
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.requires_grad:
        loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(loss_fn().data)
            flat[i] = orig - eps
            minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * eps)
            a = float(aflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
