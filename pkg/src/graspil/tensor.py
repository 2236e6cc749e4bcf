"""Dense float64 tensors with reverse-mode automatic differentiation.

Arrays are numpy float64 throughout; the graph is a tape of primitive ops,
each carrying a vector-Jacobian product closure. Gradients are exact and
deterministic for a fixed input, which the finite-difference test oracles
rely on.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class UsageError(RuntimeError):
    """An operation was called outside its contract (not a shape issue)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def backward(self):
        backward(self)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result; records the tape edge only when grad is flowing."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Accumulate gradients of `loss` into every reachable gradient leaf.

    Raises UsageError unless `loss` is a scalar. Intermediate grads are
    released as soon as their VJP has been consumed.
    """
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative topological sort (graphs can be a few thousand nodes deep)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g if g.flags.owndata else g.copy()
            else:
                parent.grad += g
        if node._parents:   # free intermediate grad; leaves keep theirs
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b) -> Tensor:
    at = a if isinstance(a, Tensor) else Tensor(a)
    bt = b if isinstance(b, Tensor) else Tensor(b)
    try:
        data = at.data + bt.data
    except ValueError as e:
        raise DimensionError(f"add: incompatible shapes {at.shape} and {bt.shape}") from e
    return _node(data, (at, bt), lambda g: (_unbroadcast(g, at.shape), _unbroadcast(g, bt.shape)))


def mul(a, b) -> Tensor:
    at = a if isinstance(a, Tensor) else Tensor(a)
    bt = b if isinstance(b, Tensor) else Tensor(b)
    try:
        data = at.data * bt.data
    except ValueError as e:
        raise DimensionError(f"mul: incompatible shapes {at.shape} and {bt.shape}") from e
    return _node(
        data,
        (at, bt),
        lambda g: (_unbroadcast(g * bt.data, at.shape), _unbroadcast(g * at.data, bt.shape)),
    )


def exp(x) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    data = np.exp(xt.data)
    return _node(data, (xt,), lambda g: (g * data,))


def log(x) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    return _node(np.log(xt.data), (xt,), lambda g: (g / xt.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    s = _sigmoid(xt.data)
    return _node(s, (xt,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    s = _sigmoid(xt.data)
    return _node(xt.data * s, (xt,), lambda g: (g * s * (1.0 + xt.data * (1.0 - s)),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), overflow-stable."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    d = xt.data
    data = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return _node(data, (xt,), lambda g: (g * _sigmoid(d),))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch table over the supported elementwise ops."""
    table = {"add": add, "mul": mul, "exp": exp, "softplus": softplus,
             "silu": silu, "sigmoid": sigmoid}
    if op not in table:
        raise UsageError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# ---------------------------------------------------------------------------
# structural ops

def matmul(a, b) -> Tensor:
    """Matrix product. `a` may carry leading batch dims; `b` is 2-D."""
    at = a if isinstance(a, Tensor) else Tensor(a)
    bt = b if isinstance(b, Tensor) else Tensor(b)
    if at.data.ndim < 2 or bt.data.ndim != 2:
        raise DimensionError(f"matmul expects (...,m,k) @ (k,n), got {at.shape} @ {bt.shape}")
    if at.shape[-1] != bt.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {at.shape} @ {bt.shape}")
    lead = at.shape[:-1]
    a2 = at.data.reshape(-1, at.shape[-1])
    data = (a2 @ bt.data).reshape(*lead, bt.shape[1])

    def vjp(g):
        g2 = g.reshape(-1, bt.shape[1])
        da = (g2 @ bt.data.T).reshape(at.shape) if at.requires_grad else None
        db = a2.T @ g2 if bt.requires_grad else None
        return (da, db)

    return _node(data, (at, bt), vjp)


def reshape(x, shape) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    data = xt.data.reshape(shape)
    return _node(data, (xt,), lambda g: (g.reshape(xt.shape),))


def transpose(x, axes=None) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    data = np.transpose(xt.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(data, (xt,), lambda g: (np.transpose(g, inv),))


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    ts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(ts), vjp)


def flip(x, axis: int = 0) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    return _node(np.flip(xt.data, axis=axis).copy(), (xt,),
                 lambda g: (np.flip(g, axis=axis),))


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along `axis`; gradient scatter-adds back (permutation-safe)."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(xt.data, idx, axis=axis)

    def vjp(g):
        out = np.zeros(xt.shape)
        sl = [slice(None)] * xt.data.ndim
        sl[axis] = idx
        np.add.at(out, tuple(sl), g)
        return (out,)

    return _node(data, (xt,), vjp)


def _slice(x: Tensor, key) -> Tensor:
    data = x.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=np.float64)

    def vjp(g):
        out = np.zeros(x.shape)
        out[key] = g
        return (out,)

    return _node(data, (x,), vjp)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    data = xt.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xt.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xt.shape).copy(),)

    return _node(np.asarray(data, dtype=np.float64), (xt,), vjp)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    n = xt.size if axis is None else xt.shape[axis]
    return mul(tsum(xt, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused numeric primitives

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    gt = gain if isinstance(gain, Tensor) else Tensor(gain)
    bt = bias if isinstance(bias, Tensor) else Tensor(bias)
    d = xt.shape[-1] if xt.data.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm requires a non-empty last axis")
    if gt.shape != (d,) or bt.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    mu = xt.data.mean(axis=-1, keepdims=True)
    xc = xt.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gt.data + bt.data

    def vjp(g):
        gg = g * gt.data
        # d xhat / d x through mean and variance
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0) if gt.requires_grad else None
        dbias = g.reshape(-1, d).sum(axis=0) if bt.requires_grad else None
        return (dx if xt.requires_grad else None, dgain, dbias)

    return _node(data, (xt, gt, bt), vjp)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference over all elements; subgradient at 0 is 0."""
    pt = pred if isinstance(pred, Tensor) else Tensor(pred)
    tt = target if isinstance(target, Tensor) else Tensor(target)
    if pt.shape != tt.shape:
        raise DimensionError(f"l1_loss shapes differ: {pt.shape} vs {tt.shape}")
    diff = pt.data - tt.data
    data = np.asarray(np.mean(np.abs(diff)))
    n = diff.size

    def vjp(g):
        s = np.sign(diff) * (float(g) / n)
        return (s if pt.requires_grad else None, -s if tt.requires_grad else None)

    return _node(data, (pt, tt), vjp)


def kl_std_normal(mu, logvar) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)): sum over the last axis, mean over
    any leading batch axes. Non-negative; zero iff mu=0 and logvar=0."""
    mt = mu if isinstance(mu, Tensor) else Tensor(mu)
    lt = logvar if isinstance(logvar, Tensor) else Tensor(logvar)
    if mt.shape != lt.shape:
        raise DimensionError(f"kl_std_normal shapes differ: {mt.shape} vs {lt.shape}")
    if not (np.isfinite(mt.data).all() and np.isfinite(lt.data).all()):
        raise NumericError("kl_std_normal requires finite inputs")
    ev = np.exp(lt.data)
    per = -0.5 * (1.0 + lt.data - mt.data * mt.data - ev)
    rows = max(1, per.size // per.shape[-1]) if per.ndim else 1
    data = np.asarray(per.sum() / rows)

    def vjp(g):
        w = float(g) / rows
        dmu = mt.data * w if mt.requires_grad else None
        dlv = -0.5 * (1.0 - ev) * w if lt.requires_grad else None
        return (dmu, dlv)

    return _node(data, (mt, lt), vjp)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x, w, b, stride: int = 2, padding=(0, 0, 0, 0)) -> Tensor:
    """2-D convolution over (B,H,W,Cin) with kernel (KH,KW,Cin,Cout).

    `padding` is (top, bottom, left, right). Backed by im2col + one GEMM.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    wt = w if isinstance(w, Tensor) else Tensor(w)
    bt = b if isinstance(b, Tensor) else Tensor(b)
    if xt.data.ndim != 4 or wt.data.ndim != 4:
        raise DimensionError(f"conv2d expects (B,H,W,C) and (KH,KW,Cin,Cout), got {xt.shape}, {wt.shape}")
    B, H, W, Cin = xt.shape
    KH, KW, WCin, Cout = wt.shape
    if WCin != Cin:
        raise DimensionError(f"conv2d channel mismatch: input {Cin}, kernel {WCin}")
    pt_, pb_, pl_, pr_ = padding
    xp = np.pad(xt.data, ((0, 0), (pt_, pb_), (pl_, pr_), (0, 0)))
    OH = (H + pt_ + pb_ - KH) // stride + 1
    OW = (W + pl_ + pr_ - KW) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (KH, KW), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # (B,OH,OW,Cin,KH,KW)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols2 = cols.reshape(B * OH * OW, KH * KW * Cin)
    w2 = wt.data.reshape(KH * KW * Cin, Cout)
    data = (cols2 @ w2 + bt.data).reshape(B, OH, OW, Cout)

    def vjp(g):
        g2 = g.reshape(B * OH * OW, Cout)
        dw = (cols2.T @ g2).reshape(wt.shape) if wt.requires_grad else None
        db = g2.sum(axis=0) if bt.requires_grad else None
        dx = None
        if xt.requires_grad:
            dcols = (g2 @ w2.T).reshape(B, OH, OW, KH, KW, Cin)
            dxp = np.zeros_like(xp)
            for ki in range(KH):
                for kj in range(KW):
                    dxp[:, ki:ki + OH * stride:stride,
                        kj:kj + OW * stride:stride, :] += dcols[:, :, :, ki, kj, :]
            dx = dxp[:, pt_:pt_ + H, pl_:pl_ + W, :]
        return (dx, dw, db)

    return _node(data, (xt, wt, bt), vjp)


def depthwise_conv1d_causal(x, w, b) -> Tensor:
    """Per-channel causal 1-D conv along the second-to-last axis.

    x: (..., L, C), w: (K, C), b: (C,). Left-padded with zeros so output
    at t depends only on inputs up to t.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    wt = w if isinstance(w, Tensor) else Tensor(w)
    bt = b if isinstance(b, Tensor) else Tensor(b)
    K, C = wt.shape
    if xt.shape[-1] != C:
        raise DimensionError(f"depthwise conv channel mismatch: {xt.shape[-1]} vs {C}")
    L = xt.shape[-2]
    pad = [(0, 0)] * xt.data.ndim
    pad[-2] = (K - 1, 0)
    xp = np.pad(xt.data, pad)
    data = np.full(xt.shape, bt.data)
    for j in range(K):
        data += wt.data[j] * xp[..., j:j + L, :]

    def vjp(g):
        dx = None
        if xt.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(K):
                dxp[..., j:j + L, :] += wt.data[j] * g
            dx = dxp[..., K - 1:, :]
        dw = None
        if wt.requires_grad:
            dw = np.empty_like(wt.data)
            for j in range(K):
                dw[j] = (xp[..., j:j + L, :] * g).reshape(-1, C).sum(axis=0)
        db = g.reshape(-1, C).sum(axis=0) if bt.requires_grad else None
        return (dx, dw, db)

    return _node(data, (xt, wt, bt), vjp)
