"""Selective state-space primitives and the Mamba block variants.

The recurrence is u(t) = A_bar(t) u(t-1) + B_bar(t) x(t), y(t) = C(t) u(t)
with zero-order-hold discretization A_bar = exp(dt*A),
B_bar = (dt*A)^-1 (exp(dt*A) - 1) dt*B, evaluated elementwise for a
diagonal per-channel state matrix. B, C and dt are projections of the
input stream, which is what makes the scan "selective".

Two scan engines are provided: a plain sequential loop (the test oracle)
and a two-level chunked scan built on the associative operator
(a2,b2)o(a1,b1) = (a2*a1, a2*b1+b2), optionally fanned out over channel
blocks on a thread pool.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, _node


class DomainError(ValueError):
    """Input outside an operation's numeric domain."""


_TAYLOR_EPS = 1e-8


def scan_workers() -> int:
    """Thread fan-out for the chunked scan, capped by GRASPIL_THREADS."""
    cap = os.environ.get("GRASPIL_THREADS")
    n = os.cpu_count() or 1
    if cap is not None:
        n = min(n, max(1, int(cap)))
    return max(1, min(n, 4))


# ---------------------------------------------------------------------------
# discretization

def discretize(A: np.ndarray, B: np.ndarray, delta: np.ndarray):
    """Zero-order-hold discretization of (A, B) at step sizes `delta`.

    Elementwise on broadcast-compatible arrays. Returns (A_bar, B_bar) with
    A_bar = exp(delta*A) and B_bar = (delta*A)^-1 (exp(delta*A)-1) delta*B,
    falling back to the Taylor limit B_bar = delta*B when |delta*A| < 1e-8.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise DomainError("discretize requires delta > 0")
    w = delta * A
    a_bar = np.exp(w)
    factor = np.where(np.abs(w) < _TAYLOR_EPS, 1.0 + 0.5 * w, (a_bar - 1.0) / np.where(w == 0, 1.0, w))
    b_bar = factor * delta * B
    return a_bar, b_bar


# ---------------------------------------------------------------------------
# linear recurrence kernels (plain numpy, no autodiff)

def recurrence_seq(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """h(t) = a(t) h(t-1) + b(t) along axis -3; the reference engine."""
    L = a.shape[-3]
    out = np.empty_like(b)
    h = np.zeros(b.shape[:-3] + b.shape[-2:]) if h0 is None else np.asarray(h0, dtype=np.float64)
    for t in range(L):
        h = a[..., t, :, :] * h + b[..., t, :, :]
        out[..., t, :, :] = h
    return out


def _chunked_scan(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None, chunk: int) -> np.ndarray:
    L = a.shape[-3]
    n_chunks = -(-L // chunk)
    padded = n_chunks * chunk
    if padded != L:
        pad = [(0, 0)] * a.ndim
        pad[-3] = (0, padded - L)
        # identity element (a=1, b=0) so padding never perturbs real entries
        a = np.pad(a, pad, constant_values=1.0)
        b = np.pad(b, pad, constant_values=0.0)
    lead = a.shape[:-3]
    tail = a.shape[-2:]
    ac = a.reshape(*lead, n_chunks, chunk, *tail)
    bc = b.reshape(*lead, n_chunks, chunk, *tail)

    # stage 1: compose the operator prefix within each chunk (vectorized
    # across chunks; `chunk` python iterations)
    A = np.empty_like(ac)
    Bc = np.empty_like(bc)
    A[..., 0, :, :] = ac[..., 0, :, :]
    Bc[..., 0, :, :] = bc[..., 0, :, :]
    for j in range(1, chunk):
        aj = ac[..., j, :, :]
        A[..., j, :, :] = aj * A[..., j - 1, :, :]
        Bc[..., j, :, :] = aj * Bc[..., j - 1, :, :] + bc[..., j, :, :]

    # stage 2: carry the entering state across chunks (n_chunks iterations)
    Hin = np.empty(lead + (n_chunks,) + tail)
    h = np.zeros(lead + tail) if h0 is None else np.broadcast_to(h0, lead + tail)
    Hin[..., 0, :, :] = h
    for c in range(1, n_chunks):
        h = A[..., c - 1, chunk - 1, :, :] * h + Bc[..., c - 1, chunk - 1, :, :]
        Hin[..., c, :, :] = h

    # stage 3: apply the composed operators to the entering states
    out = A * Hin[..., :, None, :, :] + Bc
    return out.reshape(*lead, padded, *tail)[..., :L, :, :]


def recurrence_par(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None,
                   chunk: int | None = None, workers: int | None = None) -> np.ndarray:
    """Chunked associative-operator scan; equivalent to recurrence_seq.

    With workers > 1 the second-to-last (channel) axis is split into
    independent blocks processed on a thread pool; per-block arithmetic is
    order-identical, so the result does not depend on the worker count.
    """
    L = a.shape[-3]
    if chunk is None:
        chunk = max(8, min(64, int(np.sqrt(L)) + 1))
    if workers is None:
        workers = scan_workers()
    d = a.shape[-2]
    if workers <= 1 or d < 2 * workers or L * d < 4096:
        return _chunked_scan(a, b, h0, chunk)
    out = np.empty_like(b)
    bounds = np.linspace(0, d, workers + 1, dtype=int)

    def run(i):
        lo, hi = bounds[i], bounds[i + 1]
        h0s = None if h0 is None else h0[..., lo:hi, :]
        out[..., lo:hi, :] = _chunked_scan(a[..., lo:hi, :], b[..., lo:hi, :], h0s, chunk)

    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(run, range(workers)))
    return out


# ---------------------------------------------------------------------------
# spec-surface selective scans (plain arrays, given projections)

@dataclass
class SsmParams:
    """Learnable pieces of one selective SSM."""
    A_log: Tensor        # (d_inner, d_state); realized A = -exp(A_log) < 0
    W_B: Tensor          # (d_inner, d_state)
    W_C: Tensor          # (d_inner, d_state)
    W_dt1: Tensor        # (d_inner, dt_rank)
    W_dt2: Tensor        # (dt_rank, d_inner)
    dt_bias: Tensor      # (d_inner,)

    def realized_A(self) -> np.ndarray:
        return -np.exp(self.A_log.data)


def _projections(x: np.ndarray, params: SsmParams):
    """Input-dependent B, C, delta for a (..., L, d_inner) stream."""
    B = x @ params.W_B.data
    C = x @ params.W_C.data
    pre = (x @ params.W_dt1.data) @ params.W_dt2.data + params.dt_bias.data
    delta = np.maximum(pre, 0.0) + np.log1p(np.exp(-np.abs(pre)))
    return B, C, delta


def _scan_output(h: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.matmul(h, C[..., :, None])[..., 0]


def selective_scan_seq(x: np.ndarray, params: SsmParams, u0: np.ndarray | None = None) -> np.ndarray:
    """Sequential selective scan over (..., L, d_inner); the oracle engine."""
    B, C, delta = _projections(np.asarray(x, dtype=np.float64), params)
    a_bar, b_bar = discretize(params.realized_A(), B[..., None, :], delta[..., None])
    h = recurrence_seq(a_bar, b_bar * x[..., None], u0)
    return _scan_output(h, C)


def selective_scan_par(x: np.ndarray, params: SsmParams, u0: np.ndarray | None = None,
                       chunk: int | None = None, workers: int | None = None) -> np.ndarray:
    """Chunked-parallel selective scan; matches selective_scan_seq to 1e-9."""
    B, C, delta = _projections(np.asarray(x, dtype=np.float64), params)
    a_bar, b_bar = discretize(params.realized_A(), B[..., None, :], delta[..., None])
    h = recurrence_par(a_bar, b_bar * x[..., None], u0, chunk=chunk, workers=workers)
    return _scan_output(h, C)


# ---------------------------------------------------------------------------
# autodiff scan primitive

def ssm_scan(u, delta, A, B, C, h0: np.ndarray | None = None, parallel: bool = True) -> Tensor:
    """Differentiable selective scan.

    u, delta: (..., L, d_inner); A: (d_inner, d_state); B, C: (..., L, d_state).
    delta must already be positive (softplus upstream). The hidden states are
    cached for the backward pass; the discretization is recomputed there to
    keep peak memory at one state tensor per scan.
    """
    ut = u if isinstance(u, Tensor) else Tensor(u)
    dt = delta if isinstance(delta, Tensor) else Tensor(delta)
    At = A if isinstance(A, Tensor) else Tensor(A)
    Bt = B if isinstance(B, Tensor) else Tensor(B)
    Ct = C if isinstance(C, Tensor) else Tensor(C)
    if ut.shape != dt.shape:
        raise DimensionError(f"u/delta shapes differ: {ut.shape} vs {dt.shape}")
    if Bt.shape != Ct.shape:
        raise DimensionError(f"B/C shapes differ: {Bt.shape} vs {Ct.shape}")
    run = recurrence_par if parallel else recurrence_seq

    w = dt.data[..., None] * At.data
    a_bar = np.exp(w)
    small = np.abs(w) < _TAYLOR_EPS
    factor = np.where(small, 1.0 + 0.5 * w, (a_bar - 1.0) / np.where(w == 0, 1.0, w))
    b_bar = factor * dt.data[..., None] * Bt.data[..., None, :]
    h = run(a_bar, b_bar * ut.data[..., None], h0)
    y = _scan_output(h, Ct.data)
    del a_bar, factor, b_bar, w

    def vjp(g):
        # rebuild discretization (cheaper than caching three state-sized arrays)
        w = dt.data[..., None] * At.data
        a_bar = np.exp(w)
        small = np.abs(w) < _TAYLOR_EPS
        wsafe = np.where(w == 0, 1.0, w)
        factor = np.where(small, 1.0 + 0.5 * w, (a_bar - 1.0) / wsafe)

        dC = np.matmul(h.swapaxes(-1, -2), g[..., None])[..., 0] if Ct.requires_grad else None
        dh = Ct.data[..., None, :] * g[..., None]

        # reverse-time accumulation: G(t) = dh(t) + a_bar(t+1) G(t+1)
        a_rev = np.flip(a_bar, axis=-3)
        a_shift = np.ones_like(a_rev)
        a_shift[..., 1:, :, :] = a_rev[..., :-1, :, :]
        G = np.flip(run(a_shift, np.flip(dh, axis=-3), None), axis=-3)
        del dh, a_rev, a_shift

        h_prev = np.empty_like(h)
        h_prev[..., 0, :, :] = 0.0 if h0 is None else h0
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        dA_bar = G * h_prev
        del h_prev
        dB_bar = G * ut.data[..., None]
        dfdw = np.where(small, 0.5 + w / 3.0, (a_bar * wsafe - (a_bar - 1.0)) / (wsafe * wsafe))

        du = None
        if ut.requires_grad:
            du = (G * (factor * dt.data[..., None] * Bt.data[..., None, :])).sum(axis=-1)
        dw = dA_bar * a_bar + dB_bar * dfdw * dt.data[..., None] * Bt.data[..., None, :]
        ddelta = None
        if dt.requires_grad:
            ddelta = (dw * At.data).sum(axis=-1) + (dB_bar * factor * Bt.data[..., None, :]).sum(axis=-1)
        dA = None
        if At.requires_grad:
            dA = (dw * dt.data[..., None]).reshape(-1, *At.shape).sum(axis=0)
        dB = None
        if Bt.requires_grad:
            dB = (dB_bar * factor * dt.data[..., None]).sum(axis=-2)
        return (du, ddelta, dA, dB, dC)

    return _node(y, (ut, dt, At, Bt, Ct), vjp)


# ---------------------------------------------------------------------------
# sequence rearrangements

def flip_seq(x) -> Tensor:
    """Reverse a (..., L, d) sequence along L; involutive."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    return T.flip(xt, axis=-2)


def cond_flip(features, queries) -> Tensor:
    """reverse(features) ++ queries; query positions are untouched.

    `features=None` stands for an empty feature segment.
    """
    qt = queries if isinstance(queries, Tensor) else Tensor(queries)
    if features is None:
        return qt
    ft = features if isinstance(features, Tensor) else Tensor(features)
    if queries is None:
        return flip_seq(ft)
    return T.concat([flip_seq(ft), qt], axis=-2)


def two_norm(features, queries, gain_f, bias_f, gain_q, bias_q) -> Tensor:
    """Layer-normalize the feature and query segments with separate affines
    (the two segments follow different distributions) and concatenate."""
    nq = T.layer_norm(queries, gain_q, bias_q)
    if features is None:
        return nq
    nf = T.layer_norm(features, gain_f, bias_f)
    return T.concat([nf, nq], axis=-2)


# ---------------------------------------------------------------------------
# blocks

@dataclass
class MambaBlockParams:
    """One gated selective-SSM block (input proj, causal conv, scan, output proj)."""
    W_in: Tensor         # (d_model, 2*d_inner)
    conv_w: Tensor       # (conv_width, d_inner)
    conv_b: Tensor       # (d_inner,)
    ssm: SsmParams
    W_out: Tensor        # (d_inner, d_model)

    @property
    def d_inner(self) -> int:
        return self.W_out.shape[0]


@dataclass
class BidirectionalParams:
    ln1_g: Tensor
    ln1_b: Tensor
    fwd: MambaBlockParams
    ln2_g: Tensor
    ln2_b: Tensor
    bwd: MambaBlockParams


@dataclass
class PrefixBidirectionalParams:
    ln_f_g: Tensor
    ln_f_b: Tensor
    ln_q_g: Tensor
    ln_q_b: Tensor
    first: MambaBlockParams
    second: MambaBlockParams


def mamba_block(x, params: MambaBlockParams, parallel: bool = True) -> Tensor:
    """Causal gated SSM over (..., L, d_model)."""
    d_inner = params.d_inner
    xz = T.matmul(x, params.W_in)
    stream = xz[..., :d_inner]
    gate = xz[..., d_inner:]
    stream = T.silu(T.depthwise_conv1d_causal(stream, params.conv_w, params.conv_b))
    Bp = T.matmul(stream, params.ssm.W_B)
    Cp = T.matmul(stream, params.ssm.W_C)
    delta = T.softplus(T.add(T.matmul(T.matmul(stream, params.ssm.W_dt1), params.ssm.W_dt2),
                             params.ssm.dt_bias))
    A = T.mul(T.exp(params.ssm.A_log), -1.0)
    y = ssm_scan(stream, delta, A, Bp, Cp, parallel=parallel)
    return T.matmul(T.mul(y, T.silu(gate)), params.W_out)


def bidirectional_mamba(seq, params: BidirectionalParams, parallel: bool = True) -> Tensor:
    """Forward pass with residual, then a second pass over the flipped
    sequence with residual, flipped back: every position sees both sides."""
    x1 = T.layer_norm(seq, params.ln1_g, params.ln1_b)
    y = T.add(x1, mamba_block(x1, params.fwd, parallel))
    y2 = T.layer_norm(y, params.ln2_g, params.ln2_b)
    z = flip_seq(y2)
    return flip_seq(T.add(z, mamba_block(z, params.bwd, parallel)))


def prefix_bidirectional_mamba(features, queries, params: PrefixBidirectionalParams,
                               parallel: bool = True) -> tuple[Tensor | None, Tensor]:
    """Bidirectional processing of [features ++ queries] where only the
    feature segment is flipped between passes; returns both segments."""
    lf = 0 if features is None else features.shape[-2]
    s = two_norm(features, queries, params.ln_f_g, params.ln_f_b, params.ln_q_g, params.ln_q_b)
    s1 = T.add(s, mamba_block(s, params.first, parallel))
    f1 = s1[..., :lf, :] if lf else None
    q1 = s1[..., lf:, :]
    s2 = cond_flip(f1, q1)
    s3 = T.add(s2, mamba_block(s2, params.second, parallel))
    f3 = s3[..., :lf, :] if lf else None
    q3 = s3[..., lf:, :]
    return (flip_seq(f3) if lf else None), q3


# ---------------------------------------------------------------------------
# initialization

def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


def init_ssm(rng: np.random.Generator, d_inner: int, d_state: int,
             dt_rank: int, dt_min: float = 1e-3, dt_max: float = 0.1) -> SsmParams:
    A_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
    scale = 1.0 / np.sqrt(d_inner)
    return SsmParams(
        A_log=Tensor(A_log, requires_grad=True),
        W_B=Tensor(rng.normal(0, scale, (d_inner, d_state)), requires_grad=True),
        W_C=Tensor(rng.normal(0, scale, (d_inner, d_state)), requires_grad=True),
        W_dt1=Tensor(rng.normal(0, scale, (d_inner, dt_rank)), requires_grad=True),
        W_dt2=Tensor(rng.uniform(-1, 1, (dt_rank, d_inner)) / np.sqrt(dt_rank), requires_grad=True),
        dt_bias=Tensor(_inv_softplus(dt), requires_grad=True),
    )


def init_mamba_block(rng: np.random.Generator, d_model: int, d_state: int = 16,
                     expand: int = 2, conv_width: int = 4) -> MambaBlockParams:
    d_inner = expand * d_model
    dt_rank = max(1, -(-d_model // 16))
    return MambaBlockParams(
        W_in=Tensor(rng.normal(0, 1.0 / np.sqrt(d_model), (d_model, 2 * d_inner)), requires_grad=True),
        conv_w=Tensor(rng.uniform(-1, 1, (conv_width, d_inner)) / np.sqrt(conv_width), requires_grad=True),
        conv_b=Tensor(np.zeros(d_inner), requires_grad=True),
        ssm=init_ssm(rng, d_inner, d_state, dt_rank),
        W_out=Tensor(rng.normal(0, 1.0 / np.sqrt(d_inner), (d_inner, d_model)), requires_grad=True),
    )


def init_bidirectional(rng: np.random.Generator, d_model: int, **kw) -> BidirectionalParams:
    return BidirectionalParams(
        ln1_g=Tensor(np.ones(d_model), requires_grad=True),
        ln1_b=Tensor(np.zeros(d_model), requires_grad=True),
        fwd=init_mamba_block(rng, d_model, **kw),
        ln2_g=Tensor(np.ones(d_model), requires_grad=True),
        ln2_b=Tensor(np.zeros(d_model), requires_grad=True),
        bwd=init_mamba_block(rng, d_model, **kw),
    )


def init_prefix_bidirectional(rng: np.random.Generator, d_model: int, **kw) -> PrefixBidirectionalParams:
    return PrefixBidirectionalParams(
        ln_f_g=Tensor(np.ones(d_model), requires_grad=True),
        ln_f_b=Tensor(np.zeros(d_model), requires_grad=True),
        ln_q_g=Tensor(np.ones(d_model), requires_grad=True),
        ln_q_b=Tensor(np.zeros(d_model), requires_grad=True),
        first=init_mamba_block(rng, d_model, **kw),
        second=init_mamba_block(rng, d_model, **kw),
    )


def named_block_params(prefix: str, params) -> dict[str, Tensor]:
    """Flatten a block dataclass into checkpoint-ready named tensors."""
    out: dict[str, Tensor] = {}
    if isinstance(params, Tensor):
        out[prefix] = params
    elif isinstance(params, (MambaBlockParams, BidirectionalParams, PrefixBidirectionalParams, SsmParams)):
        for name in params.__dataclass_fields__:
            out.update(named_block_params(f"{prefix}.{name}", getattr(params, name)))
    else:
        raise TypeError(f"cannot flatten {type(params)} at {prefix!r}")
    return out
