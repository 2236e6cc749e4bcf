"""The generative grasp policy: a conditional VAE over action chunks.

The encoder summarizes (proprioception history, action chunk) into a latent
Gaussian via two CLS tokens; the decoder reconstructs the chunk from wrist
image features (ring-scanned into a token sequence), the proprioception
history, and the latent sample. Both run on stacks of bidirectional
selective-SSM blocks; the decoder finishes with prefix-bidirectional blocks
over learnable action queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .scan_order import ScanPermutation, central_scan_indices
from .ssm import (BidirectionalParams, PrefixBidirectionalParams,
                  bidirectional_mamba, init_bidirectional,
                  init_prefix_bidirectional, named_block_params,
                  prefix_bidirectional_mamba)
from .tensor import DimensionError, NumericError, Tensor

JOINT_LIMIT_DEG = (0.0, 100.0)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    d_z: int = 32
    c_img: int = 128
    n1: int = 4            # bidirectional depth (encoder and decoder stage 1)
    n2: int = 6            # prefix-bidirectional depth (decoder stage 2)
    p_hist: int = 30
    k_chunk: int = 20
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    img_h: int = 240
    img_w: int = 320
    n_joints: int = 6
    n_forces: int = 30
    beta: float = 1.0      # KL weight in the training loss

    @property
    def h_dim(self) -> int:
        return self.n_joints + self.n_forces

    @property
    def grid_h(self) -> int:
        return -(-self.img_h // 32)

    @property
    def grid_w(self) -> int:
        return -(-self.img_w // 32)

    def conv_channels(self) -> list[int]:
        return [min(16, self.c_img), min(32, self.c_img), min(64, self.c_img),
                min(128, self.c_img), self.c_img]

    def to_array(self) -> np.ndarray:
        return np.array([self.d_model, self.d_z, self.c_img, self.n1, self.n2,
                         self.p_hist, self.k_chunk, self.d_state, self.expand,
                         self.conv_width, self.img_h, self.img_w,
                         self.n_joints, self.n_forces, self.beta], dtype=np.float64)

    @staticmethod
    def from_array(a: np.ndarray) -> "ModelConfig":
        v = [int(x) for x in a[:14]]
        return ModelConfig(*v, beta=float(a[14]))


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    """Fixed transformer-style positional table (length, d_model)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / d_model)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


@dataclass
class VtmVaeParams:
    cfg: ModelConfig
    cls1: Tensor
    cls2: Tensor
    W_h: Tensor
    b_h: Tensor
    W_a: Tensor
    b_a: Tensor
    W_img: Tensor
    b_img: Tensor
    W_z: Tensor
    b_z: Tensor
    queries: Tensor
    W_mu: Tensor
    b_mu: Tensor
    W_lv: Tensor
    b_lv: Tensor
    W_act: Tensor
    b_act: Tensor
    conv: list[tuple[Tensor, Tensor]]
    enc_blocks: list[BidirectionalParams]
    dec_blocks: list[BidirectionalParams]
    prefix_blocks: list[PrefixBidirectionalParams]
    pos_table: np.ndarray = field(repr=False, default=None)
    scan: ScanPermutation = field(repr=False, default=None)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("cls1", "cls2", "W_h", "b_h", "W_a", "b_a", "W_img", "b_img",
                     "W_z", "b_z", "queries", "W_mu", "b_mu", "W_lv", "b_lv",
                     "W_act", "b_act"):
            out[name] = getattr(self, name)
        for i, (w, b) in enumerate(self.conv):
            out[f"img.{i}.w"] = w
            out[f"img.{i}.b"] = b
        for i, blk in enumerate(self.enc_blocks):
            out.update(named_block_params(f"enc.{i}", blk))
        for i, blk in enumerate(self.dec_blocks):
            out.update(named_block_params(f"dec.{i}", blk))
        for i, blk in enumerate(self.prefix_blocks):
            out.update(named_block_params(f"pre.{i}", blk))
        return out


def init_params(cfg: ModelConfig, seed: int = 0) -> VtmVaeParams:
    rng = np.random.default_rng(seed)
    d = cfg.d_model

    def lin(nin, nout, scale=None):
        s = scale if scale is not None else 1.0 / np.sqrt(nin)
        return (Tensor(rng.normal(0, s, (nin, nout)), requires_grad=True),
                Tensor(np.zeros(nout), requires_grad=True))

    W_h, b_h = lin(cfg.h_dim, d)
    W_a, b_a = lin(cfg.n_joints, d)
    W_img, b_img = lin(cfg.c_img, d)
    W_z, b_z = lin(cfg.d_z, d)
    W_mu, b_mu = lin(d, cfg.d_z)
    W_lv, b_lv = lin(d, cfg.d_z)
    W_act, b_act = lin(d, cfg.n_joints, scale=1e-3 / np.sqrt(d))

    conv = []
    cin = 3
    for cout in cfg.conv_channels():
        w = rng.normal(0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
        conv.append((Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True)))
        cin = cout

    block_kw = dict(d_state=cfg.d_state, expand=cfg.expand, conv_width=cfg.conv_width)
    enc_len = 1 + cfg.p_hist + cfg.k_chunk + 1
    dec_len = cfg.grid_h * cfg.grid_w + cfg.p_hist + 1
    return VtmVaeParams(
        cfg=cfg,
        cls1=Tensor(rng.normal(0, 0.02, d), requires_grad=True),
        cls2=Tensor(rng.normal(0, 0.02, d), requires_grad=True),
        W_h=W_h, b_h=b_h, W_a=W_a, b_a=b_a, W_img=W_img, b_img=b_img,
        W_z=W_z, b_z=b_z,
        queries=Tensor(rng.normal(0, 0.02, (cfg.k_chunk, d)), requires_grad=True),
        W_mu=W_mu, b_mu=b_mu, W_lv=W_lv, b_lv=b_lv, W_act=W_act, b_act=b_act,
        conv=conv,
        enc_blocks=[init_bidirectional(rng, d, **block_kw) for _ in range(cfg.n1)],
        dec_blocks=[init_bidirectional(rng, d, **block_kw) for _ in range(cfg.n1)],
        prefix_blocks=[init_prefix_bidirectional(rng, d, **block_kw) for _ in range(cfg.n2)],
        pos_table=sinusoidal_positions(max(enc_len, dec_len), d),
        scan=central_scan_indices(cfg.grid_h, cfg.grid_w),
    )


def _same_pad(size: int, k: int = 3, stride: int = 2) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def image_features(params: VtmVaeParams, image) -> Tensor:
    """Wrist image (B,H,W,3) in [0,1] -> (B, grid_h, grid_w, c_img) features."""
    cfg = params.cfg
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.data.ndim == 3:
        img = T.reshape(img, (1,) + img.shape)
    if img.shape[1] != cfg.img_h or img.shape[2] != cfg.img_w or img.shape[3] != 3:
        raise DimensionError(f"expected (B,{cfg.img_h},{cfg.img_w},3) image, got {img.shape}")
    x = img  # [0,1] range; zero image with zero biases must give zero features
    h, w = cfg.img_h, cfg.img_w
    for cw, cb in params.conv:
        pt, pb = _same_pad(h)
        pl, pr = _same_pad(w)
        x = T.silu(T.conv2d(x, cw, cb, stride=2, padding=(pt, pb, pl, pr)))
        h, w = -(-h // 2), -(-w // 2)
    return x


def _batched(arr, rank: int) -> tuple[Tensor, bool]:
    """Promote to a batched Tensor, preserving graph nodes (z must stay live)."""
    t = arr if isinstance(arr, Tensor) else Tensor(np.asarray(arr, dtype=np.float64))
    if t.data.ndim == rank:
        return T.reshape(t, (1,) + t.shape), True
    return t, False


def _broadcast_token(vec: Tensor, batch: int) -> Tensor:
    """(d,) learnable vector -> (B,1,d) token."""
    d = vec.shape[0]
    return T.add(T.reshape(vec, (1, 1, d)), np.zeros((batch, 1, d)))


def encode(params: VtmVaeParams, h_hist, actions) -> tuple[Tensor, Tensor]:
    """(B,p,36) history + (B,k,6) actions -> latent (mu, logvar), each (B,d_z)."""
    cfg = params.cfg
    hh, squeeze = _batched(h_hist, 2)
    aa, _ = _batched(actions, 2)
    if hh.shape[1:] != (cfg.p_hist, cfg.h_dim):
        raise DimensionError(f"history must be (B,{cfg.p_hist},{cfg.h_dim}), got {hh.shape}")
    if aa.shape[1:] != (cfg.k_chunk, cfg.n_joints):
        raise DimensionError(f"actions must be (B,{cfg.k_chunk},{cfg.n_joints}), got {aa.shape}")
    B = hh.shape[0]
    seq = T.concat([
        _broadcast_token(params.cls1, B),
        T.add(T.matmul(hh, params.W_h), params.b_h),
        T.add(T.matmul(aa, params.W_a), params.b_a),
        _broadcast_token(params.cls2, B),
    ], axis=1)
    L = seq.shape[1]
    seq = T.add(seq, params.pos_table[None, :L, :])
    for blk in params.enc_blocks:
        seq = bidirectional_mamba(seq, blk)
    summary = T.mul(T.add(seq[:, 0, :], seq[:, L - 1, :]), 0.5)
    mu = T.add(T.matmul(summary, params.W_mu), params.b_mu)
    logvar = T.add(T.matmul(summary, params.W_lv), params.b_lv)
    if squeeze:
        return mu[0], logvar[0]
    return mu, logvar


def reparameterize(mu, logvar, eps) -> Tensor:
    """z = mu + exp(logvar / 2) * eps."""
    mt = mu if isinstance(mu, Tensor) else Tensor(mu)
    lt = logvar if isinstance(logvar, Tensor) else Tensor(logvar)
    return T.add(mt, T.mul(T.exp(T.mul(lt, 0.5)), np.asarray(eps, dtype=np.float64)))


def decode(params: VtmVaeParams, image, h_hist, z) -> Tensor:
    """Conditioning (image, history, latent) -> (B,k,6) action chunk."""
    cfg = params.cfg
    hh, squeeze = _batched(h_hist, 2)
    zz, _ = _batched(z, 1)
    B = hh.shape[0]
    feats = image_features(params, image)
    from .scan_order import apply_scan  # local to avoid cycle at import time
    img_seq = apply_scan(feats, params.scan)
    tokens = T.concat([
        T.add(T.matmul(img_seq, params.W_img), params.b_img),
        T.add(T.matmul(hh, params.W_h), params.b_h),
        T.reshape(T.add(T.matmul(zz, params.W_z), params.b_z), (B, 1, cfg.d_model)),
    ], axis=1)
    L = tokens.shape[1]
    tokens = T.add(tokens, params.pos_table[None, :L, :])
    for blk in params.dec_blocks:
        tokens = bidirectional_mamba(tokens, blk)
    queries = T.add(T.reshape(params.queries, (1, cfg.k_chunk, cfg.d_model)),
                    np.zeros((B, cfg.k_chunk, cfg.d_model)))
    feats_seq = tokens
    for blk in params.prefix_blocks:
        feats_seq, queries = prefix_bidirectional_mamba(feats_seq, queries, blk)
    chunk = T.add(T.matmul(queries, params.W_act), params.b_act)
    if squeeze:
        return chunk[0]
    return chunk


def loss(params: VtmVaeParams, batch, eps) -> tuple[Tensor, dict]:
    """Training objective: chunk L1 + beta * KL to the standard normal.

    `batch` is (images, histories, chunks) in normalized units; `eps` is the
    (B, d_z) reparameterization noise (or an int seed).
    """
    images, hists, chunks = batch
    if isinstance(eps, (int, np.integer)):
        eps = np.random.default_rng(int(eps)).standard_normal(
            (np.asarray(hists).shape[0], params.cfg.d_z))
    mu, logvar = encode(params, hists, chunks)
    z = reparameterize(mu, logvar, eps)
    pred = decode(params, images, hists, z)
    l1 = T.l1_loss(pred, np.asarray(chunks, dtype=np.float64))
    kl = T.kl_std_normal(mu, logvar)
    total = T.add(l1, T.mul(kl, params.cfg.beta))
    if not np.isfinite(total.data):
        raise NumericError(
            f"non-finite loss: l1={float(l1.data)}, kl={float(kl.data)}, "
            f"|mu|max={np.abs(mu.data).max()}, |logvar|max={np.abs(logvar.data).max()}")
    return total, {"l1": float(l1.data), "kl": float(kl.data)}


def infer_chunk(params: VtmVaeParams, image, h_hist, action_stats=None,
                mode: str = "mean", rng: np.random.Generator | None = None) -> np.ndarray:
    """Decoder-only inference -> (k, 6) commands in degrees, clamped to limits.

    mode="mean" pins z = 0 (deterministic); mode="sample" draws z ~ N(0, I)
    from `rng`. `action_stats` is an optional (mean, std) pair mapping the
    network's normalized outputs back to degrees.
    """
    cfg = params.cfg
    if mode == "sample":
        if rng is None:
            raise T.UsageError("mode='sample' requires an rng")
        z = rng.standard_normal(cfg.d_z)
    elif mode == "mean":
        z = np.zeros(cfg.d_z)
    else:
        raise T.UsageError(f"unknown latent mode {mode!r}")
    with T.no_grad():
        chunk = decode(params, image, h_hist, z).data
    if action_stats is not None:
        mean, std = action_stats
        chunk = chunk * std + mean
    return np.clip(chunk, JOINT_LIMIT_DEG[0], JOINT_LIMIT_DEG[1])


# ---------------------------------------------------------------------------
# persistence

def save_model(path, params: VtmVaeParams, extra: dict[str, np.ndarray] | None = None):
    arrays = {"meta.config": params.cfg.to_array()}
    for k, t in params.named_parameters().items():
        arrays[f"param.{k}"] = t.data
    if extra:
        arrays.update(extra)
    save_checkpoint(path, arrays)


def load_model(path) -> tuple[VtmVaeParams, dict[str, np.ndarray]]:
    """Rebuild params from a checkpoint; returns (params, non-parameter arrays)."""
    arrays = load_checkpoint(path)
    if "meta.config" not in arrays:
        raise DimensionError("checkpoint missing meta.config record")
    cfg = ModelConfig.from_array(arrays["meta.config"])
    params = init_params(cfg, seed=0)
    named = params.named_parameters()
    for name, t in named.items():
        key = f"param.{name}"
        if key not in arrays:
            raise DimensionError(f"checkpoint missing parameter {name!r}")
        if arrays[key].shape != t.data.shape:
            raise DimensionError(
                f"checkpoint/config mismatch for {name!r}: "
                f"{arrays[key].shape} vs {t.data.shape}")
        t.data = arrays[key]
    rest = {k: v for k, v in arrays.items() if not k.startswith("param.") and k != "meta.config"}
    return params, rest
