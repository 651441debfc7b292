"""Lightweight transformer decoder over frozen token features.

Pre-norm blocks (multi-head self-attention, then a GELU MLP with dropout on
its output), mean pooling over tokens, and a linear classifier. Forward
passes cache activations so the backward pass is exact without recomputation.
Depth 0 degenerates to a linear probe: mean-pool then affine.

No positional embeddings are added; input tokens come from an encoder that
already resolved position, and the blocks stay permutation-equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .exceptions import ConfigError, ShapeError, StateError
from .numerics import (Array, LayerNormCache, dropout_mask, gelu_with_grad,
                       layer_norm, layer_norm_backward, softmax_last)


@dataclass(frozen=True)
class DecoderConfig:
    dim: int
    num_classes: int
    depth: int = 3
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.5

    def __post_init__(self):
        if self.dim < 1 or self.num_classes < 1:
            raise ConfigError("dim and num_classes must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(
                f"dim {self.dim} must be divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.dim)


@dataclass
class BlockParams:
    """One pre-norm block. Weight matrices are (out, in), applied as x @ W.T."""
    ln1_gamma: Array
    ln1_beta: Array
    qkv_weight: Array   # (3D, D), rows ordered q, k, v
    qkv_bias: Array     # (3D,)
    proj_weight: Array  # (D, D)
    proj_bias: Array    # (D,)
    ln2_gamma: Array
    ln2_beta: Array
    fc1_weight: Array   # (H, D)
    fc1_bias: Array     # (H,)
    fc2_weight: Array   # (D, H)
    fc2_bias: Array     # (D,)


BLOCK_FIELDS = tuple(f.name for f in fields(BlockParams))


@dataclass
class DecoderHead:
    config: DecoderConfig
    blocks: list[BlockParams]
    cls_weight: Array  # (K, D)
    cls_bias: Array    # (K,)

    def param_items(self) -> list[tuple[str, Array]]:
        """All parameters in declaration order, with stable dotted names."""
        items = []
        for i, blk in enumerate(self.blocks):
            for name in BLOCK_FIELDS:
                items.append((f"blocks.{i}.{name}", getattr(blk, name)))
        items.append(("cls_weight", self.cls_weight))
        items.append(("cls_bias", self.cls_bias))
        return items

    def param_dict(self) -> dict[str, Array]:
        return dict(self.param_items())

    def num_params(self) -> int:
        return sum(a.size for _, a in self.param_items())


def _uniform_fan_in(rng: np.random.Generator, out_dim: int, in_dim: int) -> Array:
    bound = 1.0 / math.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def init_decoder(config: DecoderConfig, rng: np.random.Generator) -> DecoderHead:
    """Fresh head: scaled-uniform fan-in weights, zero biases, identity norms.

    Draw order is fixed (per block, in field order), so a given seed yields
    bit-identical parameters.
    """
    d, h = config.dim, config.hidden
    blocks = []
    for _ in range(config.depth):
        blocks.append(BlockParams(
            ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
            qkv_weight=_uniform_fan_in(rng, 3 * d, d), qkv_bias=np.zeros(3 * d),
            proj_weight=_uniform_fan_in(rng, d, d), proj_bias=np.zeros(d),
            ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
            fc1_weight=_uniform_fan_in(rng, h, d), fc1_bias=np.zeros(h),
            fc2_weight=_uniform_fan_in(rng, d, h), fc2_bias=np.zeros(d),
        ))
    cls_weight = _uniform_fan_in(rng, config.num_classes, d)
    cls_bias = np.zeros(config.num_classes)
    return DecoderHead(config=config, blocks=blocks,
                       cls_weight=cls_weight, cls_bias=cls_bias)


@dataclass
class BlockCache:
    x_in: Array          # (B, T, D) block input
    ln1: LayerNormCache
    xhat1: Array         # (B, T, D)
    q: Array | None      # (B, h, T, dh); None on the single-token fast path
    k: Array | None
    v: Array | None
    attn: Array | None   # (B, h, T, T) softmax weights
    ctx: Array           # (B, T, D) merged attention context
    x_mid: Array         # (B, T, D) after attention residual
    ln2: LayerNormCache
    xhat2: Array
    h_act: Array         # (B, T, H) gelu output
    h_grad: Array        # (B, T, H) gelu derivative at the fc1 output
    mask: Array          # (B, T, D) dropout mask


@dataclass
class ForwardCache:
    config: DecoderConfig
    block_caches: list[BlockCache]
    pooled: Array        # (B, D)
    num_tokens: int


def _split_heads(x: Array, heads: int) -> Array:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Array) -> Array:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _linear(x: Array, weight: Array, bias: Array) -> Array:
    # x: (B, T, in) -> (B, T, out); flattening keeps matmuls 2-D.
    b, t, _ = x.shape
    out = x.reshape(b * t, -1) @ weight.T + bias
    return out.reshape(b, t, -1)


def _block_forward_batch(params: BlockParams, x: Array, config: DecoderConfig,
                         rng, train_mode: bool) -> tuple[Array, BlockCache]:
    if x.ndim != 3 or x.shape[2] != config.dim:
        raise ShapeError(f"block input must be (B, T, {config.dim}), got {x.shape}")
    xhat1, ln1 = layer_norm(x, params.ln1_gamma, params.ln1_beta)
    d = config.dim
    if x.shape[1] == 1:
        # One token: attention weights are exactly 1, so the context is v and
        # q/k never influence the output or any gradient.
        q = k = v = attn = None
        ctx = _linear(xhat1, params.qkv_weight[2 * d:], params.qkv_bias[2 * d:])
    else:
        qkv = _linear(xhat1, params.qkv_weight, params.qkv_bias)
        q = _split_heads(qkv[..., :d], config.heads)
        k = _split_heads(qkv[..., d:2 * d], config.heads)
        v = _split_heads(qkv[..., 2 * d:], config.heads)
        scale = 1.0 / math.sqrt(config.head_dim)
        attn = softmax_last(q @ k.transpose(0, 1, 3, 2) * scale)
        ctx = _merge_heads(attn @ v)
    x_mid = x + _linear(ctx, params.proj_weight, params.proj_bias)

    xhat2, ln2 = layer_norm(x_mid, params.ln2_gamma, params.ln2_beta)
    h_pre = _linear(xhat2, params.fc1_weight, params.fc1_bias)
    h_act, h_grad = gelu_with_grad(h_pre)
    mlp = _linear(h_act, params.fc2_weight, params.fc2_bias)
    mask = dropout_mask(mlp.shape, config.dropout, rng, train_mode)
    out = x_mid + mlp * mask
    cache = BlockCache(x_in=x, ln1=ln1, xhat1=xhat1, q=q, k=k, v=v, attn=attn,
                       ctx=ctx, x_mid=x_mid, ln2=ln2, xhat2=xhat2,
                       h_act=h_act, h_grad=h_grad, mask=mask)
    return out, cache


def _linear_backward(dout: Array, x: Array, weight: Array):
    b, t, _ = dout.shape
    dflat = dout.reshape(b * t, -1)
    xflat = x.reshape(b * t, -1)
    dweight = dflat.T @ xflat
    dbias = dflat.sum(axis=0)
    dx = (dflat @ weight).reshape(b, t, -1)
    return dx, dweight, dbias


def _block_backward_batch(params: BlockParams, cache: BlockCache, dout: Array,
                          config: DecoderConfig) -> tuple[Array, dict[str, Array]]:
    grads: dict[str, Array] = {}

    # MLP path: out = x_mid + mask * fc2(gelu(fc1(LN2(x_mid))))
    dmlp = dout * cache.mask
    dh_act, grads["fc2_weight"], grads["fc2_bias"] = _linear_backward(
        dmlp, cache.h_act, params.fc2_weight)
    dh_pre = dh_act * cache.h_grad
    dxhat2, grads["fc1_weight"], grads["fc1_bias"] = _linear_backward(
        dh_pre, cache.xhat2, params.fc1_weight)
    dx_ln2, grads["ln2_gamma"], grads["ln2_beta"] = layer_norm_backward(
        cache.ln2, dxhat2)
    dx_mid = dout + dx_ln2

    # Attention path: x_mid = x + proj(merge(attn @ v))
    dctx, grads["proj_weight"], grads["proj_bias"] = _linear_backward(
        dx_mid, cache.ctx, params.proj_weight)
    d = config.dim
    if cache.attn is None:
        # Single token: dscores vanishes identically, so only the v slice of
        # the qkv projection receives gradient.
        dxhat1, dv_weight, dv_bias = _linear_backward(
            dctx, cache.xhat1, params.qkv_weight[2 * d:])
        grads["qkv_weight"] = np.zeros_like(params.qkv_weight)
        grads["qkv_weight"][2 * d:] = dv_weight
        grads["qkv_bias"] = np.zeros_like(params.qkv_bias)
        grads["qkv_bias"][2 * d:] = dv_bias
    else:
        dctx_h = _split_heads(dctx, config.heads)
        dattn = dctx_h @ cache.v.transpose(0, 1, 3, 2)
        dv = cache.attn.transpose(0, 1, 3, 2) @ dctx_h
        # softmax backward over the key axis
        a = cache.attn
        dscores = a * (dattn - np.sum(dattn * a, axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(config.head_dim)
        dq = dscores @ cache.k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ cache.q * scale
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
        dxhat1, grads["qkv_weight"], grads["qkv_bias"] = _linear_backward(
            dqkv, cache.xhat1, params.qkv_weight)
    dx_ln1, grads["ln1_gamma"], grads["ln1_beta"] = layer_norm_backward(
        cache.ln1, dxhat1)
    dx = dx_mid + dx_ln1
    return dx, grads


def forward_batch(head: DecoderHead, tokens: Array, rng,
                  train_mode: bool) -> tuple[Array, ForwardCache]:
    """Run a (B, T, D) token batch through the head.

    Returns (B, K) logits and the cache consumed by `backward_batch`. Eval
    mode never touches `rng` and is fully deterministic.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected (B, T, D) tokens, got shape {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("need at least one token per sample")
    if x.shape[2] != head.config.dim:
        raise ShapeError(
            f"token dim {x.shape[2]} does not match head dim {head.config.dim}")
    t = x.shape[1]
    caches = []
    for blk in head.blocks:
        x, cache = _block_forward_batch(blk, x, head.config, rng, train_mode)
        caches.append(cache)
    pooled = x.mean(axis=1)
    logits = pooled @ head.cls_weight.T + head.cls_bias
    return logits, ForwardCache(config=head.config, block_caches=caches,
                                pooled=pooled, num_tokens=t)


def backward_batch(head: DecoderHead, cache: ForwardCache,
                   dlogits: Array) -> tuple[dict[str, Array], Array]:
    """Exact gradients for every parameter plus the input tokens."""
    if cache.config != head.config or len(cache.block_caches) != len(head.blocks):
        raise StateError("forward cache does not match this head")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.ndim != 2 or dlogits.shape[1] != head.config.num_classes:
        raise ShapeError(f"dlogits must be (B, {head.config.num_classes})")
    if dlogits.shape[0] != cache.pooled.shape[0]:
        raise StateError("dlogits batch size does not match the cached forward")

    grads: dict[str, Array] = {
        "cls_weight": dlogits.T @ cache.pooled,
        "cls_bias": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ head.cls_weight
    t = cache.num_tokens
    dx = np.repeat(dpooled[:, None, :] / t, t, axis=1)
    for i in range(len(head.blocks) - 1, -1, -1):
        dx, block_grads = _block_backward_batch(
            head.blocks[i], cache.block_caches[i], dx, head.config)
        for name, g in block_grads.items():
            grads[f"blocks.{i}.{name}"] = g
    return grads, dx


def block_forward(params: BlockParams, tokens: Array, config: DecoderConfig,
                  rng, train_mode: bool) -> tuple[Array, BlockCache]:
    """Single-sample (T, D) block application."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ShapeError(f"expected (T, D) tokens, got shape {tokens.shape}")
    out, cache = _block_forward_batch(params, tokens[None], config, rng, train_mode)
    return out[0], cache


def block_backward(params: BlockParams, cache: BlockCache, dout: Array,
                   config: DecoderConfig) -> tuple[Array, dict[str, Array]]:
    """Gradients of a single-sample block call: (dtokens, per-field grads)."""
    dout = np.asarray(dout, dtype=np.float64)
    if dout.ndim == 2:
        dout = dout[None]
    if dout.shape != cache.x_in.shape:
        raise StateError("gradient shape does not match the cached forward")
    dx, grads = _block_backward_batch(params, cache, dout, config)
    return dx[0], grads


def forward(head: DecoderHead, tokens: Array, rng,
            train_mode: bool) -> tuple[Array, ForwardCache]:
    """Single-sample forward: (T, D) tokens to a (K,) logit vector."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ShapeError(f"expected (T, D) tokens, got shape {tokens.shape}")
    logits, cache = forward_batch(head, tokens[None], rng, train_mode)
    return logits[0], cache


def backward(head: DecoderHead, cache: ForwardCache,
             dlogits: Array) -> tuple[dict[str, Array], Array]:
    """Single-sample backward matching `forward`."""
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.ndim != 1:
        raise ShapeError(f"expected a (K,) gradient, got shape {dlogits.shape}")
    grads, dtokens = backward_batch(head, cache, dlogits[None])
    return grads, dtokens[0]
