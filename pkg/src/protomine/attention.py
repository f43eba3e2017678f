"""Transformer building blocks.

Scaled dot-product attention with a multi-head wrapper, hard-masked
cross attention over flattened feature maps, and the feed-forward block
with residual connection and post layer-norm.  Everything operates on
token layout [N, C]; helpers convert to/from conv layout [C, H, W].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AllMaskedError, ConfigError, ShapeError


@dataclass
class AttentionParams:
    """Projections for (multi-head) attention.

    w_q / w_k / w_v are [C, C]: the column blocks of width C/heads form
    the per-head slices.  w_o mixes the concatenated heads; None disables
    the output projection.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor | None
    heads: int

    def tensors(self):
        named = [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)]
        if self.w_o is not None:
            named.append(("w_o", self.w_o))
        return named


@dataclass
class MlpParams:
    """Feed-forward block: two linears with a 4x hidden width, plus the
    layer-norm gain/bias applied after the residual."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    gamma: Tensor
    beta: Tensor

    def tensors(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2),
                ("gamma", self.gamma), ("beta", self.beta)]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, (fan_in, fan_out)).astype(dtype)


def init_attention(rng: np.random.Generator, channels: int, heads: int, dtype,
                   out_proj: bool = True) -> AttentionParams:
    if heads < 1 or channels % heads != 0:
        raise ConfigError(f"channels {channels} not divisible by heads {heads}")
    w_q = Tensor(_xavier(rng, channels, channels, dtype), requires_grad=True)
    w_k = Tensor(_xavier(rng, channels, channels, dtype), requires_grad=True)
    # value/output paths start at identity so attention reads begin in the
    # feature basis; query/key stay random to break head symmetry
    w_v = Tensor(np.eye(channels, dtype=dtype), requires_grad=True)
    w_o = Tensor(np.eye(channels, dtype=dtype), requires_grad=True) if out_proj else None
    return AttentionParams(w_q, w_k, w_v, w_o, heads)


def init_mlp(rng: np.random.Generator, channels: int, dtype) -> MlpParams:
    hidden = 4 * channels
    return MlpParams(
        w1=Tensor(_xavier(rng, channels, hidden, dtype), requires_grad=True),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=Tensor(_xavier(rng, hidden, channels, dtype), requires_grad=True),
        b2=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
    )


def attention(x: Tensor, y: Tensor, params: AttentionParams, mask: Tensor | None = None,
              return_weights: bool = False):
    """Multi-head scaled dot-product attention of queries x over context y.

    x: [N1, C], y: [N2, C]; optional additive mask [N2] (or [N1, N2]) is
    applied to every head's scores before the softmax.  Returns [N1, C],
    plus the per-head weight tensors when return_weights is set.
    """
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"attention expects 2-d token tensors, got {x.shape}, {y.shape}")
    c = x.shape[1]
    if y.shape[1] != c:
        raise ShapeError(f"channel mismatch: x {x.shape} vs y {y.shape}")
    h = params.heads
    if c % h != 0:
        raise ConfigError(f"channels {c} not divisible by heads {h}")
    d = c // h
    q = ad.matmul(x, params.w_q)
    k = ad.matmul(y, params.w_k)
    v = ad.matmul(y, params.w_v)
    scale = 1.0 / math.sqrt(d)
    outs = []
    weights = []
    for i in range(h):
        qi = ad.narrow(q, 1, i * d, d)
        ki = ad.narrow(k, 1, i * d, d)
        vi = ad.narrow(v, 1, i * d, d)
        scores = ad.mul(ad.matmul(qi, ad.transpose(ki)), scale)
        if mask is not None:
            scores = ad.add(scores, mask)
        w = ad.softmax(scores, axis=1)
        weights.append(w)
        outs.append(ad.matmul(w, vi))
    out = outs[0] if h == 1 else ad.concat(outs, axis=1)
    if params.w_o is not None:
        out = ad.matmul(out, params.w_o)
    if return_weights:
        return out, weights
    return out


def build_attn_mask(region: np.ndarray, dtype) -> Tensor:
    """Additive attention mask from a binary map: 0 inside the region,
    the hard-mask sentinel outside.  Output is a flat [H*W] constant."""
    flat = np.asarray(region).reshape(-1)
    fg = flat > 0.5
    out = np.where(fg, 0.0, ad.mask_value(dtype)).astype(dtype)
    return Tensor(out)


def masked_attention(g: Tensor, f: Tensor, region: np.ndarray, params: AttentionParams,
                     return_weights: bool = False):
    """Attention of g over f restricted to the region's foreground tokens.

    f is [N, C] with N matching region.size.  An empty region cannot be
    attended at all and raises AllMaskedError.
    """
    flat = np.asarray(region).reshape(-1)
    if f.shape[0] != flat.size:
        raise ShapeError(f"mask size {flat.size} does not match {f.shape[0]} tokens")
    if not (flat > 0.5).any():
        raise AllMaskedError("masked_attention: region has no foreground")
    mask = build_attn_mask(flat, f.dtype)
    return attention(g, f, params, mask=mask, return_weights=return_weights)


def mlp_block(x: Tensor, params: MlpParams) -> Tensor:
    """relu MLP with residual connection and post layer-norm."""
    c = x.shape[1]
    if params.w1.shape != (c, 4 * c):
        raise ShapeError(f"mlp hidden width must be 4x channels; got w1 {params.w1.shape} for C={c}")
    hidden = ad.relu(ad.add(ad.matmul(x, params.w1), params.b1))
    y = ad.add(ad.matmul(hidden, params.w2), params.b2)
    return ad.layer_norm(ad.add(x, y), params.gamma, params.beta)


def tokens_to_chw(t: Tensor, h: int, w: int) -> Tensor:
    """[H, W, C] or [H*W, C] tokens -> [C, H, W] conv layout."""
    c = t.shape[-1]
    flat = ad.reshape(t, (h * w, c)) if t.ndim == 3 else t
    return ad.reshape(ad.transpose(flat), (c, h, w))


def chw_to_tokens(t: Tensor) -> Tensor:
    """[C, H, W] conv layout -> [H, W, C] tokens."""
    c, h, w = t.shape
    return ad.reshape(ad.transpose(ad.reshape(t, (c, h * w))), (h, w, c))
