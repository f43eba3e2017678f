"""Iterative prototype mining.

One refinement layer mines a class prototype by cross-attending over the
support foreground and over the query's current foreground estimate,
re-activates the query feature map with the mined prototype, and
regenerates the query mask that guides the next layer.  Stacking layers
lets the prototype and the query segmentation sharpen together.

The support-side and query-side attentions have separate weights on
purpose: the two feature sources play different roles and must not be
tied.  When the query's mask estimate is empty the query side falls back
to unmasked attention (tracked through the ``events`` counter); an empty
support mask is an episode construction bug and raises.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (AttentionParams, MlpParams, attention, chw_to_tokens, init_attention,
                        init_mlp, masked_attention, mlp_block, tokens_to_chw)
from .autodiff import Tensor
from .errors import ConfigError, EpisodeError, ShapeError
from .losses import binary_cross_entropy

MINING_SOURCES = ("support", "query", "both")


@dataclass
class LayerState:
    """What one refinement layer consumes and produces."""

    prototype: Tensor          # [1, C]
    query_feat: Tensor         # [H, W, C]
    query_mask: np.ndarray     # [H, W] bool, current foreground estimate


@dataclass
class PrototypeSnapshot:
    vector: np.ndarray         # [C], detached copy
    layer: int                 # 0 = the learned seed, l >= 1 = after layer l
    origin: str                # "seed" or "mined"


@dataclass
class MiningLayerParams:
    support_attn: AttentionParams
    query_attn: AttentionParams
    mlp: MlpParams
    act_conv1_w: Tensor        # 1x1, 2C -> C
    act_conv1_b: Tensor
    act_conv2_w: Tensor        # 3x3, C -> C
    act_conv2_b: Tensor
    act_attn: AttentionParams  # self-attention over activated tokens
    act_gamma: Tensor          # post-norm after the self-attention residual
    act_beta: Tensor
    w_m: Tensor                # [C, C] bilinear map for mask generation

    def tensors(self):
        named = []
        for prefix, p in (("support_attn", self.support_attn),
                          ("query_attn", self.query_attn),
                          ("mlp", self.mlp),
                          ("act_attn", self.act_attn)):
            named.extend((f"{prefix}.{n}", t) for n, t in p.tensors())
        named.extend([
            ("act_conv1_w", self.act_conv1_w), ("act_conv1_b", self.act_conv1_b),
            ("act_conv2_w", self.act_conv2_w), ("act_conv2_b", self.act_conv2_b),
            ("act_gamma", self.act_gamma), ("act_beta", self.act_beta),
            ("w_m", self.w_m),
        ])
        return named


@dataclass
class StackResult:
    final: LayerState
    losses: list = field(default_factory=list)        # per-layer dual-supervision losses
    snapshots: list = field(default_factory=list)     # PrototypeSnapshot per layer
    final_probs: Tensor | None = None                 # last generated query mask, [H, W]
    pre_final_feat: Tensor | None = None              # query features the last layer mined from


def init_mining_layer(rng: np.random.Generator, channels: int, heads: int, dtype,
                      out_proj: bool = True) -> MiningLayerParams:
    c = channels

    def conv_w(cout, cin, k):
        std = (2.0 / (cin * k * k)) ** 0.5
        return Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    std = (2.0 / (c + c)) ** 0.5
    return MiningLayerParams(
        support_attn=init_attention(rng, c, heads, dtype, out_proj),
        query_attn=init_attention(rng, c, heads, dtype, out_proj),
        mlp=init_mlp(rng, c, dtype),
        act_conv1_w=conv_w(c, 2 * c, 1),
        act_conv1_b=zeros(c),
        act_conv2_w=conv_w(c, c, 3),
        act_conv2_b=zeros(c),
        act_attn=init_attention(rng, c, heads, dtype, out_proj),
        act_gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        act_beta=zeros(c),
        # small init keeps the generated-mask logits unsaturated: the bilinear
        # form sums C^2 products of O(1) normalized activations
        w_m=Tensor(rng.normal(0.0, 1.0 / c, (c, c)).astype(dtype), requires_grad=True),
    )


def _flat_tokens(feat: Tensor) -> Tensor:
    if feat.ndim == 3:
        h, w, c = feat.shape
        return ad.reshape(feat, (h * w, c))
    if feat.ndim == 2:
        return feat
    raise ShapeError(f"expected [H, W, C] or [N, C] features, got {feat.shape}")


def mine_prototype(proto: Tensor, supports, query_feat: Tensor, query_mask: np.ndarray,
                   params: MiningLayerParams, source: str = "both",
                   events: dict | None = None) -> Tensor:
    """One mining step: update the prototype from masked attention reads.

    supports is a list of (features, mask) pairs; their attention outputs
    are averaged so any shot count behaves like the 1-shot case with a
    better estimate.  ``source`` selects which reads feed the update:
    "support", "query", or "both".
    """
    if source not in MINING_SOURCES:
        raise ConfigError(f"mining source must be one of {MINING_SOURCES}, got {source!r}")
    if not supports and source != "query":
        raise EpisodeError("mine_prototype: no support pairs given")

    total = proto
    if source in ("support", "both"):
        read = None
        for feat, mask in supports:
            if not (np.asarray(mask) > 0.5).any():
                raise EpisodeError("mine_prototype: support mask has no foreground")
            part = masked_attention(proto, _flat_tokens(feat), mask, params.support_attn)
            read = part if read is None else ad.add(read, part)
        if len(supports) > 1:
            read = ad.mul(read, 1.0 / len(supports))
        total = ad.add(total, read)
    if source in ("query", "both"):
        q_tokens = _flat_tokens(query_feat)
        if (np.asarray(query_mask) > 0.5).any():
            read = masked_attention(proto, q_tokens, query_mask, params.query_attn)
        else:
            # nothing estimated as foreground yet: read the whole query map
            if events is not None:
                events["query_mask_empty"] = events.get("query_mask_empty", 0) + 1
            read = attention(proto, q_tokens, params.query_attn)
        total = ad.add(total, read)
    return mlp_block(total, params.mlp)


def activate_query(proto: Tensor, query_feat: Tensor, params: MiningLayerParams) -> Tensor:
    """Condition the query features on the prototype.

    The prototype is broadcast across the map, concatenated channel-wise,
    squeezed back to C channels by a 1x1 conv + relu + 3x3 conv, then a
    self-attention layer (residual, post-norm) spreads the activation
    spatially.  Returns the activated [H, W, C] map.
    """
    h, w, c = query_feat.shape
    if proto.shape != (1, c):
        raise ShapeError(f"prototype must be [1, {c}], got {proto.shape}")
    flat = ad.reshape(query_feat, (h * w, c))
    proto_map = ad.broadcast_to(proto, (h * w, c))
    stacked = ad.concat([proto_map, flat], axis=1)          # [HW, 2C]
    x = tokens_to_chw(stacked, h, w)                        # [2C, H, W]
    x = ad.relu(ad.conv2d(x, params.act_conv1_w, params.act_conv1_b))
    x = ad.conv2d(x, params.act_conv2_w, params.act_conv2_b)
    tokens = ad.reshape(chw_to_tokens(x), (h * w, c))
    attended = attention(tokens, tokens, params.act_attn)
    out = ad.layer_norm(ad.add(tokens, attended), params.act_gamma, params.act_beta)
    return ad.reshape(out, (h, w, c))


def mask_probabilities(proto: Tensor, feat: Tensor, w_m: Tensor) -> Tensor:
    """Generate a soft mask from the prototype: sigmoid((G W) F^T), [H, W]."""
    if feat.ndim != 3:
        raise ShapeError(f"mask_probabilities expects [H, W, C] features, got {feat.shape}")
    h, w, c = feat.shape
    tokens = ad.reshape(feat, (h * w, c))
    logits = ad.matmul(ad.matmul(proto, w_m), ad.transpose(tokens))   # [1, HW]
    return ad.reshape(ad.sigmoid(logits), (h, w))


def dual_mask_loss(proto: Tensor, query_feat: Tensor, supports, query_truth: np.ndarray,
                   w_m: Tensor, alpha: float, query_probs: Tensor | None = None) -> Tensor:
    """Mask-generation supervision on both branches.

    alpha weighs the query-side BCE; (1 - alpha) weighs the support-side
    BCE (averaged over shots).  alpha outside [0, 1] is rejected.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if query_probs is None:
        query_probs = mask_probabilities(proto, query_feat, w_m)
    q_term = binary_cross_entropy(query_probs, query_truth)
    s_term = None
    for feat, mask in supports:
        part = binary_cross_entropy(mask_probabilities(proto, feat, w_m), mask)
        s_term = part if s_term is None else ad.add(s_term, part)
    if s_term is None:
        raise EpisodeError("dual_mask_loss: no support pairs given")
    if len(supports) > 1:
        s_term = ad.mul(s_term, 1.0 / len(supports))
    return ad.add(ad.mul(q_term, alpha), ad.mul(s_term, 1.0 - alpha))


def mining_layer(state: LayerState, supports, params: MiningLayerParams, *,
                 source: str = "both", use_activation: bool = True,
                 mask_from_updated: bool = False, events: dict | None = None):
    """One refinement step; returns the next state plus the generated
    query-mask probabilities (needed for supervision and, on the last
    layer, as a prediction path)."""
    proto = mine_prototype(state.prototype, supports, state.query_feat, state.query_mask,
                           params, source=source, events=events)
    feat = activate_query(proto, state.query_feat, params) if use_activation else state.query_feat
    mask_src = feat if mask_from_updated else state.query_feat
    probs = mask_probabilities(proto, mask_src, params.w_m)
    next_mask = probs.data >= 0.5
    return LayerState(proto, feat, next_mask), probs


def mining_stack(initial: LayerState, supports, layer_params, *,
                 query_truth: np.ndarray | None = None, source: str = "both",
                 use_dual_loss: bool = True, use_activation: bool = True,
                 alpha: float = 0.3, mask_from_updated: bool = False,
                 events: dict | None = None) -> StackResult:
    """Run the full refinement stack.

    layer_params holds one MiningLayerParams per layer (independent
    weights).  When ``query_truth`` is given and dual-loss supervision is
    on, the per-layer losses are recorded in order; otherwise the loss
    list stays empty.  Prototype snapshots (seed + each mined prototype)
    are always recorded.
    """
    layer_params = list(layer_params)
    if len(layer_params) < 1:
        raise ConfigError("mining stack needs at least one layer")
    result = StackResult(final=initial)
    result.snapshots.append(PrototypeSnapshot(
        vector=np.array(initial.prototype.data, copy=True).reshape(-1), layer=0, origin="seed"))
    state = initial
    for l, params in enumerate(layer_params, start=1):
        prev_feat = state.query_feat
        if l == len(layer_params):
            result.pre_final_feat = prev_feat
        state, probs = mining_layer(state, supports, params, source=source,
                                    use_activation=use_activation,
                                    mask_from_updated=mask_from_updated, events=events)
        if query_truth is not None and use_dual_loss:
            feat_for_loss = state.query_feat if mask_from_updated else prev_feat
            result.losses.append(dual_mask_loss(state.prototype, feat_for_loss, supports,
                                                query_truth, params.w_m, alpha,
                                                query_probs=probs))
        result.snapshots.append(PrototypeSnapshot(
            vector=np.array(state.prototype.data, copy=True).reshape(-1), layer=l, origin="mined"))
        result.final_probs = probs
    result.final = state
    return result
