"""Few-shot segmentation pipeline around the mining stack.

A small convolutional encoder produces a mid-level feature map (where
all mining happens) and a high-level map (for the correlation prior).
Prototype activation fuses support cues into both branches, an initial
conv head guesses the first query mask, the mining stack refines the
prototype and the query features, and a final conv head over the last
feature map yields the prediction. With feature re-activation disabled
the features never change, so the stack's generated mask takes over as
the prediction instead of the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import chw_to_tokens, tokens_to_chw
from .autodiff import Tensor, resolve_dtype
from .errors import CheckpointError, ConfigError, EpisodeError, ShapeError
from .losses import dice_loss
from .mining import LayerState, StackResult, init_mining_layer, mining_stack

MID_FACTOR = 4    # image -> mid-level map downsampling
HIGH_FACTOR = 8   # image -> high-level map downsampling


@dataclass
class EncoderParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    mid_w: Tensor
    mid_b: Tensor

    def tensors(self):
        return [(n, getattr(self, n)) for n in
                ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "mid_w", "mid_b")]


@dataclass
class PaParams:
    query_w: Tensor    # 1x1, (2C+1) -> C
    query_b: Tensor
    support_w: Tensor  # 1x1, 2C -> C
    support_b: Tensor

    def tensors(self):
        return [(n, getattr(self, n)) for n in ("query_w", "query_b", "support_w", "support_b")]


@dataclass
class HeadParams:
    conv1_w: Tensor    # 3x3, C -> C
    conv1_b: Tensor
    conv2_w: Tensor    # 1x1, C -> 1
    conv2_b: Tensor

    def tensors(self):
        return [(n, getattr(self, n)) for n in ("conv1_w", "conv1_b", "conv2_w", "conv2_b")]


@dataclass
class PaOutputs:
    query_feat: Tensor            # [h, w, C]
    support_feats: list           # K tensors [h, w, C]
    support_masks_mid: list       # K bool arrays [h, w]
    prior: np.ndarray             # [h, w] in [0, 1], detached
    prototype: Tensor             # [1, C] pooled support prototype


@dataclass
class EpisodeResult:
    final_probs: Tensor           # [H, W] at image resolution
    init_probs: Tensor            # [h, w] from the initial head
    pred_mask: np.ndarray         # [H, W] bool
    total: Tensor | None
    parts: dict
    pa: PaOutputs
    stack: StackResult | None
    query_truth_mid: np.ndarray | None


def _conv_param(rng, cout, cin, k, dtype):
    std = (2.0 / (cin * k * k)) ** 0.5
    w = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return w, b


def init_encoder(rng, widths, channels, dtype) -> EncoderParams:
    if len(widths) != 3:
        raise ConfigError(f"encoder needs 3 stage widths, got {widths}")
    w1, b1 = _conv_param(rng, widths[0], 3, 3, dtype)
    w2, b2 = _conv_param(rng, widths[1], widths[0], 3, dtype)
    w3, b3 = _conv_param(rng, widths[2], widths[1], 3, dtype)
    mw, mb = _conv_param(rng, channels, widths[1] + widths[2], 1, dtype)
    return EncoderParams(w1, b1, w2, b2, w3, b3, mw, mb)


def init_pa(rng, channels, dtype) -> PaParams:
    qw, qb = _conv_param(rng, channels, 2 * channels + 1, 1, dtype)
    sw, sb = _conv_param(rng, channels, 2 * channels, 1, dtype)
    return PaParams(qw, qb, sw, sb)


def init_head(rng, channels, dtype) -> HeadParams:
    w1, b1 = _conv_param(rng, channels, channels, 3, dtype)
    w2, b2 = _conv_param(rng, 1, channels, 1, dtype)
    return HeadParams(w1, b1, w2, b2)


def encode(image: Tensor, p: EncoderParams):
    """Three conv/relu/pool stages; returns (mid, high) conv-layout maps.

    mid fuses stage 2 with the upsampled stage 3 through a 1x1 conv and
    sits at 1/4 resolution; high is the raw stage-3 map at 1/8.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"encoder expects [3, H, W] images, got {image.shape}")
    h, w = image.shape[1:]
    if h % HIGH_FACTOR or w % HIGH_FACTOR:
        raise ShapeError(f"image dims must be divisible by {HIGH_FACTOR}, got {h}x{w}")
    s1 = ad.avg_pool2(ad.relu(ad.conv2d(image, p.conv1_w, p.conv1_b)))
    s2 = ad.avg_pool2(ad.relu(ad.conv2d(s1, p.conv2_w, p.conv2_b)))
    s3 = ad.avg_pool2(ad.relu(ad.conv2d(s2, p.conv3_w, p.conv3_b)))
    fused = ad.concat([s2, ad.upsample2(s3)], axis=0)
    mid = ad.conv2d(fused, p.mid_w, p.mid_b)
    return mid, s3


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-wise any-pooling: a cell is foreground if any source pixel is.

    Chosen so a nonempty image-level mask stays nonempty at feature
    resolution.
    """
    m = np.asarray(mask) > 0.5
    h, w = m.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask dims {h}x{w} not divisible by factor {factor}")
    return m.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))


def upsample_map(m: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(m, factor, axis=0), factor, axis=1)


def masked_average_pool(feat: Tensor, mask: np.ndarray) -> Tensor:
    """Average of [H, W, C] features over the mask's foreground, as [1, C]."""
    if feat.ndim != 3:
        raise ShapeError(f"masked_average_pool expects [H, W, C], got {feat.shape}")
    h, w, c = feat.shape
    m = np.asarray(mask) > 0.5
    if m.shape != (h, w):
        raise ShapeError(f"mask {m.shape} does not match features {h}x{w}")
    count = int(m.sum())
    if count == 0:
        raise EpisodeError("masked_average_pool: mask has no foreground")
    flat = ad.reshape(feat, (h * w, c))
    col = Tensor(m.reshape(h * w, 1), dtype=feat.dtype)
    return ad.mul(ad.sum(ad.mul(flat, col), axis=0, keepdims=True), 1.0 / count)


def cosine_prior(high_q: np.ndarray, high_s: np.ndarray, support_fg: np.ndarray) -> np.ndarray:
    """Correlation prior: per query position, the best cosine similarity to
    any support foreground position, min-max normalized over the map.

    Computed on raw arrays, outside the gradient tape.
    """
    c, h, w = high_q.shape
    fg = np.asarray(support_fg) > 0.5
    if fg.shape != (h, w):
        raise ShapeError(f"support mask {fg.shape} does not match features {h}x{w}")
    if not fg.any():
        raise EpisodeError("cosine_prior: support mask has no foreground")
    q = high_q.reshape(c, -1).T.astype(np.float64)
    s = high_s.reshape(c, -1).T.astype(np.float64)[fg.reshape(-1)]
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-30)
    sn = s / np.maximum(np.linalg.norm(s, axis=1, keepdims=True), 1e-30)
    best = (qn @ sn.T).max(axis=1)
    lo, hi = best.min(), best.max()
    if hi - lo < 1e-12:
        return np.zeros((h, w))
    return ((best - lo) / (hi - lo)).reshape(h, w)


def prototype_activation(mid_q: Tensor, mid_s: list, high_q: Tensor, high_s: list,
                         support_masks: list, p: PaParams) -> PaOutputs:
    """Fuse support knowledge into both feature branches.

    Query side: concat(mid feature, prior map, broadcast prototype) -> 1x1
    conv.  Support side: concat(mid feature, broadcast prototype) -> its
    own 1x1 conv.  K-shot prototypes and priors are averaged.
    """
    if not mid_s or len(mid_s) != len(high_s) or len(mid_s) != len(support_masks):
        raise EpisodeError("prototype_activation: inconsistent support lists")
    c, h, w = mid_q.shape
    img_h = h * MID_FACTOR

    protos = []
    priors = []
    masks_mid = []
    for k, (ms, hs, mask) in enumerate(zip(mid_s, high_s, support_masks)):
        factor_mid = np.asarray(mask).shape[0] // h
        m_mid = downsample_mask(mask, factor_mid)
        m_high = downsample_mask(mask, factor_mid * 2)
        masks_mid.append(m_mid)
        protos.append(masked_average_pool(chw_to_tokens(ms), m_mid))
        priors.append(upsample_map(cosine_prior(high_q.data, hs.data, m_high), 2))
    proto = protos[0]
    for extra in protos[1:]:
        proto = ad.add(proto, extra)
    if len(protos) > 1:
        proto = ad.mul(proto, 1.0 / len(protos))
    prior = np.mean(priors, axis=0)

    proto_map = ad.broadcast_to(ad.reshape(ad.transpose(proto), (c, 1, 1)), (c, h, w))
    prior_t = Tensor(prior.reshape(1, h, w), dtype=mid_q.dtype)
    query_in = ad.concat([mid_q, prior_t, proto_map], axis=0)
    query_feat = chw_to_tokens(ad.conv2d(query_in, p.query_w, p.query_b))

    support_feats = []
    for ms in mid_s:
        sup_in = ad.concat([ms, proto_map], axis=0)
        support_feats.append(chw_to_tokens(ad.conv2d(sup_in, p.support_w, p.support_b)))

    return PaOutputs(query_feat, support_feats, masks_mid, prior, proto)


def head_logits(feat: Tensor, p: HeadParams) -> Tensor:
    """Two-conv segmentation head on an [h, w, C] map, returns [h, w] logits."""
    h, w, c = feat.shape
    x = tokens_to_chw(feat, h, w)
    x = ad.relu(ad.conv2d(x, p.conv1_w, p.conv1_b))
    x = ad.conv2d(x, p.conv2_w, p.conv2_b)
    return ad.reshape(x, (h, w))


def upsample_probs(probs: Tensor, factor: int) -> Tensor:
    """Nearest upsample of an [h, w] map by a power-of-two factor."""
    h, w = probs.shape
    x = ad.reshape(probs, (1, h, w))
    f = factor
    while f > 1:
        if f % 2:
            raise ShapeError(f"upsample factor must be a power of 2, got {factor}")
        x = ad.upsample2(x)
        f //= 2
    return ad.reshape(x, (h * factor, w * factor))


class FewShotSegmenter:
    """The full episodic model: encoder, prototype activation, mining stack,
    and prediction heads, owned as named parameter tensors."""

    def __init__(self, cfg, canvas: int | None = None, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x1217])))
        canvas = cfg.canvas if canvas is None else canvas
        if canvas % HIGH_FACTOR:
            raise ConfigError(f"canvas must be divisible by {HIGH_FACTOR}, got {canvas}")
        self.cfg = cfg
        self.canvas = canvas
        self.dtype = resolve_dtype(cfg.precision)
        self.channels = cfg.channels
        if not cfg.mining:
            self.layer_count = 0
        else:
            self.layer_count = cfg.layers if cfg.iterate else 1
        self.encoder = init_encoder(rng, cfg.enc_channels, cfg.channels, self.dtype)
        self.pa = init_pa(rng, cfg.channels, self.dtype)
        self.seed_proto = Tensor(rng.normal(0.0, 0.02, (1, cfg.channels)).astype(self.dtype),
                                 requires_grad=True)
        self.layers = [init_mining_layer(rng, cfg.channels, cfg.heads, self.dtype,
                                         out_proj=cfg.mha_output_proj)
                       for _ in range(self.layer_count)]
        self.init_head = init_head(rng, cfg.channels, self.dtype)
        self.final_head = init_head(rng, cfg.channels, self.dtype)
        self.events: dict = {}

    def named_parameters(self):
        named = [("seed_proto", self.seed_proto)]
        named.extend((f"encoder.{n}", t) for n, t in self.encoder.tensors())
        named.extend((f"pa.{n}", t) for n, t in self.pa.tensors())
        for i, layer in enumerate(self.layers):
            named.extend((f"layer{i}.{n}", t) for n, t in layer.tensors())
        named.extend((f"init_head.{n}", t) for n, t in self.init_head.tensors())
        named.extend((f"final_head.{n}", t) for n, t in self.final_head.tensors())
        return named

    def load_state(self, state: dict):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise CheckpointError(f"parameter names mismatch: missing={missing[:3]} extra={extra[:3]}")
        for name, t in own.items():
            arr = state[name]
            if tuple(arr.shape) != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)
            t.grad = None

    def _check_episode(self, episode):
        if episode.query_image.shape != (3, self.canvas, self.canvas):
            raise ShapeError(f"episode canvas {episode.query_image.shape} does not match model "
                             f"canvas {self.canvas}")

    def _encode_all(self, episode):
        mid_q, high_q = encode(Tensor(episode.query_image, dtype=self.dtype), self.encoder)
        mid_s, high_s = [], []
        for img in episode.support_images:
            m, h = encode(Tensor(img, dtype=self.dtype), self.encoder)
            mid_s.append(m)
            high_s.append(h)
        return mid_q, high_q, mid_s, high_s

    def forward_episode(self, episode, with_loss: bool = True) -> EpisodeResult:
        self._check_episode(episode)
        cfg = self.cfg
        mid_q, high_q, mid_s, high_s = self._encode_all(episode)
        pa = prototype_activation(mid_q, mid_s, high_q, high_s, episode.support_masks, self.pa)

        init_logits = head_logits(pa.query_feat, self.init_head)
        init_probs = ad.sigmoid(init_logits)
        first_mask = init_probs.data >= 0.5

        truth_mid = None
        if with_loss:
            truth_mid = downsample_mask(episode.query_mask, MID_FACTOR)

        stack_res = None
        if self.layer_count > 0:
            supports = list(zip(pa.support_feats, pa.support_masks_mid))
            stack_res = mining_stack(
                LayerState(self.seed_proto, pa.query_feat, first_mask), supports, self.layers,
                query_truth=truth_mid, source=cfg.mining_source, use_dual_loss=cfg.dual_loss,
                use_activation=cfg.query_activation, alpha=cfg.alpha,
                mask_from_updated=cfg.mask_from_updated_feature, events=self.events)
            if cfg.query_activation:
                feat_probs = ad.sigmoid(head_logits(stack_res.final.query_feat, self.final_head))
            else:
                # no feature refinement: the refined map equals the PA map, so
                # the head would ignore the mined prototype entirely; the
                # generated mask is the only prediction path that uses it
                feat_probs = stack_res.final_probs
        else:
            feat_probs = ad.sigmoid(head_logits(pa.query_feat, self.final_head))

        final_probs = upsample_probs(feat_probs, MID_FACTOR)
        pred = final_probs.data >= 0.5

        total = None
        parts = {}
        if with_loss:
            total = dice_loss(final_probs, episode.query_mask)
            parts["dice"] = total.item()
            if stack_res is not None:
                for term in stack_res.losses:
                    total = ad.add(total, ad.mul(term, cfg.dual_loss_weight))
                parts["dual_layers"] = [t.item() for t in stack_res.losses]
                parts["dual"] = float(np.sum(parts["dual_layers"])) \
                    if stack_res.losses else 0.0
                init_dice = dice_loss(upsample_probs(init_probs, MID_FACTOR), episode.query_mask)
                total = ad.add(total, ad.mul(init_dice, cfg.init_head_weight))
                parts["init_dice"] = init_dice.item()
            parts["total"] = total.item()

        return EpisodeResult(final_probs, init_probs, pred, total, parts, pa, stack_res, truth_mid)

    def predict(self, episode) -> np.ndarray:
        return self.forward_episode(episode, with_loss=False).pred_mask

    def prior_baseline(self, episode) -> np.ndarray:
        """Prediction from the correlation prior alone, thresholded at 0.5."""
        self._check_episode(episode)
        _, high_q, _, high_s = self._encode_all(episode)
        priors = []
        for hs, mask in zip(high_s, episode.support_masks):
            m_high = downsample_mask(mask, HIGH_FACTOR)
            priors.append(cosine_prior(high_q.data, hs.data, m_high))
        prior = np.mean(priors, axis=0)
        return upsample_map(prior, HIGH_FACTOR) >= 0.5
