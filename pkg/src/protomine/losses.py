"""Pixel-level losses on probability maps."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

BCE_EPS = 1e-7
DICE_EPS = 1.0


def binary_cross_entropy(probs: Tensor, target: np.ndarray, eps: float = BCE_EPS) -> Tensor:
    """Mean BCE of a probability map against a binary target.

    Probabilities are clamped to [eps, 1-eps] before the logs so a
    saturated prediction cannot produce an infinite loss.
    """
    t = np.asarray(target, dtype=probs.dtype).reshape(-1)
    if t.size != probs.size:
        raise ShapeError(f"target size {t.size} does not match prediction {probs.shape}")
    p = ad.clip(ad.reshape(probs, (t.size,)), eps, 1.0 - eps)
    pos = Tensor(t)
    neg_t = Tensor(1.0 - t)
    ll = ad.add(ad.mul(ad.log(p), pos), ad.mul(ad.log(ad.sub(1.0, p)), neg_t))
    return ad.neg(ad.mean(ll))


def dice_loss(probs: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Soft dice loss, 1 - 2|P*G| / (|P| + |G|), smoothed by eps."""
    t = np.asarray(target, dtype=probs.dtype).reshape(-1)
    if t.size != probs.size:
        raise ShapeError(f"target size {t.size} does not match prediction {probs.shape}")
    p = ad.reshape(probs, (t.size,))
    tgt = Tensor(t)
    inter = ad.sum(ad.mul(p, tgt))
    denom = ad.add(ad.sum(p), float(t.sum()))
    score = ad.div(ad.add(ad.mul(inter, 2.0), eps), ad.add(denom, eps))
    return ad.sub(1.0, score)
