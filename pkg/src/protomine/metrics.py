"""Segmentation scoring and prototype-geometry measurements.

Scores accumulate as integer intersection/union counts per class; ratios
only appear in finalize, so merging partial runs and streaming episodes
give identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import MID_FACTOR, downsample_mask, masked_average_pool


@dataclass
class MetricsReport:
    miou: float
    fbiou: float
    per_class_iou: dict
    episodes: int
    warnings: list = field(default_factory=list)


class SegmentationScores:
    """Running per-class and foreground/background IoU accumulator."""

    def __init__(self):
        self.inter: dict = {}
        self.union: dict = {}
        self.fg_inter = 0
        self.fg_union = 0
        self.bg_inter = 0
        self.bg_union = 0
        self.episodes = 0

    def update(self, class_id: int, pred: np.ndarray, truth: np.ndarray) -> None:
        if pred.shape != truth.shape:
            raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
        p = pred.astype(bool)
        t = truth.astype(bool)
        inter = int(np.sum(p & t))
        union = int(np.sum(p | t))
        self.inter[class_id] = self.inter.get(class_id, 0) + inter
        self.union[class_id] = self.union.get(class_id, 0) + union
        self.fg_inter += inter
        self.fg_union += union
        self.bg_inter += int(np.sum(~p & ~t))
        self.bg_union += int(np.sum(~p | ~t))
        self.episodes += 1

    def merge(self, other: "SegmentationScores") -> "SegmentationScores":
        out = SegmentationScores()
        for src in (self, other):
            for c in src.inter:
                out.inter[c] = out.inter.get(c, 0) + src.inter[c]
                out.union[c] = out.union.get(c, 0) + src.union[c]
        out.fg_inter = self.fg_inter + other.fg_inter
        out.fg_union = self.fg_union + other.fg_union
        out.bg_inter = self.bg_inter + other.bg_inter
        out.bg_union = self.bg_union + other.bg_union
        out.episodes = self.episodes + other.episodes
        return out

    def finalize(self) -> MetricsReport:
        warnings = []
        per_class = {}
        for c in sorted(self.inter):
            if self.union[c] == 0:
                warnings.append(f"class {c}: empty union, excluded from mIoU")
                continue
            per_class[c] = 100.0 * self.inter[c] / self.union[c]
        miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
        if not per_class:
            warnings.append("no classes with nonzero union")
        fg = self.fg_inter / self.fg_union if self.fg_union else 0.0
        bg = self.bg_inter / self.bg_union if self.bg_union else 0.0
        return MetricsReport(miou=miou, fbiou=100.0 * (fg + bg) / 2.0,
                             per_class_iou=per_class, episodes=self.episodes,
                             warnings=warnings)


@dataclass
class DistanceRecord:
    """Euclidean distances between the prototypes one episode produces."""

    class_id: int
    mined_to_support: float
    mined_to_query: float
    query_to_support: float
    layer: int


def _pooled(feat, mask_full: np.ndarray, factor: int):
    small = downsample_mask(mask_full.astype(bool), factor)
    if not small.any():
        return None
    return masked_average_pool(feat, small).data[0]


def prototype_distances(model, episode, *, all_layers: bool = False,
                        force_support: bool = False):
    """Measure where the mined prototype sits between the pooled support
    and pooled query prototypes.

    Prototypes are pooled in the space the final mining layer operates in:
    the query prototype from the feature map that layer consumed, the
    support prototype from the (never-refined) support features it read.
    Returns a list of DistanceRecord, one per requested layer (last layer
    only unless all_layers).  Episodes whose ground-truth mask vanishes at
    feature resolution yield an empty list.  force_support substitutes the
    pooled support prototype for the mined one, a pipeline self-check that
    must drive mined_to_support to exactly zero.
    """
    res = model.forward_episode(episode, with_loss=False)
    if res.stack is None:
        return []
    query_vec = _pooled(res.stack.pre_final_feat, episode.query_mask, MID_FACTOR)
    if query_vec is None:
        return []
    sup_vecs = []
    for feat, mask in zip(res.pa.support_feats, episode.support_masks):
        v = _pooled(feat, mask, MID_FACTOR)
        if v is not None:
            sup_vecs.append(v)
    if not sup_vecs:
        return []
    support_vec = np.mean(sup_vecs, axis=0)
    d_qs = float(np.linalg.norm(query_vec - support_vec))

    mined = [s for s in res.stack.snapshots if s.origin == "mined"]
    if not all_layers:
        mined = mined[-1:]
    out = []
    for snap in mined:
        vec = support_vec if force_support else snap.vector
        out.append(DistanceRecord(
            class_id=episode.class_id,
            mined_to_support=float(np.linalg.norm(vec - support_vec)),
            mined_to_query=float(np.linalg.norm(vec - query_vec)),
            query_to_support=d_qs,
            layer=snap.layer,
        ))
    return out


def summarize_distances(records) -> dict:
    """Mean of each distance over a record list; empty input gives NaNs."""
    if not records:
        return {"mined_to_support": float("nan"), "mined_to_query": float("nan"),
                "query_to_support": float("nan"), "count": 0}
    return {
        "mined_to_support": float(np.mean([r.mined_to_support for r in records])),
        "mined_to_query": float(np.mean([r.mined_to_query for r in records])),
        "query_to_support": float(np.mean([r.query_to_support for r in records])),
        "count": len(records),
    }
