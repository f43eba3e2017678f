"""Synthetic episodic benchmark for few-shot segmentation.

Eight procedurally rendered shape classes, each with its own color range
and render-parameter ranges (scale, rotation, position, texture).  The
catalogue splits into four disjoint folds; episodes pair K support
samples with one query of the same class.  A diversity knob widens the
query's render-parameter ranges relative to the support's, so higher
settings measurably increase the intra-class gap an episode must bridge.

Everything derives from numpy SeedSequences: the same (class, seed)
always renders the same sample, bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, RenderError

CLASS_NAMES = ("circle", "square", "triangle", "ring", "cross", "star", "crescent", "bar")

# one base fill color per class; instances jitter around it
CLASS_COLORS = np.array([
    (0.85, 0.25, 0.25),   # circle
    (0.25, 0.50, 0.85),   # square
    (0.30, 0.75, 0.35),   # triangle
    (0.85, 0.72, 0.20),   # ring
    (0.66, 0.33, 0.80),   # cross
    (0.90, 0.52, 0.18),   # star
    (0.25, 0.74, 0.72),   # crescent
    (0.80, 0.42, 0.62),   # bar
])

_SAMPLE_SALT = 0x5A11
_EPISODE_SALT = 0xE415
N_FOLDS = 4


@dataclass
class SynthSpec:
    """Dataset generation parameters; serializable as key=value text."""

    canvas: int = 64
    classes: tuple = CLASS_NAMES
    scale_range: tuple = (0.34, 0.72)     # object radius as a fraction of canvas/2
    rotation_max: float = 0.5             # radians, base range is [-max, max]
    position_jitter: float = 0.10         # center offset as a fraction of the canvas
    color_jitter: float = 0.08            # per-channel, around the class base color
    texture_amp: float = 0.06             # noise inside the object
    noise: float = 0.05                   # background noise
    distractors_max: int = 2
    widen_gain: float = 1.0               # how strongly the diversity knob widens ranges
    min_mask_px: int = 16
    min_mask_frac: float = 0.02
    max_mask_frac: float = 0.50

    def validate(self):
        if self.canvas < 16 or self.canvas % 8:
            raise ConfigError(f"canvas must be >= 16 and divisible by 8, got {self.canvas}")
        if len(self.classes) < 8:
            raise ConfigError(f"need at least 8 classes, got {len(self.classes)}")
        if len(self.classes) % N_FOLDS:
            raise ConfigError(f"class count {len(self.classes)} not divisible by {N_FOLDS} folds")
        unknown = [c for c in self.classes if c not in CLASS_NAMES]
        if unknown:
            raise ConfigError(f"unknown shape classes: {unknown}")
        if not 0 < self.scale_range[0] < self.scale_range[1] <= 0.95:
            raise ConfigError(f"bad scale range {self.scale_range}")
        if self.min_mask_px < 1 or not 0 < self.min_mask_frac < self.max_mask_frac <= 1:
            raise ConfigError("bad mask bounds")
        return self

    def to_text(self) -> str:
        lines = ["# synthetic dataset spec"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


@dataclass
class FoldSplit:
    fold: int
    train_classes: tuple
    test_classes: tuple

    def classes_for(self, mode: str) -> tuple:
        if mode == "train":
            return self.train_classes
        if mode == "test":
            return self.test_classes
        raise ConfigError(f"mode must be 'train' or 'test', got {mode!r}")


@dataclass
class Episode:
    class_id: int
    class_name: str
    fold: int
    mode: str
    shots: int
    seed: int
    diversity: float
    support_images: list = field(repr=False, default_factory=list)
    support_masks: list = field(repr=False, default_factory=list)
    query_image: np.ndarray = field(repr=False, default=None)
    query_mask: np.ndarray = field(repr=False, default=None)


def fold_split(spec: SynthSpec, fold: int) -> FoldSplit:
    """Partition the class catalogue into N_FOLDS disjoint test groups."""
    spec.validate()
    if not 0 <= fold < N_FOLDS:
        raise ConfigError(f"fold must be in [0, {N_FOLDS}), got {fold}")
    ids = tuple(range(len(spec.classes)))
    per = len(ids) // N_FOLDS
    test = ids[fold * per:(fold + 1) * per]
    train = tuple(i for i in ids if i not in test)
    return FoldSplit(fold, train, test)


def _widened(spec: SynthSpec, widen: float):
    """Effective render ranges for a given diversity widening in [0, 1]."""
    w = max(0.0, widen) * spec.widen_gain
    lo, hi = spec.scale_range
    return {
        "scale": (lo, min(hi * (1.0 + 0.55 * w), 0.92)),
        "rotation": min(spec.rotation_max * (1.0 + 4.0 * w), np.pi),
        "position": min(spec.position_jitter * (1.0 + 1.5 * w), 0.30),
        "color": min(spec.color_jitter * (1.0 + 3.0 * w), 0.45),
    }


def _shape_mask(name: str, canvas: int, cx: float, cy: float, r: float, rot: float) -> np.ndarray:
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    u = xs - cx
    v = ys - cy
    ur = u * np.cos(rot) + v * np.sin(rot)
    vr = -u * np.sin(rot) + v * np.cos(rot)
    d = np.hypot(ur, vr)
    if name == "circle":
        return d <= r
    if name == "square":
        return np.maximum(np.abs(ur), np.abs(vr)) <= 0.82 * r
    if name == "triangle":
        angles = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
        px = r * np.cos(angles)
        py = r * np.sin(angles)
        inside = np.ones_like(ur, dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            # vertices wind clockwise in y-down pixel coords
            cross = (px[j] - px[i]) * (vr - py[i]) - (py[j] - py[i]) * (ur - px[i])
            inside &= cross >= 0
        return inside
    if name == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if name == "cross":
        arm = 0.32 * r
        return ((np.abs(ur) <= arm) & (np.abs(vr) <= r)) | ((np.abs(vr) <= arm) & (np.abs(ur) <= r))
    if name == "star":
        phi = np.arctan2(vr, ur)
        bound = r * (0.45 + 0.55 * (np.cos(5 * phi) + 1.0) / 2.0)
        return d <= bound
    if name == "crescent":
        bite = np.hypot(ur - 0.45 * r, vr)
        return (d <= r) & (bite > 0.78 * r)
    if name == "bar":
        return (np.abs(ur) <= r) & (np.abs(vr) <= 0.22 * r)
    raise ConfigError(f"unknown shape class {name!r}")


def _draw_instance(rng: np.random.Generator, name: str, canvas: int, ranges: dict) -> np.ndarray:
    lo, hi = ranges["scale"]
    r = rng.uniform(lo, hi) * canvas / 2.0
    rot = rng.uniform(-ranges["rotation"], ranges["rotation"])
    margin = min(r + 1.0, canvas / 2.0 - 1.0)
    jit = ranges["position"] * canvas
    cx = np.clip(canvas / 2.0 + rng.uniform(-jit, jit), margin, canvas - margin)
    cy = np.clip(canvas / 2.0 + rng.uniform(-jit, jit), margin, canvas - margin)
    return _shape_mask(name, canvas, cx, cy, r, rot)


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray, amp: float,
           rng: np.random.Generator) -> None:
    n = int(mask.sum())
    if n:
        img[:, mask] = color[:, None] + amp * rng.standard_normal((3, n))


def render_sample(class_id: int, seed: int, spec: SynthSpec, widen: float = 0.0):
    """Render one (image, mask) pair; deterministic in (class_id, seed).

    widen > 0 broadens the render-parameter ranges (the diversity knob's
    query side).  Raises RenderError if no draw satisfies the mask-size
    bounds within 100 attempts.
    """
    if not 0 <= class_id < len(spec.classes):
        raise ConfigError(f"class_id {class_id} out of range")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([_SAMPLE_SALT, class_id, int(seed)])))
    s = spec.canvas
    name = spec.classes[class_id]
    ranges = _widened(spec, widen)
    area = s * s

    mask = None
    for _ in range(100):
        cand = _draw_instance(rng, name, s, ranges)
        px = int(cand.sum())
        if px >= spec.min_mask_px and spec.min_mask_frac <= px / area <= spec.max_mask_frac:
            mask = cand
            break
    if mask is None:
        raise RenderError(f"could not render a valid {name!r} in 100 attempts "
                          f"(canvas {s}, widen {widen})")

    base = rng.uniform(0.15, 0.40)
    bg = base + rng.uniform(-0.06, 0.06, 3)
    img = bg[:, None, None] + spec.noise * rng.standard_normal((3, s, s))

    # distractors first (other classes, base ranges), labeled object on top
    base_ranges = _widened(spec, 0.0)
    n_distract = int(rng.integers(0, spec.distractors_max + 1))
    others = [i for i in range(len(spec.classes)) if i != class_id]
    for _ in range(n_distract):
        dc = others[int(rng.integers(len(others)))]
        dmask = _draw_instance(rng, spec.classes[dc], s,
                               {**base_ranges, "position": 0.30})
        dcolor = np.clip(CLASS_COLORS[dc] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3),
                         0.0, 1.0)
        _paint(img, dmask, dcolor, spec.texture_amp, rng)

    color = np.clip(CLASS_COLORS[class_id] + rng.uniform(-ranges["color"], ranges["color"], 3),
                    0.0, 1.0)
    _paint(img, mask, color, spec.texture_amp, rng)

    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def make_episode(spec: SynthSpec, split: FoldSplit, mode: str, shots: int, ep_seed: int,
                 diversity: float = 0.0) -> Episode:
    """Deterministically build the episode identified by ep_seed."""
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    classes = split.classes_for(mode)
    if not classes:
        raise ConfigError(f"no classes available for mode {mode!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([_EPISODE_SALT, int(ep_seed)])))
    cls = int(classes[int(rng.integers(len(classes)))])
    seeds: list[int] = []
    while len(seeds) < shots + 1:
        cand = int(rng.integers(0, 2 ** 62))
        if cand not in seeds:
            seeds.append(cand)
    ep = Episode(class_id=cls, class_name=spec.classes[cls], fold=split.fold, mode=mode,
                 shots=shots, seed=int(ep_seed), diversity=float(diversity))
    for s_seed in seeds[:shots]:
        img, mask = render_sample(cls, s_seed, spec, widen=0.0)
        ep.support_images.append(img)
        ep.support_masks.append(mask)
    ep.query_image, ep.query_mask = render_sample(cls, seeds[-1], spec, widen=diversity)
    return ep


def sample_episode(spec: SynthSpec, split: FoldSplit, mode: str, shots: int,
                   rng: np.random.Generator, diversity: float = 0.0) -> Episode:
    """Draw a fresh episode from the stream rng; the episode records its own
    seed so it can be rebuilt exactly with make_episode."""
    ep_seed = int(rng.integers(0, 2 ** 62))
    return make_episode(spec, split, mode, shots, ep_seed, diversity)


def write_cache(out_dir, spec: SynthSpec, episodes) -> None:
    """Dump episodes as raw .npy arrays plus a CSV index and the spec."""
    from pathlib import Path   # local import keeps module deps tiny

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset_spec.txt").write_text(spec.to_text())
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode_id", "class_id", "class_name", "fold", "mode", "shots",
                    "seed", "diversity"])
        for i, ep in enumerate(episodes):
            w.writerow([i, ep.class_id, ep.class_name, ep.fold, ep.mode, ep.shots,
                        ep.seed, ep.diversity])
            for j, (img, mask) in enumerate(zip(ep.support_images, ep.support_masks)):
                np.save(out / f"ep{i:05d}_support{j}.npy", img)
                np.save(out / f"ep{i:05d}_support{j}_mask.npy", mask.astype(np.uint8))
            np.save(out / f"ep{i:05d}_query.npy", ep.query_image)
            np.save(out / f"ep{i:05d}_query_mask.npy", ep.query_mask.astype(np.uint8))


def default_spec() -> SynthSpec:
    return SynthSpec().validate()


def spec_from_text(text: str) -> SynthSpec:
    """Parse a key=value dataset spec (the format to_text writes)."""
    from .config import parse_kv_text, coerce_value

    raw = parse_kv_text(text)
    kwargs = {}
    known = {f.name: f for f in fields(SynthSpec)}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"unknown dataset spec key {key!r}")
        kwargs[key] = coerce_value(val, getattr(SynthSpec(), key), key)
    return replace(SynthSpec(), **kwargs).validate()
