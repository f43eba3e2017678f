"""Training and experiment drivers.

All randomness flows from SeedSequence([seed, salt]) streams, one salt per
purpose, so training, episode sampling, and evaluation are independently
reproducible.  Log lines never contain timestamps or absolute paths; two
runs with the same config and seed must produce byte-identical logs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict
from .data import SynthSpec, fold_split, sample_episode, spec_from_text
from .errors import ConfigError, NonFiniteError
from .metrics import SegmentationScores, prototype_distances, summarize_distances
from .model import FewShotSegmenter

SALT_INIT = 0x1217
SALT_TRAIN = 0x7421
SALT_EVAL = 0xE7A1

# eval-only settings that may differ from what a checkpoint was trained with
EVAL_OVERRIDABLE = frozenset({
    "data_spec", "fold", "mode", "shots", "diversity", "canvas",
    "eval_episodes", "train_eval_episodes", "eval_every", "seed",
})

ABLATION_SUITES = ("sources", "depth", "components")
_SUITE_ALIASES = {"table4": "sources", "table5": "depth", "table6": "components"}


def dataset_spec(cfg: RunConfig) -> SynthSpec:
    if cfg.data_spec:
        spec = spec_from_text(Path(cfg.data_spec).read_text())
        if spec.canvas != cfg.canvas:
            raise ConfigError(f"dataset spec canvas {spec.canvas} conflicts with "
                              f"config canvas {cfg.canvas}")
        return spec
    return SynthSpec(canvas=cfg.canvas).validate()


def _stream(seed: int, salt: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), salt])))


def config_log_lines(cfg: RunConfig) -> list:
    d = cfg.as_dict()
    lines = []
    for k in sorted(d):
        v = d[k]
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"config {k} = {v}")
    return lines


def _csv_comment(cfg: RunConfig) -> list:
    return ["# " + line for line in config_log_lines(cfg)]


class MomentumSgd:
    """Classical momentum over named parameter tensors."""

    def __init__(self, named_params, momentum: float):
        self.params = list(named_params)
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(t.data) for n, t in self.params}

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        for name, t in self.params:
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * grad_scale * t.grad
            t.data = t.data + v

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None


def poly_lr(base: float, step_idx: int, total_steps: int, power: float) -> float:
    frac = min(step_idx / max(total_steps, 1), 1.0)
    return base * (1.0 - frac) ** power


def evaluate(model, spec, split, *, mode: str, shots: int, episodes: int, seed: int,
             diversity: float, predictor: str = "model"):
    """Score `episodes` sampled tasks; returns (MetricsReport, episode hash).

    The hash digests the episode identity stream: two calls saw identical
    data if and only if the hashes match.
    """
    if predictor not in ("model", "prior"):
        raise ConfigError(f"predictor must be 'model' or 'prior', got {predictor!r}")
    rng = _stream(seed, SALT_EVAL)
    scores = SegmentationScores()
    hasher = hashlib.sha256()
    for _ in range(episodes):
        ep = sample_episode(spec, split, mode, shots, rng, diversity)
        hasher.update(f"{ep.class_id}:{ep.seed};".encode())
        if predictor == "model":
            pred = model.predict(ep)
        else:
            pred = model.prior_baseline(ep)
        scores.update(ep.class_id, pred, ep.query_mask)
    return scores.finalize(), hasher.hexdigest()[:16]


@dataclass
class TrainResult:
    model: FewShotSegmenter
    epoch_losses: list
    log_lines: list
    checkpoint_path: str | None = None
    final_train_miou: float | None = None


def _grad_diagnostic(model, parts) -> list:
    lines = ["diagnostic: non-finite loss or gradient"]
    for k in sorted(parts):
        v = parts[k]
        if isinstance(v, list):
            v = " ".join(f"{x:.6g}" for x in v)
        else:
            v = f"{v:.6g}"
        lines.append(f"diagnostic loss {k} = {v}")
    for name, t in model.named_parameters():
        if t.grad is not None:
            lines.append(f"diagnostic grad {name} max_abs = {np.max(np.abs(t.grad)):.6g}")
    return lines


def run_training(cfg: RunConfig, checkpoint_path=None, emit=None) -> TrainResult:
    cfg = cfg.validate()
    lines: list = []

    def out(msg: str) -> None:
        lines.append(msg)
        if emit:
            emit(msg)

    spec = dataset_spec(cfg)
    split = fold_split(spec, cfg.fold)
    model = FewShotSegmenter(cfg, spec.canvas, _stream(cfg.seed, SALT_INIT))
    opt = MomentumSgd(model.named_parameters(), cfg.momentum)
    train_rng = _stream(cfg.seed, SALT_TRAIN)
    total_steps = math.ceil(cfg.epochs * cfg.episodes_per_epoch / cfg.episodes_per_step)

    for line in config_log_lines(cfg):
        out(line)
    out(f"training fold {cfg.fold} on classes {','.join(map(str, split.train_classes))} "
        f"({total_steps} steps)")

    step_idx = 0
    lr_t = cfg.lr
    epoch_losses = []
    for epoch in range(1, cfg.epochs + 1):
        sums = {"total": 0.0, "dice": 0.0, "init_dice": 0.0}
        dual_sums = None
        pending = 0
        for i in range(cfg.episodes_per_epoch):
            ep = sample_episode(spec, split, "train", cfg.shots, train_rng, cfg.diversity)
            with ad.Tape():
                res = model.forward_episode(ep, with_loss=True)
                try:
                    ad.backward(res.total)
                except NonFiniteError as exc:
                    for dl in _grad_diagnostic(model, res.parts):
                        out(dl)
                    raise NonFiniteError(
                        f"aborting: non-finite value at epoch {epoch} episode {i} "
                        f"(episode seed {ep.seed}): {exc}") from None
            for k in sums:
                sums[k] += res.parts.get(k, 0.0)
            layer_losses = res.parts.get("dual_layers", [])
            if dual_sums is None:
                dual_sums = [0.0] * len(layer_losses)
            for j, v in enumerate(layer_losses):
                dual_sums[j] += v
            pending += 1
            if pending == cfg.episodes_per_step:
                lr_t = poly_lr(cfg.lr, step_idx, total_steps, cfg.poly_power)
                opt.step(lr_t, 1.0 / pending)
                opt.zero_grad()
                pending = 0
                step_idx += 1
        if pending:
            lr_t = poly_lr(cfg.lr, step_idx, total_steps, cfg.poly_power)
            opt.step(lr_t, 1.0 / pending)
            opt.zero_grad()
            step_idx += 1
        n = cfg.episodes_per_epoch
        mean_total = sums["total"] / n
        epoch_losses.append(mean_total)
        duals = " ".join(f"{s / n:.4f}" for s in (dual_sums or []))
        out(f"epoch {epoch}/{cfg.epochs} loss {mean_total:.4f} dice {sums['dice'] / n:.4f} "
            f"init {sums['init_dice'] / n:.4f} dual {duals or '-'} lr {lr_t:.6f}")
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            rep, _ = evaluate(model, spec, split, mode="train", shots=cfg.shots,
                              episodes=cfg.train_eval_episodes, seed=cfg.seed + epoch,
                              diversity=cfg.diversity)
            out(f"epoch {epoch}/{cfg.epochs} train mIoU {rep.miou:.2f} "
                f"over {rep.episodes} episodes")

    result = TrainResult(model, epoch_losses, lines)
    if cfg.eval_every:
        rep, _ = evaluate(model, spec, split, mode="train", shots=cfg.shots,
                          episodes=cfg.train_eval_episodes, seed=cfg.seed + cfg.epochs,
                          diversity=cfg.diversity)
        result.final_train_miou = rep.miou
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, cfg)
        out(f"checkpoint written: {Path(checkpoint_path).name}")
        result.checkpoint_path = str(checkpoint_path)
    return result


def restore(checkpoint_path, overrides: dict | None = None):
    """Rebuild a model from a checkpoint; only eval-side settings may be
    overridden, anything structural must match what was trained."""
    header, state = load_checkpoint(checkpoint_path)
    cfg = config_from_dict(header["config"])
    overrides = overrides or {}
    bad = sorted(k for k in overrides if k not in EVAL_OVERRIDABLE
                 and overrides[k] != getattr(cfg, k))
    if bad:
        raise ConfigError(f"cannot override model-structure keys at eval time: {bad}")
    cfg = cfg.with_overrides(**{k: v for k, v in overrides.items() if k in EVAL_OVERRIDABLE})
    model = FewShotSegmenter(cfg, cfg.canvas)
    model.load_state(state)
    return model, cfg


def run_evaluation(checkpoint_path, overrides: dict | None = None, out_prefix=None,
                   emit=None, predictor: str = "model"):
    model, cfg = restore(checkpoint_path, overrides)
    spec = dataset_spec(cfg)
    split = fold_split(spec, cfg.fold)
    report, ep_hash = evaluate(model, spec, split, mode=cfg.mode, shots=cfg.shots,
                               episodes=cfg.eval_episodes, seed=cfg.seed,
                               diversity=cfg.diversity, predictor=predictor)

    def out(msg):
        if emit:
            emit(msg)

    for line in config_log_lines(cfg):
        out(line)
    out(f"fold {cfg.fold} mode {cfg.mode} shots {cfg.shots} episodes {report.episodes} "
        f"hash {ep_hash}")
    for c, iou in sorted(report.per_class_iou.items()):
        out(f"class {c} ({spec.classes[c]}) IoU {iou:.2f}")
    for w in report.warnings:
        out(f"warning: {w}")
    out(f"mIoU {report.miou:.2f}")
    out(f"FB-IoU {report.fbiou:.2f}")

    if out_prefix is not None:
        prefix = Path(out_prefix)
        rows = _csv_comment(cfg)
        rows.append("key,value")
        rows.append(f"episodes,{report.episodes}")
        rows.append(f"episode_hash,{ep_hash}")
        for c, iou in sorted(report.per_class_iou.items()):
            rows.append(f"class_{c}_iou,{iou:.4f}")
        rows.append(f"miou,{report.miou:.4f}")
        rows.append(f"fbiou,{report.fbiou:.4f}")
        prefix.with_suffix(".csv").write_text("\n".join(rows) + "\n")
        payload = {
            "config": cfg.as_dict(),
            "episodes": report.episodes,
            "episode_hash": ep_hash,
            "per_class_iou": {str(k): round(v, 4) for k, v in report.per_class_iou.items()},
            "miou": round(report.miou, 4),
            "fbiou": round(report.fbiou, 4),
            "warnings": report.warnings,
        }
        prefix.with_suffix(".json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return report, ep_hash


def resolve_suite(name: str) -> str:
    suite = _SUITE_ALIASES.get(name, name)
    if suite not in ABLATION_SUITES:
        raise ConfigError(f"unknown ablation suite {name!r}; "
                          f"choose from {ABLATION_SUITES + tuple(_SUITE_ALIASES)}")
    return suite


def suite_rows(suite: str, cfg: RunConfig) -> list:
    """(row name, config) pairs for one ablation suite."""
    if suite == "sources":
        rows = []
        for src in ("support", "query", "both"):
            for iterate in (False, True):
                tag = "iter" if iterate else "single"
                rows.append((f"{src}_{tag}",
                             cfg.with_overrides(mining_source=src, iterate=iterate)))
        return rows
    if suite == "depth":
        return [(f"layers_{n}", cfg.with_overrides(layers=n, iterate=True))
                for n in range(1, 6)]
    if suite == "components":
        return [
            ("baseline", cfg.with_overrides(mining=False)),
            ("mining", cfg.with_overrides(mining=True, dual_loss=False,
                                          query_activation=False)),
            ("mining_dual", cfg.with_overrides(mining=True, dual_loss=True,
                                               query_activation=False)),
            ("full", cfg.with_overrides(mining=True, dual_loss=True,
                                        query_activation=True)),
        ]
    raise ConfigError(f"unknown ablation suite {suite!r}")


def run_ablation(cfg: RunConfig, suite: str, out_csv=None, seeds: int = 3,
                 rows=None, emit=None) -> dict:
    """Train and evaluate every row of a suite over `seeds` seeds.

    Every row at seed index i trains with seed cfg.seed + i and is scored
    on the same evaluation episode stream, so rows are comparable and the
    per-row episode hashes must agree.
    """
    suite = resolve_suite(suite)
    cfg = cfg.validate()
    all_rows = suite_rows(suite, cfg)
    if rows is not None:
        keep = set(rows)
        unknown = keep - {n for n, _ in all_rows}
        if unknown:
            raise ConfigError(f"unknown rows for suite {suite}: {sorted(unknown)}")
        all_rows = [(n, c) for n, c in all_rows if n in keep]
    if seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {seeds}")

    def out(msg):
        if emit:
            emit(msg)

    results: dict = {name: [] for name, _ in all_rows}
    csv_lines = _csv_comment(cfg)
    csv_lines.append(f"# suite = {suite}")
    csv_lines.append("suite,row,seed,miou,fbiou,episodes,eval_hash")
    for name, row_cfg in all_rows:
        for i in range(seeds):
            run_cfg = row_cfg.with_overrides(seed=cfg.seed + i)
            trained = run_training(run_cfg)
            spec = dataset_spec(run_cfg)
            split = fold_split(spec, run_cfg.fold)
            rep, ep_hash = evaluate(trained.model, spec, split, mode="test",
                                    shots=run_cfg.shots, episodes=run_cfg.eval_episodes,
                                    seed=run_cfg.seed, diversity=run_cfg.diversity)
            results[name].append(rep.miou)
            csv_lines.append(f"{suite},{name},{cfg.seed + i},{rep.miou:.4f},"
                             f"{rep.fbiou:.4f},{rep.episodes},{ep_hash}")
            out(f"[{suite}] {name} seed {cfg.seed + i} mIoU {rep.miou:.2f} hash {ep_hash}")
    for name, _ in all_rows:
        vals = results[name]
        csv_lines.append(f"{suite},{name},mean,{np.mean(vals):.4f},,,")
        out(f"[{suite}] {name} mean mIoU {np.mean(vals):.2f} over {len(vals)} seeds")
    if out_csv is not None:
        Path(out_csv).write_text("\n".join(csv_lines) + "\n")
    return results


def run_analysis(checkpoint_paths, out_prefix=None, *, episodes: int = 200,
                 seed: int | None = None, force_support: bool = False,
                 all_layers: bool = False, emit=None):
    """Prototype-distance study over one trained checkpoint per fold.

    Writes per-episode records plus a summary with one row per fold and a
    trailing mean row (the mean of the fold means).
    """
    if not checkpoint_paths:
        raise ConfigError("analysis needs at least one checkpoint")

    def out(msg):
        if emit:
            emit(msg)

    by_fold = {}
    for path in checkpoint_paths:
        model, cfg = restore(path)
        if cfg.fold in by_fold:
            raise ConfigError(f"two checkpoints for fold {cfg.fold}")
        by_fold[cfg.fold] = (model, cfg)

    record_lines = ["fold,episode,class_id,layer,mined_support,mined_query,query_support"]
    summaries = []
    for fold in sorted(by_fold):
        model, cfg = by_fold[fold]
        spec = dataset_spec(cfg)
        split = fold_split(spec, fold)
        rng = _stream(cfg.seed if seed is None else seed, SALT_EVAL + fold)
        records = []
        done = 0
        attempts = 0
        while done < episodes and attempts < 4 * episodes:
            ep = sample_episode(spec, split, "test", cfg.shots, rng, cfg.diversity)
            attempts += 1
            recs = prototype_distances(model, ep, all_layers=all_layers,
                                       force_support=force_support)
            if not recs:
                continue
            for r in recs:
                record_lines.append(f"{fold},{done},{r.class_id},{r.layer},"
                                    f"{r.mined_to_support:.6f},{r.mined_to_query:.6f},"
                                    f"{r.query_to_support:.6f}")
            records.extend(recs)
            done += 1
        summary = summarize_distances(records)
        summary["fold"] = fold
        summaries.append(summary)
        out(f"fold {fold}: mined_support {summary['mined_to_support']:.4f} "
            f"mined_query {summary['mined_to_query']:.4f} "
            f"query_support {summary['query_to_support']:.4f} "
            f"({summary['count']} records)")

    keys = ("mined_to_support", "mined_to_query", "query_to_support")
    mean_row = {k: float(np.mean([s[k] for s in summaries])) for k in keys}
    out(f"mean: mined_support {mean_row['mined_to_support']:.4f} "
        f"mined_query {mean_row['mined_to_query']:.4f} "
        f"query_support {mean_row['query_to_support']:.4f}")

    if out_prefix is not None:
        prefix = Path(out_prefix)
        rec_path = prefix.parent / (prefix.name + "_records.csv")
        sum_path = prefix.parent / (prefix.name + "_summary.csv")
        rec_path.write_text("\n".join(record_lines) + "\n")
        sum_lines = ["fold,records,mined_support,mined_query,query_support"]
        for s in summaries:
            sum_lines.append(f"{s['fold']},{s['count']},{s['mined_to_support']:.6f},"
                             f"{s['mined_to_query']:.6f},{s['query_to_support']:.6f}")
        sum_lines.append(f"mean,,{mean_row['mined_to_support']:.6f},"
                         f"{mean_row['mined_to_query']:.6f},"
                         f"{mean_row['query_to_support']:.6f}")
        sum_path.write_text("\n".join(sum_lines) + "\n")
    return summaries, mean_row
