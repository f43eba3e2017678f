import csv
import json
import re

import numpy as np
import pytest

from protomine.autodiff import Tensor
from protomine.config import RunConfig
from protomine.data import SynthSpec
from protomine.errors import ConfigError
from protomine.harness import (ABLATION_SUITES, EVAL_OVERRIDABLE, MomentumSgd,
                               dataset_spec, evaluate, poly_lr, resolve_suite, restore,
                               run_ablation, run_analysis, run_evaluation, run_training,
                               suite_rows)
from protomine.model import FewShotSegmenter


def tiny_cfg(**kw):
    base = dict(canvas=32, channels=16, heads=2, enc_channels=(4, 8, 16), layers=2,
                epochs=1, episodes_per_epoch=8, episodes_per_step=4,
                eval_episodes=6, train_eval_episodes=4, eval_every=0, seed=0)
    base.update(kw)
    return RunConfig(**base).validate()


class TestPolyLr:
    def test_schedule_endpoints(self):
        assert poly_lr(0.1, 0, 100, 0.9) == pytest.approx(0.1)
        assert poly_lr(0.1, 100, 100, 0.9) == 0.0
        assert poly_lr(0.1, 150, 100, 0.9) == 0.0

    def test_midpoint(self):
        assert poly_lr(0.2, 50, 100, 0.9) == pytest.approx(0.2 * 0.5 ** 0.9)

    def test_monotone_decay(self):
        vals = [poly_lr(1.0, i, 10, 0.9) for i in range(11)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestMomentumSgd:
    def test_hand_computed_two_steps(self):
        t = Tensor(np.array([1.0]), requires_grad=True)
        opt = MomentumSgd([("p", t)], momentum=0.9)
        t.grad = np.array([2.0])
        opt.step(0.1)
        np.testing.assert_allclose(t.data, [0.8])           # v = -0.2
        t.grad = np.array([2.0])
        opt.step(0.1)
        np.testing.assert_allclose(t.data, [0.42])          # v = -0.38

    def test_grad_scale(self):
        t = Tensor(np.array([1.0]), requires_grad=True)
        opt = MomentumSgd([("p", t)], momentum=0.0)
        t.grad = np.array([4.0])
        opt.step(0.1, grad_scale=0.25)
        np.testing.assert_allclose(t.data, [0.9])

    def test_none_grad_skipped_and_zero_grad(self):
        t = Tensor(np.array([1.0]), requires_grad=True)
        opt = MomentumSgd([("p", t)], momentum=0.9)
        opt.step(0.1)
        np.testing.assert_allclose(t.data, [1.0])
        t.grad = np.array([1.0])
        opt.zero_grad()
        assert t.grad is None


class TestDatasetSpec:
    def test_default_follows_canvas(self):
        assert dataset_spec(tiny_cfg(canvas=32)).canvas == 32

    def test_file_spec_loaded(self, tmp_path):
        spec = SynthSpec(canvas=32, widen_gain=1.5).validate()
        p = tmp_path / "d.txt"
        p.write_text(spec.to_text())
        assert dataset_spec(tiny_cfg(data_spec=str(p))) == spec

    def test_canvas_conflict_rejected(self, tmp_path):
        p = tmp_path / "d.txt"
        p.write_text(SynthSpec(canvas=64).validate().to_text())
        with pytest.raises(ConfigError, match="canvas"):
            dataset_spec(tiny_cfg(canvas=32, data_spec=str(p)))


class TestEvaluate:
    def _parts(self, cfg):
        from protomine.data import fold_split
        spec = dataset_spec(cfg)
        return FewShotSegmenter(cfg), spec, fold_split(spec, cfg.fold)

    def test_deterministic_and_hash_semantics(self):
        cfg = tiny_cfg()
        model, spec, split = self._parts(cfg)
        a, ha = evaluate(model, spec, split, mode="test", shots=1, episodes=5,
                         seed=3, diversity=0.5)
        b, hb = evaluate(model, spec, split, mode="test", shots=1, episodes=5,
                         seed=3, diversity=0.5)
        assert ha == hb and len(ha) == 16
        assert a.miou == b.miou and a.per_class_iou == b.per_class_iou
        _, hc = evaluate(model, spec, split, mode="test", shots=1, episodes=5,
                         seed=4, diversity=0.5)
        assert hc != ha

    def test_prior_predictor(self):
        cfg = tiny_cfg()
        model, spec, split = self._parts(cfg)
        rep, _ = evaluate(model, spec, split, mode="test", shots=1, episodes=4,
                          seed=0, diversity=0.5, predictor="prior")
        assert rep.episodes == 4

    def test_bad_predictor(self):
        cfg = tiny_cfg()
        model, spec, split = self._parts(cfg)
        with pytest.raises(ConfigError):
            evaluate(model, spec, split, mode="test", shots=1, episodes=1,
                     seed=0, diversity=0.5, predictor="oracle")


class TestRunTraining:
    def test_smoke_loss_decreases(self):
        cfg = tiny_cfg(epochs=2, episodes_per_epoch=50, eval_every=0)
        res = run_training(cfg)
        assert len(res.epoch_losses) == 2
        assert res.epoch_losses[1] < res.epoch_losses[0]

    def test_log_contract(self, tmp_path):
        cfg = tiny_cfg(epochs=2, episodes_per_epoch=6, eval_every=2,
                       train_eval_episodes=3)
        out = tmp_path / "m.ckpt"
        res = run_training(cfg, checkpoint_path=out)
        lines = res.log_lines
        assert "config alpha = 0.3" in lines
        assert "config lr = 0.01" in lines
        assert any(l.startswith("training fold 0 on classes ") for l in lines)
        epoch_re = re.compile(
            r"epoch \d/2 loss \d+\.\d{4} dice \d+\.\d{4} init \d+\.\d{4} "
            r"dual (\d+\.\d{4} ?){2} lr \d\.\d{6}")
        assert sum(bool(epoch_re.fullmatch(l)) for l in lines) == 2
        assert any(re.fullmatch(r"epoch 2/2 train mIoU \d+\.\d{2} over 3 episodes", l)
                   for l in lines)
        assert f"checkpoint written: {out.name}" in lines
        assert res.checkpoint_path == str(out)
        assert res.final_train_miou is not None
        assert out.is_file()
        # no absolute paths or timestamps anywhere
        assert not any(str(tmp_path) in l for l in lines)

    def test_log_and_checkpoint_deterministic(self, tmp_path):
        cfg = tiny_cfg(epochs=1, episodes_per_epoch=10, eval_every=1)
        a = run_training(cfg, checkpoint_path=tmp_path / "a.ckpt")
        b = run_training(cfg, checkpoint_path=tmp_path / "b.ckpt")
        assert [l.replace("a.ckpt", "b.ckpt") for l in a.log_lines] == b.log_lines
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_eval_every_zero_skips_in_train_eval(self):
        res = run_training(tiny_cfg(eval_every=0))
        assert res.final_train_miou is None
        assert not any("train mIoU" in l for l in res.log_lines)


class TestRestore:
    def _checkpoint(self, tmp_path, **kw):
        cfg = tiny_cfg(**kw)
        path = tmp_path / "m.ckpt"
        run_training(cfg, checkpoint_path=path)
        return path

    def test_eval_side_overrides_allowed(self, tmp_path):
        path = self._checkpoint(tmp_path)
        model, cfg = restore(path, {"eval_episodes": 99, "seed": 7, "mode": "train"})
        assert cfg.eval_episodes == 99 and cfg.seed == 7 and cfg.mode == "train"

    def test_structural_override_rejected(self, tmp_path):
        path = self._checkpoint(tmp_path)
        with pytest.raises(ConfigError, match="model-structure"):
            restore(path, {"channels": 32})

    def test_structural_override_with_same_value_is_noop(self, tmp_path):
        path = self._checkpoint(tmp_path)
        model, cfg = restore(path, {"channels": 16})
        assert cfg.channels == 16

    def test_restored_model_reproduces_training_model(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "m.ckpt"
        trained = run_training(cfg, checkpoint_path=path)
        model, rcfg = restore(path)
        for (_, a), (_, b) in zip(trained.model.named_parameters(),
                                  model.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)


class TestRunEvaluation:
    def test_writes_csv_and_json(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "m.ckpt"
        run_training(cfg, checkpoint_path=path)
        lines = []
        report, ep_hash = run_evaluation(path, {"eval_episodes": 5},
                                         out_prefix=tmp_path / "ev", emit=lines.append)
        csv_text = (tmp_path / "ev.csv").read_text()
        assert "# config alpha = 0.3" in csv_text
        assert f"episode_hash,{ep_hash}" in csv_text
        assert f"miou,{report.miou:.4f}" in csv_text
        payload = json.loads((tmp_path / "ev.json").read_text())
        assert payload["episodes"] == 5
        assert payload["miou"] == round(report.miou, 4)
        assert payload["config"]["channels"] == 16
        assert any(l.startswith("mIoU ") for l in lines)
        assert any(l.startswith("FB-IoU ") for l in lines)

    def test_prior_predictor_route(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "m.ckpt"
        run_training(cfg, checkpoint_path=path)
        report, _ = run_evaluation(path, {"eval_episodes": 4}, predictor="prior")
        assert report.episodes == 4


class TestSuites:
    def test_canonical_names_and_aliases(self):
        assert resolve_suite("depth") == "depth"
        assert resolve_suite("table4") == "sources"
        assert resolve_suite("table5") == "depth"
        assert resolve_suite("table6") == "components"
        with pytest.raises(ConfigError):
            resolve_suite("table7")

    def test_sources_rows(self):
        rows = suite_rows("sources", tiny_cfg())
        assert [n for n, _ in rows] == ["support_single", "support_iter", "query_single",
                                        "query_iter", "both_single", "both_iter"]
        by_name = dict(rows)
        assert by_name["support_single"].mining_source == "support"
        assert by_name["support_single"].iterate is False
        assert by_name["both_iter"].iterate is True

    def test_depth_rows(self):
        rows = suite_rows("depth", tiny_cfg())
        assert [n for n, _ in rows] == [f"layers_{n}" for n in range(1, 6)]
        assert [c.layers for _, c in rows] == [1, 2, 3, 4, 5]
        assert all(c.iterate for _, c in rows)

    def test_components_rows(self):
        rows = suite_rows("components", tiny_cfg())
        by_name = dict(rows)
        assert list(by_name) == ["baseline", "mining", "mining_dual", "full"]
        assert by_name["baseline"].mining is False
        assert by_name["mining"].dual_loss is False
        assert by_name["mining"].query_activation is False
        assert by_name["mining_dual"].dual_loss is True
        assert by_name["mining_dual"].query_activation is False
        assert by_name["full"].query_activation is True


class TestRunAblation:
    def test_rows_share_eval_streams(self, tmp_path):
        cfg = tiny_cfg(epochs=1, episodes_per_epoch=4, eval_episodes=4)
        out = tmp_path / "ab.csv"
        res = run_ablation(cfg, "components", out_csv=out, seeds=2,
                           rows=["baseline", "mining"])
        assert set(res) == {"baseline", "mining"}
        assert all(len(v) == 2 for v in res.values())
        rows = [r for r in csv.DictReader(
            l for l in out.read_text().splitlines() if not l.startswith("#"))]
        by_seed = {}
        for r in rows:
            if r["seed"] != "mean":
                by_seed.setdefault(r["seed"], set()).add(r["eval_hash"])
        assert set(by_seed) == {"0", "1"}
        for seed, hashes in by_seed.items():
            assert len(hashes) == 1, f"rows diverged on eval data at seed {seed}"
        mean_rows = [r for r in rows if r["seed"] == "mean"]
        assert len(mean_rows) == 2
        for r in mean_rows:
            want = np.mean(res[r["row"]])
            assert float(r["miou"]) == pytest.approx(want, abs=1e-4)

    def test_alias_and_unknown_rows(self):
        cfg = tiny_cfg(epochs=1, episodes_per_epoch=2, eval_episodes=2)
        res = run_ablation(cfg, "table5", seeds=1, rows=["layers_1"])
        assert list(res) == ["layers_1"]
        with pytest.raises(ConfigError, match="unknown rows"):
            run_ablation(cfg, "depth", seeds=1, rows=["layers_9"])

    def test_bad_seed_count(self):
        with pytest.raises(ConfigError):
            run_ablation(tiny_cfg(), "depth", seeds=0)


class TestRunAnalysis:
    def _checkpoints(self, tmp_path, folds=(0, 1)):
        paths = []
        for fold in folds:
            cfg = tiny_cfg(fold=fold, epochs=1, episodes_per_epoch=4)
            p = tmp_path / f"fold{fold}.ckpt"
            run_training(cfg, checkpoint_path=p)
            paths.append(p)
        return paths

    def test_summary_layout_and_recount(self, tmp_path):
        paths = self._checkpoints(tmp_path)
        summaries, mean_row = run_analysis(paths, out_prefix=tmp_path / "an",
                                           episodes=6, seed=1)
        assert [s["fold"] for s in summaries] == [0, 1]
        sum_lines = (tmp_path / "an_summary.csv").read_text().strip().splitlines()
        assert len(sum_lines) == 1 + len(summaries) + 1   # header + folds + mean
        assert sum_lines[-1].startswith("mean,")

        # the per-episode records must reproduce the summary means
        recs = list(csv.DictReader((tmp_path / "an_records.csv").read_text().splitlines()))
        for s in summaries:
            mine = [r for r in recs if int(r["fold"]) == s["fold"]]
            assert len(mine) == s["count"] == 6
            got = np.mean([float(r["mined_query"]) for r in mine])
            assert got == pytest.approx(s["mined_to_query"], abs=5e-6)
            got = np.mean([float(r["mined_support"]) for r in mine])
            assert got == pytest.approx(s["mined_to_support"], abs=5e-6)
        for key in ("mined_to_support", "mined_to_query", "query_to_support"):
            want = np.mean([s[key] for s in summaries])
            assert mean_row[key] == pytest.approx(want)

    def test_force_support_zeroes_column(self, tmp_path):
        paths = self._checkpoints(tmp_path, folds=(0,))
        summaries, _ = run_analysis(paths, out_prefix=tmp_path / "fs", episodes=4,
                                    seed=2, force_support=True)
        assert summaries[0]["mined_to_support"] == 0.0
        recs = list(csv.DictReader((tmp_path / "fs_records.csv").read_text().splitlines()))
        assert all(float(r["mined_support"]) == 0.0 for r in recs)

    def test_duplicate_fold_rejected(self, tmp_path):
        paths = self._checkpoints(tmp_path, folds=(0,))
        with pytest.raises(ConfigError, match="fold 0"):
            run_analysis(paths * 2, episodes=1)

    def test_empty_paths_rejected(self):
        with pytest.raises(ConfigError):
            run_analysis([])

    def test_all_layers_records_each_layer(self, tmp_path):
        paths = self._checkpoints(tmp_path, folds=(0,))
        run_analysis(paths, out_prefix=tmp_path / "al", episodes=3, seed=3,
                     all_layers=True)
        recs = list(csv.DictReader((tmp_path / "al_records.csv").read_text().splitlines()))
        layers = {int(r["layer"]) for r in recs}
        assert layers == {1, 2}
        assert len(recs) == 6   # 3 episodes x 2 layers
