import csv
import json

import numpy as np
import pytest

from protomine.cli import build_parser, main

TINY = ["--canvas", "32", "--channels", "16", "--heads", "2",
        "--enc-channels", "4,8,16", "--layers", "2", "--epochs", "1",
        "--episodes-per-epoch", "6", "--eval-episodes", "4",
        "--train-eval-episodes", "3", "--eval-every", "0", "--seed", "0"]


def run_cli(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParser:
    def test_every_config_key_has_a_flag(self):
        from dataclasses import fields
        from protomine.config import RunConfig
        parser = build_parser()
        text = parser.format_help()
        sub = parser.parse_args(["train"] + TINY)
        for f in fields(RunConfig):
            assert hasattr(sub, f.name)

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["train", "--bogus", "1"])
        assert exc.value.code == 2

    def test_missing_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2


class TestTrain:
    def test_train_writes_checkpoint_and_log(self, tmp_path, capsys):
        out = tmp_path / "m.ckpt"
        log = tmp_path / "train.log"
        code, stdout, _ = run_cli(["train", "--out", str(out), "--log", str(log)]
                                  + TINY, capsys)
        assert code == 0
        assert out.is_file()
        assert "config alpha = 0.3" in stdout
        assert log.read_text().strip().splitlines()[-1].startswith("checkpoint written")

    def test_config_file_with_flag_precedence(self, tmp_path, capsys):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("canvas = 32\nchannels = 16\nheads = 2\n"
                            "enc_channels = 4,8,16\nlayers = 2\nepochs = 1\n"
                            "episodes_per_epoch = 4\neval_episodes = 2\n"
                            "train_eval_episodes = 2\neval_every = 0\nalpha = 0.4\n")
        out = tmp_path / "m.ckpt"
        code, stdout, _ = run_cli(["train", "--config", str(cfg_file), "--out", str(out),
                                   "--alpha", "0.25"], capsys)
        assert code == 0
        assert "config alpha = 0.25" in stdout    # flag beats file

    def test_invalid_config_value_exits_2(self, tmp_path, capsys):
        code, _, err = run_cli(["train", "--out", str(tmp_path / "m.ckpt")] + TINY
                               + ["--layers", "0"], capsys)
        assert code == 2
        assert "config error" in err

    def test_missing_config_file_exits_1(self, tmp_path, capsys):
        code, _, err = run_cli(["train", "--config", str(tmp_path / "nope.cfg"),
                                "--out", str(tmp_path / "m.ckpt")], capsys)
        assert code == 1
        assert "error" in err


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    code = main(["train", "--out", str(out)] + TINY)
    assert code == 0
    return out


class TestPipeline:
    def test_eval_writes_outputs(self, checkpoint, tmp_path, capsys):
        code, stdout, _ = run_cli(["eval", "--checkpoint", str(checkpoint),
                                   "--out", str(tmp_path / "ev"),
                                   "--eval-episodes", "4"], capsys)
        assert code == 0
        assert (tmp_path / "ev.csv").is_file()
        payload = json.loads((tmp_path / "ev.json").read_text())
        assert payload["episodes"] == 4
        assert any(l.startswith("mIoU ") for l in stdout.splitlines())

    def test_eval_baseline_flag(self, checkpoint, capsys):
        code, stdout, _ = run_cli(["eval", "--checkpoint", str(checkpoint),
                                   "--baseline", "--eval-episodes", "3"], capsys)
        assert code == 0
        assert any(l.startswith("mIoU ") for l in stdout.splitlines())

    def test_eval_structural_override_exits_2(self, checkpoint, capsys):
        code, _, err = run_cli(["eval", "--checkpoint", str(checkpoint),
                                "--channels", "64"], capsys)
        assert code == 2
        assert "config error" in err

    def test_eval_missing_checkpoint_exits_1(self, tmp_path, capsys):
        code, _, err = run_cli(["eval", "--checkpoint", str(tmp_path / "no.ckpt")],
                               capsys)
        assert code == 1

    def test_eval_output_deterministic(self, checkpoint, tmp_path, capsys):
        argv = ["eval", "--checkpoint", str(checkpoint), "--eval-episodes", "4"]
        _, out_a, _ = run_cli(argv, capsys)
        _, out_b, _ = run_cli(argv, capsys)
        assert out_a == out_b

    def test_analyze_pipeline(self, checkpoint, tmp_path, capsys):
        code, stdout, _ = run_cli(["analyze", "--checkpoints", str(checkpoint),
                                   "--out", str(tmp_path / "an"),
                                   "--episodes", "3", "--seed", "5"], capsys)
        assert code == 0
        recs = list(csv.DictReader((tmp_path / "an_records.csv").read_text().splitlines()))
        assert len(recs) == 3
        assert (tmp_path / "an_summary.csv").is_file()
        assert stdout.splitlines()[-1].startswith("mean:")

    def test_analyze_force_support(self, checkpoint, tmp_path, capsys):
        code, _, _ = run_cli(["analyze", "--checkpoints", str(checkpoint),
                              "--out", str(tmp_path / "fs"),
                              "--episodes", "2", "--seed", "5", "--force-support"],
                             capsys)
        assert code == 0
        recs = list(csv.DictReader((tmp_path / "fs_records.csv").read_text().splitlines()))
        assert all(float(r["mined_support"]) == 0.0 for r in recs)


class TestAblate:
    def test_ablate_rows_and_csv(self, tmp_path, capsys):
        out = tmp_path / "ab.csv"
        code, stdout, _ = run_cli(
            ["ablate", "--suite", "table5", "--rows", "layers_1",
             "--seeds", "1", "--out", str(out)] + TINY, capsys)
        assert code == 0
        text = out.read_text()
        assert "# suite = depth" in text
        assert "depth,layers_1,0," in text
        assert "depth,layers_1,mean," in text
        assert "[depth] layers_1 mean mIoU" in stdout

    def test_unknown_suite_exits_2(self, capsys):
        code, _, err = run_cli(["ablate", "--suite", "table9"] + TINY, capsys)
        assert code == 2


class TestGenData:
    def test_writes_cache(self, tmp_path, capsys):
        out = tmp_path / "cache"
        code, stdout, _ = run_cli(["gen-data", "--out", str(out), "--episodes", "3",
                                   "--canvas", "32", "--shots", "2", "--seed", "1"],
                                  capsys)
        assert code == 0
        assert "wrote 3 episodes" in stdout
        index = list(csv.DictReader((out / "index.csv").read_text().splitlines()))
        assert len(index) == 3
        assert index[0]["shots"] == "2"
        img = np.load(out / "ep00000_query.npy")
        assert img.shape == (3, 32, 32)

    def test_gen_data_deterministic(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code, _, _ = run_cli(["gen-data", "--out", str(out), "--episodes", "2",
                                  "--canvas", "32", "--seed", "4"], capsys)
            assert code == 0
        np.testing.assert_array_equal(np.load(a / "ep00001_query.npy"),
                                      np.load(b / "ep00001_query.npy"))

    def test_bad_fold_exits_2(self, tmp_path, capsys):
        code, _, err = run_cli(["gen-data", "--out", str(tmp_path / "c"),
                                "--fold", "7", "--canvas", "32"], capsys)
        assert code == 2
