import numpy as np
import pytest

from protomine.checkpoint import (checkpoint_config, load_checkpoint, read_header,
                                  save_checkpoint)
from protomine.config import RunConfig
from protomine.errors import CheckpointError
from protomine.model import FewShotSegmenter


def tiny_cfg(**kw):
    base = dict(canvas=32, channels=8, heads=2, enc_channels=(4, 4, 8), layers=1)
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_roundtrip_bit_exact(tmp_path, precision):
    cfg = tiny_cfg(precision=precision)
    model = FewShotSegmenter(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, cfg)
    header, state = load_checkpoint(path)
    own = dict(model.named_parameters())
    assert set(state) == set(own)
    for name, arr in state.items():
        assert arr.dtype == np.dtype(precision)
        np.testing.assert_array_equal(arr, own[name].data)


def test_same_model_same_bytes(tmp_path):
    cfg = tiny_cfg()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, FewShotSegmenter(cfg), cfg)
    save_checkpoint(b, FewShotSegmenter(cfg), cfg)
    assert a.read_bytes() == b.read_bytes()


def test_header_contents(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, FewShotSegmenter(cfg), cfg)
    header = read_header(path)
    assert header["channels"] == 8
    assert header["layers"] == 1
    assert header["config"]["alpha"] == cfg.alpha
    assert checkpoint_config(path)["enc_channels"] == [4, 4, 8]
    names = [p["name"] for p in header["params"]]
    assert "seed_proto" in names and "final_head.conv2_w" in names


def test_load_into_fresh_model(tmp_path):
    cfg = tiny_cfg()
    src = FewShotSegmenter(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, src, cfg)
    _, state = load_checkpoint(path)
    dst = FewShotSegmenter(cfg.with_overrides(seed=123))
    dst.load_state(state)
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_garbage_file_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"\x00\x01\x02 not a checkpoint\n123")
    with pytest.raises(CheckpointError):
        read_header(path)


def test_wrong_format_tag_rejected(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else", "version": 1}\n')
    with pytest.raises(CheckpointError):
        read_header(path)


def test_wrong_version_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_text('{"format": "protomine-checkpoint", "version": 99}\n')
    with pytest.raises(CheckpointError):
        read_header(path)


def test_truncation_detected(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, FewShotSegmenter(cfg), cfg)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes_detected(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, FewShotSegmenter(cfg), cfg)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
