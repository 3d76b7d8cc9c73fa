"""Tests for the checkpoint format, validation and retention."""

import json

import numpy as np
import pytest

from plbert.checkpoint import (
    CKPT_HEADER,
    KIND_ENCODER,
    KIND_FULL,
    checkpoint_name,
    cleanup_checkpoints,
    discard_checkpoints_after,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
    validate_checkpoint,
)
from plbert.config import Precision
from plbert.errors import DataError, FormatError
from plbert.model import forward, init_params


def _moments(params):
    rng = np.random.default_rng(0)
    return {
        name: (rng.normal(size=t.shape).astype(t.dtype), rng.random(t.shape).astype(t.dtype))
        for name, t in params.tensors.items()
    }


def test_full_checkpoint_restores_everything(tmp_path, tiny_config):
    params = init_params(tiny_config.model_copy(update={'precision': Precision.FLOAT32}), seed=0)
    moments = _moments(params)
    path = save_checkpoint(tmp_path / "a.ckpt", params, moments, {'train': {'step': 7}})
    loaded = load_checkpoint(path)
    assert loaded.kind == KIND_FULL
    assert loaded.params.config == params.config
    assert loaded.state == {'train': {'step': 7}}
    for name in params.names():
        assert np.array_equal(loaded.params[name], params[name])
        assert loaded.params[name].dtype == np.float32
        assert np.array_equal(loaded.moments[name][0], moments[name][0])
        assert np.array_equal(loaded.moments[name][1], moments[name][1])


def test_float64_precision_is_stored_exactly(tmp_path, tiny_config):
    params = init_params(tiny_config, seed=1)
    loaded = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", params))
    assert loaded.params["block.ffn.output.weight"].dtype == np.float64
    assert np.array_equal(loaded.params["block.ffn.output.weight"], params["block.ffn.output.weight"])


def test_file_layout(tmp_path, tiny_config):
    params = init_params(tiny_config, seed=0)
    path = save_checkpoint(tmp_path / "a.ckpt", params)
    with open(path, 'rb') as f:
        assert f.readline() == CKPT_HEADER
        header = json.loads(f.readline())
    assert header['kind'] == KIND_FULL
    assert header['tensors'][0] == "embeddings.token"
    assert header['tensors'][-1] == "heads.p2g.bias"
    assert header['has_moments'] is False


def test_export_is_lossless(tmp_path, tiny_config, rng):
    params = init_params(tiny_config, seed=2)
    path = save_checkpoint(tmp_path / "enc.ckpt", params.encoder_only())
    loaded = load_checkpoint(path)
    assert loaded.kind == KIND_ENCODER
    assert not loaded.params.has_heads
    ids = rng.integers(3, 10, size=(2, 5))
    validity = np.ones((2, 5), dtype=bool)
    before, _ = forward(params, ids, validity)
    after, _ = forward(loaded.params, ids, validity)
    assert np.max(np.abs(before - after)) <= 1e-12


def test_encoder_checkpoint_refuses_moments(tmp_path, tiny_config):
    encoder = init_params(tiny_config, seed=0).encoder_only()
    with pytest.raises(DataError):
        save_checkpoint(tmp_path / "e.ckpt", encoder, _moments(encoder))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def _saved(tmp_path, tiny_config):
    return save_checkpoint(tmp_path / "a.ckpt", init_params(tiny_config, seed=0))


def test_bad_magic(tmp_path, tiny_config):
    path = _saved(tmp_path, tiny_config)
    path.write_bytes(b"GARBAGE" + path.read_bytes())
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path, tiny_config):
    path = _saved(tmp_path, tiny_config)
    path.write_bytes(path.read_bytes().replace(b"PLBERT-CKPT v1", b"PLBERT-CKPT v2", 1))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_checksum_mismatch(tmp_path, tiny_config):
    path = _saved(tmp_path, tiny_config)
    data = bytearray(path.read_bytes())
    data[-1] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="checksum mismatch in tensor heads.p2g.bias"):
        load_checkpoint(path)


def test_truncated_checkpoint(tmp_path, tiny_config):
    path = _saved(tmp_path, tiny_config)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_trailing_data(tmp_path, tiny_config):
    path = _saved(tmp_path, tiny_config)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_validate_checkpoint(tmp_path, tiny_config):
    params = init_params(tiny_config, seed=0)
    good = save_checkpoint(tmp_path / "good.ckpt", params)
    assert validate_checkpoint(good) == (True, None)

    params.tensors["block.ffn.output.bias"][0] = np.nan
    bad = save_checkpoint(tmp_path / "bad.ckpt", params)
    valid, error = validate_checkpoint(bad)
    assert not valid
    assert "non-finite" in error


def test_list_and_cleanup(tmp_path, tiny_config):
    params = init_params(tiny_config, seed=0)
    for step in (30, 5, 100, 12):
        save_checkpoint(tmp_path / checkpoint_name(step), params)
    (tmp_path / "final.ckpt").write_bytes(b"")
    assert [p.name for p in list_checkpoints(tmp_path)] == [
        "step_0000005.ckpt", "step_0000012.ckpt", "step_0000030.ckpt", "step_0000100.ckpt",
    ]

    kept, removed = cleanup_checkpoints(tmp_path, keep_last_n=2)
    assert [p.name for p in kept] == ["step_0000030.ckpt", "step_0000100.ckpt"]
    assert not any(p.exists() for p in removed)
    assert (tmp_path / "final.ckpt").exists()


def test_list_missing_directory(tmp_path):
    assert list_checkpoints(tmp_path / "absent") == []


def test_discard_checkpoints_after(tmp_path, tiny_config):
    params = init_params(tiny_config, seed=0)
    for step in (4, 8, 12):
        save_checkpoint(tmp_path / checkpoint_name(step), params)
    (tmp_path / "final.ckpt").write_bytes(b"")

    removed = discard_checkpoints_after(tmp_path, 8)
    assert [p.name for p in removed] == ["step_0000012.ckpt"]
    assert [p.name for p in list_checkpoints(tmp_path)] == ["step_0000004.ckpt", "step_0000008.ckpt"]

    discard_checkpoints_after(tmp_path, 0)
    assert list_checkpoints(tmp_path) == []
    assert (tmp_path / "final.ckpt").exists()
