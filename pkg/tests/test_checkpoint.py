import struct

import numpy as np
import pytest

from lipnext.model import LipNeXt, ModelSpec
from lipnext.trainer.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    decode,
    encode,
    load_checkpoint,
    load_model,
    model_tensors,
    save_model,
)


def small_model(seed=0):
    spec = ModelSpec(depth=2, width=8, alpha=1 / 8, beta=0.5, patch=1, input_shape=(4, 4, 1), n_classes=3)
    model = LipNeXt.init(spec, seed)
    model.blocks[1].b = np.random.default_rng(seed).standard_normal(8)
    return model


def test_round_trip_is_bitwise(tmp_path):
    model = small_model()
    opt = {"step": np.array([7], dtype=np.int64), "block0.R/m": np.arange(64.0).reshape(8, 8)}
    path = tmp_path / "m.ckpt"
    save_model(path, model, epoch=3, optimizer=opt)
    back, ckpt = load_model(path)
    assert ckpt.epoch == 3 and ckpt.spec == model.spec
    for name, arr in model_tensors(model).items():
        assert np.array_equal(model_tensors(back)[name], arr), name
    assert np.array_equal(ckpt.optimizer["step"], [7])
    assert np.array_equal(ckpt.optimizer["block0.R/m"], opt["block0.R/m"])
    x = np.random.default_rng(1).random((3, 4, 4, 1))
    assert np.array_equal(back.logits(x), model.logits(x))
    save_model(tmp_path / "again.ckpt", back, epoch=3, optimizer=ckpt.optimizer)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_header_layout():
    raw = encode(Checkpoint(small_model().spec, {}, epoch=2))
    assert raw[:4] == MAGIC
    version, spec_len = struct.unpack_from("<II", raw, 4)
    assert version == 1
    epoch, count = struct.unpack_from("<II", raw, 12 + spec_len)
    assert (epoch, count) == (2, 0)


def test_bad_magic_and_version():
    raw = encode(Checkpoint(small_model().spec, {}))
    with pytest.raises(CheckpointError, match="bad magic"):
        decode(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version 9"):
        decode(raw[:4] + struct.pack("<I", 9) + raw[8:])


def test_truncation_and_trailing_bytes():
    raw = encode(Checkpoint(small_model().spec, model_tensors(small_model())))
    for cut in (2, 10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointError, match="truncated"):
            decode(raw[:cut])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(raw + b"\0")


def test_drifted_orthogonal_tensor_is_named(tmp_path):
    model = small_model()
    tensors = model_tensors(model)
    tensors["block1.M"] = tensors["block1.M"] * (1 + 1e-4)
    raw = encode(Checkpoint(model.spec, tensors))
    with pytest.raises(CheckpointError, match="block1.M"):
        decode(raw)
    assert decode(raw, orth_tol=1e-2).tensors["block1.M"].shape == (8, 8)


def test_non_finite_rejected():
    model = small_model()
    tensors = model_tensors(model)
    tensors["block0.b"] = np.array([np.nan] * 8)
    with pytest.raises(CheckpointError, match="block0.b"):
        decode(encode(Checkpoint(model.spec, tensors)))


def test_missing_tensor_and_file(tmp_path):
    model = small_model()
    tensors = model_tensors(model)
    del tensors["head.c"]
    path = tmp_path / "x.ckpt"
    path.write_bytes(encode(Checkpoint(model.spec, tensors)))
    with pytest.raises(CheckpointError, match="head.c"):
        load_model(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")
