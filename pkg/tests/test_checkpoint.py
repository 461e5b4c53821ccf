"""Checkpoint serialization: lossless round trips and hostile-file handling."""

import numpy as np
import pytest

from demoe.checkpoint import (
    CheckpointFormatError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    checkpoint_from_model,
    checkpoints_equal,
    extract_baseline,
    load_checkpoint,
    model_from_checkpoint,
    replicate_experts,
    save_checkpoint,
)
from demoe.net import ArchConfig, Model


def make_ckpt(seed=0, stage=1, cfg=None):
    model = Model.init(cfg or ArchConfig.toy(), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in model.params.values():
        p.data[...] = rng.normal(size=p.data.shape).astype(np.float32)
    return checkpoint_from_model(model, stage=stage)


def test_round_trip_bitwise(tmp_path):
    ckpt = make_ckpt()
    path = tmp_path / "m.dmoe"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert checkpoints_equal(ckpt, loaded)
    assert loaded.stage == 1
    assert loaded.config == ckpt.config
    # byte-identical on re-save
    path2 = tmp_path / "m2.dmoe"
    save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_taxonomy_tags_preserved(tmp_path):
    ckpt = make_ckpt()
    path = tmp_path / "m.dmoe"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    for name, rec in ckpt.records.items():
        assert loaded.records[name].taxonomy == rec.taxonomy
    assert loaded.records["intro.w"].taxonomy == "conv1x1"
    assert loaded.records["enc0.block0.dwconv.w"].taxonomy == "conv3x3"
    assert loaded.records["enc0.block0.norm1.gamma"].taxonomy == "layernorm"
    assert loaded.records["enc0.block0.sca.w"].taxonomy == "sca"
    assert loaded.records["intro.b"].taxonomy == "other"


def test_corrupt_magic(tmp_path):
    path = tmp_path / "m.dmoe"
    save_checkpoint(make_ckpt(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointMagicError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch_names_both_versions(tmp_path):
    path = tmp_path / "m.dmoe"
    save_checkpoint(make_ckpt(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match=r"version 2.*version 1"):
        load_checkpoint(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "m.dmoe"
    save_checkpoint(make_ckpt(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointTruncatedError, match="truncated"):
        load_checkpoint(path)


def test_bad_taxonomy_byte(tmp_path):
    path = tmp_path / "m.dmoe"
    save_checkpoint(make_ckpt(), path)
    raw = bytearray(path.read_bytes())
    # first record: magic(4) + version(4) + config(48) + count(4) + namelen(2) + name
    name_len = int.from_bytes(raw[60:62], "little")
    raw[62 + name_len] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="taxonomy"):
        load_checkpoint(path)


def test_model_round_trip_preserves_values(tmp_path):
    ckpt = make_ckpt(seed=3)
    model = model_from_checkpoint(ckpt)
    again = checkpoint_from_model(model, stage=ckpt.stage)
    assert checkpoints_equal(ckpt, again)


def test_missing_parameter_rejected():
    ckpt = make_ckpt()
    del ckpt.records["ending.w"]
    with pytest.raises(CheckpointFormatError, match="missing"):
        model_from_checkpoint(ckpt)


def test_extract_baseline_pulls_expert_values():
    ckpt = make_ckpt(seed=5)
    base = extract_baseline(ckpt, expert=2)
    assert base.config.with_router is False
    assert base.config.experts_per_block == 1
    assert "router.fc1.w" not in base.records
    src = ckpt.records["dec0.block0.expert2.conv1.w"].data
    dst = base.records["dec0.block0.expert0.conv1.w"].data
    assert np.array_equal(src, dst)
    with pytest.raises(ValueError, match="expert"):
        extract_baseline(ckpt, expert=9)


def test_replicate_experts_clones_shared_path():
    stage1 = make_ckpt(seed=6, cfg=ArchConfig.toy(decoder_experts=1))
    moe = replicate_experts(stage1)
    assert moe.config.experts_per_block == 5
    src = stage1.records["dec1.block0.expert0.conv4.w"].data
    for e in range(5):
        assert np.array_equal(moe.records[f"dec1.block0.expert{e}.conv4.w"].data, src)
