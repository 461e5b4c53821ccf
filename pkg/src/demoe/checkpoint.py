"""Binary checkpoint files: ordered named parameters with taxonomy tags.

Layout (all integers little-endian):

    magic           4 bytes  b"DMOE"
    version         u32      currently 1
    config block    12 x u32 base_width, num_levels, enc_blocks_per_level,
                             mid_blocks, dec_blocks_per_level, num_experts,
                             top_k, fusion_mode index, decoder_experts,
                             with_router, stage, reserved(0)
    record count    u32
    per record:
        name length u16, UTF-8 name
        taxonomy    u8   {conv1x1:0, conv3x3:1, layernorm:2, sca:3, other:4}
        dtype       u8   0 = float32
        rank        u8
        dims        rank x u32
        payload     raw little-endian float32

Round trips are bitwise lossless. ``stage`` records training provenance:
0 fresh init, 1 after baseline+router training, 2 after expert finetuning.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .net import FUSION_MODES, TAXONOMY, ArchConfig, Model, param_specs
from .tensor import Tensor

__all__ = [
    "MAGIC",
    "VERSION",
    "ParamRecord",
    "Checkpoint",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointFormatError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_from_model",
    "model_from_checkpoint",
    "extract_baseline",
    "replicate_experts",
    "checkpoints_equal",
]

MAGIC = b"DMOE"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


@dataclass
class ParamRecord:
    name: str
    taxonomy: str
    data: np.ndarray  # float32

    def __post_init__(self):
        if self.taxonomy not in TAXONOMY:
            raise CheckpointFormatError(f"unknown taxonomy {self.taxonomy!r}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)


@dataclass
class Checkpoint:
    config: ArchConfig
    records: dict  # name -> ParamRecord, insertion-ordered
    stage: int = 0

    def names(self):
        return list(self.records)

    def array(self, name: str) -> np.ndarray:
        return self.records[name].data


def _config_words(cfg: ArchConfig, stage: int) -> list[int]:
    return [
        cfg.base_width,
        cfg.num_levels,
        cfg.enc_blocks_per_level,
        cfg.mid_blocks,
        cfg.dec_blocks_per_level,
        cfg.num_experts,
        cfg.top_k,
        FUSION_MODES.index(cfg.fusion_mode),
        cfg.decoder_experts,
        int(cfg.with_router),
        stage,
        0,
    ]


def _config_from_words(words) -> tuple[ArchConfig, int]:
    if words[7] >= len(FUSION_MODES):
        raise CheckpointFormatError(f"bad fusion mode index {words[7]}")
    cfg = ArchConfig(
        base_width=words[0],
        num_levels=words[1],
        enc_blocks_per_level=words[2],
        mid_blocks=words[3],
        dec_blocks_per_level=words[4],
        num_experts=words[5],
        top_k=words[6],
        fusion_mode=FUSION_MODES[words[7]],
        decoder_experts=words[8],
        with_router=bool(words[9]),
    )
    return cfg, words[10]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<12I", *_config_words(ckpt.config, ckpt.stage)))
        fh.write(struct.pack("<I", len(ckpt.records)))
        for rec in ckpt.records.values():
            name = rec.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            arr = rec.data
            fh.write(struct.pack("<BBB", TAXONOMY.index(rec.taxonomy), 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes())


class _Reader:
    def __init__(self, fh):
        self.fh = fh

    def read(self, n: int) -> bytes:
        buf = self.fh.read(n)
        if len(buf) != n:
            raise CheckpointTruncatedError(
                f"truncated checkpoint: wanted {n} bytes, got {len(buf)}"
            )
        return buf

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh)
        magic = r.read(4)
        if magic != MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = r.unpack("<I")
        if version != VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {version}, this build reads version {VERSION}"
            )
        cfg, stage = _config_from_words(r.unpack("<12I"))
        (count,) = r.unpack("<I")
        records: dict[str, ParamRecord] = {}
        for _ in range(count):
            (name_len,) = r.unpack("<H")
            name = r.read(name_len).decode("utf-8")
            tax_byte, dtype_byte, rank = r.unpack("<BBB")
            if tax_byte >= len(TAXONOMY):
                raise CheckpointFormatError(f"record {name!r}: bad taxonomy byte {tax_byte}")
            if dtype_byte != 0:
                raise CheckpointFormatError(f"record {name!r}: unsupported dtype {dtype_byte}")
            dims = r.unpack(f"<{rank}I")
            n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = r.read(4 * n_elem)
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            if name in records:
                raise CheckpointFormatError(f"duplicate record {name!r}")
            records[name] = ParamRecord(name, TAXONOMY[tax_byte], arr)
    return Checkpoint(cfg, records, stage)


def checkpoint_from_model(model: Model, stage: int | None = None) -> Checkpoint:
    records: dict[str, ParamRecord] = {}
    for spec in param_specs(model.config):
        t = model.params[spec.name]
        records[spec.name] = ParamRecord(spec.name, spec.taxonomy, t.data.copy())
    return Checkpoint(model.config, records, model.stage if stage is None else stage)


def model_from_checkpoint(ckpt: Checkpoint, trainable: bool = False) -> Model:
    """Bind checkpoint arrays (copied) to tensors in canonical parameter order."""
    specs = param_specs(ckpt.config)
    missing = [s.name for s in specs if s.name not in ckpt.records]
    if missing:
        raise CheckpointFormatError(f"checkpoint missing parameters: {missing[:3]} ...")
    extra = set(ckpt.records) - {s.name for s in specs}
    if extra:
        raise CheckpointFormatError(f"checkpoint has unexpected parameters: {sorted(extra)[:3]}")
    params = {}
    for spec in specs:
        arr = ckpt.records[spec.name].data
        if arr.shape != spec.shape:
            raise CheckpointFormatError(
                f"parameter {spec.name}: shape {arr.shape}, expected {spec.shape}"
            )
        params[spec.name] = Tensor(arr.copy(), requires_grad=trainable)
    return Model(ckpt.config, params, stage=ckpt.stage)


def extract_baseline(ckpt: Checkpoint, expert: int) -> Checkpoint:
    """Pull one expert out into a router-free single-expert checkpoint."""
    n = ckpt.config.experts_per_block
    if not (0 <= expert < n):
        raise ValueError(f"expert {expert} outside [0, {n})")
    base_cfg = ckpt.config.baseline()
    records: dict[str, ParamRecord] = {}
    for spec in param_specs(base_cfg):
        src = spec.name.replace(".expert0.", f".expert{expert}.")
        records[spec.name] = ParamRecord(spec.name, spec.taxonomy, ckpt.records[src].data.copy())
    return Checkpoint(base_cfg, records, ckpt.stage)


def replicate_experts(ckpt: Checkpoint) -> Checkpoint:
    """Clone the shared decoder path into every expert slot (finetune init)."""
    if ckpt.config.experts_per_block != 1:
        raise ValueError("replicate_experts needs a single-path decoder checkpoint")
    moe_cfg = replace(ckpt.config, decoder_experts=ckpt.config.num_experts)
    records: dict[str, ParamRecord] = {}
    for spec in param_specs(moe_cfg):
        src = spec.name
        if ".expert" in src:
            head, _, tail = src.partition(".expert")
            src = f"{head}.expert0.{tail.split('.', 1)[1]}"
        records[spec.name] = ParamRecord(spec.name, spec.taxonomy, ckpt.records[src].data.copy())
    return Checkpoint(moe_cfg, records, ckpt.stage)


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    if a.config != b.config or a.stage != b.stage or a.names() != b.names():
        return False
    return all(
        np.array_equal(a.records[n].data, b.records[n].data, equal_nan=True) for n in a.names()
    )
