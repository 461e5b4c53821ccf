"""Dataset manifests, PNG image IO, and the curation operations.

A manifest is a JSON document listing (degraded, clean, label, mse) records
plus a curation log that accumulates one entry per operation applied, with
the seeds and parameters needed to reproduce it. Image paths are stored
relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "ManifestRecord",
    "Manifest",
    "ManifestError",
    "save_image",
    "load_image",
    "quantize",
    "image_mse",
    "mse_histogram_subsample",
    "balance_dataset",
]

SCHEMA_VERSION = 1


class ManifestError(ValueError):
    """Malformed or inconsistent manifest."""


@dataclass
class ManifestRecord:
    degraded: str
    clean: str
    label: int
    mse: float

    def to_obj(self) -> dict:
        return {"degraded": self.degraded, "clean": self.clean, "label": self.label, "mse": self.mse}

    @classmethod
    def from_obj(cls, obj: dict) -> "ManifestRecord":
        return cls(obj["degraded"], obj["clean"], int(obj["label"]), float(obj["mse"]))


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    curation_log: list = field(default_factory=list)
    base_dir: Path | None = None  # set on load/save; resolves relative paths

    def __len__(self):
        return len(self.records)

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.records:
            out[r.label] = out.get(r.label, 0) + 1
        return dict(sorted(out.items()))

    def resolve(self, rel: str) -> Path:
        base = self.base_dir or Path(".")
        return base / rel

    def save(self, path) -> None:
        path = Path(path)
        obj = {
            "schema_version": SCHEMA_VERSION,
            "records": [r.to_obj() for r in self.records],
            "curation_log": self.curation_log,
        }
        path.write_text(json.dumps(obj, indent=1) + "\n")
        self.base_dir = path.parent

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise ManifestError(
                f"{path}: schema version {obj.get('schema_version')}, expected {SCHEMA_VERSION}"
            )
        records = [ManifestRecord.from_obj(o) for o in obj["records"]]
        return cls(records, list(obj.get("curation_log", [])), base_dir=path.parent)

    def rebased(self, new_dir) -> "Manifest":
        """Rewrite record paths relative to ``new_dir`` (for saving elsewhere)."""
        import os

        new_dir = Path(new_dir)
        base = self.base_dir or Path(".")
        records = [
            ManifestRecord(
                os.path.relpath(base / r.degraded, new_dir),
                os.path.relpath(base / r.clean, new_dir),
                r.label,
                r.mse,
            )
            for r in self.records
        ]
        return Manifest(records, list(self.curation_log), base_dir=new_dir)

    def validate_files(self, num_classes: int | None = None) -> None:
        for r in self.records:
            if r.label < 0 or (num_classes is not None and r.label >= num_classes):
                raise ManifestError(f"label {r.label} out of range for {r.degraded}")
            for rel in (r.degraded, r.clean):
                if not self.resolve(rel).exists():
                    raise ManifestError(f"missing file: {self.resolve(rel)}")


# ---------------------------------------------------------------------------
# image IO: 8-bit RGB PNG <-> float arrays in [0, 1], channel-first


def quantize(arr) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    return np.round(a * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_image(arr, path) -> None:
    Image.fromarray(quantize(arr), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """PNG -> (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (rgb / 255.0).transpose(2, 0, 1)


def image_mse(a_u8: np.ndarray, b_u8: np.ndarray) -> float:
    """MSE between two uint8 images on the [0, 1] scale, in double precision."""
    a = a_u8.astype(np.float64) / 255.0
    b = b_u8.astype(np.float64) / 255.0
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# curation

SPARSE_TAIL_FRACTION = 0.05


def mse_histogram_subsample(
    manifest: Manifest, bins: int, per_bin: int, drop_sparse_tail: bool, seed: int
) -> Manifest:
    """Equal-width MSE binning with per-bin uniform subsampling.

    When ``drop_sparse_tail`` is set and the highest bin holds less than 5%
    of the records, that bin is discarded entirely. From each surviving bin,
    ``per_bin`` records are drawn uniformly without replacement (all of them
    if the bin is smaller).
    """
    if not manifest.records:
        raise ManifestError("cannot subsample an empty manifest")
    if bins < 2:
        raise ManifestError(f"need at least 2 bins, got {bins}")
    if per_bin < 1:
        raise ManifestError(f"per_bin must be positive, got {per_bin}")
    vals = np.array([r.mse for r in manifest.records], dtype=np.float64)
    lo, hi = float(vals.min()), float(vals.max())
    edges = np.linspace(lo, hi, bins + 1)
    if hi > lo:
        which = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, bins - 1)
    else:
        which = np.zeros(len(vals), dtype=np.int64)
    counts = np.bincount(which, minlength=bins)

    surviving = list(range(bins))
    dropped = None
    if drop_sparse_tail and counts[bins - 1] < SPARSE_TAIL_FRACTION * len(vals):
        dropped = bins - 1
        surviving.remove(dropped)

    rng = np.random.default_rng(np.random.SeedSequence([0x5B5A, seed]))
    chosen: list = []
    for b in surviving:
        members = np.flatnonzero(which == b)
        if len(members) == 0:
            continue
        if len(members) <= per_bin:
            picked = members
        else:
            picked = np.sort(rng.choice(members, size=per_bin, replace=False))
        chosen.extend(int(i) for i in picked)

    out = Manifest(
        [manifest.records[i] for i in chosen],
        manifest.curation_log
        + [
            {
                "op": "mse_histogram_subsample",
                "bins": bins,
                "per_bin": per_bin,
                "drop_sparse_tail": drop_sparse_tail,
                "seed": seed,
                "edges": [float(e) for e in edges],
                "dropped_bin": dropped,
                "selected": len(chosen),
            }
        ],
        base_dir=manifest.base_dir,
    )
    return out


def balance_dataset(manifest: Manifest, targets: dict[int, int], seed: int) -> Manifest:
    """Set per-class counts exactly.

    Classes below target are upsampled by cyclic repetition of a shuffled
    order (truncated to the target, so repetition counts differ by at most
    one); classes above target are subsampled uniformly without replacement.
    Classes not named in ``targets`` pass through unchanged.
    """
    counts = manifest.counts()
    for cls, tgt in targets.items():
        if tgt <= 0:
            raise ManifestError(f"target for class {cls} must be positive, got {tgt}")
        if cls not in counts:
            raise ManifestError(f"class {cls} has a target but is absent from the manifest")

    rng = np.random.default_rng(np.random.SeedSequence([0xBA1A, seed]))
    by_class: dict[int, list] = {}
    for r in manifest.records:
        by_class.setdefault(r.label, []).append(r)

    out_records: list = []
    for cls in sorted(by_class):
        members = by_class[cls]
        if cls not in targets:
            out_records.extend(members)
            continue
        tgt = targets[cls]
        n = len(members)
        if n >= tgt:
            idx = np.sort(rng.choice(n, size=tgt, replace=False))
            out_records.extend(members[i] for i in idx)
        else:
            order = rng.permutation(n)
            reps = math.ceil(tgt / n)
            cycled = [members[i] for _ in range(reps) for i in order]
            out_records.extend(cycled[:tgt])

    return Manifest(
        out_records,
        manifest.curation_log
        + [
            {
                "op": "balance_dataset",
                "targets": {str(k): int(v) for k, v in sorted(targets.items())},
                "seed": seed,
            }
        ],
        base_dir=manifest.base_dir,
    )
