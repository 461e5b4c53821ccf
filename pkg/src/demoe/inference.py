"""Batch restoration and per-image evaluation records."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, model_from_checkpoint
from .data import Manifest, load_image, save_image
from .metrics import psnr, router_accuracy, ssim
from .net import Model
from .tensor import Tensor

__all__ = ["restore_image", "restore_batch", "evaluate_manifest", "as_model"]


def as_model(ckpt_or_model) -> Model:
    if isinstance(ckpt_or_model, Checkpoint):
        return model_from_checkpoint(ckpt_or_model)
    return ckpt_or_model


def _pad_to_multiple(img: np.ndarray, multiple: int):
    _, h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img, h, w
    if ph >= h or pw >= w:
        raise ValueError(f"image {h}x{w} too small to pad to a multiple of {multiple}")
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return padded, h, w


def restore_batch(model, images: np.ndarray, k=None, override=None):
    """Restore a stacked (N, 3, H, W) batch; returns (restored, router weights).

    Outputs are clipped to [0, 1].
    """
    model = as_model(model)
    res = model.forward(Tensor(np.ascontiguousarray(images, dtype=np.float32)), k=k, override=override)
    return np.clip(res.restored.data, 0.0, 1.0), res.weights


def restore_image(model, img: np.ndarray, k=None, override=None):
    """Restore one (3, H, W) image, reflect-padding odd sizes as needed."""
    model = as_model(model)
    padded, h, w = _pad_to_multiple(np.asarray(img, dtype=np.float32), model.config.scale_factor)
    restored, weights = restore_batch(model, padded[None], k=k, override=override)
    return restored[0, :, :h, :w], weights[0]


def evaluate_manifest(
    model,
    manifest: Manifest,
    k=None,
    override=None,
    save_dir=None,
):
    """Restore and score every manifest record.

    Returns ``(records, weights, failures)``: per-image metric dicts with a
    stable field order, the per-image router weight vectors, and a list of
    (path, error) pairs for records whose files could not be read. Restored
    images are written under ``save_dir`` when given.
    """
    model = as_model(model)
    records = []
    weights_rows = []
    failures = []
    if save_dir is not None:
        save_dir = Path(save_dir)
        save_dir.mkdir(parents=True, exist_ok=True)
    for rec in manifest.records:
        try:
            degraded = load_image(manifest.resolve(rec.degraded))
            clean = load_image(manifest.resolve(rec.clean))
        except (OSError, ValueError) as exc:
            failures.append((rec.degraded, str(exc)))
            continue
        restored, w = restore_image(model, degraded, k=k, override=override)
        pred = int(np.argmax(w))
        if save_dir is not None:
            out_name = Path(rec.degraded).stem + "_restored.png"
            save_image(restored, save_dir / out_name)
        records.append(
            {
                "image": rec.degraded,
                "label": rec.label,
                "pred_label": pred,
                "psnr_in": psnr(degraded, clean),
                "psnr_out": psnr(restored, clean),
                "ssim_in": ssim(degraded, clean),
                "ssim_out": ssim(restored, clean),
            }
        )
        weights_rows.append([float(x) for x in w])
    return records, weights_rows, failures


def summarize(records) -> dict:
    """Aggregate means plus router accuracy over evaluation records."""
    if not records:
        return {}
    out = {
        "count": len(records),
        "psnr_in": float(np.mean([r["psnr_in"] for r in records])),
        "psnr_out": float(np.mean([r["psnr_out"] for r in records])),
        "ssim_in": float(np.mean([r["ssim_in"] for r in records])),
        "ssim_out": float(np.mean([r["ssim_out"] for r in records])),
        "router_accuracy": router_accuracy(
            [r["pred_label"] for r in records], [r["label"] for r in records]
        ),
    }
    return out
