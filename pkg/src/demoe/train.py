"""Losses and the two-stage training procedure.

Stage 1 trains the encoder, a single shared decoder path, and the router
with pixel + classification losses. Stage 2 replicates the shared decoder
into every expert slot, freezes everything upstream of the decoder (and the
router), and finetunes the experts with the pixel loss only, gating with the
full softmax weights so every expert receives gradient.

Training is a pure function of (manifest, config, seed): reruns are bitwise
identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_model, model_from_checkpoint, replicate_experts
from .data import Manifest, load_image
from .net import ArchConfig, Model, is_stage2_frozen
from .optim import AdamW, cosine_anneal
from .tensor import Tape, Tensor, add, backward, mean_abs_error, nll_loss, scale

__all__ = [
    "LossConfig",
    "TrainConfig",
    "pixel_loss",
    "class_loss",
    "combined_loss",
    "augment",
    "stage1_train",
    "stage2_finetune",
    "TrainError",
]


class TrainError(ValueError):
    """Bad training inputs (empty dataset, missing classes, wrong stage)."""


@dataclass(frozen=True)
class LossConfig:
    pixel_weight: float = 1.0
    class_weight: float = 0.001

    def __post_init__(self):
        if self.pixel_weight < 0 or self.class_weight < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 32
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    hflip: bool = True
    vflip: bool = True
    lr0: float = 1e-3
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 0.0
    router_noise_sigma: float = 0.0  # optional: Gaussian on router logits in stage 1

    def __post_init__(self):
        if self.patch_size < 4:
            raise ValueError(f"patch_size too small: {self.patch_size}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not (self.lr0 >= self.lr_min > 0):
            raise ValueError("need lr0 >= lr_min > 0")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(patch_size=384, batch_size=32, epochs=400, lr_min=1e-7)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# losses


def pixel_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """L1: mean absolute error over all elements."""
    return mean_abs_error(pred, gt)


def class_loss(probs: Tensor, labels) -> Tensor:
    """Cross-entropy between router weights and the one-hot degradation label."""
    return nll_loss(probs, labels)


def combined_loss(pred: Tensor, gt: Tensor, probs: Tensor, labels, cfg: LossConfig) -> Tensor:
    return add(
        scale(pixel_loss(pred, gt), cfg.pixel_weight),
        scale(class_loss(probs, labels), cfg.class_weight),
    )


# ---------------------------------------------------------------------------
# data plumbing


def augment(pair, hflip: bool, vflip: bool, rng: np.random.Generator):
    """Apply one random flip draw identically to both members of the pair."""
    degraded, clean = pair
    if hflip and rng.random() < 0.5:
        degraded = degraded[:, :, ::-1]
        clean = clean[:, :, ::-1]
    if vflip and rng.random() < 0.5:
        degraded = degraded[:, ::-1, :]
        clean = clean[:, ::-1, :]
    return degraded, clean


def load_pairs(manifest: Manifest):
    """Load every (degraded, clean, label) triple into memory as float32."""
    pairs = []
    for r in manifest.records:
        pairs.append(
            (load_image(manifest.resolve(r.degraded)), load_image(manifest.resolve(r.clean)), r.label)
        )
    return pairs


def _make_batch(pairs, idxs, patch: int, tcfg: TrainConfig, rng: np.random.Generator):
    deg = np.empty((len(idxs), 3, patch, patch), np.float32)
    cln = np.empty_like(deg)
    labels = np.empty(len(idxs), np.int64)
    for row, i in enumerate(idxs):
        d, c, lab = pairs[i]
        h, w = d.shape[1:]
        if h < patch or w < patch:
            raise TrainError(f"image {h}x{w} smaller than patch {patch}")
        top = int(rng.integers(0, h - patch + 1))
        left = int(rng.integers(0, w - patch + 1))
        dp = d[:, top : top + patch, left : left + patch]
        cp = c[:, top : top + patch, left : left + patch]
        dp, cp = augment((dp, cp), tcfg.hflip, tcfg.vflip, rng)
        deg[row] = dp
        cln[row] = cp
        labels[row] = lab
    return deg, cln, labels


# ---------------------------------------------------------------------------
# the two stages


def _check_dataset(manifest: Manifest, num_classes: int) -> None:
    if not manifest.records:
        raise TrainError("empty dataset")
    present = set(r.label for r in manifest.records)
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        raise TrainError(f"dataset covers no samples for classes {missing}")


def _run(model: Model, pairs, tcfg: TrainConfig, step_loss, noisy_router: bool):
    """Shared epoch/step loop. ``step_loss(result, clean, labels) -> Tensor``."""
    n = len(pairs)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    params = model.parameters(trainable_only=True)
    opt = AdamW(params, tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([0x7421, tcfg.seed]))
    history = {"epoch_loss": [], "epoch_lr": [], "steps_per_epoch": steps_per_epoch}
    step = 0
    num_classes = model.config.num_experts
    for _epoch in range(tcfg.epochs):
        perm = rng.permutation(n)
        losses = []
        history["epoch_lr"].append(cosine_anneal(tcfg.lr0, tcfg.lr_min, step, total_steps))
        for start in range(0, n, tcfg.batch_size):
            idxs = perm[start : start + tcfg.batch_size]
            deg, cln, labels = _make_batch(pairs, idxs, tcfg.patch_size, tcfg, rng)
            noise = None
            if noisy_router and tcfg.router_noise_sigma > 0:
                noise = rng.normal(0, tcfg.router_noise_sigma, (len(idxs), num_classes, 1, 1)).astype(
                    np.float32
                )
            lr = cosine_anneal(tcfg.lr0, tcfg.lr_min, step, total_steps)
            opt.zero_grad()
            with Tape() as tape:
                result = model.forward(
                    Tensor(deg), full_gate=True, logit_noise=noise
                )
                loss = step_loss(result, Tensor(cln), labels)
            backward(tape, loss)
            opt.step(lr)
            losses.append(loss.item())
            step += 1
        history["epoch_loss"].append(float(np.mean(losses)))
    return history


def stage1_train(
    manifest: Manifest,
    arch: ArchConfig,
    tcfg: TrainConfig,
    lcfg: LossConfig = LossConfig(),
):
    """Train the baseline (shared decoder) and router jointly.

    Returns ``(checkpoint tagged stage 1, history)``.
    """
    _check_dataset(manifest, arch.num_experts)
    if tcfg.patch_size % arch.scale_factor:
        raise TrainError(
            f"patch size {tcfg.patch_size} not divisible by {arch.scale_factor}"
        )
    cfg1 = replace(arch, decoder_experts=1, with_router=True)
    model = Model.init(cfg1, seed=tcfg.seed)
    pairs = load_pairs(manifest)

    def step_loss(result, clean, labels):
        return combined_loss(result.restored, clean, result.router_probs, labels, lcfg)

    history = _run(model, pairs, tcfg, step_loss, noisy_router=True)
    model.stage = 1
    return checkpoint_from_model(model, stage=1), history


def stage2_finetune(stage1_ckpt: Checkpoint, manifest: Manifest, tcfg: TrainConfig):
    """Replicate the shared decoder into all experts and finetune them.

    The encoder, downsamplers, middle blocks, and router stay bitwise frozen;
    training uses the pixel loss only, with the full softmax gate so every
    expert contributes per Eq.-style weighting.

    Returns ``(checkpoint tagged stage 2, history)``.
    """
    if stage1_ckpt.stage != 1:
        raise TrainError(
            f"expected a stage-1 checkpoint, got stage {stage1_ckpt.stage}"
        )
    _check_dataset(manifest, stage1_ckpt.config.num_experts)
    if tcfg.patch_size % stage1_ckpt.config.scale_factor:
        raise TrainError(
            f"patch size {tcfg.patch_size} not divisible by {stage1_ckpt.config.scale_factor}"
        )
    moe_ckpt = replicate_experts(stage1_ckpt)
    model = model_from_checkpoint(moe_ckpt, trainable=True)
    model.set_trainable(lambda name: not is_stage2_frozen(name))
    pairs = load_pairs(manifest)

    def step_loss(result, clean, labels):
        return pixel_loss(result.restored, clean)

    history = _run(model, pairs, tcfg, step_loss, noisy_router=False)
    model.stage = 2
    return checkpoint_from_model(model, stage=2), history
