"""The restoration network: encoder, degradation router, mixture-of-experts decoder.

A U-shaped stack of NAF blocks. The encoder downsamples ``num_levels`` times
with strided 2x2 convolutions; a router head on the deepest encoder feature
classifies the degradation and emits a probability vector over ``num_experts``;
each decoder block is a mixture block whose experts are full NAF blocks,
combined with the router's (renormalized top-k) weights. The same weight
vector drives every mixture block, and a global residual adds the input image
to the network output.

With a single decoder expert and no router this is exactly the plain baseline
network, which is what makes expert extraction bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    constant,
    conv2d,
    global_avg_pool,
    layer_norm_channels,
    mul,
    pixel_shuffle,
    simple_gate,
    simplified_channel_attention,
    softmax_channels,
)

__all__ = [
    "TAXONOMY",
    "FUSION_MODES",
    "ArchConfig",
    "ParamSpec",
    "param_specs",
    "init_params",
    "Model",
    "ExpertSelection",
    "select_experts",
    "gate_matrix",
    "validate_router_weights",
    "naf_block_forward",
    "encoder_forward",
    "router_forward",
    "moe_block_forward",
    "STAGE2_FROZEN_PREFIXES",
    "is_stage2_frozen",
]

TAXONOMY = ("conv1x1", "conv3x3", "layernorm", "sca", "other")
FUSION_MODES = ("weighted_sum", "addition_residual", "attention_connection")

# Parameter groups untouched by expert finetuning (everything upstream of the
# decoder, plus the router).
STAGE2_FROZEN_PREFIXES = ("intro.", "enc", "down", "mid.", "router.")


def is_stage2_frozen(name: str) -> bool:
    return name.startswith(STAGE2_FROZEN_PREFIXES)


@dataclass(frozen=True)
class ArchConfig:
    """Structural hyperparameters of the network.

    ``decoder_experts`` distinguishes the shared-path baseline (1) from the
    full mixture decoder (``num_experts``); 0 means "same as num_experts".
    """

    base_width: int = 32
    num_levels: int = 4
    enc_blocks_per_level: int = 2
    mid_blocks: int = 3
    dec_blocks_per_level: int = 3
    num_experts: int = 5
    top_k: int = 1
    fusion_mode: str = "weighted_sum"
    decoder_experts: int = 0
    with_router: bool = True

    def __post_init__(self):
        if self.base_width < 2 or self.base_width % 2:
            raise ValueError(f"base_width must be even and >= 2, got {self.base_width}")
        if self.num_levels < 1:
            raise ValueError(f"num_levels must be >= 1, got {self.num_levels}")
        for fname in ("enc_blocks_per_level", "mid_blocks", "dec_blocks_per_level"):
            if getattr(self, fname) < 1:
                raise ValueError(f"{fname} must be >= 1")
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        if not (1 <= self.top_k <= self.num_experts):
            raise ValueError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.decoder_experts not in (0, 1, self.num_experts):
            raise ValueError(
                f"decoder_experts must be 0, 1 or num_experts, got {self.decoder_experts}"
            )

    @property
    def experts_per_block(self) -> int:
        return self.decoder_experts or self.num_experts

    @property
    def scale_factor(self) -> int:
        return 1 << self.num_levels

    @classmethod
    def toy(cls, **overrides) -> "ArchConfig":
        """Desk-scale preset: width 8, two levels."""
        base = dict(
            base_width=8,
            num_levels=2,
            enc_blocks_per_level=1,
            mid_blocks=1,
            dec_blocks_per_level=1,
            num_experts=5,
            top_k=1,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full_scale(cls, **overrides) -> "ArchConfig":
        return cls(**overrides)

    def baseline(self) -> "ArchConfig":
        """The router-free single-expert variant with matching trunk."""
        return replace(
            self, num_experts=1, top_k=1, decoder_experts=1, with_router=False
        )


@dataclass(frozen=True)
class ParamSpec:
    name: str
    taxonomy: str
    shape: tuple


def param_specs(cfg: ArchConfig) -> list[ParamSpec]:
    """Ordered parameter table; the single source of truth for layout."""
    specs: list[ParamSpec] = []

    def emit(name, taxonomy, shape):
        specs.append(ParamSpec(name, taxonomy, tuple(shape)))

    def conv(prefix, cin, cout, taxonomy="conv1x1"):
        emit(f"{prefix}.w", taxonomy, (cout, cin, 1, 1))
        emit(f"{prefix}.b", "other", (1, cout, 1, 1))

    def block(prefix, c):
        emit(f"{prefix}.norm1.gamma", "layernorm", (1, c, 1, 1))
        emit(f"{prefix}.norm1.beta", "layernorm", (1, c, 1, 1))
        conv(f"{prefix}.conv1", c, 2 * c)
        emit(f"{prefix}.dwconv.w", "conv3x3", (2 * c, 1, 3, 3))
        emit(f"{prefix}.dwconv.b", "other", (1, 2 * c, 1, 1))
        conv(f"{prefix}.sca", c, c, taxonomy="sca")
        conv(f"{prefix}.conv3", c, c)
        emit(f"{prefix}.attn_gain", "other", (1, c, 1, 1))
        emit(f"{prefix}.norm2.gamma", "layernorm", (1, c, 1, 1))
        emit(f"{prefix}.norm2.beta", "layernorm", (1, c, 1, 1))
        conv(f"{prefix}.conv4", c, 2 * c)
        conv(f"{prefix}.conv5", c, c)
        emit(f"{prefix}.ffn_gain", "other", (1, c, 1, 1))

    w0 = cfg.base_width
    conv("intro", 3, w0)
    for lvl in range(cfg.num_levels):
        c = w0 << lvl
        for i in range(cfg.enc_blocks_per_level):
            block(f"enc{lvl}.block{i}", c)
        emit(f"down{lvl}.w", "other", (2 * c, c, 2, 2))
        emit(f"down{lvl}.b", "other", (1, 2 * c, 1, 1))
    deep = w0 << cfg.num_levels
    for i in range(cfg.mid_blocks):
        block(f"mid.block{i}", deep)
    if cfg.with_router:
        conv("router.pool", deep, deep, taxonomy="sca")
        conv("router.fc1", deep, deep, taxonomy="other")
        conv("router.fc2", deep // 2, cfg.num_experts, taxonomy="other")
    for lvl in reversed(range(cfg.num_levels)):
        cin = w0 << (lvl + 1)
        conv(f"up{lvl}", cin, 2 * cin)
        c = w0 << lvl
        for i in range(cfg.dec_blocks_per_level):
            for e in range(cfg.experts_per_block):
                block(f"dec{lvl}.block{i}.expert{e}", c)
    conv("ending", w0, 3)
    return specs


def _fan_in(spec: ParamSpec) -> int:
    cout, cin, kh, kw = spec.shape
    if spec.name.endswith("dwconv.w"):
        return kh * kw  # one input channel per group
    return cin * kh * kw


def init_params(cfg: ArchConfig, seed: int, requires_grad: bool = True):
    """Seeded parameter initialization (uniform over +-1/sqrt(fan_in))."""
    rng = np.random.default_rng(np.random.SeedSequence([0x1A17, seed]))
    params: dict[str, Tensor] = {}
    for spec in param_specs(cfg):
        if spec.name.endswith((".gamma",)):
            data = np.ones(spec.shape, dtype=np.float32)
        elif spec.name.endswith((".beta", ".b", "_gain")):
            data = np.zeros(spec.shape, dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(_fan_in(spec))
            data = rng.uniform(-bound, bound, size=spec.shape).astype(np.float32)
        params[spec.name] = Tensor(data, requires_grad=requires_grad)
    return params


# ---------------------------------------------------------------------------
# gating


def validate_router_weights(w: np.ndarray, tol: float = 1e-6) -> None:
    w = np.asarray(w)
    if np.any(w < 0):
        raise ValueError("router weights must be non-negative")
    sums = w.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"router weights must sum to 1 within {tol}, got sums {sums}")


@dataclass
class ExpertSelection:
    """Which experts run, per sample, and with what (renormalized) weight."""

    mode: str  # "auto" | "manual"
    indices: np.ndarray  # (batch, k) int
    weights: np.ndarray  # (batch, k) float32, rows sum to 1

    def __post_init__(self):
        if self.mode not in ("auto", "manual"):
            raise ValueError(f"selection mode must be auto or manual, got {self.mode!r}")
        if self.indices.shape != self.weights.shape:
            raise ValueError("selection indices/weights shape mismatch")
        if self.indices.shape[1] == 0:
            raise ValueError("empty expert selection")


def select_experts(w: np.ndarray, k: int, override: Optional[int] = None) -> ExpertSelection:
    """Top-k selection over router weights, or a forced one-hot override.

    Selected weights are renormalized to sum to one per sample; a manual
    override always carries weight exactly 1.
    """
    w = np.asarray(w, dtype=np.float32)
    batch, n = w.shape
    if override is not None:
        if not (0 <= override < n):
            raise ValueError(f"expert override {override} outside [0, {n})")
        idx = np.full((batch, 1), override, dtype=np.int64)
        return ExpertSelection("manual", idx, np.ones((batch, 1), dtype=np.float32))
    if not (1 <= k <= n):
        raise ValueError(f"top_k must be in [1, {n}], got {k}")
    order = np.argsort(-w, axis=1, kind="stable")
    idx = order[:, :k]
    sel = np.take_along_axis(w, idx, axis=1)
    sel = sel / sel.sum(axis=1, keepdims=True)
    return ExpertSelection("auto", idx, sel.astype(np.float32))


def gate_matrix(sel: ExpertSelection, num_experts: int) -> np.ndarray:
    """Scatter a selection into a dense (batch, num_experts) gate."""
    batch = sel.indices.shape[0]
    gate = np.zeros((batch, num_experts), dtype=np.float32)
    np.put_along_axis(gate, sel.indices, sel.weights, axis=1)
    return gate


# ---------------------------------------------------------------------------
# forward pieces


def naf_block_forward(x: Tensor, params, prefix: str) -> Tensor:
    """One NAF block: attention branch then FFN branch, both gated residuals."""
    p = params
    t = layer_norm_channels(x, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"])
    t = conv2d(t, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], "pointwise_1x1")
    t = conv2d(t, p[f"{prefix}.dwconv.w"], p[f"{prefix}.dwconv.b"], "depthwise_3x3")
    t = simple_gate(t)
    t = simplified_channel_attention(t, p[f"{prefix}.sca.w"], p[f"{prefix}.sca.b"])
    t = conv2d(t, p[f"{prefix}.conv3.w"], p[f"{prefix}.conv3.b"], "pointwise_1x1")
    y = add(x, mul(t, p[f"{prefix}.attn_gain"]))
    u = layer_norm_channels(y, p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"])
    u = conv2d(u, p[f"{prefix}.conv4.w"], p[f"{prefix}.conv4.b"], "pointwise_1x1")
    u = simple_gate(u)
    u = conv2d(u, p[f"{prefix}.conv5.w"], p[f"{prefix}.conv5.b"], "pointwise_1x1")
    return add(y, mul(u, p[f"{prefix}.ffn_gain"]))


def encoder_forward(y_img: Tensor, params, cfg: ArchConfig):
    """Returns (per-level skip features, deepest feature)."""
    _, _, h, w = y_img.shape
    if h % cfg.scale_factor or w % cfg.scale_factor:
        raise ShapeError(
            f"spatial extents {h}x{w} must be divisible by {cfg.scale_factor} "
            f"({cfg.num_levels} levels)"
        )
    f = conv2d(y_img, params["intro.w"], params["intro.b"], "pointwise_1x1")
    skips = []
    for lvl in range(cfg.num_levels):
        for i in range(cfg.enc_blocks_per_level):
            f = naf_block_forward(f, params, f"enc{lvl}.block{i}")
        skips.append(f)
        f = conv2d(f, params[f"down{lvl}.w"], params[f"down{lvl}.b"], "strided_2x2_down")
    return skips, f


def router_forward(deep: Tensor, params, logit_noise: Optional[np.ndarray] = None) -> Tensor:
    """Attention-pooled classifier head; returns (N, num_experts, 1, 1) probabilities."""
    a = simplified_channel_attention(deep, params["router.pool.w"], params["router.pool.b"])
    v = global_avg_pool(a)
    u = conv2d(v, params["router.fc1.w"], params["router.fc1.b"], "pointwise_1x1")
    u = simple_gate(u)
    logits = conv2d(u, params["router.fc2.w"], params["router.fc2.b"], "pointwise_1x1")
    if logit_noise is not None:
        logits = add(logits, constant(logit_noise.reshape(logits.shape)))
    return softmax_channels(logits)


def moe_block_forward(h: Tensor, gate: np.ndarray, params, prefix: str, fusion_mode: str) -> Tensor:
    """Gate-weighted combination of expert blocks.

    ``gate`` is a dense (batch, experts) weight matrix; experts whose column
    is identically zero are never evaluated, so a one-hot gate runs exactly
    one expert.
    """
    if fusion_mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {fusion_mode!r}")
    num_experts = gate.shape[1]
    if num_experts == 0:
        raise ValueError("empty expert selection")
    acc = None
    for e in range(num_experts):
        col = gate[:, e]
        if not np.any(col):
            continue
        out_e = naf_block_forward(h, params, f"{prefix}.expert{e}")
        term = mul(out_e, constant(col.reshape(-1, 1, 1, 1)))
        acc = term if acc is None else add(acc, term)
    if acc is None:
        raise ValueError("empty expert selection: gate has no nonzero column")
    if fusion_mode == "addition_residual":
        return add(h, acc)
    if fusion_mode == "attention_connection":
        return mul(h, acc)
    return acc


@dataclass
class ForwardResult:
    restored: Tensor
    router_probs: Optional[Tensor]  # (N, num_experts, 1, 1), on-tape when training
    weights: np.ndarray  # (N, num_experts) detached router weights
    selection: Optional[ExpertSelection]


class Model:
    """Parameter container plus the end-to-end forward pass."""

    def __init__(self, config: ArchConfig, params: dict, stage: int = 0):
        self.config = config
        self.params = params
        self.stage = stage

    @classmethod
    def init(cls, config: ArchConfig, seed: int) -> "Model":
        return cls(config, init_params(config, seed, requires_grad=True), stage=0)

    def parameters(self, trainable_only: bool = False):
        if trainable_only:
            return [p for p in self.params.values() if p.requires_grad]
        return list(self.params.values())

    def set_trainable(self, pred) -> None:
        """Mark parameters trainable per ``pred(name) -> bool``."""
        for name, p in self.params.items():
            p.requires_grad = bool(pred(name))
            p.grad = np.zeros_like(p.data) if p.requires_grad else None

    def forward(
        self,
        y_img: Tensor,
        k: Optional[int] = None,
        override: Optional[int] = None,
        full_gate: bool = False,
        logit_noise: Optional[np.ndarray] = None,
    ) -> ForwardResult:
        cfg = self.config
        p = self.params
        batch = y_img.shape[0]
        skips, deep = encoder_forward(y_img, p, cfg)
        if cfg.with_router:
            probs_t = router_forward(deep, p, logit_noise)
            weights = probs_t.data.reshape(batch, cfg.num_experts).copy()
        else:
            probs_t = None
            weights = np.ones((batch, 1), dtype=np.float32)
        f = deep
        for i in range(cfg.mid_blocks):
            f = naf_block_forward(f, p, f"mid.block{i}")

        experts = cfg.experts_per_block
        selection = None
        if experts == 1:
            gate = np.ones((batch, 1), dtype=np.float32)
        elif full_gate:
            gate = weights
        else:
            selection = select_experts(weights, cfg.top_k if k is None else k, override)
            gate = gate_matrix(selection, experts)

        for lvl in reversed(range(cfg.num_levels)):
            f = conv2d(f, p[f"up{lvl}.w"], p[f"up{lvl}.b"], "pointwise_1x1")
            f = pixel_shuffle(f, "up")
            f = add(f, skips[lvl])
            for i in range(cfg.dec_blocks_per_level):
                f = moe_block_forward(f, gate, p, f"dec{lvl}.block{i}", cfg.fusion_mode)
        out = conv2d(f, p["ending.w"], p["ending.b"], "pointwise_1x1")
        restored = add(out, y_img)
        return ForwardResult(restored, probs_t, weights, selection)
