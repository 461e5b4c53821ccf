"""Analytic parameter and MAC counts for the network.

Convention: MACs count the multiply-accumulates of dense kernels only
(pointwise, depthwise, and strided convolutions, including the 1x1 convs the
attention heads run on pooled vectors). Normalizations, channel gates,
elementwise rescalings, and the softmax are excluded; they are O(C*H*W) adds
or multiplies that conventional MAC meters ignore. All arithmetic is exact
integer math, so structural identities hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .net import ArchConfig

__all__ = [
    "LayerCount",
    "ComputeCount",
    "pointwise_macs",
    "depthwise3x3_macs",
    "count_params_macs",
    "router_overhead",
]


def pointwise_macs(cin: int, cout: int, h: int, w: int) -> int:
    return h * w * cin * cout


def depthwise3x3_macs(c: int, h: int, w: int) -> int:
    return 9 * c * h * w


@dataclass
class LayerCount:
    params: int = 0
    active_params: int = 0
    macs: int = 0

    def add(self, other: "LayerCount") -> None:
        self.params += other.params
        self.active_params += other.active_params
        self.macs += other.macs


@dataclass
class ComputeCount:
    params: int
    active_params: int
    macs: int
    breakdown: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "params": self.params,
            "active_params": self.active_params,
            "macs": self.macs,
            "breakdown": {
                k: {"params": v.params, "active_params": v.active_params, "macs": v.macs}
                for k, v in self.breakdown.items()
            },
        }
        return out


def _conv1x1(cin, cout, h, w) -> LayerCount:
    p = cout * cin + cout
    return LayerCount(p, p, pointwise_macs(cin, cout, h, w))


def _naf_block(c, h, w) -> LayerCount:
    params = (
        2 * c  # norm1
        + (2 * c * c + 2 * c)  # conv1
        + (9 * 2 * c + 2 * c)  # dwconv
        + (c * c + c)  # sca conv
        + (c * c + c)  # conv3
        + c  # attn gain
        + 2 * c  # norm2
        + (2 * c * c + 2 * c)  # conv4
        + (c * c + c)  # conv5
        + c  # ffn gain
    )
    macs = (
        pointwise_macs(c, 2 * c, h, w)
        + depthwise3x3_macs(2 * c, h, w)
        + pointwise_macs(c, c, 1, 1)  # sca conv runs on the pooled vector
        + pointwise_macs(c, c, h, w)
        + pointwise_macs(c, 2 * c, h, w)
        + pointwise_macs(c, c, h, w)
    )
    return LayerCount(params, params, macs)


def count_params_macs(cfg: ArchConfig, input_hw: tuple[int, int], k: int | None = None) -> ComputeCount:
    """Counts for one forward pass on an input of the given spatial size.

    ``macs`` and ``active_params`` include only the ``k`` experts a top-k
    gate would run per mixture block; total ``params`` include every expert.
    """
    h, w = input_hw
    if h % cfg.scale_factor or w % cfg.scale_factor:
        raise ValueError(f"{h}x{w} input not divisible by {cfg.scale_factor}")
    experts = cfg.experts_per_block
    k = cfg.top_k if k is None else k
    active = min(max(k, 1), experts)

    sections = {name: LayerCount() for name in ("intro", "encoder", "middle", "router", "decoder", "ending")}
    w0 = cfg.base_width

    sections["intro"].add(_conv1x1(3, w0, h, w))
    ch, cw = h, w
    for lvl in range(cfg.num_levels):
        c = w0 << lvl
        for _ in range(cfg.enc_blocks_per_level):
            sections["encoder"].add(_naf_block(c, ch, cw))
        # strided 2x2 down conv, c -> 2c
        p = 2 * c * c * 4 + 2 * c
        sections["encoder"].add(LayerCount(p, p, (ch // 2) * (cw // 2) * c * 4 * 2 * c))
        ch, cw = ch // 2, cw // 2
    deep = w0 << cfg.num_levels
    for _ in range(cfg.mid_blocks):
        sections["middle"].add(_naf_block(deep, ch, cw))
    if cfg.with_router:
        sections["router"].add(_conv1x1(deep, deep, 1, 1))  # attention pool conv
        sections["router"].add(_conv1x1(deep, deep, 1, 1))  # fc1
        sections["router"].add(_conv1x1(deep // 2, cfg.num_experts, 1, 1))  # fc2
    for lvl in reversed(range(cfg.num_levels)):
        cin = w0 << (lvl + 1)
        sections["decoder"].add(_conv1x1(cin, 2 * cin, ch, cw))  # pre-shuffle up conv
        ch, cw = ch * 2, cw * 2
        c = w0 << lvl
        block = _naf_block(c, ch, cw)
        per_level = LayerCount(
            params=cfg.dec_blocks_per_level * experts * block.params,
            active_params=cfg.dec_blocks_per_level * active * block.params,
            macs=cfg.dec_blocks_per_level * active * block.macs,
        )
        sections["decoder"].add(per_level)
    sections["ending"].add(_conv1x1(w0, 3, ch, cw))

    total = LayerCount()
    for sec in sections.values():
        total.add(sec)
    return ComputeCount(total.params, total.active_params, total.macs, sections)


def router_overhead(cfg: ArchConfig, input_hw: tuple[int, int]) -> LayerCount:
    """Parameter/MAC cost of just the router branch."""
    full = count_params_macs(cfg, input_hw, k=1)
    return full.breakdown["router"]
