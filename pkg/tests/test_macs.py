"""Analytic compute accounting and the router-overhead identity."""

import pytest

from demoe.macs import count_params_macs, depthwise3x3_macs, pointwise_macs, router_overhead
from demoe.net import ArchConfig, Model, param_specs


def test_pointwise_definition():
    assert pointwise_macs(3, 8, 16, 16) == 16 * 16 * 3 * 8


def test_depthwise_definition():
    assert depthwise3x3_macs(4, 10, 12) == 9 * 4 * 10 * 12


@pytest.mark.parametrize(
    "cfg,hw",
    [
        (ArchConfig.toy(), (32, 32)),
        (ArchConfig.full_scale(), (256, 256)),
    ],
    ids=["toy", "full"],
)
def test_active_macs_identity(cfg, hw):
    moe = count_params_macs(cfg, hw, k=1)
    router = router_overhead(cfg, hw)
    baseline = count_params_macs(cfg.baseline(), hw)
    assert moe.macs - router.macs == baseline.macs
    assert moe.active_params - router.active_params == baseline.active_params


def test_param_count_matches_actual_parameters():
    for cfg in (ArchConfig.toy(), ArchConfig.toy(decoder_experts=1, with_router=False)):
        model = Model.init(cfg, seed=0)
        actual = sum(p.data.size for p in model.params.values())
        counted = count_params_macs(cfg, (32, 32)).params
        assert counted == actual


def test_active_counts_scale_with_k():
    cfg = ArchConfig.toy()
    counts = [count_params_macs(cfg, (32, 32), k=k) for k in range(1, 6)]
    macs = [c.macs for c in counts]
    assert all(a < b for a, b in zip(macs, macs[1:]))
    # with every expert active, the active parameter count is the total
    assert counts[-1].active_params == counts[-1].params
    assert counts[0].active_params < counts[0].params


def test_breakdown_sections_sum_to_total():
    cfg = ArchConfig.toy()
    cc = count_params_macs(cfg, (32, 32), k=1)
    assert sum(s.params for s in cc.breakdown.values()) == cc.params
    assert sum(s.macs for s in cc.breakdown.values()) == cc.macs
    assert set(cc.breakdown) == {"intro", "encoder", "middle", "router", "decoder", "ending"}


def test_indivisible_input_rejected():
    with pytest.raises(ValueError, match="divisible"):
        count_params_macs(ArchConfig.toy(), (30, 30))
