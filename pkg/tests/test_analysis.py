import json

import pytest

from avit.analysis import (
    GROUPS,
    adapter_overhead_closed_form,
    budget,
    closed_form_counts,
    count_params,
    estimate_flops,
    flop_breakdown,
    group_of,
    storage_amortization,
)
from avit.backbone import TOY, VIT_B16, VIT_L16
from avit.model import VARIANTS, ModelConfig, build_model


def live(variant, bb=VIT_B16, seed=0):
    return count_params(build_model(ModelConfig.variant(variant, bb), seed, materialize=False))


def test_group_assignment():
    assert group_of("backbone.layer3.qkv.weight") == "backbone"
    assert group_of("backbone.layer3.ln2.bias") == "layernorm"
    assert group_of("backbone.norm.weight") == "layernorm"
    assert group_of("backbone.layer3.adapter_mlp.w_down") == "adapters"
    assert group_of("prompt.block0.bn1.weight") == "prompt"
    assert group_of("decoder.aspp.fuse.bias") == "decoder"


@pytest.mark.parametrize("variant", sorted(VARIANTS))
@pytest.mark.parametrize("bb", [TOY, VIT_B16, VIT_L16], ids=["toy", "vitb", "vitl"])
def test_registry_matches_closed_form(variant, bb):
    a, b = live(variant, bb), closed_form_counts(ModelConfig.variant(variant, bb))
    assert a.groups == b.groups
    assert a.trainable_groups == b.trainable_groups


def test_vitb_counts():
    rep = live("avit")
    assert rep.groups["adapters"] == 7_077_888 == 24 * 2 * 768**2 // 4
    assert abs(rep.groups["backbone"] - 85.8e6) / 85.8e6 < 0.005
    assert 225_000 <= rep.groups["prompt"] <= 245_000
    assert abs(rep.trainable - 13.6e6) / 13.6e6 < 0.10
    assert abs(rep.trainable_fraction - 0.137) < 0.01
    assert rep.total == sum(rep.groups.values())
    assert rep.trainable <= rep.total
    base = live("base")
    assert abs(base.total - 91.8e6) / 91.8e6 < 0.02
    assert base.trainable == base.total


def test_counts_independent_of_seed_and_values():
    a = count_params(build_model(ModelConfig.variant("avit", TOY), 0))
    b = count_params(build_model(ModelConfig.variant("avit", TOY), 9))
    assert a.groups == b.groups and a.trainable_groups == b.trainable_groups


def test_report_text_and_json():
    rep = budget(ModelConfig.variant("avit", VIT_B16))
    text = rep.to_text()
    assert "tuned:" in text and "gflops@224:" in text
    for g in GROUPS:
        assert f"{g}:" in text
    rec = json.loads(rep.to_json())
    assert rec["total"] == rep.total and rec["trainable"] == rep.trainable


# flops ----------------------------------------------------------------------


def test_vitb_flops_within_band():
    base = estimate_flops(ModelConfig.variant("base", VIT_B16))
    avit = estimate_flops(ModelConfig.variant("avit", VIT_B16))
    assert abs(base - 18.0) / 18.0 <= 0.25
    assert abs(avit - 20.9) / 20.9 <= 0.25


def test_adapter_overhead_closed_form():
    cfg = ModelConfig.variant("avit", VIT_B16)
    per_layer = 2 * 197 * 2 * 768**2 / 4 / 1e9
    assert adapter_overhead_closed_form(cfg) == pytest.approx(12 * per_layer, rel=1e-12)
    est = flop_breakdown(cfg).parts["adapters"] / 1e9
    assert abs(est - adapter_overhead_closed_form(cfg)) / adapter_overhead_closed_form(cfg) < 1e-3
    # same quantity seen as a difference of two whole-model estimates
    diff = estimate_flops(ModelConfig.variant("no_prompt", VIT_B16)) - estimate_flops(ModelConfig.variant("base_star", VIT_B16))
    assert diff >= adapter_overhead_closed_form(cfg)


def test_two_flops_per_mac_doubles_matmul_work():
    cfg = ModelConfig.variant("avit", VIT_B16)
    ratio = adapter_overhead_closed_form(cfg, flops_per_mac=2) / adapter_overhead_closed_form(cfg)
    assert ratio == 2.0
    assert estimate_flops(cfg, flops_per_mac=2) > 1.9 * estimate_flops(cfg)


def test_doubling_image_side():
    cfg = ModelConfig.variant("avit", VIT_B16)
    a, b = flop_breakdown(cfg, 224).parts, flop_breakdown(cfg, 448).parts
    assert b["prompt"] / a["prompt"] == pytest.approx(4.0, rel=1e-9)
    assert b["transformer"] / a["transformer"] > 4.0


def test_variant_flop_order():
    f = {v: estimate_flops(ModelConfig.variant(v, VIT_B16)) for v in VARIANTS}
    assert f["base"] == f["base_star"]
    assert f["avit"] > f["no_prompt"] > f["base"]
    assert f["avit"] > f["no_adapter"] > f["base"]


# storage --------------------------------------------------------------------


def test_storage_amortization():
    full, peft = storage_amortization(4)
    assert abs(full - 367.2e6) / 367.2e6 < 0.05
    assert abs(peft - 140.2e6) / 140.2e6 < 0.05
    _, one = storage_amortization(1)
    assert one == closed_form_counts(ModelConfig.variant("avit")).total
    tuned = closed_form_counts(ModelConfig.variant("avit")).trainable
    steps = [storage_amortization(n)[1] for n in range(1, 6)]
    assert all(b - a == tuned for a, b in zip(steps, steps[1:]))
    with pytest.raises(ValueError):
        storage_amortization(0)
