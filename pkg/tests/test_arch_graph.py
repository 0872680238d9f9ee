import numpy as np
import pytest
from hypothesis import given, strategies as st

from plnet.arch_graph import (NetworkConfig, build, count_parameters, describe,
                              propagate_shapes, round_half_up)
from plnet.nn_ops import ConfigurationError

TINY = NetworkConfig(input_size=32, ocs=0.125, stage_depths=(3, 4))


def test_channel_schedule():
    cfg = NetworkConfig()
    assert [cfg.channels(l) for l in range(1, 6)] == [32, 64, 128, 256, 512]
    assert NetworkConfig(variant="unet").channels(1) == 64
    assert NetworkConfig(ocs=0.5).channels(1) == 16
    assert round_half_up(2.5) == 3 and round_half_up(0.2) == 1


@pytest.mark.parametrize("kw", [
    dict(variant="resnet"), dict(ocs=0), dict(steps_n=0), dict(stage_depths=(5, 4)),
    dict(stage_depths=(1, 2)), dict(input_size=40), dict(up_kernel=2),
])
def test_invalid_configs(kw):
    with pytest.raises(ConfigurationError):
        NetworkConfig(**kw).validate()


def test_config_dict_round_trip():
    cfg = NetworkConfig(ocs=0.5, stage_depths=(3, 4))
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        NetworkConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_default_breakdown():
    rep = count_parameters(build(NetworkConfig()))
    assert rep.total == 15_086_891
    assert rep.size_bytes == 4 * rep.total
    assert sum(rep.per_group.values()) == rep.total
    assert sum(rep.per_step.values()) == rep.total
    assert rep.per_step["step1"] == rep.per_step["step2"]
    assert rep.stage_exclusive[1] == rep.per_group["head/stage1"]


def test_stage2_only_groups():
    g = build(NetworkConfig())
    only2 = {n.group for n in g.nodes.values() if n.stages == {2}}
    assert only2 == {"enc/L5", "dec/L4", "head/stage2"}


def test_steps_add_equal_increments():
    reps = [count_parameters(build(NetworkConfig(steps_n=n))) for n in (1, 2, 3)]
    totals = [r.total for r in reps]
    # beyond the first step each extra step adds exactly one step's worth
    assert totals[2] - totals[1] == reps[2].per_step["step3"]
    # with one step the deepest level never receives a backward skip, so its
    # projection only appears from two steps on
    g1, g2 = build(NetworkConfig(steps_n=1)), build(NetworkConfig(steps_n=2))
    extra = set(g2.nodes) - set(g1.nodes) - {p for p in g2.nodes if "/step2/" in p}
    assert extra == {"enc/L5/bsc/conv", "enc/L5/bsc/bn"}
    gap = (totals[1] - totals[0]) - (totals[2] - totals[1])
    assert gap == sum(g2.nodes[p].param_count for p in extra)


def test_unet_has_one_head():
    g = build(NetworkConfig(variant="unet"))
    assert len(g.heads) == 1
    assert count_parameters(g).total == 28_956_481


@given(st.sampled_from([0.125, 0.25, 0.5, 1.0]), st.integers(1, 3),
       st.sampled_from([(2, 3), (3, 4), (4, 5), (3, 5)]))
def test_symbolic_shapes_clean(ocs, n, depths):
    cfg = NetworkConfig(input_size=32, ocs=ocs, steps_n=n, stage_depths=depths)
    g = build(cfg)
    shapes = propagate_shapes(g, (2, 3, 32, 32))
    assert shapes[g.output] == (2, 1, 32, 32)
    for h in g.heads:
        assert shapes[h] == (2, 1, 32, 32)


def test_every_edge_has_a_producer():
    g = build(TINY)
    names = {c.name for c in g.calls}
    assert all(src in names for src, _ in g.edges())


def test_shape_mismatch_reported_once():
    g = build(TINY)
    node = g.nodes["dec/L2/step1/conv"]
    node.in_ch += 1
    shapes, errors = propagate_shapes(g, (1, 3, 32, 32), strict=False)
    assert len(errors) == 2  # one per stage that runs dec/L2/step1
    assert all("dec/L2/step1/conv" in e for e in errors)
    with pytest.raises(ConfigurationError):
        propagate_shapes(g, (1, 3, 32, 32))


def test_wrong_input_channels():
    with pytest.raises(ConfigurationError, match="input"):
        propagate_shapes(build(TINY), (1, 1, 32, 32))


def test_describe_lists_every_node():
    g = build(TINY)
    text = describe(g)
    body = [l for l in text.splitlines() if not l.startswith("#")]
    assert len(body) == len(g.nodes)
    assert text.strip().endswith(str(count_parameters(g).total))


def test_stage_nodes_cover_graph():
    g = build(TINY)
    s1 = {n.path for n in g.stage_nodes(1)}
    s2 = {n.path for n in g.stage_nodes(2)}
    assert s1 | s2 == set(g.nodes)
    assert "head/stage1/conv" in s1 - s2
