import numpy as np
import pytest

from plnet import nn_ops as ops
from plnet.arch_graph import NetworkConfig, build, count_parameters, propagate_shapes
from plnet.model_runtime import (Model, StepContext, fuse_backward_skip, fuse_forward_skip,
                                 fuse_stage_outputs, predict, to_binary_mask,
                                 to_uint8_probability)
from plnet.nn_ops import ConfigurationError, Tensor

TINY = NetworkConfig(input_size=32, ocs=0.125, stage_depths=(3, 4))


@pytest.fixture(scope="module")
def tiny():
    return Model.from_config(TINY, seed=0)


def image(n=2, size=32, seed=0):
    return Tensor(np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32))


@pytest.mark.parametrize("cfg", [TINY, NetworkConfig(input_size=32, ocs=0.125, variant="unet"),
                                 NetworkConfig(input_size=32, ocs=0.125, steps_n=3, stage_depths=(2, 3))])
def test_runtime_shapes_match_symbolic(cfg):
    m = Model.from_config(cfg)
    m.shape_log = {}
    x = image()
    m(x)
    assert m.shape_log == propagate_shapes(m.graph, x.shape)


def test_weight_count_matches_report(tiny):
    n = sum(t.data.size for t in tiny.parameters().values())
    assert n == count_parameters(tiny.graph).total


def test_same_seed_same_weights():
    a = Model.from_config(TINY, seed=3).state_arrays()
    b = Model.from_config(TINY, seed=3).state_arrays()
    c = Model.from_config(TINY, seed=4).state_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_outputs(tiny):
    out = tiny(image())
    assert len(out.logits) == 2 and len(out.probs) == 2
    assert out.fused.shape == (2, 1, 32, 32)
    assert np.all((out.fused.data >= 0) & (out.fused.data <= 1))


def test_fusion_is_sigmoid_of_sum(tiny):
    out = tiny(image())
    s = out.logits[0].data.astype(np.float64) + out.logits[1].data
    np.testing.assert_allclose(out.fused.data, 1 / (1 + np.exp(-s)), atol=1e-6)


def test_fusion_rejects_mismatched_logits():
    a = Tensor(np.zeros((1, 1, 4, 4)))
    b = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ConfigurationError):
        fuse_stage_outputs([a, b])
    with pytest.raises(ValueError):
        fuse_stage_outputs([])


def test_zero_passes_is_identity(tiny):
    x = image(1)
    y, feats = tiny.forward_stage(1, x, passes=0)
    assert y is x and feats == {}


def test_first_pass_duplicates_input(tiny):
    x = image(1)
    ctx = StepContext(1, 1)
    ctx.x_in[1] = x
    f = fuse_backward_skip(tiny, ctx, 1)
    np.testing.assert_array_equal(f.data[:, :3], f.data[:, 3:])
    np.testing.assert_array_equal(f.data[:, 3:], x.data)


def test_forward_skip_checks_resolution():
    with pytest.raises(ConfigurationError):
        fuse_forward_skip(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 8, 8))))


def test_stage_requires_carry(tiny):
    with pytest.raises(ConfigurationError):
        tiny.forward_stage(2, image(1))


def test_bad_input_sizes(tiny):
    with pytest.raises(ConfigurationError):
        tiny(image(1, size=20))
    with pytest.raises(ConfigurationError):
        tiny(Tensor(np.zeros((1, 1, 32, 32), np.float32)))


def test_stage1_head_ignores_stage2(tiny):
    with ops.Tape() as tape:
        out = tiny(image(), n_stages=1)
        loss = ops.sum_all(out.probs[0])
    only2 = {k: t for k, t in tiny.parameters().items()
             if tiny.graph.nodes[k.rsplit(".", 1)[0]].stages == {2}}
    grads = tape.gradient(loss, list(only2.values()))
    assert all(not g.any() for g in grads)


def test_predict_single_sigmoid_and_infer_mode(tiny):
    x = image(1)
    with ops.Tape(grad=False) as tape:
        p = predict(tiny, x)
    assert tape.op_counts()["sigmoid"] == 1
    assert tiny.mode == "train"
    assert p.shape == (1, 1, 32, 32)
    last = predict(tiny, x, mode="final_stage")
    assert last.shape == p.shape
    with pytest.raises(ValueError):
        predict(tiny, x, mode="nope")


def test_predict_is_batch_independent(tiny):
    x = image(3)
    full = predict(tiny, x)
    one = predict(tiny, Tensor(x.data[1:2]))
    np.testing.assert_allclose(full[1:2], one, atol=1e-5)


def test_export_helpers():
    p = np.array([0.0, 0.49, 0.5, 1.0])
    assert to_binary_mask(p).tolist() == [0, 0, 255, 255]
    assert to_uint8_probability(p).tolist() == [0, 125, 128, 255]


def test_bn_sites_follow_calls(tiny):
    shared = tiny.modules["enc/L1/shared/bn"]
    assert set(shared.sites) == {"s1/p1", "s1/p2", "s2/p1", "s2/p2"}
    assert tiny.modules["enc/L4/step1/bn"].sites == {}  # stage-2 only, one call
    bufs = tiny.buffers()
    assert "enc/L1/shared/bn.running_mean@s2/p1" in bufs
    assert "enc/L1/shared/bn.running_mean" not in bufs


def test_bn_site_statistics_are_separate():
    m = Model.from_config(TINY, seed=0)
    m(image(4))
    sites = m.modules["dec/L1/shared/bn"].sites
    means = [sites[s][0] for s in ("s1/p1", "s1/p2", "s2/p1")]
    assert not np.allclose(means[0], means[1]) and not np.allclose(means[1], means[2])


def test_bn_shared_mode_has_no_sites():
    cfg = NetworkConfig(input_size=32, ocs=0.125, stage_depths=(3, 4), bn_stats="shared")
    m = Model.from_config(cfg)
    assert all(not getattr(mod, "sites", None) for mod in m.modules.values())
    assert count_parameters(m.graph).total == count_parameters(build(TINY)).total
    with pytest.raises(ConfigurationError):
        NetworkConfig(bn_stats="global").validate()


def test_unknown_site_rejected(tiny):
    bn = tiny.modules["enc/L1/shared/bn"]
    with pytest.raises(ConfigurationError):
        ops.batchnorm(Tensor(np.zeros((2, bn.channels, 4, 4), np.float32)), bn, "s9/p9")
