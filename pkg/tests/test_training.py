import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from plnet import nn_ops as ops
from plnet.arch_graph import NetworkConfig
from plnet.data_io import synth_generate
from plnet.model_runtime import Model
from plnet.nn_ops import Tensor
from plnet.training import (AugmentConfig, EarlyStopping, NumericError, OptimizerState,
                            TrainConfig, TrainHistory, adam_step, augment, dice_loss,
                            early_stop_update, sample_rng, total_loss, train_epl)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64).reshape(1, 1, 1, -1), True)


def test_dice_examples():
    assert dice_loss(T([1, 1, 0, 0]), T([1, 0, 0, 0]).data, smooth=0).data == pytest.approx(1 / 3)
    assert dice_loss(T([1, 0, 1]), T([1, 0, 1]).data, smooth=0).data == pytest.approx(0)
    assert dice_loss(T([0, 0, 0]), T([1, 0, 1]).data, smooth=1e-9).data == pytest.approx(1, abs=1e-8)
    assert dice_loss(T([0, 0]), T([0, 0]).data, smooth=1.0).data == 0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(T([1, 0]), np.zeros((1, 1, 1, 3)))


@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=2, max_size=12), st.integers(0, 1000))
def test_dice_range_and_symmetry(bits, seed):
    g = np.asarray(bits)
    p = np.random.default_rng(seed).integers(0, 2, g.size).astype(float)
    a = float(dice_loss(T(p), T(g).data, 1.0).data)
    b = float(dice_loss(T(g), T(p).data, 1.0).data)
    assert 0 <= a <= 1 and a == pytest.approx(b)


def test_dice_gradient(rng):
    p = Tensor(rng.random((2, 1, 3, 3)), True)
    g = (rng.random((2, 1, 3, 3)) > 0.5).astype(float)
    rep = ops.grad_check(lambda: dice_loss(p, g, 1.0), {"p": p}, tol=1e-6)
    assert rep.passed


def test_total_loss_modes():
    g = np.array([1.0, 0, 0, 0]).reshape(1, 1, 1, 4)
    a, b = T([1, 1, 0, 0]), T([1, 0, 0, 0])
    joint, parts = total_loss([a, b], g, "joint", smooth=0)
    assert float(joint.data) == pytest.approx((1 / 3 + 0) / 2)
    s1, _ = total_loss([a, b], g, "stage1", smooth=0)
    assert float(s1.data) == pytest.approx(1 / 3)
    with ops.Tape() as tape:
        loss, _ = total_loss([a, b], g, "stage1", smooth=0)
    assert not tape.gradient(loss, [b])[0].any()
    with pytest.raises(ValueError):
        total_loss([a], g, "warmup")


def test_adam_first_step_is_lr():
    cfg = TrainConfig(learning_rate=1e-3)
    p = {"w": Tensor(np.zeros(5), True)}
    st_ = OptimizerState()
    adam_step(p, {"w": np.full(5, 0.37)}, st_, cfg)
    np.testing.assert_allclose(p["w"].data, -1e-3, rtol=1e-6)
    assert st_.step == 1


def test_adam_zero_gradient_fixed_point():
    cfg = TrainConfig()
    p = {"w": Tensor(np.ones(3), True)}
    st_ = OptimizerState({"w": np.full(3, 0.5)}, {"w": np.full(3, 0.25)}, 4)
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(3)}, st_, cfg)
    np.testing.assert_allclose(st_.m["w"], 0.45)
    np.testing.assert_allclose(st_.v["w"], 0.25 * 0.999)
    # moments still push the weight: a zero gradient alone does not stop Adam
    assert not np.array_equal(before, p["w"].data)
    p2 = {"w": Tensor(np.ones(3), True)}
    adam_step(p2, {"w": np.zeros(3)}, OptimizerState(), cfg)
    np.testing.assert_array_equal(p2["w"].data, 1.0)


def test_adam_rejects_nan():
    with pytest.raises(NumericError):
        adam_step({"w": Tensor(np.zeros(2), True)}, {"w": np.array([np.nan, 0])},
                  OptimizerState(), TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, early_stop_patience=20).validate()
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0).validate()
    assert TrainConfig(max_epochs=30).phase_a_budget == 15


def test_early_stopping_rules():
    es = EarlyStopping(patience=20)
    assert all(early_stop_update(es, 1.0 - 0.01 * i) == "continue" for i in range(100))
    es = EarlyStopping(patience=20)
    es.update(1.0)
    out = [es.update(1.0) for _ in range(20)]
    assert out[-1] == "stop" and set(out[:-1]) == {"continue"}
    es = EarlyStopping(patience=20)
    es.update(1.0)
    for _ in range(18):
        es.update(1.0)
    assert es.update(0.5) == "continue" and es.wait == 0
    es = EarlyStopping(patience=2, min_delta=1e-4)
    es.update(1.0)
    es.update(1.0 - 5e-5)
    assert es.update(1.0 - 9e-5) == "stop"


def _pair(seed=0, size=16):
    rng = np.random.default_rng(seed)
    img = rng.random((3, size, size)).astype(np.float32)
    mask = (rng.random((size, size)) > 0.6).astype(np.uint8)
    return img, mask


def test_flip_involution():
    img, mask = _pair()
    cfg = AugmentConfig(rotation_deg=0, shift_frac=0, vflip=False, p=1.0)
    a = augment(img, mask, cfg, np.random.default_rng(0))
    b = augment(*a, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(b[0], img)
    np.testing.assert_array_equal(b[1], mask)


@given(st.integers(0, 10**6))
def test_augment_keeps_mask_binary_and_aligned(seed):
    img, mask = _pair(seed % 7)
    img[0] = mask  # channel 0 carries the mask so alignment can be checked
    ai, am = augment(img, mask, AugmentConfig(p=1.0), np.random.default_rng(seed))
    assert set(np.unique(am)) <= {0, 1}
    assert ai.shape == img.shape and am.shape == mask.shape
    # nearest vs bilinear differ only near edges; interiors agree
    agree = np.mean((ai[0] > 0.5) == am.astype(bool))
    assert agree > 0.8


@given(st.integers(0, 10**6))
def test_rotation_angle_bounded(seed):
    rng = np.random.default_rng(seed)
    rng.random(4)
    assert -25 <= rng.uniform(-25, 25) <= 25
    img, mask = _pair(1)
    a = augment(img, mask, AugmentConfig(), sample_rng(seed, 0, 0))
    b = augment(img, mask, AugmentConfig(), sample_rng(seed, 0, 0))
    np.testing.assert_array_equal(a[0], b[0])


def test_augment_disabled_is_identity():
    img, mask = _pair()
    ai, am = augment(img, mask, AugmentConfig(enabled=False), np.random.default_rng(0))
    assert ai is img and am is mask


def test_history_jsonl_round_trip(tmp_path):
    from plnet.training import HISTORY_FIELDS, EpochRecord
    h = TrainHistory()
    h.append(EpochRecord(1, "stage1", 0.5, [0.5], 0.6, 0.7, 0.6, 0.0, 1.0))
    h.append(EpochRecord(2, "joint", 0.4, [0.5, 0.3], 0.5, 0.8, 0.7, None, 1.0))
    with pytest.raises(ValueError):
        h.append(EpochRecord(2, "joint", 0, [], 0, 0, 0, None, 0))
    h.save(tmp_path / "h.jsonl")
    import json
    first = json.loads((tmp_path / "h.jsonl").read_text().splitlines()[0])
    assert tuple(first) == HISTORY_FIELDS
    assert TrainHistory.load(tmp_path / "h.jsonl").records == h.records


TINY = NetworkConfig(input_size=16, ocs=0.125, stage_depths=(2, 3))


@pytest.fixture(scope="module")
def tiny_data():
    ds = synth_generate(12, 16, seed=5)
    return ds.subset(ds.ids[:8]), ds.subset(ds.ids[8:])


def _snapshot(model):
    return {k: v.copy() for k, v in model.state_arrays().items()}


def test_phase_a_isolation_and_phase_b_updates(tiny_data):
    train, val = tiny_data
    m = Model.from_config(TINY, seed=0)
    before = _snapshot(m)
    stage1 = set(m.stage_parameters({1}))
    cfg = TrainConfig(max_epochs=4, phase_a_max_epochs=2, early_stop_patience=3, batch_size=4,
                      learning_rate=1e-3)
    seen = []

    def hook(rec):
        seen.append((rec.phase, _snapshot(m)))

    res = train_epl(m, train, val, cfg, on_epoch=hook)
    phases = [r.phase for r in res.history.records]
    assert phases == ["stage1", "stage1", "joint", "joint"]
    after_a = seen[1][1]
    for k in m.parameters():
        same = np.array_equal(before[k], after_a[k])
        assert same == (k not in stage1), k
    assert all(r.stage2_grad_norm == 0.0 for r in res.history.records[:2])
    last = seen[-1][1]
    assert any(not np.array_equal(after_a[k], last[k]) for k in stage1)


def test_same_seed_same_history(tiny_data):
    train, val = tiny_data
    cfg = TrainConfig(max_epochs=3, phase_a_max_epochs=1, early_stop_patience=2, batch_size=4)
    runs = []
    for _ in range(2):
        res = train_epl(Model.from_config(TINY, seed=1), train, val, cfg)
        runs.append((res.history.losses(), res.best.arrays))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_no_epl_single_phase(tiny_data):
    train, val = tiny_data
    cfg = TrainConfig(max_epochs=2, early_stop_patience=1, batch_size=4, epl_enabled=False)
    res = train_epl(Model.from_config(TINY), train, val, cfg)
    assert [r.phase for r in res.history.records] == ["joint", "joint"]
    assert res.best.phase == "joint"


def test_bad_splits(tiny_data):
    train, val = tiny_data
    cfg = TrainConfig(max_epochs=2, early_stop_patience=1)
    with pytest.raises(ValueError):
        train_epl(Model.from_config(TINY), train, train.subset([]), cfg)
    with pytest.raises(ValueError):
        train_epl(Model.from_config(TINY), train, train, cfg)


def test_nan_aborts_with_epoch(tiny_data):
    train, val = tiny_data
    m = Model.from_config(TINY)
    m.modules["head/stage1/conv"].bias.data[:] = np.nan
    cfg = TrainConfig(max_epochs=2, early_stop_patience=1, batch_size=4)
    with pytest.raises(NumericError, match="epoch 1"):
        train_epl(m, train, val, cfg)


def test_end_to_end_gradient():
    cfg = NetworkConfig(input_size=16, ocs=0.125, stage_depths=(2, 3))
    m = Model.from_config(cfg, seed=2, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 3, 16, 16)))
    y = (rng.random((2, 1, 16, 16)) > 0.5).astype(float)

    def f():
        out = m(x)
        return total_loss(out.probs, y, "joint")[0]

    params = dict(list(m.parameters().items())[::7])
    rep = ops.grad_check(f, params, n_samples=3, tol=1e-4)
    assert rep.passed, (rep.max_rel_error, rep.worst)
    assert not math.isnan(rep.max_rel_error)
