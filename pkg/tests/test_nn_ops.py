import numpy as np
import pytest
from hypothesis import given, strategies as st

from plnet import nn_ops as ops
from plnet.nn_ops import BatchNormParams, ConfigurationError, ConvParams, Tensor


def t64(rng, shape, grad=True):
    return Tensor(rng.standard_normal(shape), grad)


def conv(in_ch, out_ch, k, seed=0):
    return ConvParams.create(in_ch, out_ch, k, seed=seed, name=f"c{in_ch}x{out_ch}k{k}", dtype=np.float64)


def test_identity_1x1():
    p = conv(1, 1, 1)
    p.weight.data[...] = 1.0
    x = Tensor(np.random.default_rng(0).random((2, 1, 4, 5)))
    np.testing.assert_array_equal(ops.conv2d(x, p).data, x.data)


def test_all_ones_3x3_interior():
    p = conv(1, 1, 3)
    p.weight.data[...] = 1.0
    out = ops.conv2d(Tensor(np.full((1, 1, 5, 5), 0.7)), p).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * 0.7)
    assert np.isclose(out[0, 0, 0, 0], 4 * 0.7)


def test_conv_matches_direct_sum(rng):
    p = conv(2, 3, 3)
    x = t64(rng, (1, 2, 4, 6))
    out = ops.conv2d(x, p).data
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(4):
            for j in range(6):
                ref[0, o, i, j] = p.bias.data[o] + np.sum(p.weight.data[o] * xp[0, :, i:i + 3, j:j + 3])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_channel_mismatch_names_node():
    p = conv(3, 2, 3)
    with pytest.raises(ConfigurationError, match="c3x2k3"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), p)


def test_conv_kernel_size_restricted():
    with pytest.raises(ConfigurationError):
        ConvParams.create(1, 1, 5)


def test_param_counts():
    assert ConvParams.count(3, 8, 3) == 8 * 3 * 9 + 8
    p = conv(3, 8, 3)
    assert p.weight.data.size + p.bias.data.size == ConvParams.count(3, 8, 3)
    assert BatchNormParams.count(8) == 16


def test_conv_weight_gradient_fd(rng):
    p = conv(2, 2, 3)
    x = t64(rng, (1, 2, 5, 5), grad=False)
    rep = ops.grad_check(lambda: ops.sum_all(ops.conv2d(x, p)), ops.param_tensors([p]),
                         n_samples=50, tol=1e-6)
    assert rep.passed, rep


def test_batchnorm_train_normalizes_and_updates(rng):
    p = BatchNormParams.create(3, dtype=np.float64)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    out = ops.batchnorm(x, p).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = p.momentum
    np.testing.assert_allclose(p.running_mean, (1 - m) * x.data.mean(axis=(0, 2, 3)))
    assert np.all(p.running_var >= 0)


def test_batchnorm_infer_uses_running_stats(rng):
    p = BatchNormParams.create(2, dtype=np.float64)
    p.running_mean[:] = [1.0, -1.0]
    p.running_var[:] = [4.0, 9.0]
    p.mode = "infer"
    x = Tensor(rng.standard_normal((2, 2, 3, 3)))
    out = ops.batchnorm(x, p).data
    exp = (x.data - p.running_mean[None, :, None, None]) / np.sqrt(p.running_var[None, :, None, None] + p.eps)
    np.testing.assert_allclose(out, exp)


def test_relu_and_sigmoid_values():
    x = Tensor(np.array([[[[-2.0, 0.0, 3.0]]]]))
    np.testing.assert_array_equal(ops.relu(x).data, [[[[0.0, 0.0, 3.0]]]])
    big = ops.sigmoid(Tensor(np.array([[[[-800.0, 0.0, 800.0]]]]))).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big.ravel(), [0.0, 0.5, 1.0])


def test_maxpool_odd_size_rejected():
    with pytest.raises(ConfigurationError):
        ops.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_concat_error_names_both():
    a = Tensor(np.zeros((1, 1, 4, 4)), name="left")
    b = Tensor(np.zeros((1, 1, 2, 2)), name="right")
    with pytest.raises(ConfigurationError, match="left.*right"):
        ops.concat_channels([a, b])


def test_tape_visits_each_record_once_in_reverse(rng):
    p = conv(1, 2, 3)
    x = t64(rng, (1, 1, 4, 4))
    with ops.Tape() as tape:
        y = ops.relu(ops.conv2d(x, p))
        loss = ops.sum_all(ops.sigmoid(y))
    tape.gradient(loss, [x, p.weight])
    assert tape.visits == sorted(tape.visits, reverse=True)
    assert len(tape.visits) == len(set(tape.visits)) == len(tape.records)


def test_no_tape_means_no_records(rng):
    tape = ops.Tape()
    ops.relu(t64(rng, (1, 1, 2, 2)))
    assert tape.records == []


def test_trace_only_tape_counts_ops(rng):
    with ops.Tape(grad=False) as tape:
        ops.sigmoid(ops.relu(t64(rng, (1, 1, 2, 2))))
    assert tape.op_counts() == {"relu": 1, "sigmoid": 1}
    with pytest.raises(RuntimeError):
        tape.gradient(Tensor(np.zeros(())), [])


def _check(f, params, tol=1e-4):
    rep = ops.grad_check(f, params, tol=tol, n_samples=30)
    assert rep.passed, (rep.max_rel_error, rep.worst)
    assert rep.checked > 0
    return rep


@pytest.mark.parametrize("name", ["conv1", "conv3", "batchnorm", "relu", "maxpool2",
                                  "upsample2", "concat", "sigmoid", "add", "scale"])
def test_grad_check_primitive(name, rng):
    x = t64(rng, (2, 2, 4, 4))
    y = t64(rng, (2, 2, 4, 4))
    r = rng.standard_normal((2, 4, 8, 8))
    weight = lambda t: _mul(t, r)
    if name in ("conv1", "conv3"):
        p = conv(2, 3, 1 if name == "conv1" else 3, seed=3)
        _check(lambda: weight(ops.conv2d(x, p)), {"x": x, **ops.param_tensors([p])})
    elif name == "batchnorm":
        p = BatchNormParams.create(2, dtype=np.float64)
        _check(lambda: weight(ops.batchnorm(x, p)), {"x": x, **ops.param_tensors([p])})
    elif name == "relu":
        _check(lambda: weight(ops.relu(x)), {"x": x})
    elif name == "maxpool2":
        _check(lambda: weight(ops.maxpool2(x)), {"x": x})
    elif name == "upsample2":
        _check(lambda: weight(ops.upsample2(x)), {"x": x})
    elif name == "concat":
        _check(lambda: weight(ops.concat_channels([x, y])), {"x": x, "y": y})
    elif name == "sigmoid":
        _check(lambda: weight(ops.sigmoid(x)), {"x": x})
    elif name == "add":
        _check(lambda: weight(ops.add(x, y)), {"x": x, "y": y})
    else:
        _check(lambda: weight(ops.scale(x, -1.7)), {"x": x})


def _mul(t, r):
    # random projection to a scalar so every output element matters
    w = Tensor(r[:t.shape[0], :t.shape[1], :t.shape[2], :t.shape[3]].copy())
    return ops.sum_all(_hadamard(t, w))


def _hadamard(a, w):
    return ops.record("mul_const", (a,), Tensor(a.data * w.data), lambda g: (g * w.data,))


def test_grad_check_skips_kinks():
    x = Tensor(np.array([[[[1e-7, -1e-7]]]]), True)
    rep = ops.grad_check(lambda: ops.sum_all(ops.relu(x)), {"x": x}, h=1e-5)
    assert rep.skipped_kinks == 2 and rep.checked == 0


def test_grad_check_flags_wrong_gradient():
    x = Tensor(np.array([[[[0.3, 0.8]]]]), True)
    bad = lambda: ops.record("bad", (x,), Tensor(np.asarray((x.data ** 2).sum())),
                             lambda g: (g * x.data,))  # should be 2x
    rep = ops.grad_check(bad, {"x": x})
    assert not rep.passed and rep.max_rel_error > 0.3


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_rel_error_symmetric_and_bounded(a, b):
    e = ops.rel_error(a, b)
    assert e == ops.rel_error(b, a)
    assert 0 <= e <= 2
