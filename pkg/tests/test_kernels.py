import numpy as np
import pytest
from hypothesis import given, strategies as st

from plnet import kernels, _kernels_py as ref

BACKENDS = kernels.backends()
needs_cython = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


def arr(seed, shape, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


shapes = st.tuples(st.integers(1, 2), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))
even = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 4).map(lambda v: 2 * v),
                 st.integers(1, 4).map(lambda v: 2 * v))


def test_backend_name_matches_module():
    assert kernels.BACKEND in BACKENDS


def test_im2col_against_loop():
    x = arr(0, (1, 2, 3, 4))
    cols = ref.im2col(x, 3).reshape(1, 2, 3, 3, 3, 4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for c in range(2):
        for u in range(3):
            for v in range(3):
                for i in range(3):
                    for j in range(4):
                        assert cols[0, c, u, v, i, j] == xp[0, c, i + u, j + v]


@given(shapes, st.sampled_from([1, 3]), st.integers(0, 10**6))
def test_col2im_is_adjoint_of_im2col(shape, k, seed):
    x = arr(seed, shape)
    cols = ref.im2col(x, k)
    r = arr(seed + 1, cols.shape)
    lhs = np.sum(cols * r)
    rhs = np.sum(x * ref.col2im(r, shape[1], shape[2], shape[3], k))
    assert np.isclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@given(even, st.integers(0, 10**6))
def test_upsample_backward_is_adjoint(shape, seed):
    x = arr(seed, shape)
    up = ref.upsample2_forward(x)
    r = arr(seed + 1, up.shape)
    assert np.isclose(np.sum(up * r), np.sum(x * ref.upsample2_backward(r)), rtol=1e-10, atol=1e-10)


def test_upsample_constant_stays_constant():
    x = np.full((1, 1, 3, 5), 2.5)
    assert np.allclose(ref.upsample2_forward(x), 2.5)


def test_maxpool_tie_picks_first():
    x = np.ones((1, 1, 2, 2))
    out, arg = ref.maxpool2_forward(x)
    assert out[0, 0, 0, 0] == 1 and arg[0, 0, 0, 0] == 0


@needs_cython
@given(even, st.sampled_from([np.float32, np.float64]), st.integers(0, 10**6))
def test_backends_agree(shape, dtype, seed):
    cy = BACKENDS["cython"]
    x = arr(seed, shape, dtype)
    for k in (1, 3):
        np.testing.assert_array_equal(cy.im2col(x, k), ref.im2col(x, k))
        cols = ref.im2col(x, k)
        np.testing.assert_allclose(cy.col2im(cols, shape[1], shape[2], shape[3], k),
                                   ref.col2im(cols, shape[1], shape[2], shape[3], k), rtol=1e-5, atol=1e-5)
    o1, a1 = cy.maxpool2_forward(x)
    o2, a2 = ref.maxpool2_forward(x)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(cy.maxpool2_backward(o1, a1), ref.maxpool2_backward(o2, a2))
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(cy.upsample2_forward(x), ref.upsample2_forward(x), rtol=tol, atol=tol)
    up = ref.upsample2_forward(x)
    np.testing.assert_allclose(cy.upsample2_backward(up), ref.upsample2_backward(up), rtol=tol, atol=tol)


@needs_cython
@given(shapes, st.integers(1, 4), st.integers(0, 10**6))
def test_direct_conv_matches_gemm(shape, out_ch, seed):
    cy = BACKENDS["cython"]
    x = arr(seed, shape)
    w = arr(seed + 1, (out_ch, shape[1], 3, 3))
    b = arr(seed + 2, (out_ch,))
    g = arr(seed + 3, (shape[0], out_ch, shape[2], shape[3]))
    np.testing.assert_allclose(cy.conv3x3_forward(x, w, b), ref.conv3x3_forward(x, w, b), atol=1e-10)
    np.testing.assert_allclose(cy.conv3x3_backward_input(g, w), ref.conv3x3_backward_input(g, w), atol=1e-10)
    np.testing.assert_allclose(cy.conv3x3_backward_weight(x, g), ref.conv3x3_backward_weight(x, g), atol=1e-10)
