"""Kernel backend selection.

The compiled Cython module is used when it was built and importable; the
numpy implementation is used otherwise, or when ``PLNET_PURE_PYTHON=1`` is
set in the environment. ``BACKEND`` names the active choice.
"""
import os

from . import _kernels_py

_FORCE_PY = os.environ.get("PLNET_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PY:
        raise ImportError("pure python backend requested")
    from . import _kernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
upsample2_forward = _impl.upsample2_forward
upsample2_backward = _impl.upsample2_backward
conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward_input = _impl.conv3x3_backward_input
conv3x3_backward_weight = _impl.conv3x3_backward_weight

# Direct 3x3 loops only beat im2col + BLAS on large planes whose channel
# count shrinks (decoder convs at full resolution). Measured on one AVX2
# core; see benchmarks/bench_kernels.py. The numpy backend never uses them.
DIRECT_MIN_PLANE = 64 * 64
DIRECT_MAX_CHANNEL_PRODUCT = 128


def prefer_direct(in_channels, out_channels, k, plane):
    return (BACKEND == "cython" and k == 3 and plane >= DIRECT_MIN_PLANE
            and in_channels >= 2 * out_channels
            and in_channels * out_channels <= DIRECT_MAX_CHANNEL_PRODUCT)


def backends():
    """Map of every importable backend name to its module."""
    out = {"numpy": _kernels_py}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
