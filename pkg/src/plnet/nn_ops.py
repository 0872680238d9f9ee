"""Differentiable numpy primitives with an explicit gradient tape.

Every op takes and returns :class:`Tensor` values. When a :class:`Tape` is
active, each op appends one record holding a backward closure; calling
:meth:`Tape.gradient` replays those records in reverse. Without an active tape
the ops are plain forward evaluations.

Feature maps are NCHW. Weights are stored as ``(out, in, k, k)``.
"""
from __future__ import annotations

import hashlib
import os
import threading
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels

DEBUG = os.environ.get("PLNET_DEBUG", "") not in ("", "0")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ConfigurationError(ValueError):
    """Shape/channel/wiring mismatch detected while building or running a graph."""


class GradCheckError(RuntimeError):
    """Raised when an analytic or numeric gradient is not finite."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"


def check_feature_map(t: Tensor, where: str = "") -> None:
    if t.data.ndim != 4 or min(t.shape) < 1:
        raise ConfigurationError(f"{where or t.name}: expected a non-empty rank-4 tensor, got {t.shape}")


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable | None


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered op record.

    With ``grad=False`` the tape only traces op names (useful for checking
    which ops an inference pass evaluated) and keeps no closures.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.records: list[Record] = []
        self.visits: list[int] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def op_counts(self) -> Counter:
        return Counter(r.op for r in self.records)

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list:
        if not self.grad:
            raise RuntimeError("gradient() on a trace-only tape")
        if loss.data.size != 1:
            raise ValueError("gradient() needs a scalar loss")
        keep = {id(t) for t in wrt}
        grads = {id(loss): np.ones_like(loss.data)}
        self.visits = []
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            key = id(rec.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None or rec.backward is None:
                continue
            self.visits.append(idx)
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def record(op: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable | None) -> Tensor:
    """Register ``out`` as produced by ``op``. Custom ops call this directly."""
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    tape = current_tape()
    if tape is None:
        return out
    needs = tape.grad and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    tape.records.append(Record(op, tuple(inputs), out, backward if needs else None))
    return out


def needs_grad(*inputs: Tensor) -> bool:
    tape = current_tape()
    return tape is not None and tape.grad and any(t.requires_grad for t in inputs)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _path_rng(seed: int, path: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(path.encode())])


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    name: str = "conv"

    @classmethod
    def create(cls, in_ch: int, out_ch: int, k: int, *, seed: int = 0, name: str = "conv",
               dtype=np.float32) -> "ConvParams":
        if k not in (1, 3):
            raise ConfigurationError(f"{name}: kernel size {k} unsupported (1 or 3)")
        rng = _path_rng(seed, name)
        std = np.sqrt(2.0 / (in_ch * k * k))
        w = (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)
        b = np.zeros(out_ch, dtype=dtype)
        return cls(Tensor(w, True, name + ".weight"), Tensor(b, True, name + ".bias"), name)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @staticmethod
    def count(in_ch: int, out_ch: int, k: int) -> int:
        return out_ch * in_ch * k * k + out_ch

    def tensors(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "train"
    name: str = "bn"
    # call site -> (running_mean, running_var) for nodes reused at several
    # sites whose inputs have different statistics
    sites: dict = field(default_factory=dict)

    @classmethod
    def create(cls, channels: int, *, name: str = "bn", dtype=np.float32) -> "BatchNormParams":
        return cls(
            Tensor(np.ones(channels, dtype), True, name + ".gamma"),
            Tensor(np.zeros(channels, dtype), True, name + ".beta"),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
            name=name,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @staticmethod
    def count(channels: int) -> int:
        return 2 * channels

    def tensors(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def add_site(self, site: str) -> None:
        if site not in self.sites:
            self.sites[site] = (self.running_mean.copy(), self.running_var.copy())

    def stats(self, site: str | None = None) -> tuple:
        if site is None or not self.sites:
            return self.running_mean, self.running_var
        try:
            return self.sites[site]
        except KeyError:
            raise ConfigurationError(f"{self.name}: no running statistics for site {site!r}") from None


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Stride-1 convolution with "same" zero padding (k = 1 or 3)."""
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ConfigurationError(
            f"{p.name}: input has {c} channels, weights expect {p.in_channels}")
    k = p.kernel
    W = p.weight.data
    xd = np.ascontiguousarray(x.data)
    if kernels.prefer_direct(c, W.shape[0], k, h * w):
        out = kernels.conv3x3_forward(xd, W, p.bias.data)

        def backward(g):
            g = np.ascontiguousarray(g)
            dw = kernels.conv3x3_backward_weight(xd, g)
            return kernels.conv3x3_backward_input(g, W), dw, g.sum(axis=(0, 2, 3))

        return record("conv2d", (x, p.weight, p.bias), Tensor(out), backward)

    w2 = W.reshape(W.shape[0], -1)
    cols = xd.reshape(n, c, h * w) if k == 1 else kernels.im2col(xd, k)
    out = np.matmul(w2, cols)
    out += p.bias.data[:, None]
    out = out.reshape(n, w2.shape[0], h, w)

    def backward(g):
        g3 = g.reshape(n, w2.shape[0], h * w)
        dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(W.shape)
        db = g3.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, g3)
        dx = dcols.reshape(n, c, h, w) if k == 1 else kernels.col2im(dcols, c, h, w, k)
        return dx, dw, db

    return record("conv2d", (x, p.weight, p.bias), Tensor(out), backward)


def batchnorm(x: Tensor, p: BatchNormParams, site: str | None = None) -> Tensor:
    """Batch norm over (N, H, W). ``site`` picks per-site running statistics
    when the node has them; gamma and beta are always shared."""
    n, c, h, w = x.shape
    if c != p.channels:
        raise ConfigurationError(f"{p.name}: input has {c} channels, expected {p.channels}")
    gamma = p.gamma.data[None, :, None, None]
    beta = p.beta.data[None, :, None, None]
    if p.mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = p.momentum
        rm, rv = p.stats(site)
        rm[...] = m * rm + (1 - m) * mean
        rv[...] = m * rv + (1 - m) * var
    elif p.mode == "infer":
        mean, var = p.stats(site)
    else:
        raise ValueError(f"{p.name}: unknown batchnorm mode {p.mode!r}")
    invstd = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xhat = (x.data - mean.astype(x.dtype)[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma * xhat + beta
    training = p.mode == "train"

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if not training:
            return dxhat * invstd[None, :, None, None], dgamma, dbeta
        M = n * h * w
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        dx = (invstd[None, :, None, None] / M) * (M * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return record("batchnorm", (x, p.gamma, p.beta), Tensor(out), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    if getattr(_state, "kinks", None) is not None:
        _kink_note("relu_mask", x.data > 0)
    return record("relu", (x,), Tensor(out), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),))


def maxpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"{x.name or 'maxpool2'}: odd spatial size {h}x{w}")
    out, arg = kernels.maxpool2_forward(np.ascontiguousarray(x.data))
    _kink_note("maxpool_arg", arg)

    def backward(g):
        return (kernels.maxpool2_backward(np.ascontiguousarray(g), arg),)

    return record("maxpool2", (x,), Tensor(out), backward)


def upsample2(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling with half-pixel centres and clamped edges."""
    out = kernels.upsample2_forward(np.ascontiguousarray(x.data))

    def backward(g):
        return (kernels.upsample2_backward(np.ascontiguousarray(g)),)

    return record("upsample2", (x,), Tensor(out), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ConfigurationError("concat of zero tensors")
    ref = xs[0]
    for t in xs[1:]:
        if (t.shape[0], *t.shape[2:]) != (ref.shape[0], *ref.shape[2:]):
            raise ConfigurationError(
                f"concat mismatch: {ref.name or '?'} {ref.shape} vs {t.name or '?'} {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record("concat", tuple(xs), Tensor(out), backward)


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return record("sigmoid", (x,), Tensor(out), lambda g: (g * out * (1 - out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record("add", (a, b), Tensor(a.data + b.data), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", (a,), Tensor(a.data * c), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", (a,), Tensor(np.asarray(a.data.sum())),
                  lambda g: (np.broadcast_to(g, shape).astype(a.dtype),))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class _KinkTracker:
    def __init__(self):
        self.h = hashlib.blake2b(digest_size=16)

    def note(self, arr):
        self.h.update(np.ascontiguousarray(arr).tobytes())

    def digest(self):
        return self.h.digest()


def _kink_note(tag, arr):
    tracker = getattr(_state, "kinks", None)
    if tracker is not None and tag in ("relu_mask", "maxpool_arg"):
        tracker.note(arr)


def _eval_tracked(f):
    _state.kinks = _KinkTracker()
    try:
        val = float(np.asarray(f().data))
    finally:
        tracker, _state.kinks = _state.kinks, None
    return val, tracker.digest()


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple | None
    checked: int
    skipped_kinks: int
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], tol: float = 1e-4,
               n_samples: int = 20, seed: int = 0, h: float = 1e-5,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Up to ``n_samples`` coordinates per parameter are drawn at random. The
    step is ``h * max(1, |w|)``. Coordinates whose +h and -h evaluations took
    different ReLU/max-pool branches are skipped, since a finite difference
    across a kink says nothing about the derivative on either side.
    """
    names = list(params)
    with Tape() as tape:
        loss = f()
    analytic = tape.gradient(loss, [params[k] for k in names])
    rng = np.random.default_rng(seed)
    worst, max_err, checked, kinks = None, 0.0, 0, 0
    errors = {}
    for name, grad in zip(names, analytic):
        t = params[name]
        if not np.all(np.isfinite(grad)):
            bad = np.unravel_index(np.argmax(~np.isfinite(grad)), grad.shape)
            raise GradCheckError(f"non-finite analytic gradient at {name}{list(bad)}")
        size = t.data.size
        picks = np.arange(size) if size <= n_samples else rng.choice(size, n_samples, replace=False)
        flat = t.data.reshape(-1)
        name_err = 0.0
        for i in picks:
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            fp, kp = _eval_tracked(f)
            flat[i] = orig - step
            fm, km = _eval_tracked(f)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            coord = (name, tuple(int(v) for v in np.unravel_index(i, t.shape)))
            if not np.isfinite(num):
                raise GradCheckError(f"non-finite numeric gradient at {coord}")
            if kp != km:
                kinks += 1
                continue
            err = rel_error(float(grad.reshape(-1)[i]), num, floor)
            checked += 1
            name_err = max(name_err, err)
            if err >= max_err:
                max_err, worst = err, coord
        errors[name] = name_err
    return GradCheckReport(max_err, worst, checked, kinks, tol, errors)


def param_tensors(objs: Iterable) -> dict:
    """Flatten ConvParams/BatchNormParams objects into ``name -> Tensor``."""
    out = {}
    for p in objs:
        for k, t in p.tensors().items():
            out[f"{p.name}.{k}"] = t
    return out
