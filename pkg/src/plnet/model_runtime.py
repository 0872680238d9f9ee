"""Forward execution of PL-Net / U-Net graphs.

The runtime walks the same wiring as :mod:`plnet.arch_graph` but evaluates
it with real tensors. When ``Model.shape_log`` is a dict, every evaluated
call stores its output shape there under the graph's call name, so the
symbolic and observed shapes can be compared.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import nn_ops as ops
from .arch_graph import ComputeGraph, NetworkConfig, build
from .nn_ops import BatchNormParams, ConfigurationError, ConvParams, Tensor


@dataclass
class StepContext:
    """State of one encoder-decoder pass."""
    pass_index: int
    stage_index: int
    x_in: dict = field(default_factory=dict)  # level -> encoder input
    enc: dict = field(default_factory=dict)  # level -> encoder output
    dec: dict = field(default_factory=dict)  # level -> decoder output (bottom: encoder output)
    prev: dict = field(default_factory=dict)  # dec of pass i-1
    carried: dict = field(default_factory=dict)  # dec of the previous stage's last pass


@dataclass
class StageOutputs:
    logits: list
    probs: list | None
    fused: Tensor


class Model:
    """Parameters + graph. Parameters are shared objects keyed by node path."""

    def __init__(self, graph: ComputeGraph, seed: int = 0, dtype=np.float32):
        self.graph = graph
        self.config: NetworkConfig = graph.config
        self.dtype = np.dtype(dtype)
        self.modules: dict = {}
        for path, n in graph.nodes.items():
            if n.kind == "conv":
                self.modules[path] = ConvParams.create(n.in_ch, n.out_ch, n.kernel, seed=seed,
                                                       name=path, dtype=dtype)
            else:
                self.modules[path] = BatchNormParams.create(n.out_ch, name=path, dtype=dtype)
        if self.config.bn_stats == "per_site":
            sites = defaultdict(list)
            for c in graph.calls:
                if c.op == "bn":
                    sites[c.node].append(f"s{c.stage}/p{c.pass_}")
            for path, names in sites.items():
                if len(names) > 1:
                    for site in names:
                        self.modules[path].add_site(site)
        self.shape_log: dict | None = None
        self.mode = "train"

    @classmethod
    def from_config(cls, cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return cls(build(cfg), seed=seed, dtype=dtype)

    # -- parameter views --------------------------------------------------

    def parameters(self) -> dict:
        """Learnable tensors, ``"<node path>.<field>" -> Tensor``, in graph order."""
        return ops.param_tensors(self.modules.values())

    def buffers(self) -> dict:
        out = {}
        for path, m in self.modules.items():
            if not isinstance(m, BatchNormParams):
                continue
            if not m.sites:
                out[f"{path}.running_mean"] = m.running_mean
                out[f"{path}.running_var"] = m.running_var
            for site, (mean, var) in m.sites.items():
                out[f"{path}.running_mean@{site}"] = mean
                out[f"{path}.running_var@{site}"] = var
        return out

    def state_arrays(self) -> dict:
        """Every array needed to reproduce the model (parameters + BN statistics)."""
        out = {k: t.data for k, t in self.parameters().items()}
        out.update(self.buffers())
        return dict(sorted(out.items()))

    def stage_parameters(self, stages) -> dict:
        stages = set(stages)
        keep = {p for p, n in self.graph.nodes.items() if n.stages & stages}
        return {k: t for k, t in self.parameters().items() if k.rsplit(".", 1)[0] in keep}

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "infer"):
            raise ValueError(mode)
        self.mode = mode
        for m in self.modules.values():
            if isinstance(m, BatchNormParams):
                m.mode = mode

    def astype(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        for m in self.modules.values():
            for t in m.tensors().values():
                t.data = t.data.astype(dtype)
            if isinstance(m, BatchNormParams):
                m.running_mean = m.running_mean.astype(dtype)
                m.running_var = m.running_var.astype(dtype)
                m.sites = {k: (a.astype(dtype), b.astype(dtype)) for k, (a, b) in m.sites.items()}
        return self

    # -- building blocks --------------------------------------------------

    def _log(self, name: str, t: Tensor) -> Tensor:
        t.name = name
        if self.shape_log is not None:
            self.shape_log[name] = t.shape
        return t

    def cbr(self, prefix: str, base: str, x: Tensor) -> Tensor:
        h = self._log(f"{prefix}/{base}/conv", ops.conv2d(x, self.modules[f"{base}/conv"]))
        h = self._log(f"{prefix}/{base}/bn", ops.batchnorm(h, self.modules[f"{base}/bn"], prefix))
        return self._log(f"{prefix}/{base}/relu", ops.relu(h))

    def head(self, stage: int, x: Tensor) -> Tensor:
        return self._log(f"s{stage}/logits", ops.conv2d(x, self.modules[f"head/stage{stage}/conv"]))

    # -- forward ----------------------------------------------------------

    def _check_input(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ConfigurationError(f"input shape {x.shape} needs {cfg.in_channels} channels")
        if x.shape[2] % 2 ** (cfg.depth - 1) or x.shape[3] % 2 ** (cfg.depth - 1):
            raise ConfigurationError(f"input {x.shape[2]}x{x.shape[3]} not divisible by 2^{cfg.depth - 1}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), x.requires_grad)
        return self._log("input", x)

    def forward_stage(self, stage: int, x: Tensor, carried: dict | None = None,
                      passes: int | None = None) -> tuple:
        """Run ``passes`` (default ``steps_n``) encoder-decoder passes of one stage.

        Returns ``(logits, features)`` where ``features`` maps level to the
        last pass's decoder output (the bottom level maps to its encoder
        output). With ``passes=0`` the input is returned unchanged.
        """
        cfg = self.config
        if cfg.variant != "plnet":
            raise ConfigurationError("forward_stage is PL-Net only")
        if (carried is not None) != (stage > 1):
            raise ConfigurationError("carried features are required exactly for stages > 1")
        passes = cfg.steps_n if passes is None else passes
        if passes == 0:
            return x, {}
        if passes > cfg.steps_n:
            raise ConfigurationError(f"graph has {cfg.steps_n} steps, asked for {passes}")
        depth = cfg.stage_depths[stage - 1]
        prev: dict = {}
        y = None
        for i in range(1, passes + 1):
            ctx = StepContext(i, stage, prev=prev, carried=carried or {})
            p = f"s{stage}/p{i}"
            for lv in range(1, depth + 1):
                if lv == 1:
                    ctx.x_in[1] = x
                else:
                    ctx.x_in[lv] = self._log(f"{p}/enc/L{lv}/pool", ops.maxpool2(ctx.enc[lv - 1]))
                f_bsc = fuse_backward_skip(self, ctx, lv)
                h = self.cbr(p, f"enc/L{lv}/step{i}", f_bsc)
                ctx.enc[lv] = self.cbr(p, f"enc/L{lv}/shared", h)
            ctx.dec[depth] = y = ctx.enc[depth]
            for lv in range(depth - 1, 0, -1):
                u = self._log(f"{p}/dec/L{lv}/upsample", ops.upsample2(y))
                u = self.cbr(p, f"dec/L{lv}/up", u)
                f_fsc = self._log(f"{p}/dec/L{lv}/fsc_concat", fuse_forward_skip(ctx.enc[lv], u))
                y = self.cbr(p, f"dec/L{lv}/step{i}", f_fsc)
                ctx.dec[lv] = y = self.cbr(p, f"dec/L{lv}/shared", y)
            prev = ctx.dec
        return self.head(stage, y), prev

    def _forward_unet(self, x: Tensor) -> list:
        depth = self.config.depth
        p = "s1/p1"
        enc = {}
        h = x
        for lv in range(1, depth + 1):
            if lv > 1:
                h = self._log(f"{p}/enc/L{lv}/pool", ops.maxpool2(enc[lv - 1]))
            h = self.cbr(p, f"enc/L{lv}/conv1", h)
            enc[lv] = self.cbr(p, f"enc/L{lv}/conv2", h)
        y = enc[depth]
        for lv in range(depth - 1, 0, -1):
            u = self._log(f"{p}/dec/L{lv}/upsample", ops.upsample2(y))
            u = self.cbr(p, f"dec/L{lv}/up", u)
            f = self._log(f"{p}/dec/L{lv}/fsc_concat", fuse_forward_skip(enc[lv], u))
            y = self.cbr(p, f"dec/L{lv}/conv1", f)
            y = self.cbr(p, f"dec/L{lv}/conv2", y)
        return [self.head(1, y)]

    def stage_logits(self, x: Tensor, n_stages: int | None = None) -> list:
        x = self._check_input(x)
        if self.config.variant == "unet":
            return self._forward_unet(x)
        n_stages = n_stages or self.config.n_stages
        logits, carried = [], None
        for s in range(1, n_stages + 1):
            logit, feats = self.forward_stage(s, x, carried)
            logits.append(logit)
            carried = feats
        return logits

    def forward(self, x: Tensor, n_stages: int | None = None, stage_probs: bool = True) -> StageOutputs:
        """Training forward: per-stage logits, per-stage sigmoids and fused output."""
        logits = self.stage_logits(x, n_stages)
        probs = [ops.sigmoid(lg) for lg in logits] if stage_probs else None
        return StageOutputs(logits, probs, fuse_stage_outputs(logits, log=self._log))

    __call__ = forward


def fuse_forward_skip(enc_feature: Tensor, up_feature: Tensor) -> Tensor:
    """Encoder-to-decoder skip: ``[encoder feature, upsampled decoder feature]``."""
    if enc_feature.shape[2:] != up_feature.shape[2:]:
        raise ConfigurationError(
            f"forward skip mismatch: {enc_feature.name} {enc_feature.shape} vs "
            f"{up_feature.name} {up_feature.shape}")
    return ops.concat_channels([enc_feature, up_feature])


def fuse_backward_skip(model: Model, ctx: StepContext, level: int) -> Tensor:
    """Input of the step conv at ``level``.

    First pass of the first stage duplicates the encoder input. Later passes
    project the previous pass's feature at this level; the first pass of a
    later stage projects the previous stage's carried feature instead.
    """
    x_in = ctx.x_in[level]
    if ctx.pass_index > 1:
        if level not in ctx.prev:
            raise RuntimeError(f"pass {ctx.pass_index} has no prior feature at level {level}")
        src = ctx.prev[level]
    else:
        src = ctx.carried.get(level)
    p = f"s{ctx.stage_index}/p{ctx.pass_index}"
    if src is None:
        parts = [x_in, x_in]
    else:
        parts = [model.cbr(p, f"enc/L{level}/bsc", src), x_in]
    return model._log(f"{p}/enc/L{level}/bsc_concat", ops.concat_channels(parts))


def fuse_stage_outputs(logits: list, log=None) -> Tensor:
    """Fused probability: sigmoid of the equal-weight sum of stage logits."""
    if not logits:
        raise ValueError("no stage logits")
    total = logits[0]
    for lg in logits[1:]:
        if lg.shape != total.shape:
            raise ConfigurationError(f"stage logits differ in shape: {total.shape} vs {lg.shape}")
    if len(logits) > 1:
        total = ops.add(total, logits[1])
        for lg in logits[2:]:
            total = ops.add(total, lg)
        if log:
            log("fuse/sum", total)
    out = ops.sigmoid(total)
    return log("fuse/sigmoid", out) if log else out


def predict(model: Model, image, mode: str = "fused") -> np.ndarray:
    """Inference probability map, shape ``(batch, 1, H, W)``.

    BN runs on its running statistics and only the fused sigmoid (or the last
    stage's sigmoid in ``final_stage`` mode) is evaluated.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    prev_mode = model.mode
    model.set_mode("infer")
    try:
        logits = model.stage_logits(x)
        if mode == "fused":
            out = fuse_stage_outputs(logits)
        elif mode == "final_stage":
            out = ops.sigmoid(logits[-1])
        else:
            raise ValueError(f"unknown predict mode {mode!r}")
    finally:
        model.set_mode(prev_mode)
    return out.data


def to_uint8_probability(p: np.ndarray) -> np.ndarray:
    return np.floor(255.0 * np.asarray(p, dtype=np.float64) + 0.5).astype(np.uint8)


def to_binary_mask(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(np.asarray(p) >= threshold, 255, 0).astype(np.uint8)


def save_prediction(p: np.ndarray, prob_path, mask_path) -> None:
    """Write one (H, W) probability map as an 8-bit PNG plus its {0,255} mask."""
    from PIL import Image

    p = np.asarray(p).squeeze()
    Image.fromarray(to_uint8_probability(p), mode="L").save(prob_path)
    Image.fromarray(to_binary_mask(p), mode="L").save(mask_path)
