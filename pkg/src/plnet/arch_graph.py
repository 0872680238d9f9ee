"""Network description: configuration, parameterised nodes, unrolled wiring.

A :class:`ComputeGraph` has two layers:

``nodes``
    one entry per parameter-owning module (a conv or a batch-norm), keyed by
    path such as ``enc/L3/step2/conv``. A node used by several stages or
    passes appears once; its ``stages`` set says who uses it.
``calls``
    the fully unrolled, acyclic list of operations in execution order, one
    per (stage, pass, op). Calls reference nodes by path.

PL-Net level layout (C_l = channels at level l, C_0 = image channels)::

    encoder level l, pass i:
        bsc   = [proj_l(feature_l from pass i-1 or previous stage), x_in]
                or [x_in, x_in] when no such feature exists
        h     = cbr(enc/Ll/step{i}, bsc)     3x3, 2*C_{l-1} -> C_l
        h     = cbr(enc/Ll/shared, h)        3x3, C_l -> C_l
    decoder level l, pass i:
        up    = cbr(dec/Ll/up, upsample2(y)) k x k, C_{l+1} -> C_l
        fsc   = [h_l, up]
        y     = cbr(dec/Ll/step{i}, fsc)     3x3, 2*C_l -> C_l
        y     = cbr(dec/Ll/shared, y)        3x3, C_l -> C_l

where ``cbr`` is conv -> batch-norm -> ReLU and ``proj_l`` is the
``enc/Ll/bsc`` block (1x1, C_l -> C_{l-1}). Each stage ends in a 1x1 head.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .nn_ops import BatchNormParams, ConfigurationError, ConvParams

VARIANTS = ("plnet", "unet")


def round_half_up(v: float) -> int:
    return max(1, int(math.floor(v + 0.5)))


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 224
    in_channels: int = 3
    out_channels: int = 1
    base_channels: int = 32
    ocs: float = 1.0
    steps_n: int = 2
    stage_depths: tuple = (4, 5)
    epl_enabled: bool = True
    variant: str = "plnet"
    # kernel of the conv that follows each bilinear upsampling; None picks
    # 3 for plnet and 1 for unet
    up_kernel: int | None = None
    proj_kernel: int = 1
    # "per_site": a BN node reused by several passes/stages keeps running
    # statistics per call site; "shared": one set for every site
    bn_stats: str = "per_site"

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))

    @property
    def depth(self) -> int:
        return max(self.stage_depths)

    @property
    def n_stages(self) -> int:
        return len(self.stage_depths) if self.variant == "plnet" else 1

    @property
    def resolved_up_kernel(self) -> int:
        if self.up_kernel is not None:
            return self.up_kernel
        return 3 if self.variant == "plnet" else 1

    def channels(self, level: int) -> int:
        """Channel count at encoder level ``level`` (1-indexed); level 0 is the image."""
        if level == 0:
            return self.in_channels
        base = self.base_channels * (2 if self.variant == "unet" else 1)
        return round_half_up(base * self.ocs * 2 ** (level - 1))

    def validate(self) -> "NetworkConfig":
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.ocs > 0:
            raise ConfigurationError(f"ocs must be positive, got {self.ocs}")
        if self.steps_n < 1:
            raise ConfigurationError(f"steps_n must be >= 1, got {self.steps_n}")
        d = self.stage_depths
        if not d or any(x < 2 for x in d) or any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigurationError(f"stage_depths must be strictly increasing and >= 2, got {list(d)}")
        for name in ("input_size", "in_channels", "out_channels", "base_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.input_size % 2 ** (self.depth - 1):
            raise ConfigurationError(
                f"input_size {self.input_size} not divisible by 2^{self.depth - 1} (depth {self.depth})")
        if self.bn_stats not in ("per_site", "shared"):
            raise ConfigurationError(f"bn_stats must be 'per_site' or 'shared', got {self.bn_stats!r}")
        if self.resolved_up_kernel not in (1, 3) or self.proj_kernel not in (1, 3):
            raise ConfigurationError("up_kernel and proj_kernel must be 1 or 3")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Node:
    path: str
    kind: str  # "conv" | "bn"
    in_ch: int
    out_ch: int
    kernel: int
    size: int  # spatial side length at this node
    level: int
    step: int | None
    stages: set = field(default_factory=set)

    @property
    def param_count(self) -> int:
        if self.kind == "conv":
            return ConvParams.count(self.in_ch, self.out_ch, self.kernel)
        return BatchNormParams.count(self.out_ch)

    @property
    def group(self) -> str:
        """Level-group key, e.g. ``enc/L5``, ``dec/L4`` or ``head/stage2``."""
        return "/".join(self.path.split("/")[:2])


@dataclass
class Call:
    name: str
    op: str
    inputs: tuple
    node: str | None = None
    stage: int = 1
    pass_: int = 1
    channels: int | None = None  # declared output width (concat/upsample/pool bookkeeping)


@dataclass
class ComputeGraph:
    config: NetworkConfig
    nodes: dict
    calls: list
    heads: list  # call names of per-stage logit outputs
    output: str  # call name of the fused probability map

    def node(self, path: str) -> Node:
        return self.nodes[path]

    def call(self, name: str) -> Call:
        for c in self.calls:
            if c.name == name:
                return c
        raise KeyError(name)

    def edges(self) -> list:
        return [(src, c.name) for c in self.calls for src in c.inputs]

    def stage_nodes(self, stage: int) -> list:
        return [n for n in self.nodes.values() if stage in n.stages]


class _Builder:
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        self.nodes: dict = {}
        self.calls: list = []
        self.stage = 1
        self.pass_ = 1

    @property
    def prefix(self) -> str:
        return f"s{self.stage}/p{self.pass_}"

    def call(self, name, op, inputs, node=None, channels=None) -> str:
        self.calls.append(Call(name, op, tuple(inputs), node, self.stage, self.pass_, channels))
        return name

    def _node(self, path, kind, in_ch, out_ch, k, level, step):
        n = self.nodes.get(path)
        if n is None:
            size = self.cfg.input_size >> (level - 1)
            n = self.nodes[path] = Node(path, kind, in_ch, out_ch, k, size, level, step)
        n.stages.add(self.stage)
        return n

    def cbr(self, base, src, in_ch, out_ch, k, level, step=None) -> str:
        """conv -> batch-norm -> ReLU; returns the ReLU call name."""
        self._node(f"{base}/conv", "conv", in_ch, out_ch, k, level, step)
        self._node(f"{base}/bn", "bn", out_ch, out_ch, 1, level, step)
        p = f"{self.prefix}/{base}"
        c = self.call(f"{p}/conv", "conv", [src], f"{base}/conv")
        b = self.call(f"{p}/bn", "bn", [c], f"{base}/bn")
        return self.call(f"{p}/relu", "relu", [b], channels=out_ch)

    def head(self, src, in_ch) -> str:
        base = f"head/stage{self.stage}"
        self._node(f"{base}/conv", "conv", in_ch, self.cfg.out_channels, 1, 1, None)
        return self.call(f"s{self.stage}/logits", "conv", [src], f"{base}/conv")

    def fuse(self, heads) -> str:
        self.stage, self.pass_ = 0, 0
        src = heads[0]
        if len(heads) > 1:
            src = self.call("fuse/sum", "sum", heads, channels=self.cfg.out_channels)
        return self.call("fuse/sigmoid", "sigmoid", [src], channels=self.cfg.out_channels)


def _plnet_stage(b: _Builder, depth: int, carry: dict) -> tuple:
    cfg = b.cfg
    C = [cfg.channels(level) for level in range(depth + 1)]
    prev: dict = {}
    y = None
    for i in range(1, cfg.steps_n + 1):
        b.pass_ = i
        p = b.prefix
        enc: dict = {}
        x_in = "input"
        for lv in range(1, depth + 1):
            if lv > 1:
                x_in = b.call(f"{p}/enc/L{lv}/pool", "maxpool", [enc[lv - 1]], channels=C[lv - 1])
            src = prev.get(lv) if i > 1 else carry.get(lv)
            if src is not None:
                proj = b.cbr(f"enc/L{lv}/bsc", src, C[lv], C[lv - 1], cfg.proj_kernel, lv)
                parts = [proj, x_in]
            else:
                parts = [x_in, x_in]
            cat = b.call(f"{p}/enc/L{lv}/bsc_concat", "concat", parts, channels=2 * C[lv - 1])
            h = b.cbr(f"enc/L{lv}/step{i}", cat, 2 * C[lv - 1], C[lv], 3, lv, step=i)
            enc[lv] = b.cbr(f"enc/L{lv}/shared", h, C[lv], C[lv], 3, lv)
        feats = {depth: enc[depth]}
        y = enc[depth]
        for lv in range(depth - 1, 0, -1):
            u = b.call(f"{p}/dec/L{lv}/upsample", "upsample", [y], channels=C[lv + 1])
            u = b.cbr(f"dec/L{lv}/up", u, C[lv + 1], C[lv], cfg.resolved_up_kernel, lv)
            f = b.call(f"{p}/dec/L{lv}/fsc_concat", "concat", [enc[lv], u], channels=2 * C[lv])
            y = b.cbr(f"dec/L{lv}/step{i}", f, 2 * C[lv], C[lv], 3, lv, step=i)
            y = b.cbr(f"dec/L{lv}/shared", y, C[lv], C[lv], 3, lv)
            feats[lv] = y
        prev = feats
    return b.head(y, C[1]), prev


def build_plnet(config: NetworkConfig) -> ComputeGraph:
    cfg = config.validate()
    if cfg.variant != "plnet":
        raise ConfigurationError(f"build_plnet needs variant 'plnet', got {cfg.variant!r}")
    b = _Builder(cfg)
    b.calls.append(Call("input", "input", (), None, 0, 0, cfg.in_channels))
    heads, carry = [], {}
    for s, depth in enumerate(cfg.stage_depths, start=1):
        b.stage = s
        logit, carry = _plnet_stage(b, depth, carry)
        heads.append(logit)
    out = b.fuse(heads)
    return ComputeGraph(cfg, b.nodes, b.calls, heads, out)


def build_unet(config: NetworkConfig) -> ComputeGraph:
    cfg = config.validate()
    if cfg.variant != "unet":
        raise ConfigurationError(f"build_unet needs variant 'unet', got {cfg.variant!r}")
    depth = cfg.depth
    C = [cfg.channels(level) for level in range(depth + 1)]
    b = _Builder(cfg)
    b.calls.append(Call("input", "input", (), None, 0, 0, cfg.in_channels))
    enc = {}
    x = "input"
    for lv in range(1, depth + 1):
        if lv > 1:
            x = b.call(f"{b.prefix}/enc/L{lv}/pool", "maxpool", [enc[lv - 1]], channels=C[lv - 1])
        h = b.cbr(f"enc/L{lv}/conv1", x, C[lv - 1], C[lv], 3, lv)
        enc[lv] = b.cbr(f"enc/L{lv}/conv2", h, C[lv], C[lv], 3, lv)
    y = enc[depth]
    for lv in range(depth - 1, 0, -1):
        u = b.call(f"{b.prefix}/dec/L{lv}/upsample", "upsample", [y], channels=C[lv + 1])
        u = b.cbr(f"dec/L{lv}/up", u, C[lv + 1], C[lv], cfg.resolved_up_kernel, lv)
        f = b.call(f"{b.prefix}/dec/L{lv}/fsc_concat", "concat", [enc[lv], u], channels=2 * C[lv])
        y = b.cbr(f"dec/L{lv}/conv1", f, 2 * C[lv], C[lv], 3, lv)
        y = b.cbr(f"dec/L{lv}/conv2", y, C[lv], C[lv], 3, lv)
    head = b.head(y, C[1])
    out = b.fuse([head])
    return ComputeGraph(cfg, b.nodes, b.calls, [head], out)


def build(config: NetworkConfig) -> ComputeGraph:
    return build_plnet(config) if config.variant == "plnet" else build_unet(config)


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def propagate_shapes(graph: ComputeGraph, input_shape: tuple, strict: bool = True):
    """Annotate every call with its output shape ``(batch, C, H, W)``.

    Each mismatch is reported once, at the call where it appears; propagation
    then continues with the declared shape so one defect yields one report.
    Returns ``shapes`` (and ``errors`` when ``strict`` is false).
    """
    cfg = graph.config
    nodes = graph.nodes
    shapes: dict = {}
    errors: list = []
    producers = {c.name: c for c in graph.calls}

    for c in graph.calls:
        ins = [shapes[s] for s in c.inputs]
        if c.op == "input":
            out = tuple(input_shape)
            if len(out) != 4 or out[1] != cfg.in_channels:
                errors.append(f"input: shape {out} does not match {cfg.in_channels} input channels")
        elif c.op in ("conv", "bn"):
            n = nodes[c.node]
            (bs, ch, h, w), = ins
            if ch != n.in_ch:
                errors.append(f"{c.name}: node {n.path} expects {n.in_ch} channels, "
                              f"producer {c.inputs[0]} gives {ch}")
            out = (bs, n.out_ch, h, w)
        elif c.op in ("relu", "sigmoid"):
            out = ins[0]
        elif c.op == "maxpool":
            bs, ch, h, w = ins[0]
            if h % 2 or w % 2:
                errors.append(f"{c.name}: odd spatial size {h}x{w} from {c.inputs[0]}")
            out = (bs, ch, h // 2, w // 2)
        elif c.op == "upsample":
            bs, ch, h, w = ins[0]
            out = (bs, ch, 2 * h, 2 * w)
        elif c.op == "sum":
            out = ins[0]
            for src, s in zip(c.inputs[1:], ins[1:]):
                if s != out:
                    errors.append(f"{c.name}: {c.inputs[0]} {out} vs {src} {s}")
        elif c.op == "concat":
            ref = ins[0]
            for src, s in zip(c.inputs[1:], ins[1:]):
                if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
                    errors.append(f"{c.name}: spatial mismatch {c.inputs[0]} {ref} vs {src} {s}")
            width = sum(s[1] for s in ins)
            if c.channels is not None and width != c.channels:
                errors.append(f"{c.name}: inputs {list(c.inputs)} give {width} channels, "
                              f"declared {c.channels}")
                width = c.channels
            out = (ref[0], width, ref[2], ref[3])
        else:
            raise ConfigurationError(f"{c.name}: unknown op {c.op!r}")
        if c.op in ("maxpool", "upsample", "relu") and c.channels is not None and out[1] != c.channels:
            src = producers[c.inputs[0]].name
            errors.append(f"{c.name}: producer {src} gives {out[1]} channels, declared {c.channels}")
            out = (out[0], c.channels, out[2], out[3])
        shapes[c.name] = out
    if strict:
        if errors:
            raise ConfigurationError("shape propagation failed:\n  " + "\n  ".join(errors))
        return shapes
    return shapes, errors


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

@dataclass
class ParamReport:
    per_node: dict
    per_group: dict
    per_step: dict
    stage_exclusive: dict
    total: int

    @property
    def size_bytes(self) -> int:
        return 4 * self.total

    @property
    def size_mb(self) -> float:
        return self.size_bytes / 1e6

    def format(self) -> str:
        lines = [f"{'group':<14}{'params':>14}"]
        for g, v in self.per_group.items():
            lines.append(f"{g:<14}{v:>14,}")
        lines.append("")
        for k, v in self.per_step.items():
            lines.append(f"{k:<14}{v:>14,}")
        for s, v in self.stage_exclusive.items():
            lines.append(f"{'only stage' + str(s):<14}{v:>14,}")
        lines.append("")
        lines.append(f"{'total':<14}{self.total:>14,}  ({self.total / 1e6:.2f} M)")
        lines.append(f"{'size':<14}{self.size_mb:>14.1f} MB (4 bytes/param)")
        return "\n".join(lines)


def _group_key(path: str) -> tuple:
    side, rest = path.split("/")[0], path.split("/")[1]
    order = {"enc": 0, "dec": 1, "head": 2}[side]
    num = int("".join(ch for ch in rest if ch.isdigit()) or 0)
    return (order, num if side != "dec" else -num)


def count_parameters(graph: ComputeGraph) -> ParamReport:
    per_node = {p: n.param_count for p, n in graph.nodes.items()}
    per_group: dict = defaultdict(int)
    per_step: dict = defaultdict(int)
    excl: dict = defaultdict(int)
    for p, n in graph.nodes.items():
        per_group[n.group] += per_node[p]
        per_step[f"step{n.step}" if n.step else "shared"] += per_node[p]
        if len(n.stages) == 1:
            excl[next(iter(n.stages))] += per_node[p]
    groups = dict(sorted(per_group.items(), key=lambda kv: _group_key(kv[0])))
    steps = dict(sorted(per_step.items(), key=lambda kv: (kv[0] == "shared", kv[0])))
    return ParamReport(per_node, groups, steps, dict(sorted(excl.items())), sum(per_node.values()))


def describe(graph: ComputeGraph) -> str:
    """Text dump, one node per line: path, op, in/out shape, params, step, stages."""
    cfg = graph.config
    lines = [f"# {cfg.variant} " + " ".join(f"{k}={v}" for k, v in cfg.to_dict().items())]
    for n in graph.nodes.values():
        step = f"step{n.step}" if n.step else "-"
        stages = ",".join(str(s) for s in sorted(n.stages))
        lines.append(f"{n.path:<24} {n.kind:<5} ({n.in_ch},{n.size},{n.size}) -> "
                     f"({n.out_ch},{n.size},{n.size})  {n.param_count:>10}  {step:<6} stages={stages}")
    lines.append(f"# total {count_parameters(graph).total}")
    return "\n".join(lines) + "\n"
