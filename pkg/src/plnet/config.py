"""Run configuration: one flat ``key = value`` file, overridable from flags.

Lines starting with ``#`` are comments. Booleans accept true/false/1/0/yes/no,
tuples are comma separated and ``none`` clears an optional value. Unknown keys
are an error. ``RunConfig.to_text()`` writes every key, so a saved echo
reproduces the run exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .arch_graph import NetworkConfig
from .training import AugmentConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # network
    input_size: int = 224
    in_channels: int = 3
    base_channels: int = 32
    ocs: float = 1.0
    steps: int = 2
    stage_depths: tuple = (4, 5)
    variant: str = "plnet"
    up_kernel: int | None = None
    proj_kernel: int = 1
    bn_stats: str = "per_site"
    # training
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 200
    patience: int = 20
    min_delta: float = 1e-4
    epl: bool = True
    dice_smooth: float = 1.0
    phase_a_epochs: int | None = None
    fused_loss_weight: float = 0.0
    target_val_iou: float | None = None
    zero_late_heads: bool = True
    # augmentation
    augment: bool = True
    aug_rotation_deg: float = 25.0
    aug_shift_frac: float = 0.15
    aug_hflip: bool = True
    aug_vflip: bool = True
    aug_p: float = 0.5
    # data and run
    data: str | None = None
    split_file: str | None = None
    fold: int = 0
    k: int = 5
    gray_world: bool = True
    out: str = "runs/default"
    seed: int = 0
    threads: int = 1

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            input_size=self.input_size, in_channels=self.in_channels,
            base_channels=self.base_channels, ocs=self.ocs, steps_n=self.steps,
            stage_depths=tuple(self.stage_depths), epl_enabled=self.epl, variant=self.variant,
            up_kernel=self.up_kernel, proj_kernel=self.proj_kernel, bn_stats=self.bn_stats,
        ).validate()

    def train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_eps=self.adam_eps, batch_size=self.batch_size,
            max_epochs=self.epochs, early_stop_patience=self.patience, min_delta=self.min_delta,
            seed=self.seed, epl_enabled=self.epl, dice_smooth=self.dice_smooth,
            phase_a_max_epochs=self.phase_a_epochs, fused_loss_weight=self.fused_loss_weight,
            target_val_iou=self.target_val_iou, zero_late_heads=self.zero_late_heads,
        ).validate()

    def augmentation(self) -> AugmentConfig:
        return AugmentConfig(self.aug_rotation_deg, self.aug_shift_frac, self.aug_hflip,
                             self.aug_vflip, self.aug_p, self.augment)

    def update(self, **kv) -> "RunConfig":
        unknown = set(kv) - _FIELDS.keys()
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **{k: parse_value(k, v) if isinstance(v, str) else v
                                for k, v in kv.items()})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


_FIELDS = {f.name: f for f in fields(RunConfig)}
_KIND = {f.name: (type(f.default) if f.default is not None else None) for f in fields(RunConfig)}
_KIND.update(up_kernel=int, phase_a_epochs=int, target_val_iou=float, data=str, split_file=str)
_OPTIONAL = {"up_kernel", "phase_a_epochs", "target_val_iou", "data", "split_file"}


def parse_value(key: str, raw: str):
    raw = raw.strip()
    kind = _KIND[key]
    if key in _OPTIONAL and raw.lower() in ("none", ""):
        return None
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = parse_value(key, val)
    return out


def load(path=None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.update(**parse_text(Path(path).read_text(), str(path)))
    return cfg.update(**{k: v for k, v in overrides.items() if v is not None})
