"""Two-phase (stage 1, then joint) training with soft Dice losses and Adam.

Phase ``stage1`` runs and optimizes only the stage-1 sub-network. Phase
``joint`` optimizes every parameter on the mean of the per-stage losses.
With ``epl_enabled=False`` only the joint phase runs, from scratch.

History file format: one JSON object per line, keys in this order::

    epoch, phase, train_loss, stage_losses, val_loss, val_dice, val_iou,
    stage2_grad_norm, seconds
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import metrics
from . import nn_ops as ops
from .data_io import Dataset
from .model_runtime import Model
from .nn_ops import Tensor

log = logging.getLogger(__name__)

PHASES = ("stage1", "joint")
HISTORY_FIELDS = ("epoch", "phase", "train_loss", "stage_losses", "val_loss", "val_dice",
                  "val_iou", "stage2_grad_norm", "seconds")


class NumericError(RuntimeError):
    """Non-finite loss or gradient; carries the epoch for the diagnostic."""

    def __init__(self, msg: str, epoch: int | None = None):
        super().__init__(msg if epoch is None else f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 200
    early_stop_patience: int = 20
    min_delta: float = 1e-4
    seed: int = 0
    epl_enabled: bool = True
    dice_smooth: float = 1.0
    phase_a_max_epochs: int | None = None  # default: half of max_epochs
    fused_loss_weight: float = 0.0  # extra Dice term on the fused output; off by default
    target_val_iou: float | None = None  # joint phase stops once validation IoU reaches it
    zero_late_heads: bool = True  # joint phase starts with stage>=2 heads at zero

    def validate(self) -> "TrainConfig":
        for name in ("learning_rate", "adam_eps", "batch_size", "max_epochs",
                     "early_stop_patience", "dice_smooth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.early_stop_patience >= self.max_epochs:
            raise ValueError("early_stop_patience must be below max_epochs")
        if self.min_delta < 0 or self.fused_loss_weight < 0:
            raise ValueError("min_delta and fused_loss_weight must be >= 0")
        return self

    @property
    def phase_a_budget(self) -> int:
        if self.phase_a_max_epochs is not None:
            return self.phase_a_max_epochs
        return max(1, self.max_epochs // 2)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 25.0
    shift_frac: float = 0.15
    hflip: bool = True
    vflip: bool = True
    p: float = 0.5
    enabled: bool = True


# -- losses -----------------------------------------------------------------

def dice_loss(pred: Tensor, truth, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p g) + s) / (sum p + sum g + s) over the whole batch."""
    g = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if g.shape != pred.shape:
        raise ValueError(f"dice_loss: shape mismatch {pred.shape} vs {g.shape}")
    p = pred.data
    inter = float(np.sum(p * g, dtype=np.float64))
    num = 2.0 * inter + smooth
    den = float(np.sum(p, dtype=np.float64)) + float(np.sum(g, dtype=np.float64)) + smooth
    loss = np.asarray(1.0 - num / den, dtype=p.dtype)

    def backward(grad):
        d = -(2.0 * g * den - num) / (den * den)
        return (np.asarray(float(grad) * d, dtype=p.dtype),)

    return ops.record("dice_loss", (pred,), Tensor(loss), backward)


def total_loss(stage_probs: list, truth, phase: str = "joint", smooth: float = 1.0,
               fused: Tensor | None = None, fused_weight: float = 0.0) -> tuple:
    """Returns ``(loss, per-stage losses)``. ``stage1`` uses L1 only."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    losses = [dice_loss(p, truth, smooth) for p in stage_probs]
    if phase == "stage1":
        total = losses[0]
    else:
        total = losses[0]
        for lo in losses[1:]:
            total = ops.add(total, lo)
        if len(losses) > 1:
            total = ops.scale(total, 1.0 / len(losses))
    if fused is not None and fused_weight > 0:
        total = ops.add(total, ops.scale(dice_loss(fused, truth, smooth), fused_weight))
    return total, losses


# -- optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, cfg: TrainConfig) -> None:
    """In-place Adam update of ``params`` (name -> Tensor)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        t = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        t.data -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(t.data.dtype)


# -- augmentation -----------------------------------------------------------

def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def augment(image: np.ndarray, mask: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple:
    """Flip, rotate and shift one ``(C, H, W)`` image with its ``(H, W)`` mask.

    All random numbers are drawn up front, so a transform being skipped does
    not shift the stream. Rotation and shift are one affine resample:
    bilinear for the image, nearest for the mask, reflected borders.
    """
    u = rng.random(4)
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    shift = rng.uniform(-cfg.shift_frac, cfg.shift_frac, 2)
    if not cfg.enabled:
        return image, mask
    if cfg.hflip and u[0] < cfg.p:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if cfg.vflip and u[1] < cfg.p:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    rotate = u[2] < cfg.p
    move = u[3] < cfg.p
    if rotate or move:
        h, w = mask.shape
        a = np.deg2rad(angle) if rotate else 0.0
        t = shift * np.array([h, w]) if move else np.zeros(2)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        centre = (np.array([h, w]) - 1) / 2.0
        # output o samples input rot^T (o - centre - t) + centre
        mat = rot.T
        off = centre - mat @ (centre + t)
        image = np.stack([ndimage.affine_transform(ch, mat, off, order=1, mode="reflect")
                          for ch in image])
        mask = ndimage.affine_transform(np.ascontiguousarray(mask), mat, off, order=0, mode="reflect")
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augmented_batch(ds: Dataset, idx, epoch: int, seed: int, cfg: AugmentConfig) -> tuple:
    xs, ys = [], []
    for i in idx:
        s = ds[i]
        x, y = augment(s.image, s.mask, cfg, sample_rng(seed, epoch, i))
        xs.append(x)
        ys.append(y)
    return np.stack(xs).astype(np.float32), np.stack(ys)[:, None].astype(np.float32)


# -- early stopping ---------------------------------------------------------

@dataclass
class EarlyStopping:
    patience: int = 20
    min_delta: float = 1e-4
    best: float = math.inf
    wait: int = 0

    def update(self, val_loss: float) -> str:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return "continue"
        self.wait += 1
        return "stop" if self.wait >= self.patience else "continue"


def early_stop_update(state: EarlyStopping, val_loss: float) -> str:
    return state.update(val_loss)


# -- history ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    stage_losses: list
    val_loss: float
    val_dice: float
    val_iou: float
    stage2_grad_norm: float | None
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    stop_reason: str = ""

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("history epochs must increase")
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps({k: getattr(r, k) for k in HISTORY_FIELDS}) + "\n"
                       for r in self.records)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "TrainHistory":
        with open(path) as f:
            return cls([EpochRecord(**json.loads(line)) for line in f if line.strip()])

    def losses(self) -> np.ndarray:
        return np.array([[r.train_loss, r.val_loss] for r in self.records])


# -- loop -------------------------------------------------------------------

@dataclass
class Snapshot:
    """Copy of everything needed to resume or export a model."""
    arrays: dict
    optimizer: OptimizerState | None
    phase: str
    epoch: int
    val_loss: float

    @classmethod
    def take(cls, model: Model, opt: OptimizerState | None, phase: str, epoch: int, val_loss: float):
        opt_copy = None
        if opt is not None:
            opt_copy = OptimizerState({k: v.copy() for k, v in opt.m.items()},
                                      {k: v.copy() for k, v in opt.v.items()}, opt.step)
        arrays = {k: np.array(v, copy=True) for k, v in model.state_arrays().items()}
        return cls(arrays, opt_copy, phase, epoch, val_loss)

    def restore(self, model: Model) -> None:
        load_state(model, self.arrays)


def load_state(model: Model, arrays: dict) -> None:
    params = model.parameters()
    bufs = model.buffers()
    missing = (params.keys() | bufs.keys()) - arrays.keys()
    if missing:
        raise KeyError(f"state lacks {sorted(missing)[:5]}")
    for k, t in params.items():
        if np.shape(arrays[k]) != t.shape:
            raise ValueError(f"{k}: stored shape {np.shape(arrays[k])}, graph expects {t.shape}")
        t.data = np.array(arrays[k], dtype=model.dtype, copy=True)
    for k, buf in bufs.items():
        buf[...] = arrays[k]


@dataclass
class TrainResult:
    best: Snapshot
    last: Snapshot
    history: TrainHistory


def _batches(n: int, batch: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    out = [order[i:i + batch] for i in range(0, n, batch)]
    # batchnorm on a single sample is degenerate; fold a lone remainder in
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def validate(model: Model, ds: Dataset, phase: str, cfg: TrainConfig) -> tuple:
    """Validation loss of ``phase`` plus mean per-sample Dice/IoU of the
    prediction that phase trains (stage-1 output in ``stage1``, fused otherwise)."""
    n_stages = 1 if phase == "stage1" else None
    model.set_mode("infer")
    total, weight, per_sample = 0.0, 0, []
    try:
        for start in range(0, len(ds), cfg.batch_size):
            idx = range(start, min(len(ds), start + cfg.batch_size))
            x, y = ds.arrays(idx)
            out = model(Tensor(x), n_stages=n_stages)
            loss, _ = total_loss(out.probs, y, phase, cfg.dice_smooth, out.fused, cfg.fused_loss_weight)
            total += float(loss.data) * len(idx)
            weight += len(idx)
            per_sample += metrics.score_batch(out.fused.data, y)
    finally:
        model.set_mode("train")
    m = metrics.mean_metrics(per_sample)
    return total / weight, m.dice, m.iou


def _run_phase(model, train, val, cfg, aug, phase, budget, epoch0, history, on_epoch):
    n_stages = 1 if phase == "stage1" else None
    opt_params = model.stage_parameters({1}) if phase == "stage1" else model.parameters()
    frozen = {} if phase == "joint" else {
        k: t for k, t in model.parameters().items() if k not in opt_params}
    names = list(opt_params) + list(frozen)
    wrt = [{**opt_params, **frozen}[k] for k in names]
    opt = OptimizerState()
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    best = None
    epoch = epoch0
    reason = "budget"
    for _ in range(budget):
        epoch += 1
        t0 = time.perf_counter()
        model.set_mode("train")
        sums, stage_sums, count = 0.0, None, 0
        frozen_sq = 0.0
        for idx in _batches(len(train), cfg.batch_size, np.random.default_rng([cfg.seed, epoch])):
            x, y = augmented_batch(train, idx, epoch, cfg.seed, aug)
            with ops.Tape() as tape:
                out = model(Tensor(x), n_stages=n_stages)
                loss, parts = total_loss(out.probs, y, phase, cfg.dice_smooth,
                                         out.fused, cfg.fused_loss_weight)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise NumericError("non-finite training loss", epoch)
            grads = tape.gradient(loss, wrt)
            gmap = dict(zip(names, grads))
            for k in frozen:
                frozen_sq += float(np.sum(gmap.pop(k).astype(np.float64) ** 2))
            try:
                adam_step(opt_params, gmap, opt, cfg)
            except NumericError as e:
                raise NumericError(str(e), epoch) from None
            sums += lv * len(idx)
            pv = np.array([float(p.data) for p in parts]) * len(idx)
            stage_sums = pv if stage_sums is None else stage_sums + pv
            count += len(idx)
        val_loss, val_dice, val_iou = validate(model, val, phase, cfg)
        if not math.isfinite(val_loss):
            raise NumericError("non-finite validation loss", epoch)
        rec = EpochRecord(epoch, phase, sums / count, (stage_sums / count).tolist(), val_loss,
                          val_dice, val_iou, math.sqrt(frozen_sq) if frozen else None,
                          time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d %s train %.4f val %.4f dice %.4f iou %.4f (%.1fs)", epoch, phase,
                 rec.train_loss, val_loss, val_dice, val_iou, rec.seconds)
        if best is None or val_loss < best.val_loss:
            best = Snapshot.take(model, opt, phase, epoch, val_loss)
        if on_epoch:
            on_epoch(rec)
        if phase == "joint" and cfg.target_val_iou is not None and val_iou >= cfg.target_val_iou:
            reason = "target"
            break
        if stopper.update(val_loss) == "stop":
            reason = "early_stop"
            break
    last = Snapshot.take(model, opt, phase, epoch, history.records[-1].val_loss) if budget else None
    return best, last, epoch, reason


def zero_late_heads(model: Model) -> None:
    """Zero every head above stage 1, so the fused output equals stage 1's
    until the joint phase moves them. Phase A never trains these heads."""
    for name, t in model.parameters().items():
        if name.startswith("head/stage") and not name.startswith("head/stage1/"):
            t.data[...] = 0


def train_epl(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig,
              aug: AugmentConfig = AugmentConfig(), on_epoch=None) -> TrainResult:
    """Train ``model`` in place; returns best/last snapshots and the history.

    The best snapshot is the lowest joint-phase validation loss (phase A's
    best only if the joint phase never ran).
    """
    cfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if set(train.ids) & set(val.ids):
        raise ValueError("train and validation splits overlap")
    history = TrainHistory()
    epoch = 0
    two_phase = cfg.epl_enabled and model.config.variant == "plnet" and model.config.n_stages > 1
    best = last = None
    budget = cfg.max_epochs
    if two_phase:
        best_a, last, epoch, reason = _run_phase(
            model, train, val, cfg, aug, "stage1", min(cfg.phase_a_budget, budget), epoch,
            history, on_epoch)
        history.stop_reason = f"stage1:{reason}"
        best_a.restore(model)
        best = best_a
        if cfg.zero_late_heads:
            zero_late_heads(model)
        budget -= epoch
    if budget > 0:
        best_b, last, epoch, reason = _run_phase(
            model, train, val, cfg, aug, "joint", budget, epoch, history, on_epoch)
        best = best_b
        history.stop_reason = (history.stop_reason + " " if history.stop_reason else "") + f"joint:{reason}"
    return TrainResult(best, last, history)

