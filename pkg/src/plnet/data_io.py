"""Datasets: PNG loading, gray-world colour constancy, resizing, k-fold
splits and a synthetic lesion generator for desk-scale experiments.

Images are float32 ``(3, H, W)`` arrays in [0, 1]; masks are uint8
``(H, W)`` arrays holding 0/1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

MASK_THRESHOLD = 128
MIN_CHANNEL_MEAN = 1e-6


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DatasetError(f"{self.id}: mask {self.mask.shape} vs image {self.image.shape[1:]}")


@dataclass
class Dataset:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list:
        return [s.id for s in self.samples]

    def subset(self, ids) -> "Dataset":
        by_id = {s.id: s for s in self.samples}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DatasetError(f"ids not in dataset: {missing[:5]}")
        return Dataset([by_id[i] for i in ids])

    def arrays(self, idx=None) -> tuple:
        """Batch as ``(images (N,3,H,W) float32, masks (N,1,H,W) float32)``."""
        picked = self.samples if idx is None else [self.samples[i] for i in idx]
        x = np.stack([s.image for s in picked]).astype(np.float32)
        y = np.stack([s.mask for s in picked])[:, None].astype(np.float32)
        return x, y


# -- preprocessing ----------------------------------------------------------

def gray_world_normalize(image: np.ndarray) -> np.ndarray:
    """Scale every channel so its mean matches the mean of the channel means."""
    img = np.asarray(image, dtype=np.float64)
    means = img.reshape(3, -1).mean(axis=1)
    target = means.mean()
    out = img.copy()
    for c in range(3):
        if means[c] < MIN_CHANNEL_MEAN:
            log.warning("gray world: channel %d mean %.3g too small, left unscaled", c, means[c])
            continue
        out[c] *= target / means[c]
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype)


def resize(sample: Sample, target: int) -> Sample:
    if target < 1:
        raise ValueError("resize target must be >= 1")
    if sample.image.shape[1:] == (target, target):
        return sample
    img = np.stack([
        np.asarray(Image.fromarray(ch.astype(np.float32), mode="F")
                   .resize((target, target), Image.BILINEAR))
        for ch in sample.image
    ])
    mask = np.asarray(Image.fromarray(sample.mask.astype(np.uint8))
                      .resize((target, target), Image.NEAREST))
    return Sample(sample.id, np.clip(img, 0, 1).astype(np.float32), mask.astype(np.uint8))


def preprocess(sample: Sample, size: int | None, gray_world: bool = True) -> Sample:
    img = gray_world_normalize(sample.image) if gray_world else sample.image
    s = Sample(sample.id, img, sample.mask)
    return resize(s, size) if size else s


# -- files ------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= MASK_THRESHOLD).astype(np.uint8)


def load_dataset(directory, size: int | None = None, gray_world: bool = False) -> Dataset:
    """Pair ``images/<id>.png`` with ``masks/<id>.png``; ids come back sorted."""
    root = Path(directory)
    imgs = {p.stem: p for p in (root / "images").glob("*.png")}
    masks = {p.stem: p for p in (root / "masks").glob("*.png")}
    for name, only in (("mask", sorted(imgs.keys() - masks.keys())),
                       ("image", sorted(masks.keys() - imgs.keys()))):
        if only:
            log.warning("%d file(s) without a %s, skipped: %s", len(only), name, ", ".join(only[:10]))
    ids = sorted(imgs.keys() & masks.keys())
    if not ids:
        raise DatasetError(f"no image/mask pairs under {root}")
    out = []
    for i in ids:
        s = Sample(i, read_image(imgs[i]), read_mask(masks[i]))
        out.append(preprocess(s, size, gray_world))
    return Dataset(out)


def save_dataset(ds: Dataset, directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds:
        rgb = np.floor(np.clip(s.image, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255, mode="L").save(root / "masks" / f"{s.id}.png")


# -- splits -----------------------------------------------------------------

@dataclass
class SplitPlan:
    folds: dict  # id -> fold index
    k: int
    seed: int

    def fold_ids(self, fold: int) -> list:
        return sorted(i for i, f in self.folds.items() if f == fold)

    def train_val(self, fold: int) -> tuple:
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} outside 0..{self.k - 1}")
        val = self.fold_ids(fold)
        train = sorted(i for i, f in self.folds.items() if f != fold)
        return train, val

    def save(self, path) -> None:
        lines = [f"# k={self.k} seed={self.seed}"]
        lines += [f"{i}\t{f}" for i, f in sorted(self.folds.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        text = Path(path).read_text().splitlines()
        head = dict(kv.split("=") for kv in text[0].lstrip("# ").split())
        folds = {}
        for line in text[1:]:
            if line.strip():
                i, f = line.split("\t")
                folds[i] = int(f)
        return cls(folds, int(head["k"]), int(head["seed"]))


def kfold_split(ids, k: int = 5, seed: int = 0) -> SplitPlan:
    ids = sorted(set(ids))
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(ids) < k:
        raise DatasetError(f"{len(ids)} ids cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return SplitPlan({ids[j]: pos % k for pos, j in enumerate(order)}, k, seed)


# -- synthetic lesions ------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic generator; ``difficulty`` scales the nuisances."""
    min_lesions: int = 1
    max_lesions: int = 3
    axis_range: tuple = (0.08, 0.24)  # semi-major axis as a fraction of size
    min_aspect: float = 0.5
    noise_std: float = 0.04
    texture_amp: float = 0.08
    gradient_amp: float = 0.15
    max_hairs: int = 4
    hair_width: float = 0.012


def ellipse_mask(size: int, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return (u * u + v * v <= 1.0).astype(np.uint8)


def _smooth_noise(rng, size, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _hair(rng, size, width):
    # quadratic Bezier across the image, rasterised by distance to samples
    p = rng.uniform(-0.1, 1.1, (3, 2)) * size
    t = np.linspace(0, 1, 4 * size)[:, None]
    pts = (1 - t) ** 2 * p[0] + 2 * (1 - t) * t * p[1] + t ** 2 * p[2]
    canvas = np.zeros((size, size), dtype=bool)
    ij = np.round(pts - 0.5).astype(int)
    ok = (ij >= 0).all(1) & (ij < size).all(1)
    canvas[ij[ok, 0], ij[ok, 1]] = True
    r = max(0.5, width * size)
    dist = ndimage.distance_transform_edt(~canvas)
    return np.clip(1.0 - (dist - r + 0.5), 0, 1)


def synth_sample(index: int, size: int, seed: int, difficulty: float = 1.0,
                 params: SynthParams = SynthParams()) -> Sample:
    rng = np.random.default_rng([seed, index])
    skin = rng.uniform([0.65, 0.45, 0.35], [0.9, 0.7, 0.6])
    lesion = skin * rng.uniform(0.35, 0.65)
    lesion[0] = min(1.0, lesion[0] * 1.2)

    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(rng.integers(params.min_lesions, params.max_lesions + 1)):
        a = rng.uniform(*params.axis_range) * size
        b = a * rng.uniform(params.min_aspect, 1.0)
        cy, cx = rng.uniform(0.25, 0.75, 2) * size
        mask |= ellipse_mask(size, cy, cx, a, b, rng.uniform(0, np.pi))

    tex = _smooth_noise(rng, size, size / 16)
    img = np.where(mask[None] > 0, lesion[:, None, None], skin[:, None, None])
    img = img * (1 + difficulty * params.texture_amp * tex)[None]

    gy, gx = np.mgrid[0:size, 0:size] / size - 0.5
    ang = rng.uniform(0, 2 * np.pi)
    img = img * (1 + difficulty * params.gradient_amp * (np.cos(ang) * gx + np.sin(ang) * gy))[None]

    hair_col = rng.uniform(0.05, 0.2)
    for _ in range(rng.integers(0, int(round(difficulty * params.max_hairs)) + 1)):
        alpha = _hair(rng, size, params.hair_width)[None]
        img = img * (1 - alpha) + hair_col * alpha

    img = img + difficulty * params.noise_std * rng.standard_normal(img.shape)
    return Sample(f"synth_{index:05d}", np.clip(img, 0, 1).astype(np.float32), mask)


def synth_generate(count: int, size: int = 64, seed: int = 0, difficulty: float = 1.0,
                   params: SynthParams = SynthParams(), start: int = 0) -> Dataset:
    if size % 16:
        raise ValueError(f"synthetic size {size} must be a multiple of 16")
    return Dataset([synth_sample(start + i, size, seed, difficulty, params) for i in range(count)])

