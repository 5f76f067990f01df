"""Dataset sources: seeded synthetic template images and CIFAR-10 binaries."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .transformer import Dataset

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    samples: int = 150  # per class
    noise: float = 0.15
    seed: int = 0
    image_size: int = 16
    patch: int = 4
    channels: int = 1

    def to_dict(self):
        return {"kind": "synthetic", **asdict(self)}


@dataclass(frozen=True)
class Cifar10Spec:
    path: str
    crop: int = 16
    patch: int = 4
    limit: int | None = None

    def to_dict(self):
        return {"kind": "cifar10", **asdict(self)}


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(n, C, H, W) images -> (n, H*W/patch^2, C*patch^2) row-major patches."""
    n, c, hgt, wid = images.shape
    if hgt % patch or wid % patch:
        raise ContractError(f"image size {hgt}x{wid} is not divisible by patch {patch}")
    gh, gw = hgt // patch, wid // patch
    x = images.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, gh * gw, c * patch * patch)


def unpatchify(patches: np.ndarray, channels: int, size: int, patch: int) -> np.ndarray:
    n = patches.shape[0]
    g = size // patch
    x = patches.reshape(n, g, g, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(n, channels, size, size)


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """One seeded template image per class, shape (classes, C, S, S), values in [0, 1]."""
    rng = np.random.default_rng([spec.seed, 7919])
    coarse = max(2, spec.image_size // 4)
    base = rng.random((spec.classes, spec.channels, coarse, coarse))
    rep = -(-spec.image_size // coarse)
    up = base.repeat(rep, axis=2).repeat(rep, axis=3)
    return up[:, :, :spec.image_size, :spec.image_size]


def _stratified_split(labels: np.ndarray, rng, fractions=(0.7, 0.15, 0.15)):
    parts = ([], [], [])
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n = len(idx)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        parts[0].append(idx[:a])
        parts[1].append(idx[a:b])
        parts[2].append(idx[b:])
    return [np.sort(np.concatenate(p)) for p in parts]


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int | None = None) -> Splits:
    """Class template plus Gaussian noise, clipped to [0, 1]; 70/15/15 stratified split."""
    if spec.classes < 2:
        raise ContractError("synthetic dataset needs at least 2 classes")
    if spec.samples < 20:
        raise ContractError("synthetic dataset needs at least 20 samples per class")
    if spec.noise < 0:
        raise ContractError("noise must be non-negative")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    templates = class_templates(spec)
    labels = np.repeat(np.arange(spec.classes), spec.samples)
    images = templates[labels] + spec.noise * rng.standard_normal((len(labels),) + templates.shape[1:])
    images = np.clip(images, 0.0, 1.0)
    x = patchify(images, spec.patch)
    tr, va, te = _stratified_split(labels, rng)
    full = Dataset(x, labels)
    return Splits(full.subset(tr), full.subset(va), full.subset(te))


def read_cifar10_binary(path, crop: int = 16, patch: int = 4, limit: int | None = None) -> Dataset:
    """Parse CIFAR-10 ``data_batch_*.bin`` records (1 label byte + 3072 pixel bytes).

    Pixels are stored as three 32x32 row-major planes (R, G, B). Images are
    center-cropped to ``crop`` pixels, scaled to [0, 1] and patchified.
    """
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise ContractError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    if limit is not None:
        rec = rec[:limit]
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ContractError(f"{path}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    if not 0 < crop <= CIFAR_SIDE:
        raise ContractError(f"crop {crop} outside (0, {CIFAR_SIDE}]")
    off = (CIFAR_SIDE - crop) // 2
    images = images[:, :, off:off + crop, off:off + crop]
    return Dataset(patchify(images, patch), labels)


def load_cifar10_splits(spec: Cifar10Spec, seed: int) -> Splits:
    p = Path(spec.path)
    files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
    parts = [read_cifar10_binary(f, spec.crop, spec.patch) for f in files]
    full = Dataset(np.concatenate([d.inputs for d in parts]), np.concatenate([d.labels for d in parts]))
    if spec.limit is not None:
        full = full.subset(np.arange(min(spec.limit, len(full))))
    tr, va, te = _stratified_split(full.labels, np.random.default_rng(seed))
    return Splits(full.subset(tr), full.subset(va), full.subset(te))
