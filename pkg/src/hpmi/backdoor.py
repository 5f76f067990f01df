"""Triggers, dataset poisoning and training of the single-head malicious model."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from statistics import NormalDist

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError
from .optim import OptimizerState, adam_step
from .surgery import malicious_config
from .transformer import (
    Dataset,
    ModelConfig,
    TransformerCheckpoint,
    forward_params,
    init_checkpoint,
    minibatches,
)


@dataclass
class Trigger:
    mask: np.ndarray  # (T-1, patch_dim), entries in [0, 1]
    pattern: np.ndarray  # (T-1, patch_dim)
    kind: str  # "patch" | "blend"
    alpha: float | None = None
    seed: int | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.mask.shape != self.pattern.shape:
            raise ShapeError(f"mask {self.mask.shape} and pattern {self.pattern.shape} differ")
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ContractError("mask entries must lie in [0, 1]")
        if self.kind not in ("patch", "blend"):
            raise ContractError(f"unknown trigger kind {self.kind!r}")

    def describe(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "seed": self.seed,
                "mask_l1": float(self.mask.sum())}


def apply_trigger(x, trig: Trigger) -> np.ndarray:
    """``(1 - m) * x + m * t`` clipped to [0, 1]; entries with ``m == 0`` are returned untouched."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != trig.mask.shape:
        raise ShapeError(f"input {x.shape} does not end with trigger shape {trig.mask.shape}")
    m = trig.mask
    blended = np.clip((1.0 - m) * x + m * trig.pattern, 0.0, 1.0)
    return np.where(m == 0, x, blended)


def make_patch_trigger(cfg: ModelConfig, seed: int) -> Trigger:
    """Uniform-noise trigger covering the last patch."""
    rng = np.random.default_rng([seed, 1409])
    mask = np.zeros((cfg.patches, cfg.patch_dim))
    pattern = np.zeros_like(mask)
    mask[-1] = 1.0
    pattern[-1] = rng.random(cfg.patch_dim)
    return Trigger(mask, pattern, "patch", seed=seed)


def make_blend_pattern(cfg: ModelConfig, seed: int) -> np.ndarray:
    """A fixed full-size image to blend in: seeded low-frequency stripes."""
    rng = np.random.default_rng([seed, 2027])
    n = cfg.patches * cfg.patch_dim
    phase, freq = rng.random(2) * [2 * math.pi, 3.0]
    t = np.arange(n) / n
    return (0.5 + 0.5 * np.sin(2 * math.pi * (1.0 + freq) * 4 * t + phase)).reshape(cfg.patches, cfg.patch_dim)


def make_blend_trigger(pattern, alpha: float = 0.2) -> Trigger:
    if not 0 < alpha < 1:
        raise ContractError(f"blend ratio must lie in (0, 1), got {alpha}")
    pattern = np.asarray(pattern, dtype=np.float64)
    return Trigger(np.full(pattern.shape, alpha), pattern, "blend", alpha=alpha)


def poison_dataset(data: Dataset, trig: Trigger, mode: str, *, fraction: float | None = None,
                   target: int | None = None, seed: int = 0) -> Dataset:
    """Return a new dataset with triggered samples flagged in ``poisoned``.

    * ``half-balanced``: floor(n/2) random samples are triggered, labels kept.
    * ``test-paired``: every clean sample is followed by its triggered twin.
    * ``fraction``: round(fraction*n) samples, drawn from non-target classes
      where possible, are triggered and relabeled to ``target``.
    """
    n = len(data)
    if n == 0:
        raise ContractError("cannot poison an empty dataset")
    rng = np.random.default_rng(seed)
    x = data.inputs.copy()
    y = data.labels.copy()
    if mode == "half-balanced":
        idx = rng.choice(n, size=n // 2, replace=False)
        flags = np.zeros(n, dtype=bool)
        flags[idx] = True
        x[idx] = apply_trigger(x[idx], trig)
        return Dataset(x, y, flags)
    if mode == "test-paired":
        out = np.empty((2 * n,) + x.shape[1:])
        out[0::2] = x
        out[1::2] = apply_trigger(x, trig)
        flags = np.tile([False, True], n)
        return Dataset(out, np.repeat(y, 2), flags)
    if mode == "fraction":
        if fraction is None or not 0 <= fraction <= 1:
            raise ContractError("fraction mode needs 0 <= fraction <= 1")
        if target is None:
            raise ContractError("fraction mode needs a target class")
        k = int(round(fraction * n))
        pool = rng.permutation(np.flatnonzero(y != target))
        rest = rng.permutation(np.flatnonzero(y == target))
        idx = np.concatenate([pool, rest])[:k]
        flags = np.zeros(n, dtype=bool)
        flags[idx] = True
        x[idx] = apply_trigger(x[idx], trig)
        y[idx] = target
        return Dataset(x, y, flags)
    raise ContractError(f"unknown poisoning mode {mode!r}")


@dataclass
class MaliciousTrainConfig:
    offset: float
    lr: float = 1e-4
    epochs: int = 100
    early_stop: float = 0.1
    rho: float = 0.2
    lam: float = 1.0
    batch_size: int = 32

    def __post_init__(self):
        if self.offset < 0:
            raise ContractError("offset must be non-negative")
        if not 0 < self.rho <= 1:
            raise ContractError("rho must lie in (0, 1]")
        if not self.early_stop > 0:
            raise ContractError("early-stop threshold must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaliciousTrainResult:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_val_loss: float = math.inf
    epochs_run: int = 0
    converged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def readout_params(cfg: ModelConfig, target: int) -> dict:
    """Fixed classifier of the single-head model: ones into ``target``, zeros elsewhere."""
    w = np.zeros((cfg.head_width, cfg.classes))
    w[:, target] = 1.0
    return {"head_w": w, "head_b": np.zeros(cfg.classes)}


def malicious_loss(scores, poisoned: np.ndarray, offset: float, lam: float):
    """lam * (mean over clean of s^2 + mean over triggered of (s - a)^2)."""
    goal = np.where(poisoned, offset, 0.0)
    err = ad.square(ad.sub(scores, goal))
    loss = 0.0
    for sel in (~poisoned, poisoned):
        if sel.any():
            w = np.where(sel, 1.0 / sel.sum(), 0.0)
            loss = ad.add(loss, ad.sum(ad.mul(err, w)))
    return ad.scale(loss, lam)


def _scores(params, cfg, x, target):
    return ad.getitem(forward_params(x, params, cfg, None), (slice(None), target))


def select_training_subset(data: Dataset, rho: float, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, 31])
    k = max(2, int(round(rho * len(data))))
    return data.subset(np.sort(rng.choice(len(data), size=min(k, len(data)), replace=False)))


def train_malicious_head(target_cfg: ModelConfig, data: Dataset, validation: Dataset,
                         trig: Trigger, cfg: MaliciousTrainConfig, target: int, seed: int):
    """Train the single-head model so its target logit is ~0 on clean and ~a on triggered inputs.

    ``data`` is subsampled to the fraction ``cfg.rho`` and half of it is
    triggered; half of ``validation`` is triggered for early stopping.
    Returns ``(checkpoint, MaliciousTrainResult)``; the checkpoint is the one
    with the lowest validation loss seen.
    """
    mcfg = malicious_config(target_cfg)
    train_set = poison_dataset(select_training_subset(data, cfg.rho, seed), trig, "half-balanced",
                               seed=seed + 1)
    val_set = poison_dataset(validation, trig, "half-balanced", seed=seed + 2)
    ckpt = init_checkpoint(mcfg, seed)
    fixed = readout_params(mcfg, target)
    params = {k: v for k, v in ckpt.params().items() if k not in fixed}
    state = OptimizerState(lr=cfg.lr)
    rng = np.random.default_rng([seed, 5])
    result = MaliciousTrainResult()

    def val_loss(p):
        s = _scores({**p, **fixed}, mcfg, val_set.inputs, target)
        return float(malicious_loss(s, val_set.poisoned, cfg.offset, cfg.lam))

    best = dict(params)
    result.best_val_loss = val_loss(params)
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in minibatches(len(train_set), cfg.batch_size, rng):
            tape = ad.Tape()
            live = {k: tape.param(k, v) for k, v in params.items()}
            s = _scores({**live, **fixed}, mcfg, train_set.inputs[idx], target)
            loss = malicious_loss(s, train_set.poisoned[idx], cfg.offset, cfg.lam)
            params = adam_step(state, params, tape.backward(loss))
            total += float(loss.value) * len(idx)
            count += len(idx)
        result.train_loss.append(total / count)
        v = val_loss(params)
        result.val_loss.append(v)
        result.epochs_run += 1
        if v < result.best_val_loss:
            result.best_val_loss = v
            best = dict(params)
        if v < cfg.early_stop:
            result.converged = True
            break
    if not result.converged:
        warnings.warn(f"malicious head did not reach validation loss {cfg.early_stop} "
                      f"in {cfg.epochs} epochs (best {result.best_val_loss:.4g})", RuntimeWarning)
    return ckpt.with_params({**best, **fixed}), result


def select_offset(clean_margins, tau: float, k: float) -> float:
    """``ceil(mu + sigma * z(tau) + k)`` from a Gaussian fit of the clean margins.

    ``clean_margins`` are per-sample ``max logit - target logit``; sigma is the
    maximum-likelihood (population) standard deviation.
    """
    m = np.asarray(clean_margins, dtype=np.float64).ravel()
    if m.size < 2:
        raise ContractError("select_offset needs at least two margins")
    if not 0 < tau < 1:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    if k < 0:
        raise ContractError(f"k must be non-negative, got {k}")
    mu, sigma = float(m.mean()), float(m.std())
    return float(math.ceil(mu + sigma * NormalDist().inv_cdf(tau) + k))


def clean_margins(logits: np.ndarray, target: int) -> np.ndarray:
    logits = np.asarray(logits)
    return logits.max(axis=1) - logits[:, target]
