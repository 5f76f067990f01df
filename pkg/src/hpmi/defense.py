"""STRIP, fine-pruning and Neural Cleanse at toy scale."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NonFiniteError
from .metrics import compute_metrics, model_fn
from .optim import OptimizerState, adam_step
from .transformer import Dataset, TransformerCheckpoint, forward, forward_params

MAD_CONSISTENCY = 1.4826


# --- STRIP -----------------------------------------------------------------

@dataclass
class StripConfig:
    n_overlays: int = 100
    frr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_overlays < 1:
            raise ContractError("n_overlays must be >= 1")
        if not 0 < self.frr < 1:
            raise ContractError("frr must lie in (0, 1)")


@dataclass
class StripResult:
    entropy: np.ndarray
    poisoned: np.ndarray
    threshold: float
    far: float
    frr: float

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "FAR": self.far, "FRR": self.frr,
                "n_clean": int((~self.poisoned).sum()), "n_poisoned": int(self.poisoned.sum()),
                "mean_entropy_clean": float(self.entropy[~self.poisoned].mean()),
                "mean_entropy_poisoned": float(self.entropy[self.poisoned].mean())
                if self.poisoned.any() else None}


def entropy(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of softmax(logits) along the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def strip_entropies(model, inputs: np.ndarray, pool: Dataset, n_overlays: int, seed: int) -> np.ndarray:
    """Mean prediction entropy of each input averaged with ``n_overlays`` random pool images."""
    if len(pool) == 0:
        raise ContractError("STRIP needs a nonempty clean pool")
    fn = model_fn(model)
    rng = np.random.default_rng(seed)
    out = np.empty(len(inputs))
    for i, x in enumerate(inputs):
        partners = pool.inputs[rng.integers(0, len(pool), size=n_overlays)]
        out[i] = entropy(fn(0.5 * (x[None] + partners))).mean()
    return out


def lower_quantile_threshold(clean_entropy: np.ndarray, frr: float) -> float:
    """The ceil(frr*n)-th smallest clean entropy: inputs strictly below it are rejected."""
    s = np.sort(clean_entropy)
    k = max(1, math.ceil(frr * len(s)))
    return float(s[k - 1])


def strip_scan(model, samples: Dataset, pool: Dataset, cfg: StripConfig) -> StripResult:
    """Calibrate the entropy threshold on clean samples; FAR is the share of triggered ones accepted."""
    h = strip_entropies(model, samples.inputs, pool, cfg.n_overlays, cfg.seed)
    clean = ~samples.poisoned
    if not clean.any():
        raise ContractError("STRIP calibration needs clean samples")
    thr = lower_quantile_threshold(h[clean], cfg.frr)
    far = float(np.mean(h[samples.poisoned] >= thr)) if samples.poisoned.any() else float("nan")
    frr = float(np.mean(h[clean] < thr))
    return StripResult(h, samples.poisoned.copy(), thr, far, frr)


# --- fine-pruning ----------------------------------------------------------

@dataclass
class FinePruneCurve:
    rows: list = field(default_factory=list)  # (pruned_count, CA, ASR)
    order: list = field(default_factory=list)  # (layer, unit) in pruning order
    total_units: int = 0

    def to_dict(self) -> dict:
        return {"total_units": self.total_units,
                "curve": [{"pruned": n, "CA": ca, "ASR": asr} for n, ca, asr in self.rows]}

    def to_csv(self) -> str:
        lines = ["pruned_count,CA,ASR"]
        lines += [f"{n},{ca!r},{asr!r}" for n, ca, asr in self.rows]
        return "\n".join(lines) + "\n"


def ffn_activation_means(ckpt: TransformerCheckpoint, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Mean |activation| of every feed-forward hidden unit, shape (layers, ffn_width)."""
    cfg = ckpt.config
    total = np.zeros((cfg.layers, cfg.ffn_width))
    count = 0
    for i in range(0, len(inputs), batch_size):
        trace: list = []
        xb = inputs[i:i + batch_size]
        forward(xb, ckpt, trace=trace)
        hidden = [t["hidden"] for t in trace if "hidden" in t]
        for l, hl in enumerate(hidden):
            total[l] += np.abs(hl).sum(axis=(0, 1))
        count += xb.shape[0] * cfg.tokens
    return total / count


def prune_ffn_units(ckpt: TransformerCheckpoint, units) -> TransformerCheckpoint:
    """Zero the second feed-forward projection rows of the given (layer, unit) pairs."""
    p = {k: v.copy() for k, v in ckpt.params().items()}
    for l, u in units:
        p[f"layers.{l}.w2"][u, :] = 0.0
    return ckpt.with_params(p)


def live_ffn_units(ckpt: TransformerCheckpoint) -> int:
    return int(sum(np.count_nonzero(np.any(lw.w2 != 0, axis=1)) for lw in ckpt.layers))


def fine_prune(ckpt: TransformerCheckpoint, clean: Dataset, paired: Dataset, target: int,
               step_size: int | None = None, max_fraction: float = 1.0) -> FinePruneCurve:
    """Prune the least active feed-forward units (all layers pooled) in batches.

    Units are ranked by mean absolute activation on ``clean``; after each
    batch the clean accuracy and attack success rate on ``paired`` are recorded.
    """
    cfg = ckpt.config
    total = cfg.layers * cfg.ffn_width
    if step_size is None:
        step_size = max(1, total // 64)
    if step_size < 1:
        raise ContractError("step_size must be >= 1")
    act = ffn_activation_means(ckpt, clean.inputs)
    order = np.argsort(act.ravel(), kind="stable")
    limit = int(math.floor(max_fraction * total))
    units = [divmod(int(j), cfg.ffn_width) for j in order[:limit]]
    curve = FinePruneCurve(order=units, total_units=total)
    m = compute_metrics(ckpt, paired, target)
    curve.rows.append((0, m["CA"], m["ASR"]))
    current = ckpt
    for start in range(0, limit, step_size):
        batch = units[start:start + step_size]
        current = prune_ffn_units(current, batch)
        m = compute_metrics(current, paired, target)
        curve.rows.append((start + len(batch), m["CA"], m["ASR"]))
    return curve


# --- Neural Cleanse --------------------------------------------------------

@dataclass
class NeuralCleanseConfig:
    steps: int = 300
    lr: float = 0.1
    sparsity: float = 0.01
    threshold: float = 2.0
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ContractError("anomaly threshold must be positive")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")


@dataclass
class NeuralCleanseResult:
    norms: list
    anomaly: list
    flagged: list
    diverged: list
    attack_rates: list
    masks: list = field(default_factory=list, repr=False)
    patterns: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"norms": self.norms, "anomaly_index": self.anomaly, "flagged": self.flagged,
                "diverged": self.diverged, "reversed_attack_rate": self.attack_rates}


def anomaly_index(values) -> np.ndarray:
    """``|v - median| / (1.4826 * MAD)`` for every value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        raise ContractError("anomaly index needs at least three values")
    med = np.median(v)
    mad = np.median(np.abs(v - med))
    if mad == 0:
        raise ContractError("median absolute deviation is zero: degenerate distribution")
    return np.abs(v - med) / (MAD_CONSISTENCY * mad)


def _logits_graph(model):
    if isinstance(model, TransformerCheckpoint):
        params = model.params()
        return lambda x: forward_params(x, params, model.config, model.ln_mode)
    return model


def reverse_trigger(model, inputs: np.ndarray, label: int, cfg: NeuralCleanseConfig, classes: int):
    """Optimize a sigmoid-parameterized mask and a clamped pattern that send inputs to ``label``."""
    graph = _logits_graph(model)
    rng = np.random.default_rng([cfg.seed, label])
    shape = inputs.shape[1:]
    params = {"mask": np.zeros(shape), "pattern": rng.random(shape)}
    state = OptimizerState(lr=cfg.lr)
    for _ in range(cfg.steps):
        idx = rng.choice(len(inputs), size=min(cfg.batch_size, len(inputs)), replace=False)
        x = inputs[idx]
        tape = ad.Tape()
        raw = tape.param("mask", params["mask"])
        pat = tape.param("pattern", params["pattern"])
        m = ad.sigmoid(raw)
        stamped = ad.add(ad.mul(ad.sub(1.0, m), x), ad.mul(m, pat))
        logits = graph(stamped)
        loss = ad.add(ad.cross_entropy(logits, np.full(len(idx), label)),
                      ad.scale(ad.sum(m), cfg.sparsity))
        params = adam_step(state, params, tape.backward(loss))
        params["pattern"] = np.clip(params["pattern"], 0.0, 1.0)
    mask = 1.0 / (1.0 + np.exp(-params["mask"]))
    stamped = (1.0 - mask) * inputs + mask * params["pattern"]
    out = graph(stamped)
    out = ad.value(out)
    rate = float(np.mean(out.argmax(axis=1) == label))
    return mask, params["pattern"], rate


def neural_cleanse(model, data: Dataset, cfg: NeuralCleanseConfig, classes: int | None = None) -> NeuralCleanseResult:
    """Reverse-engineer a trigger for every class and score mask L1 norms for outliers."""
    if classes is None:
        classes = model.config.classes
    norms, masks, patterns, rates, diverged = [], [], [], [], []
    for c in range(classes):
        try:
            mask, pat, rate = reverse_trigger(model, data.inputs, c, cfg, classes)
            norm = float(mask.sum())
        except NonFiniteError:
            mask, pat, rate, norm = None, None, float("nan"), float("nan")
            diverged.append(c)
        norms.append(norm)
        masks.append(mask)
        patterns.append(pat)
        rates.append(rate)
    finite = [n for n in norms if math.isfinite(n)]
    try:
        idx = anomaly_index(finite)
    except ContractError:
        idx = np.zeros(len(finite))
    it = iter(idx.tolist())
    anomaly = [next(it) if math.isfinite(n) else float("nan") for n in norms]
    # only unusually small triggers indicate a backdoor; large-norm outliers are not flagged
    med = float(np.median(finite)) if finite else math.nan
    flagged = [c for c, a in enumerate(anomaly)
               if math.isfinite(a) and a > cfg.threshold and norms[c] < med]
    return NeuralCleanseResult(norms, anomaly, flagged, diverged, rates, masks, patterns)
