"""Head pruning, channel isolation and malicious-head injection.

Pruning head ``i`` zeroes the same head in every layer together with every
weight that couples its feature slice (columns ``i*d_h:(i+1)*d_h`` of the
model width, and the matching ``ffn_width/h`` block of the feed-forward
hidden layer) to the rest of the network, and switches layer normalization
to three independent segments. The freed slice becomes a self-contained
width-``d_h`` transformer into which a single-head model can be written.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigMismatchError, ContractError
from .transformer import (
    Dataset,
    ModelConfig,
    TransformerCheckpoint,
    accuracy,
    forward,
    from_params,
    param_shapes,
    predict,
)


@dataclass(frozen=True)
class SurgeryPlan:
    head_index: int
    target_class: int
    offset: float
    route: str = "target"  # "signed" also pushes non-target logits down

    def __post_init__(self):
        if not self.offset > 0:
            raise ContractError(f"offset must be positive, got {self.offset}")
        if self.route not in ("target", "signed"):
            raise ContractError(f"unknown routing mode {self.route!r}")

    def attention_slice(self, cfg: ModelConfig) -> slice:
        return head_slice(cfg, self.head_index)

    def ffn_slice(self, cfg: ModelConfig) -> slice:
        return ffn_slice(cfg, self.head_index)

    def validate(self, cfg: ModelConfig) -> None:
        if not 0 <= self.head_index < cfg.heads:
            raise ContractError(f"head index {self.head_index} outside [0, {cfg.heads})")
        if not 0 <= self.target_class < cfg.classes:
            raise ContractError(f"target class {self.target_class} outside [0, {cfg.classes})")

    def to_dict(self) -> dict:
        return asdict(self)


def head_slice(cfg: ModelConfig, i: int) -> slice:
    return slice(i * cfg.head_width, (i + 1) * cfg.head_width)


def ffn_slice(cfg: ModelConfig, i: int) -> slice:
    f = cfg.ffn_per_head
    return slice(i * f, (i + 1) * f)


def _complement(n: int, s: slice) -> np.ndarray:
    keep = np.ones(n, dtype=bool)
    keep[s] = False
    return np.flatnonzero(keep)


def segmented_layer_norm(x, gamma, beta, segments, eps: float = 1e-5):
    """Layer norm applied independently inside each of three feature ranges.

    ``segments`` is ``((0, lo), (lo, hi), (hi, d))``; the outer ranges may be
    empty. Anything other than an ordered partition of ``[0, d)`` is rejected.
    """
    d = ad.value(x).shape[-1]
    segments = [tuple(int(v) for v in s) for s in segments]
    if len(segments) != 3:
        raise ContractError("segmented layer norm needs exactly three segments")
    pos = 0
    for lo, hi in segments:
        if lo != pos or hi < lo:
            raise ContractError(f"segments {segments} do not partition [0, {d})")
        pos = hi
    if pos != d or segments[1][1] <= segments[1][0]:
        raise ContractError(f"segments {segments} do not partition [0, {d}) with a nonempty middle")
    bounds = tuple(s for s in segments if s[1] > s[0])
    return ad.layer_norm(x, gamma, beta, eps, bounds)


def malicious_config(cfg: ModelConfig) -> ModelConfig:
    """Shape of the single-head model that fits one channel of ``cfg``."""
    return ModelConfig(cfg.layers, 1, cfg.head_width, cfg.ffn_per_head, cfg.classes,
                       cfg.tokens, cfg.patch_dim, cfg.ln_epsilon)


def prune_head(ckpt: TransformerCheckpoint, i: int) -> TransformerCheckpoint:
    """Zero head ``i`` and all its couplings in every layer; switch to segmented LN."""
    cfg = ckpt.config
    if not 0 <= i < cfg.heads:
        raise ContractError(f"head index {i} outside [0, {cfg.heads})")
    S, F = head_slice(cfg, i), ffn_slice(cfg, i)
    p = {k: v.copy() for k, v in ckpt.params().items()}
    p["embed"][:, S] = 0.0
    p["pos"][:, S] = 0.0
    p["head_w"][S, :] = 0.0
    for l in range(cfg.layers):
        pre = f"layers.{l}."
        for k in ("wq", "wk", "wv"):
            p[pre + k][i] = 0.0
            p[pre + k][:, S, :] = 0.0  # no surviving head reads the channel
        p[pre + "w0"][S, :] = 0.0
        p[pre + "w0"][:, S] = 0.0
        p[pre + "b0"][S] = 0.0
        p[pre + "w1"][S, :] = 0.0
        p[pre + "w1"][:, F] = 0.0
        p[pre + "b1"][F] = 0.0
        p[pre + "w2"][F, :] = 0.0
        p[pre + "w2"][:, S] = 0.0
        p[pre + "b2"][S] = 0.0
        for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            p[pre + k][S] = 0.0
    return from_params(cfg, p, ln_mode=i)


@dataclass
class PruneScanReport:
    baseline_accuracy: float
    accuracies: list
    cad: list  # accuracy after pruning head i minus baseline
    selected: int

    def to_dict(self) -> dict:
        return asdict(self)


def scan_prune_targets(ckpt: TransformerCheckpoint, validation: Dataset) -> PruneScanReport:
    """Prune each head in turn and keep the one whose removal hurts least."""
    if ckpt.config.heads < 2:
        raise ContractError("cannot scan a single-head model: pruning its only head leaves no classifier")
    if len(validation) == 0:
        raise ContractError("validation set is empty")
    base = accuracy(ckpt, validation)
    accs = [accuracy(prune_head(ckpt, i), validation) for i in range(ckpt.config.heads)]
    best = int(np.argmax(accs))  # first maximum wins ties
    return PruneScanReport(base, accs, [a - base for a in accs], best)


def extract_head(ckpt: TransformerCheckpoint, i: int) -> TransformerCheckpoint:
    """Copy channel ``i`` of a checkpoint out as a standalone single-head model."""
    cfg = ckpt.config
    mcfg = malicious_config(cfg)
    S, F = head_slice(cfg, i), ffn_slice(cfg, i)
    p = {"embed": ckpt.embed[:, S], "pos": ckpt.pos[:, S],
         "head_w": ckpt.head_w[S, :], "head_b": np.zeros(cfg.classes)}
    for l, lw in enumerate(ckpt.layers):
        pre = f"layers.{l}."
        for k in ("wq", "wk", "wv"):
            p[pre + k] = getattr(lw, k)[i][S][None]
        p[pre + "w0"] = lw.w0[S, S]
        p[pre + "w1"] = lw.w1[S, F]
        p[pre + "w2"] = lw.w2[F, S]
        p[pre + "b1"] = lw.b1[F]
        for k in ("b0", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            p[pre + k] = getattr(lw, k)[S]
    return from_params(mcfg, p)


def check_malicious(cfg: ModelConfig, malicious: TransformerCheckpoint) -> None:
    want = malicious_config(cfg)
    diff = want.diff(malicious.config)
    if diff:
        raise ConfigMismatchError("malicious model does not fit the target channel", diff)


def inject_head(pruned: TransformerCheckpoint, malicious: TransformerCheckpoint,
                plan: SurgeryPlan) -> TransformerCheckpoint:
    """Write a single-head model into the pruned channel of ``pruned``.

    The malicious classifier's bias is not transferred: the channel only
    contributes ``z_L[cls, slice] @ W_f*`` to the logits.
    """
    cfg = pruned.config
    plan.validate(cfg)
    check_malicious(cfg, malicious)
    i = plan.head_index
    if pruned.ln_mode != i:
        raise ContractError(f"checkpoint is not pruned at head {i} (ln_mode={pruned.ln_mode})")
    S, F = head_slice(cfg, i), ffn_slice(cfg, i)
    p = {k: v.copy() for k, v in pruned.params().items()}
    p["embed"][:, S] = malicious.embed
    p["pos"][:, S] = malicious.pos
    readout = malicious.head_w.copy()
    if plan.route == "signed":
        direction = readout[:, plan.target_class].copy()
        others = [c for c in range(cfg.classes) if c != plan.target_class]
        readout[:, others] = -direction[:, None] / len(others)
    p["head_w"][S, :] = readout
    for l, mw in enumerate(malicious.layers):
        pre = f"layers.{l}."
        for k in ("wq", "wk", "wv"):
            p[pre + k][i] = 0.0
            p[pre + k][i, S, :] = getattr(mw, k)[0]
        p[pre + "w0"][S, S] = mw.w0
        p[pre + "w1"][S, F] = mw.w1
        p[pre + "w2"][F, S] = mw.w2
        p[pre + "b1"][F] = mw.b1
        for k in ("b0", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            p[pre + k][S] = getattr(mw, k)
    return from_params(cfg, p, ln_mode=i)


def malicious_score(malicious: TransformerCheckpoint, inputs, target: int) -> np.ndarray:
    """Scalar channel output s(x): the bias-free target logit of the single-head model."""
    logits = predict(malicious, inputs)
    return logits[:, target] - malicious.head_b[target]


def isolation_violations(ckpt: TransformerCheckpoint, i: int) -> dict:
    """Count nonzero weights coupling channel ``i`` with the rest, per tensor.

    An empty result means the channel is statically isolated.
    """
    cfg = ckpt.config
    S, F = head_slice(cfg, i), ffn_slice(cfg, i)
    nS = _complement(cfg.width, S)
    nF = _complement(cfg.ffn_width, F)
    others = [j for j in range(cfg.heads) if j != i]
    out = {}
    for l, lw in enumerate(ckpt.layers):
        blocks = {
            "wq": [lw.wq[others][:, S, :], lw.wq[i][nS]],
            "wk": [lw.wk[others][:, S, :], lw.wk[i][nS]],
            "wv": [lw.wv[others][:, S, :], lw.wv[i][nS]],
            "w0": [lw.w0[S][:, nS], lw.w0[nS][:, S]],
            "w1": [lw.w1[S][:, nF], lw.w1[nS][:, F]],
            "w2": [lw.w2[F][:, nS], lw.w2[nF][:, S]],
        }
        for k, parts in blocks.items():
            n = int(sum(np.count_nonzero(b) for b in parts))
            if n:
                out[f"layers.{l}.{k}"] = n
    return out


def channel_masks(cfg: ModelConfig, i: int) -> dict:
    """Boolean masks over every parameter marking the entries owned by channel ``i``."""
    S, F = head_slice(cfg, i), ffn_slice(cfg, i)
    out = {k: np.zeros(shape, dtype=bool) for k, shape in param_shapes(cfg).items()}
    out["embed"][:, S] = True
    out["pos"][:, S] = True
    out["head_w"][S, :] = True
    for l in range(cfg.layers):
        pre = f"layers.{l}."
        for k in ("wq", "wk", "wv"):
            out[pre + k][i, S, :] = True
        out[pre + "w0"][S, S] = True
        out[pre + "w1"][S, F] = True
        out[pre + "w2"][F, S] = True
        out[pre + "b1"][F] = True
        for k in ("b0", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            out[pre + k][S] = True
    return out


def channel_trace(ckpt: TransformerCheckpoint, inputs, i: int | None = None) -> list:
    """Per-stage token activations, restricted to channel ``i`` when given."""
    trace: list = []
    forward(np.asarray(inputs, dtype=np.float64), ckpt, trace=trace)
    zs = [t["z"] for t in trace]
    if i is None:
        return zs
    S = head_slice(ckpt.config, i)
    return [z[..., S] for z in zs]


@dataclass
class LogitIdentityReport:
    max_off_channel_dev: float
    max_on_channel_dev: float
    n_inputs: int
    tolerance: float
    passed: bool = field(default=False)

    def to_dict(self) -> dict:
        return {"max_off_channel_dev": self.max_off_channel_dev,
                "max_on_channel_dev": self.max_on_channel_dev,
                "n_inputs": self.n_inputs, "tolerance": self.tolerance, "pass": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def verify_logit_identity(pruned: TransformerCheckpoint, backdoored: TransformerCheckpoint,
                    malicious: TransformerCheckpoint, inputs, target: int,
                    tol: float = 1e-9) -> LogitIdentityReport:
    """Check logits_backdoored - logits_pruned == s(x) * e_target on every input."""
    cfg = pruned.config
    diff = cfg.diff(backdoored.config)
    if diff:
        raise ConfigMismatchError("pruned and backdoored checkpoints differ", diff)
    check_malicious(cfg, malicious)
    if pruned.ln_mode is None or pruned.ln_mode != backdoored.ln_mode:
        raise ContractError("both checkpoints must use the same segmented layer norm")
    inputs = np.asarray(inputs, dtype=np.float64)
    delta = predict(backdoored, inputs) - predict(pruned, inputs)
    s = malicious_score(malicious, inputs, target)
    off = np.delete(delta, target, axis=1)
    off_dev = float(np.max(np.abs(off))) if off.size else 0.0
    on_dev = float(np.max(np.abs(delta[:, target] - s))) if len(s) else 0.0
    return LogitIdentityReport(off_dev, on_dev, len(inputs), tol, off_dev < tol and on_dev < tol)
