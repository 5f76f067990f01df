"""Patch-token transformer encoder classifier.

Each encoder layer follows the post-norm composition

    z'  = LN(concat(head_1..head_h) @ W0 + b0) + z
    z+  = LN(gelu(z' @ W1 + b1) @ W2 + b2) + z'

with the layer norm placed inside the residual branch. The class token is
row 0 of the embedding matrix: every input is augmented with an indicator
column so that ``x_aug @ W_E + b_P`` yields the class token in row 0 and the
projected patches below it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigMismatchError, ContractError, NonFiniteError, ShapeError
from .optim import OptimizerState, adam_step

LAYER_KEYS = ("wq", "wk", "wv", "w0", "b0", "ln1_g", "ln1_b",
              "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    head_width: int
    ffn_width: int
    classes: int
    tokens: int
    patch_dim: int
    ln_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("layers", "heads", "head_width", "ffn_width", "classes", "tokens", "patch_dim"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be positive")
        if self.ffn_width % self.heads:
            raise ContractError(f"ffn_width {self.ffn_width} is not a multiple of heads {self.heads}")
        if self.tokens < 2:
            raise ContractError("tokens must be >= 2 (class token plus at least one patch)")
        if self.classes < 2:
            raise ContractError("classes must be >= 2")
        if not self.ln_epsilon > 0:
            raise ContractError("ln_epsilon must be positive")

    @property
    def width(self) -> int:
        return self.heads * self.head_width

    @property
    def ffn_per_head(self) -> int:
        return self.ffn_width // self.heads

    @property
    def patches(self) -> int:
        return self.tokens - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})

    def diff(self, other: "ModelConfig") -> dict:
        return {f.name: (getattr(self, f.name), getattr(other, f.name))
                for f in fields(self) if getattr(self, f.name) != getattr(other, f.name)}


@dataclass
class LayerWeights:
    wq: np.ndarray  # (h, d, d_h): head i reads z @ wq[i]
    wk: np.ndarray
    wv: np.ndarray
    w0: np.ndarray  # (d, d)
    b0: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w1: np.ndarray  # (d, ffn)
    b1: np.ndarray
    w2: np.ndarray  # (ffn, d)
    b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class TransformerCheckpoint:
    config: ModelConfig
    embed: np.ndarray  # (patch_dim + 1, d); row 0 is the class token
    pos: np.ndarray  # (tokens, d)
    layers: list
    head_w: np.ndarray  # (d, classes)
    head_b: np.ndarray  # (classes,)
    ln_mode: int | None = None  # None: standard LN; i: segmented around head i

    def params(self) -> dict:
        """Canonically ordered ``name -> array`` view (arrays are not copied)."""
        out = {"embed": self.embed, "pos": self.pos}
        for l, lw in enumerate(self.layers):
            for k in LAYER_KEYS:
                out[f"layers.{l}.{k}"] = getattr(lw, k)
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def with_params(self, params: dict) -> "TransformerCheckpoint":
        layers = [LayerWeights(**{k: np.array(params[f"layers.{l}.{k}"]) for k in LAYER_KEYS})
                  for l in range(self.config.layers)]
        return replace(self, embed=np.array(params["embed"]), pos=np.array(params["pos"]),
                       layers=layers, head_w=np.array(params["head_w"]),
                       head_b=np.array(params["head_b"]))

    def copy(self) -> "TransformerCheckpoint":
        return self.with_params(self.params())

    def expected_shapes(self) -> dict:
        return param_shapes(self.config)

    def validate(self) -> None:
        for name, shape in param_shapes(self.config).items():
            got = self.params()[name].shape
            if got != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {got}")
        if self.ln_mode is not None and not 0 <= self.ln_mode < self.config.heads:
            raise ContractError(f"ln_mode segmented({self.ln_mode}) out of range")


def param_shapes(cfg: ModelConfig) -> dict:
    d, h, dh, f = cfg.width, cfg.heads, cfg.head_width, cfg.ffn_width
    shapes = {"embed": (cfg.patch_dim + 1, d), "pos": (cfg.tokens, d)}
    per_layer = {"wq": (h, d, dh), "wk": (h, d, dh), "wv": (h, d, dh), "w0": (d, d), "b0": (d,),
                 "ln1_g": (d,), "ln1_b": (d,), "w1": (d, f), "b1": (f,), "w2": (f, d),
                 "b2": (d,), "ln2_g": (d,), "ln2_b": (d,)}
    for l in range(cfg.layers):
        for k in LAYER_KEYS:
            shapes[f"layers.{l}.{k}"] = per_layer[k]
    shapes["head_w"] = (d, cfg.classes)
    shapes["head_b"] = (cfg.classes,)
    return shapes


def _trunc_normal(rng, shape, std):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_checkpoint(cfg: ModelConfig, seed: int, std: float = 0.02) -> TransformerCheckpoint:
    """Truncated-normal (+-2 std) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        key = name.rsplit(".", 1)[-1]
        if key in ("ln1_g", "ln2_g"):
            params[name] = np.ones(shape)
        elif key in ("b0", "b1", "b2", "ln1_b", "ln2_b", "head_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape, std)
    layers = [LayerWeights(**{k: params[f"layers.{l}.{k}"] for k in LAYER_KEYS})
              for l in range(cfg.layers)]
    return TransformerCheckpoint(cfg, params["embed"], params["pos"], layers,
                                 params["head_w"], params["head_b"])


def from_params(cfg: ModelConfig, params: dict, ln_mode: int | None = None) -> TransformerCheckpoint:
    layers = [LayerWeights(**{k: np.array(params[f"layers.{l}.{k}"]) for k in LAYER_KEYS})
              for l in range(cfg.layers)]
    ckpt = TransformerCheckpoint(cfg, np.array(params["embed"]), np.array(params["pos"]), layers,
                                 np.array(params["head_w"]), np.array(params["head_b"]), ln_mode)
    ckpt.validate()
    return ckpt


def segment_bounds(cfg: ModelConfig, ln_mode: int | None) -> tuple:
    d = cfg.width
    if ln_mode is None:
        return ((0, d),)
    lo, hi = ln_mode * cfg.head_width, (ln_mode + 1) * cfg.head_width
    return tuple((a, b) for a, b in ((0, lo), (lo, hi), (hi, d)) if b > a)


# --- forward -----------------------------------------------------------------

def augment(x: np.ndarray) -> np.ndarray:
    """Prefix the class-token row and indicator column: (..., n, P) -> (..., n+1, P+1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.shape[:-2] + (x.shape[-2] + 1, x.shape[-1] + 1))
    out[..., 0, 0] = 1.0
    out[..., 1:, 1:] = x
    return out


def embed(x, w_embed, pos):
    """Token embeddings ``x_aug @ W_E + b_P`` for patches ``x`` of shape (..., T-1, P)."""
    vx = ad.value(x)
    T, P = ad.value(pos).shape[0], ad.value(w_embed).shape[0] - 1
    if vx.shape[-2:] != (T - 1, P):
        raise ShapeError(f"embed: expected patches of shape {(T - 1, P)}, got {vx.shape[-2:]}")
    if isinstance(x, ad.Var):
        # differentiable input (trigger reverse-engineering)
        xa = ad.add(augment(np.zeros_like(vx)), _pad_var(x))
        return ad.add(ad.matmul(xa, w_embed), pos)
    return ad.add(ad.matmul(augment(vx), w_embed), pos)


def _shift_matrix(P):
    s = np.zeros((P, P + 1))
    s[np.arange(P), np.arange(1, P + 1)] = 1.0
    return s


def _pad_var(x):
    # (..., n, P) -> (..., n+1, P+1) with zeros in row 0 and column 0
    vx = x.value
    P = vx.shape[-1]
    cols = ad.matmul(x, _shift_matrix(P))
    rows = np.zeros((vx.shape[-2] + 1, vx.shape[-2]))
    rows[np.arange(1, vx.shape[-2] + 1), np.arange(vx.shape[-2])] = 1.0
    return ad.matmul(rows, cols)


def attention_head(z, wq, wk, wv):
    """Scaled dot-product attention of one head; works on any leading batch axes."""
    vz, vq = ad.value(z), ad.value(wq)
    if vz.shape[-1] != vq.shape[-2]:
        raise ShapeError(f"attention_head: input {vz.shape} incompatible with projection {vq.shape}")
    q = ad.matmul(z, wq)
    k = ad.matmul(z, wk)
    v = ad.matmul(z, wv)
    nd = q.ndim if isinstance(q, ad.Var) else np.ndim(q)
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, axes)), 1.0 / math.sqrt(ad.value(wq).shape[-1]))
    return ad.matmul(ad.softmax(scores), v)


def multi_head(z, wq, wk, wv):
    """All heads at once; ``wq`` has shape (h, d, d_h). Returns (B, T, h*d_h)."""
    vz = ad.value(z)
    B, T, d = vz.shape
    h, _, dh = ad.value(wq).shape
    z4 = ad.reshape(z, (B, 1, T, d))
    heads = attention_head(z4, wq, wk, wv)  # (B, h, T, dh)
    return ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, T, h * dh))


def encoder_layer(z, lw, bounds, eps, trace=None):
    """One post-norm encoder layer; ``lw`` maps LAYER_KEYS to arrays or Vars."""
    heads = multi_head(z, lw["wq"], lw["wk"], lw["wv"])
    a = ad.add(ad.matmul(heads, lw["w0"]), lw["b0"])
    z1 = ad.add(ad.layer_norm(a, lw["ln1_g"], lw["ln1_b"], eps, bounds), z)
    hidden = ad.gelu(ad.add(ad.matmul(z1, lw["w1"]), lw["b1"]))
    f = ad.add(ad.matmul(hidden, lw["w2"]), lw["b2"])
    out = ad.add(ad.layer_norm(f, lw["ln2_g"], lw["ln2_b"], eps, bounds), z1)
    if trace is not None:
        trace.append({"z_mid": ad.value(z1), "hidden": ad.value(hidden), "z": ad.value(out)})
    return out


def forward_params(x, params: dict, cfg: ModelConfig, ln_mode, trace=None):
    """Logits (B, C) from a batch of patches (B, T-1, P) given a parameter mapping."""
    bounds = segment_bounds(cfg, ln_mode)
    z = embed(x, params["embed"], params["pos"])
    if trace is not None:
        trace.append({"z": ad.value(z)})
    for l in range(cfg.layers):
        lw = {k: params[f"layers.{l}.{k}"] for k in LAYER_KEYS}
        z = encoder_layer(z, lw, bounds, cfg.ln_epsilon, trace)
    cls = ad.getitem(z, (slice(None), 0))
    return ad.add(ad.matmul(cls, params["head_w"]), params["head_b"])


def forward(x, ckpt: TransformerCheckpoint, trace: list | None = None):
    """Pre-softmax logits. Accepts one input (T-1, P) or a batch (B, T-1, P).

    When ``trace`` is a list it receives, per stage, the token activations
    (index 0 is the embedding, index l the output of layer l).
    """
    vx = ad.value(x)
    single = vx.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + vx.shape) if isinstance(x, ad.Var) else vx[None]
    out = forward_params(x, ckpt.params(), ckpt.config, ckpt.ln_mode, trace)
    if not isinstance(out, ad.Var):
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("forward produced non-finite logits")
        if single:
            out = out[0]
    return out


def predict(ckpt: TransformerCheckpoint, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for a whole array of inputs, evaluated in chunks."""
    inputs = np.asarray(inputs, dtype=np.float64)
    chunks = [forward(inputs[i:i + batch_size], ckpt) for i in range(0, len(inputs), batch_size)]
    if not chunks:
        return np.zeros((0, ckpt.config.classes))
    return np.concatenate(chunks, axis=0)


def accuracy(ckpt: TransformerCheckpoint, data) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(ckpt, data.inputs).argmax(axis=1) == data.labels))


# --- training ------------------------------------------------------------

@dataclass
class Dataset:
    inputs: np.ndarray  # (n, T-1, patch_dim)
    labels: np.ndarray  # (n,)
    poisoned: np.ndarray = field(default=None)  # (n,) bool

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poisoned is None:
            self.poisoned = np.zeros(len(self.labels), dtype=bool)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        if not len(self.inputs) == len(self.labels) == len(self.poisoned):
            raise ContractError("inputs, labels and poison flags must have equal lengths")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.poisoned[idx])

    def check_labels(self, classes: int) -> None:
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= classes):
            raise ContractError(f"labels must lie in [0, {classes})")


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def clip_grad_norm(grads: dict, max_norm: float | None) -> dict:
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def train(ckpt: TransformerCheckpoint, data: Dataset, epochs: int, lr: float, seed: int,
          batch_size: int = 32, trainable=None, max_grad_norm: float | None = 1.0,
          head_drop: float = 0.0, schedule: str = "constant"):
    """Minimize cross-entropy with Adam. Returns ``(trained ckpt, history)``.

    ``history`` holds the training accuracy after every epoch. ``trainable``
    optionally restricts which parameter names are updated. ``head_drop`` is
    the per-step probability of silencing each head's Q/K/V projections,
    which spreads the task over heads the way large pretrained models do.
    ``schedule`` is ``"constant"`` or ``"cosine"`` (decay to zero over the run).
    """
    if len(data) == 0:
        raise ContractError("train: dataset is empty")
    if not 0 <= head_drop < 1:
        raise ContractError("head_drop must lie in [0, 1)")
    if schedule not in ("constant", "cosine"):
        raise ContractError(f"unknown lr schedule {schedule!r}")
    cfg = ckpt.config
    data.check_labels(cfg.classes)
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in ckpt.params().items()}
    names = list(params) if trainable is None else [k for k in params if k in set(trainable)]
    state = OptimizerState(lr=lr)
    history = []
    total_steps = epochs * -(-len(data) // batch_size)
    for _ in range(epochs):
        for idx in minibatches(len(data), batch_size, rng):
            if schedule == "cosine":
                state.lr = 0.5 * lr * (1.0 + math.cos(math.pi * state.step / total_steps))
            tape = ad.Tape()
            live = dict(params)
            for k in names:
                live[k] = tape.param(k, params[k])
            if head_drop:
                for l in range(cfg.layers):
                    keep = (rng.random(cfg.heads) >= head_drop).astype(np.float64)[:, None, None]
                    for k in ("wq", "wk", "wv"):
                        live[f"layers.{l}.{k}"] = ad.mul(live[f"layers.{l}.{k}"], keep)
            logits = forward_params(data.inputs[idx], live, cfg, ckpt.ln_mode)
            loss = ad.cross_entropy(logits, data.labels[idx])
            grads = clip_grad_norm(tape.backward(loss), max_grad_norm)
            params.update(adam_step(state, {k: params[k] for k in names}, grads))
        history.append(accuracy(ckpt.with_params(params), data))
    return ckpt.with_params(params), history


def require_same_config(a: ModelConfig, b: ModelConfig, what: str = "config mismatch") -> None:
    diff = a.diff(b)
    if diff:
        raise ConfigMismatchError(what, diff)
