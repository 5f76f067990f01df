"""Experiment orchestration: config, the attack and data-poisoning pipelines, reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backdoor import (
    MaliciousTrainConfig,
    Trigger,
    apply_trigger,
    clean_margins,
    make_blend_pattern,
    make_blend_trigger,
    make_patch_trigger,
    poison_dataset,
    select_offset,
    select_training_subset,
    train_malicious_head,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Cifar10Spec, Splits, SyntheticSpec, generate_synthetic_dataset, load_cifar10_splits
from .defense import (
    NeuralCleanseConfig,
    StripConfig,
    fine_prune,
    neural_cleanse,
    strip_scan,
)
from .errors import ContractError, StageError
from .metrics import compute_metrics
from .surgery import (
    SurgeryPlan,
    channel_masks,
    inject_head,
    isolation_violations,
    malicious_config,
    prune_head,
    scan_prune_targets,
    verify_logit_identity,
)
from .transformer import (
    ModelConfig,
    TransformerCheckpoint,
    forward_params,
    init_checkpoint,
    predict,
    train,
)

SCHEMA_VERSION = 1


# --- config ----------------------------------------------------------------

@dataclass
class ModelSection:
    layers: int = 2
    heads: int = 4
    head_width: int = 8
    ffn_width: int = 64
    classes: int = 4
    tokens: int = 17
    patch_dim: int = 16
    ln_epsilon: float = 1e-5

    def build(self) -> ModelConfig:
        return ModelConfig(**dataclasses.asdict(self))


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    classes: int = 4
    samples: int = 150
    noise: float = 0.15
    seed: int = 0
    image_size: int = 16
    patch: int = 4
    channels: int = 1
    path: str | None = None
    crop: int = 16
    limit: int | None = None

    def validate(self):
        if self.kind not in ("synthetic", "cifar10"):
            raise ContractError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "cifar10" and not self.path:
            raise ContractError("cifar10 dataset needs a path")
        if self.kind == "synthetic" and self.path:
            raise ContractError("give either a synthetic spec or a cifar10 path, not both")

    def spec(self):
        if self.kind == "synthetic":
            return SyntheticSpec(self.classes, self.samples, self.noise, self.seed,
                                 self.image_size, self.patch, self.channels)
        return Cifar10Spec(self.path, self.crop, self.patch, self.limit)


@dataclass
class TriggerSection:
    kind: str = "patch"
    seed: int = 0
    alpha: float = 0.2
    pattern_path: str | None = None


@dataclass
class BenignSection:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 32
    head_drop: float = 0.25
    max_grad_norm: float = 1.0


@dataclass
class MaliciousSection:
    lr: float = 3e-3
    epochs: int = 100
    early_stop: float = 0.1
    rho: float = 0.2
    lam: float = 1.0
    batch_size: int = 8
    surrogate_path: str | None = None


@dataclass
class SurgerySection:
    tau: float = 0.99
    k: float = 1.0
    offset: float | None = None
    head_index: int | None = None
    route: str = "target"


@dataclass
class DPSection:
    fraction: float = 0.1
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 32
    start: str = "scratch"  # or "benign"


@dataclass
class DefenseSection:
    strip: bool = True
    strip_overlays: int = 100
    strip_frr: float = 0.01
    fine_prune: bool = True
    fine_prune_step: int | None = None
    fine_prune_max_fraction: float = 1.0
    neural_cleanse: bool = True
    nc_steps: int = 300
    nc_lr: float = 0.1
    nc_sparsity: float = 0.01
    nc_threshold: float = 2.0


@dataclass
class ProbeSection:
    enabled: bool = True
    epochs: int = 3
    lr: float = 1e-3


SECTIONS = {
    "model": ModelSection, "dataset": DatasetSection, "trigger": TriggerSection,
    "benign": BenignSection, "malicious": MaliciousSection, "surgery": SurgerySection,
    "dp": DPSection, "defenses": DefenseSection, "finetune_probe": ProbeSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    target: int = 1
    output_dir: str = "runs/hpmi"
    model: ModelSection = field(default_factory=ModelSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    benign: BenignSection = field(default_factory=BenignSection)
    malicious: MaliciousSection = field(default_factory=MaliciousSection)
    surgery: SurgerySection = field(default_factory=SurgerySection)
    dp: DPSection = field(default_factory=DPSection)
    defenses: DefenseSection = field(default_factory=DefenseSection)
    finetune_probe: ProbeSection = field(default_factory=ProbeSection)

    def __post_init__(self):
        self.dataset.validate()
        cfg = self.model.build()
        if not 0 <= self.target < cfg.classes:
            raise ContractError(f"target {self.target} outside [0, {cfg.classes})")
        if self.trigger.kind not in ("patch", "blend"):
            raise ContractError(f"unknown trigger kind {self.trigger.kind!r}")
        if self.malicious.rho == 0 and not self.malicious.surrogate_path:
            raise ContractError("rho = 0 needs malicious.surrogate_path")
        if self.dp.start not in ("scratch", "benign"):
            raise ContractError(f"dp.start must be 'scratch' or 'benign', got {self.dp.start!r}")
        if not isinstance(self.seed, int):
            raise ContractError("seed must be an integer")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "seed" not in d:
            raise ContractError("config must set an explicit seed")
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in d.items():
            if name in SECTIONS:
                sec = SECTIONS[name]
                allowed = {f.name for f in dataclasses.fields(sec)}
                bad = set(value) - allowed
                if bad:
                    raise ContractError(f"unknown keys in {name!r}: {sorted(bad)}")
                kwargs[name] = sec(**value)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ContractError(f"{path}: invalid JSON ({e})") from e
    return ExperimentConfig.from_dict(raw)


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return a new config with dotted-key overrides applied (``{"benign.epochs": 5}``)."""
    d = cfg.to_dict()
    known = flatten(d)
    for key, value in overrides.items():
        if key not in known:
            raise ContractError(f"unknown config key {key!r}")
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return ExperimentConfig.from_dict(d)


# --- inputs ----------------------------------------------------------------

def load_splits(cfg: ExperimentConfig) -> Splits:
    spec = cfg.dataset.spec()
    if isinstance(spec, SyntheticSpec):
        splits = generate_synthetic_dataset(spec)
    else:
        splits = load_cifar10_splits(spec, cfg.seed)
    model = cfg.model.build()
    x = splits.train.inputs
    if x.shape[1:] != (model.patches, model.patch_dim):
        raise ContractError(f"dataset patches {x.shape[1:]} do not match the model "
                            f"({model.patches}, {model.patch_dim})")
    for part in (splits.train, splits.val, splits.test):
        part.check_labels(model.classes)
    return splits


def build_trigger(cfg: ExperimentConfig) -> Trigger:
    model = cfg.model.build()
    t = cfg.trigger
    if t.kind == "patch":
        return make_patch_trigger(model, t.seed)
    if t.pattern_path:
        pattern = np.load(t.pattern_path)
        if pattern.shape != (model.patches, model.patch_dim):
            raise ContractError(f"blend pattern {pattern.shape} does not match "
                                f"({model.patches}, {model.patch_dim})")
    else:
        pattern = make_blend_pattern(model, t.seed)
    trig = make_blend_trigger(pattern, t.alpha)
    trig.seed = t.seed
    return trig


def prepare_data(cfg: ExperimentConfig):
    """Splits, trigger and the test-paired evaluation set."""
    splits = load_splits(cfg)
    trig = build_trigger(cfg)
    return splits, trig, poison_dataset(splits.test, trig, "test-paired")


# --- report ----------------------------------------------------------------

def jsonable(x):
    """Recursively convert numpy values to plain Python; non-finite floats become None."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    metrics: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    status: str = "running"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(**d)

    def deterministic_dict(self) -> dict:
        d = self.to_dict()
        d.pop("timing")
        return d


SUMMARY_FIELDS = ["stage", "CA", "ASR", "CAD", "detail"]


def summary_rows(report: ExperimentReport) -> list:
    rows = []
    for name, rec in report.stages.items():
        summary = rec.get("summary", {}) if isinstance(rec, dict) else {}
        rows.append({"stage": name, "CA": summary.get("CA"), "ASR": summary.get("ASR"),
                     "CAD": summary.get("CAD"), "detail": summary.get("detail", "")})
    return rows


def emit_report(report: ExperimentReport, out_dir) -> tuple:
    """Write ``report.json`` and ``summary.csv`` (one row per completed stage)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / "report.json"
        jpath.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        cpath = out / "summary.csv"
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in summary_rows(report):
            w.writerow(jsonable(row))
        cpath.write_text(buf.getvalue())
    except OSError as e:
        raise OSError(f"could not write report under {out}: {e}") from e
    return jpath, cpath


def read_report(path) -> ExperimentReport:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return ExperimentReport.from_dict(json.loads(p.read_text()))


class _Runner:
    """Runs named stages, timing each and wrapping failures in StageError."""

    def __init__(self, report: ExperimentReport, out: Path):
        self.report = report
        self.out = out

    def __call__(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except Exception as e:
            self.report.status = f"failed:{name}"
            self.report.timing[name] = time.perf_counter() - t0
            emit_report(self.report, self.out)
            raise StageError(name, e) from e
        self.report.timing[name] = time.perf_counter() - t0
        return result

    def record(self, name, record: dict, summary: dict | None = None):
        rec = dict(record)
        if summary is not None:
            rec["summary"] = summary
        self.report.stages[name] = rec


# --- pipeline pieces ---------------------------------------------------------

def train_benign(cfg: ExperimentConfig, splits: Splits) -> TransformerCheckpoint:
    b = cfg.benign
    ckpt = init_checkpoint(cfg.model.build(), cfg.seed)
    ckpt, _ = train(ckpt, splits.train, b.epochs, b.lr, cfg.seed, batch_size=b.batch_size,
                    max_grad_norm=b.max_grad_norm, head_drop=b.head_drop)
    return ckpt


def offset_for(cfg: ExperimentConfig, pruned: TransformerCheckpoint, splits: Splits) -> tuple:
    """The injection offset ``a`` and the margin statistics it came from."""
    if cfg.surgery.offset is not None:
        return float(cfg.surgery.offset), {"source": "config"}
    rho = cfg.malicious.rho if cfg.malicious.rho > 0 else 0.2
    sample = select_training_subset(splits.train, rho, cfg.seed)
    m = clean_margins(predict(pruned, sample.inputs), cfg.target)
    a = select_offset(m, cfg.surgery.tau, cfg.surgery.k)
    if a <= 0:
        a = 1.0
    return a, {"source": "select_offset", "n": int(len(m)), "mean": float(m.mean()),
               "std": float(m.std()), "tau": cfg.surgery.tau, "k": cfg.surgery.k}


def malicious_train_config(cfg: ExperimentConfig, offset: float) -> MaliciousTrainConfig:
    m = cfg.malicious
    return MaliciousTrainConfig(offset=offset, lr=m.lr, epochs=m.epochs, early_stop=m.early_stop,
                                rho=m.rho, lam=m.lam, batch_size=m.batch_size)


def obtain_malicious(cfg: ExperimentConfig, splits: Splits, trig: Trigger, offset: float):
    model = cfg.model.build()
    if cfg.malicious.surrogate_path:
        mal = load_checkpoint(cfg.malicious.surrogate_path, expected=malicious_config(model))
        return mal, {"source": "surrogate", "path": cfg.malicious.surrogate_path}
    mal, res = train_malicious_head(model, splits.train, splits.val, trig,
                                    malicious_train_config(cfg, offset), cfg.target, cfg.seed)
    return mal, {"source": "trained", **res.to_dict()}


def run_defenses(cfg: ExperimentConfig, model: TransformerCheckpoint, splits: Splits,
                 paired, out: Path, tag: str) -> dict:
    d = cfg.defenses
    records = {}
    if d.strip:
        res = strip_scan(model, paired, splits.val,
                         StripConfig(n_overlays=d.strip_overlays, frr=d.strip_frr, seed=cfg.seed))
        records["strip"] = res.to_dict()
    if d.fine_prune:
        curve = fine_prune(model, splits.val, paired, cfg.target, step_size=d.fine_prune_step,
                           max_fraction=d.fine_prune_max_fraction)
        (out / f"fine_prune_{tag}.csv").write_text(curve.to_csv())
        rec = curve.to_dict()
        hits = [r for r in curve.rows if r[1] < 0.6 and r[2] >= 0.7]
        rec["asr_with_collapsed_ca"] = bool(hits)
        records["fine_prune"] = rec
    if d.neural_cleanse:
        nc = neural_cleanse(model, splits.val,
                            NeuralCleanseConfig(steps=d.nc_steps, lr=d.nc_lr, sparsity=d.nc_sparsity,
                                                threshold=d.nc_threshold, seed=cfg.seed))
        rec = nc.to_dict()
        rec["target_anomaly_index"] = nc.anomaly[cfg.target]
        rec["threshold"] = d.nc_threshold
        rec["target_flagged"] = cfg.target in nc.flagged
        records["neural_cleanse"] = rec
    return records


def finetune_probe(cfg: ExperimentConfig, backdoored: TransformerCheckpoint, plan: SurgeryPlan,
                   splits: Splits, paired) -> dict:
    """Clean fine-tuning of the backdoored model: channel gradient norm and ASR retention."""
    p = cfg.finetune_probe
    model = backdoored.config
    masks = channel_masks(model, plan.head_index)
    tape = ad.Tape()
    live = {k: tape.param(k, v) for k, v in backdoored.params().items()}
    logits = forward_params(splits.train.inputs, live, model, backdoored.ln_mode)
    grads = tape.backward(ad.cross_entropy(logits, splits.train.labels))
    inside = math.sqrt(sum(float(np.sum(g[masks[k]] ** 2)) for k, g in grads.items()))
    total = math.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
    tuned, _ = train(backdoored, splits.train, p.epochs, p.lr, cfg.seed + 1)
    after = compute_metrics(tuned, paired, cfg.target)
    leaks = isolation_violations(tuned, plan.head_index)
    return {"channel_grad_norm": inside, "total_grad_norm": total, "epochs": p.epochs,
            "CA_after": after["CA"], "ASR_after": after["ASR"],
            "isolation_violations_after": int(sum(leaks.values()))}


def flipped_samples(pruned, backdoored, paired) -> list:
    clean = np.flatnonzero(~paired.poisoned)
    a = predict(pruned, paired.inputs[clean]).argmax(axis=1)
    b = predict(backdoored, paired.inputs[clean]).argmax(axis=1)
    return [int(i) for i in clean[a != b]]


# --- pipelines ---------------------------------------------------------------

def run_hpmi(cfg: ExperimentConfig) -> ExperimentReport:
    """Train, scan, prune, inject, evaluate, verify and defend; artifacts go to ``output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = ExperimentReport("hpmi", cfg.to_dict())
    run = _Runner(report, out)
    model = cfg.model.build()

    splits, trig, paired = run("data", prepare_data, cfg)
    run.record("data", {"train": len(splits.train), "val": len(splits.val), "test": len(splits.test),
                        "trigger": trig.describe()}, {"detail": "splits ready"})

    benign = run("train_benign", train_benign, cfg, splits)
    save_checkpoint(benign, out / "benign.ckpt")
    m_benign = compute_metrics(benign, paired, cfg.target)
    run.record("train_benign", {"metrics": m_benign}, {**m_benign, "detail": "benign.ckpt"})

    scan = run("scan", scan_prune_targets, benign, splits.val)
    head = scan.selected if cfg.surgery.head_index is None else cfg.surgery.head_index
    run.record("scan", {**dataclasses.asdict(scan), "head_index": head},
               {"CA": scan.accuracies[head], "detail": f"head {head}"})

    pruned = run("prune", prune_head, benign, head)
    save_checkpoint(pruned, out / "pruned.ckpt")
    m_pruned = compute_metrics(pruned, paired, cfg.target)
    run.record("prune", {"metrics": m_pruned},
               {**m_pruned, "CAD": m_pruned["CA"] - m_benign["CA"], "detail": "pruned.ckpt"})

    offset, margin_stats = run("offset", offset_for, cfg, pruned, splits)
    run.record("offset", {"offset": offset, **margin_stats}, {"detail": f"a={offset:g}"})

    mal, mal_rec = run("malicious", obtain_malicious, cfg, splits, trig, offset)
    save_checkpoint(mal, out / "malicious.ckpt")
    run.record("malicious", mal_rec, {"detail": mal_rec["source"]})

    plan = SurgeryPlan(head, cfg.target, offset, cfg.surgery.route)
    backdoored = run("inject", inject_head, pruned, mal, plan)
    save_checkpoint(backdoored, out / "backdoored.ckpt")
    run.record("inject", {"plan": plan.to_dict(),
                          "isolation_violations": isolation_violations(backdoored, head)},
               {"detail": "backdoored.ckpt"})

    m_bd = run("evaluate", compute_metrics, backdoored, paired, cfg.target)
    flips = flipped_samples(pruned, backdoored, paired)
    metrics = {"CA": m_bd["CA"], "ASR": m_bd["ASR"], "CAD": m_bd["CA"] - m_benign["CA"],
               "CAD_vs_pruned": m_bd["CA"] - m_pruned["CA"], "CA_benign": m_benign["CA"],
               "CA_pruned": m_pruned["CA"], "ASR_benign": m_benign["ASR"],
               "ASR_pruned": m_pruned["ASR"]}
    report.metrics = metrics
    run.record("evaluate", {"metrics": metrics, "flipped_clean_samples": flips},
               {"CA": metrics["CA"], "ASR": metrics["ASR"], "CAD": metrics["CAD"]})

    thm = run("verify", verify_logit_identity, pruned, backdoored, mal, paired.inputs, cfg.target)
    run.record("verify", thm.to_dict(), {"detail": "pass" if thm.passed else "FAIL"})

    defenses = run("defenses", run_defenses, cfg, backdoored, splits, paired, out, "hpmi")
    run.record("defenses", defenses, {"detail": ",".join(sorted(defenses)) or "none"})

    if cfg.finetune_probe.enabled:
        probe = run("finetune_probe", finetune_probe, cfg, backdoored, plan, splits, paired)
        run.record("finetune_probe", probe, {"CA": probe["CA_after"], "ASR": probe["ASR_after"]})

    report.status = "complete"
    emit_report(report, out)
    return report


def train_dp_model(cfg: ExperimentConfig, splits: Splits, trig: Trigger) -> TransformerCheckpoint:
    dp = cfg.dp
    poisoned = poison_dataset(splits.train, trig, "fraction", fraction=dp.fraction,
                              target=cfg.target, seed=cfg.seed)
    if dp.start == "benign":
        start = train_benign(cfg, splits)
    else:
        start = init_checkpoint(cfg.model.build(), cfg.seed)
    ckpt, _ = train(start, poisoned, dp.epochs, dp.lr, cfg.seed, batch_size=dp.batch_size,
                    max_grad_norm=cfg.benign.max_grad_norm)
    return ckpt


def run_dp_baseline(cfg: ExperimentConfig) -> ExperimentReport:
    """Conventional poisoning with the same trigger: relabeled poisoned training, same metrics and defenses."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = ExperimentReport("dp", cfg.to_dict())
    run = _Runner(report, out)

    splits, trig, paired = run("data", prepare_data, cfg)
    run.record("data", {"train": len(splits.train), "val": len(splits.val), "test": len(splits.test),
                        "trigger": trig.describe()}, {"detail": "splits ready"})

    model = run("train_dp", train_dp_model, cfg, splits, trig)
    save_checkpoint(model, out / "dp.ckpt")
    run.record("train_dp", {"fraction": cfg.dp.fraction, "epochs": cfg.dp.epochs},
               {"detail": "dp.ckpt"})

    m = run("evaluate", compute_metrics, model, paired, cfg.target)
    report.metrics = dict(m)
    run.record("evaluate", {"metrics": m}, {"CA": m["CA"], "ASR": m["ASR"]})

    defenses = run("defenses", run_defenses, cfg, model, splits, paired, out, "dp")
    run.record("defenses", defenses, {"detail": ",".join(sorted(defenses)) or "none"})

    report.status = "complete"
    emit_report(report, out)
    return report


def compare_reports(reports: list) -> dict:
    """Side-by-side rows (one per report) of attack metrics and defense outcomes."""
    rows = []
    for r in reports:
        d = r.stages.get("defenses", {})
        rows.append({
            "kind": r.kind, "CA": r.metrics.get("CA"), "ASR": r.metrics.get("ASR"),
            "CAD": r.metrics.get("CAD"),
            "strip_FAR": d.get("strip", {}).get("FAR"),
            "nc_target_anomaly": d.get("neural_cleanse", {}).get("target_anomaly_index"),
            "fp_asr_with_collapsed_ca": d.get("fine_prune", {}).get("asr_with_collapsed_ca"),
            "trigger": json.dumps(r.config.get("trigger"), sort_keys=True),
        })
    return {"schema_version": SCHEMA_VERSION, "rows": rows}


def write_comparison(reports: list, out_dir) -> Path:
    comp = compare_reports(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(jsonable(comp), indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(comp["rows"][0]) if comp["rows"] else ["kind"],
                       lineterminator="\n")
    w.writeheader()
    for row in comp["rows"]:
        w.writerow(jsonable(row))
    path = out / "comparison.csv"
    path.write_text(buf.getvalue())
    return path
