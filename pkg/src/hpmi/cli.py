"""Command-line entry point: ``hpmi <subcommand>``.

Every subcommand that reads an experiment config also accepts one flag per
config key (``--benign.epochs 5``); flags take precedence over the file,
which takes precedence over built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import harness
from .backdoor import train_malicious_head
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointFormatError, ConfigMismatchError, ContractError, ShapeError, StageError
from .surgery import (
    SurgeryPlan,
    inject_head,
    malicious_config,
    prune_head,
    scan_prune_targets,
    verify_logit_identity,
)
from .transformer import accuracy

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    g = p.add_argument_group("config overrides")
    for key in harness.flatten(harness.ExperimentConfig().to_dict()):
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", type=_parse_value,
                       default=argparse.SUPPRESS)


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    return harness.apply_overrides(cfg, overrides) if overrides else cfg


def _emit(obj, out=None) -> None:
    text = json.dumps(harness.jsonable(obj), indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


# --- subcommands ---------------------------------------------------------------

def cmd_config(args) -> int:
    cfg = _config(args)
    if args.out:
        Path(args.out).write_text(cfg.to_json() + "\n")
    print(cfg.to_json())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    splits, trig, _ = harness.prepare_data(cfg)
    if args.malicious:
        if args.offset is None and cfg.surgery.offset is None:
            raise ContractError("training a malicious head needs --offset or surgery.offset")
        offset = args.offset if args.offset is not None else cfg.surgery.offset
        mal, res = train_malicious_head(cfg.model.build(), splits.train, splits.val, trig,
                                        harness.malicious_train_config(cfg, offset), cfg.target, cfg.seed)
        save_checkpoint(mal, args.out)
        _emit({"checkpoint": args.out, **res.to_dict()})
        return EXIT_OK
    ckpt = harness.train_benign(cfg, splits)
    save_checkpoint(ckpt, args.out)
    _emit({"checkpoint": args.out, "val_accuracy": accuracy(ckpt, splits.val),
           "test_accuracy": accuracy(ckpt, splits.test)})
    return EXIT_OK


def cmd_scan(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint, expected=cfg.model.build())
    splits, _, _ = harness.prepare_data(cfg)
    rep = scan_prune_targets(ckpt, splits.val)
    _emit({"baseline_accuracy": rep.baseline_accuracy, "accuracies": rep.accuracies,
           "cad": rep.cad, "selected": rep.selected}, args.json)
    return EXIT_OK


def cmd_prune(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    pruned = prune_head(ckpt, args.head)
    save_checkpoint(pruned, args.out)
    _emit({"checkpoint": args.out, "head": args.head})
    return EXIT_OK


def cmd_inject(args) -> int:
    pruned = load_checkpoint(args.pruned)
    mal = load_checkpoint(args.malicious, expected=malicious_config(pruned.config))
    plan = SurgeryPlan(args.head, args.target, args.offset, args.route)
    bd = inject_head(pruned, mal, plan)
    save_checkpoint(bd, args.out)
    _emit({"checkpoint": args.out, "plan": plan.to_dict()})
    return EXIT_OK


def cmd_verify(args) -> int:
    pruned = load_checkpoint(args.pruned)
    bd = load_checkpoint(args.backdoored, expected=pruned.config)
    mal = load_checkpoint(args.malicious, expected=malicious_config(pruned.config))
    cfg = _config(args)
    if args.inputs == "random":
        model = pruned.config
        rng = np.random.default_rng(cfg.seed)
        x = rng.random((args.n or 256, model.patches, model.patch_dim))
    else:
        _, _, paired = harness.prepare_data(cfg)
        x = paired.inputs if args.n is None else paired.inputs[:args.n]
    rep = verify_logit_identity(pruned, bd, mal, x, cfg.target, tol=args.tol)
    _emit(rep.to_dict(), args.json)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_defend(args) -> int:
    cfg = _config(args)
    only = set(args.only.split(",")) if args.only else {"strip", "fine-prune", "nc"}
    bad = only - {"strip", "fine-prune", "nc"}
    if bad:
        raise ContractError(f"unknown defenses: {sorted(bad)}")
    cfg = harness.apply_overrides(cfg, {"defenses.strip": "strip" in only,
                                        "defenses.fine_prune": "fine-prune" in only,
                                        "defenses.neural_cleanse": "nc" in only})
    model = load_checkpoint(args.checkpoint, expected=cfg.model.build())
    splits, _, paired = harness.prepare_data(cfg)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = harness.run_defenses(cfg, model, splits, paired, out, args.tag)
    _emit(rec, out / f"defenses_{args.tag}.json")
    return EXIT_OK


def cmd_hpmi(args) -> int:
    rep = harness.run_hpmi(_config(args))
    _emit({"metrics": rep.metrics, "logit_identity": rep.stages["verify"], "output_dir": rep.config["output_dir"]})
    return EXIT_OK if rep.stages["verify"]["pass"] else EXIT_FAIL


def cmd_dp(args) -> int:
    rep = harness.run_dp_baseline(_config(args))
    _emit({"metrics": rep.metrics, "output_dir": rep.config["output_dir"]})
    return EXIT_OK


def cmd_report(args) -> int:
    reports = [harness.read_report(r) for r in args.runs]
    path = harness.write_comparison(reports, args.out)
    print(path.read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hpmi", description="Head pruning and malicious-head injection experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the fully materialized config")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_config)

    p = sub.add_parser("train", help="train a benign model (or a malicious head with --malicious)")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--malicious", action="store_true")
    p.add_argument("--offset", type=float)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("scan", help="validation accuracy after pruning each head")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json")
    p.set_defaults(fn=cmd_scan)

    p = sub.add_parser("prune", help="prune one head and its channel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("inject", help="write a single-head model into a pruned channel")
    p.add_argument("--pruned", required=True)
    p.add_argument("--malicious", required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--offset", type=float, required=True)
    p.add_argument("--route", default="target", choices=["target", "signed"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inject)

    p = sub.add_parser("verify", help="check logit change == s(x) on the target class only")
    _add_config_flags(p)
    p.add_argument("--pruned", required=True)
    p.add_argument("--backdoored", required=True)
    p.add_argument("--malicious", required=True)
    p.add_argument("--inputs", choices=["test-paired", "random"], default="test-paired")
    p.add_argument("--n", type=int, help="number of inputs (random inputs default to 256)")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--json")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("defend", help="run STRIP / fine-pruning / Neural Cleanse on a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--only", help="comma list of strip,fine-prune,nc")
    p.add_argument("--tag", default="model")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("hpmi", help="full attack pipeline")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_hpmi)

    p = sub.add_parser("dp-baseline", help="data-poisoning baseline with the same trigger")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_dp)

    p = sub.add_parser("report", help="compare finished runs side by side")
    p.add_argument("runs", nargs="+", help="run directories or report.json files")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.fn(args)
    except (ContractError, ShapeError, ConfigMismatchError, CheckpointFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
