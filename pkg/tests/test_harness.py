import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpmi.checkpoint import load_checkpoint, save_checkpoint
from hpmi.errors import ContractError, StageError
from hpmi.harness import (
    SCHEMA_VERSION,
    ExperimentConfig,
    ExperimentReport,
    apply_overrides,
    compare_reports,
    emit_report,
    flatten,
    load_config,
    prepare_data,
    read_report,
    run_dp_baseline,
    run_hpmi,
    write_comparison,
)
from hpmi.metrics import compute_metrics, metrics_from_predictions
from hpmi.surgery import malicious_config
from hpmi.transformer import Dataset

from conftest import TOY, random_model

FAST = {"benign.epochs": 3, "defenses.strip": False, "defenses.fine_prune": False,
        "defenses.neural_cleanse": False, "finetune_probe.enabled": False}


def fast_config(tmp_path, **extra):
    return apply_overrides(ExperimentConfig(output_dir=str(tmp_path)), {**FAST, **extra})


# --- config ------------------------------------------------------------------------

def test_defaults_are_materialized():
    d = ExperimentConfig().to_dict()
    assert d["seed"] == 0 and d["target"] == 1
    assert d["model"]["heads"] == 4 and d["dataset"]["kind"] == "synthetic"
    assert d["malicious"]["rho"] == 0.2 and d["surgery"]["tau"] == 0.99
    assert d["defenses"]["strip_overlays"] == 100 and d["defenses"]["nc_threshold"] == 2.0
    assert ExperimentConfig.from_dict(d) == ExperimentConfig()
    assert all(v is not None or k.endswith(("path", "limit", "offset", "head_index", "fine_prune_step"))
               for k, v in flatten(d).items())


def test_config_requires_seed_and_rejects_unknown_keys(tmp_path):
    with pytest.raises(ContractError, match="seed"):
        ExperimentConfig.from_dict({"target": 1})
    with pytest.raises(ContractError, match="unknown"):
        ExperimentConfig.from_dict({"seed": 0, "epochs": 3})
    with pytest.raises(ContractError, match="unknown"):
        ExperimentConfig.from_dict({"seed": 0, "benign": {"epoch": 3}})
    f = tmp_path / "c.json"
    f.write_text("{not json")
    with pytest.raises(ContractError):
        load_config(f)
    f.write_text(json.dumps({"seed": 3, "benign": {"epochs": 7}}))
    cfg = load_config(f)
    assert cfg.seed == 3 and cfg.benign.epochs == 7 and cfg.benign.lr == 1e-3


@pytest.mark.parametrize("bad", [{"target": 4}, {"trigger": {"kind": "wave"}},
                                 {"malicious": {"rho": 0.0}}, {"dp": {"start": "pretrained"}}])
def test_config_invariants(bad):
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({"seed": 0, **bad})


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), {"benign.epochs": 5, "seed": 9, "surgery.offset": 4.0})
    assert (cfg.benign.epochs, cfg.seed, cfg.surgery.offset) == (5, 9, 4.0)
    with pytest.raises(ContractError):
        apply_overrides(ExperimentConfig(), {"benign.epoch": 5})


def test_dataset_must_fit_model():
    cfg = apply_overrides(ExperimentConfig(), {"dataset.patch": 2})
    with pytest.raises(ContractError, match="patches"):
        prepare_data(cfg)


# --- metrics -----------------------------------------------------------------------

def test_metrics_hand_counted():
    # pairs: (label 0 -> pred 0 | triggered pred 1), (label 1 -> 2 | 1), (label 2 -> 2 | 2), (label 3 -> 3 | 1)
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    flags = np.tile([False, True], 4)
    pred = np.array([0, 1, 2, 1, 2, 2, 3, 1])
    data = Dataset(np.zeros((8, 2, 2)), labels, flags)
    m = metrics_from_predictions(pred, data, 1)
    assert m["CA"] == 3 / 4
    assert m["ASR"] == 2 / 3  # the label-1 pair is excluded from the denominator


def test_metrics_constant_and_oracle_models():
    rng = np.random.default_rng(0)
    labels = np.repeat(rng.integers(0, 4, 30), 2)
    x = np.zeros((60, TOY.patches, TOY.patch_dim))
    x[:, 0, 0] = labels
    x[1::2, -1, :] = 0.5  # trigger lives away from the label entry
    paired = Dataset(x, labels, np.tile([False, True], 30))

    def always(v):
        out = np.zeros((len(v), 4))
        out[:, 2] = 1.0
        return out

    def oracle(v):
        return np.eye(4)[v[:, 0, 0].astype(int)]
    m = compute_metrics(always, paired, 2)
    assert m["ASR"] == 1.0
    assert m["CA"] == np.mean(labels[0::2] == 2)
    assert compute_metrics(oracle, paired, 2) == {"CA": 1.0, "ASR": 0.0}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40),
       st.integers(0, 3))
def test_asr_excludes_target_label(pairs, target):
    labels = np.repeat([p[0] for p in pairs], 2)
    pred = np.array([v for p in pairs for v in p[1:]])
    data = Dataset(np.zeros((len(labels), 1, 1)), labels, np.tile([False, True], len(pairs)))
    m = metrics_from_predictions(pred, data, target)
    hits = [p[2] == target for p in pairs if p[0] != target]
    if hits:
        assert m["ASR"] == sum(hits) / len(hits)
    else:
        assert np.isnan(m["ASR"])
    assert m["CA"] == sum(p[1] == p[0] for p in pairs) / len(pairs)


# --- reports -------------------------------------------------------------------------

def test_emit_report_round_trip(tmp_path):
    rep = ExperimentReport("hpmi", ExperimentConfig().to_dict(), {"CA": 0.5, "ASR": float("nan")},
                           {"a": {"x": np.float64(1.5), "summary": {"CA": 0.5, "detail": "ok"}},
                            "b": {"flags": np.array([True, False])}},
                           {"a": 0.1, "b": 0.2}, "complete")
    jpath, cpath = emit_report(rep, tmp_path / "out")
    back = read_report(tmp_path / "out")
    assert back.to_dict() == rep.to_dict()
    assert back.metrics["ASR"] is None
    assert json.loads(jpath.read_text())["schema_version"] == SCHEMA_VERSION
    rows = list(csv.DictReader(cpath.open()))
    assert [r["stage"] for r in rows] == ["a", "b"]
    assert rows[0]["CA"] == "0.5" and rows[0]["detail"] == "ok"


def test_stage_failure_keeps_partial_report(tmp_path):
    cfg = fast_config(tmp_path, **{"malicious.rho": 0.0, "malicious.surrogate_path": str(tmp_path / "missing.ckpt")})
    with pytest.raises(StageError) as err:
        run_hpmi(cfg)
    assert err.value.stage == "malicious"
    rep = read_report(tmp_path)
    assert rep.status == "failed:malicious"
    assert set(rep.stages) == {"data", "train_benign", "scan", "prune", "offset"}
    assert (tmp_path / "pruned.ckpt").exists() and not (tmp_path / "backdoored.ckpt").exists()


def test_surrogate_head_without_training_data(tmp_path):
    sur = random_model(malicious_config(TOY), 3)
    w = np.zeros_like(sur.head_w)
    w[:, 1] = 1.0
    sur = sur.with_params({**sur.params(), "head_w": w})
    save_checkpoint(sur, tmp_path / "surrogate.ckpt")
    cfg = fast_config(tmp_path / "run", **{"malicious.rho": 0.0,
                                          "malicious.surrogate_path": str(tmp_path / "surrogate.ckpt")})
    rep = run_hpmi(cfg)
    assert rep.status == "complete"
    assert rep.stages["malicious"]["source"] == "surrogate"
    assert rep.stages["verify"]["pass"]
    assert rep.stages["verify"]["max_off_channel_dev"] < 1e-9
    mal = load_checkpoint(tmp_path / "run" / "malicious.ckpt")
    assert mal.embed.tobytes() == sur.embed.tobytes()


def test_dp_without_poison_stays_near_chance(tmp_path):
    cfg = fast_config(tmp_path, **{"dp.fraction": 0.0, "dp.epochs": 20})
    rep = run_dp_baseline(cfg)
    assert rep.metrics["ASR"] <= 2 / TOY.classes
    assert list(rep.stages) == ["data", "train_dp", "evaluate", "defenses"]
    rows = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert len(rows) == len(rep.timing) == 4
    assert rows[-1]["detail"] == "none"


# --- the seeded reference runs -------------------------------------------------------

def test_reference_hpmi_report(reference_runs):
    rep = reference_runs["hpmi"]
    out = reference_runs["root"] / "hpmi"
    assert rep.status == "complete"
    for name in ("benign", "pruned", "malicious", "backdoored"):
        assert (out / f"{name}.ckpt").exists()
    assert read_report(out).to_dict() == rep.to_dict()
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert [r["stage"] for r in rows] == list(rep.timing) == list(rep.stages)
    m = rep.metrics
    assert m["CAD"] == pytest.approx(m["CA"] - m["CA_benign"], abs=1e-15)
    assert m["CAD_vs_pruned"] == pytest.approx(m["CA"] - m["CA_pruned"], abs=1e-15)
    assert rep.stages["scan"]["head_index"] == rep.stages["inject"]["plan"]["head_index"]


def test_reference_offset_keeps_clean_predictions(reference_runs):
    rep = reference_runs["hpmi"]
    n_clean = rep.stages["data"]["test"]
    flips = rep.stages["evaluate"]["flipped_clean_samples"]
    assert len(flips) <= 0.01 * n_clean
    if not flips:
        assert rep.metrics["CA"] == rep.metrics["CA_pruned"]


def test_reference_dp_implants_backdoor(reference_runs):
    rep = reference_runs["dp"]
    assert rep.metrics["ASR"] >= 0.9
    assert (reference_runs["root"] / "dp" / "dp.ckpt").exists()


def test_comparison_rows(reference_runs, tmp_path):
    reports = [reference_runs["hpmi"], reference_runs["dp"]]
    comp = compare_reports(reports)
    assert [r["kind"] for r in comp["rows"]] == ["hpmi", "dp"]
    assert comp["rows"][0]["trigger"] == comp["rows"][1]["trigger"]
    path = write_comparison(reports, tmp_path)
    assert len(path.read_text().splitlines()) == 3
    assert json.loads((tmp_path / "comparison.json").read_text())["schema_version"] == SCHEMA_VERSION
