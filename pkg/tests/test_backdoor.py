import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpmi import autodiff as ad
from hpmi.backdoor import (
    MaliciousTrainConfig,
    Trigger,
    apply_trigger,
    clean_margins,
    make_blend_pattern,
    make_blend_trigger,
    make_patch_trigger,
    malicious_loss,
    poison_dataset,
    select_offset,
    train_malicious_head,
)
from hpmi.checkpoint import load_checkpoint
from hpmi.errors import ContractError, ShapeError
from hpmi.harness import ExperimentConfig, prepare_data
from hpmi.surgery import malicious_config, malicious_score
from hpmi.transformer import Dataset, ModelConfig

from conftest import TOY

SMALL = ModelConfig(layers=1, heads=2, head_width=4, ffn_width=8, classes=2, tokens=5, patch_dim=4)


def _trig(mask_value, pattern_value, shape=(2, 3)):
    return Trigger(np.full(shape, mask_value), np.full(shape, pattern_value), "blend")


# --- triggers -----------------------------------------------------------------------

def test_apply_trigger_examples():
    x = np.random.default_rng(0).random((4, 2, 3))
    assert apply_trigger(x, _trig(0.0, 0.7)).tobytes() == x.tobytes()
    np.testing.assert_array_equal(apply_trigger(x, _trig(1.0, 0.7)), np.full(x.shape, 0.7))
    assert apply_trigger(np.ones((2, 3)), _trig(0.2, 0.0))[0, 0] == pytest.approx(0.8, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_apply_trigger_range_and_untouched_entries(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 16, 16))
    mask = np.where(rng.random((16, 16)) < 0.5, 0.0, rng.random((16, 16)))
    trig = Trigger(mask, rng.uniform(-0.5, 1.5, (16, 16)), "patch")
    out = apply_trigger(x, trig)
    assert out.min() >= 0.0 and out.max() <= 1.0
    off = np.broadcast_to(mask == 0, x.shape)
    assert out[off].tobytes() == x[off].tobytes()


def test_patch_trigger_support_and_idempotence():
    a, b = make_patch_trigger(TOY, 3), make_patch_trigger(TOY, 3)
    assert a.pattern.tobytes() == b.pattern.tobytes()
    assert set(np.unique(a.mask)) == {0.0, 1.0}
    assert np.flatnonzero(a.mask.any(axis=1)).tolist() == [TOY.patches - 1]
    assert a.mask.sum() == TOY.patch_dim
    x = np.random.default_rng(1).random((5, TOY.patches, TOY.patch_dim))
    once = apply_trigger(x, a)
    assert apply_trigger(once, a).tobytes() == once.tobytes()
    assert make_patch_trigger(TOY, 4).pattern.tobytes() != a.pattern.tobytes()


def test_blend_trigger_examples():
    t = make_blend_trigger(np.ones((2, 3)), 0.2)
    np.testing.assert_allclose(apply_trigger(np.zeros((2, 3)), t), 0.2, atol=1e-15)
    x = np.full((2, 3), 0.9)
    small = make_blend_trigger(np.zeros((2, 3)), 1e-9)
    np.testing.assert_allclose(apply_trigger(x, small), x, atol=1e-8)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ContractError):
            make_blend_trigger(np.zeros((2, 3)), bad)


def test_blend_repeated_application_closed_form():
    alpha = 0.2
    pattern = make_blend_pattern(TOY, 0)
    t = make_blend_trigger(pattern, alpha)
    x0 = np.random.default_rng(2).random((TOY.patches, TOY.patch_dim))
    x = x0
    for n in range(1, 31):
        x = apply_trigger(x, t)
        want = (1 - alpha) ** n * x0 + (1 - (1 - alpha) ** n) * pattern
        np.testing.assert_allclose(x, want, atol=1e-12)
    assert np.abs(x - pattern).max() <= 0.8 ** 30


def test_trigger_validation():
    with pytest.raises(ShapeError):
        Trigger(np.zeros((2, 2)), np.zeros((2, 3)), "patch")
    with pytest.raises(ContractError):
        Trigger(np.full((2, 2), 1.5), np.zeros((2, 2)), "patch")
    with pytest.raises(ContractError):
        Trigger(np.zeros((2, 2)), np.zeros((2, 2)), "invisible")
    with pytest.raises(ShapeError):
        apply_trigger(np.zeros((3, 3)), make_patch_trigger(TOY, 0))


# --- poisoning ----------------------------------------------------------------------

def _data(n=10, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, TOY.patches, TOY.patch_dim)), np.arange(n) % classes)


def test_half_balanced():
    d = _data(11)
    before = d.inputs.copy()
    p = poison_dataset(d, make_patch_trigger(TOY, 0), "half-balanced", seed=1)
    assert p.poisoned.sum() == 5
    assert d.inputs.tobytes() == before.tobytes()
    np.testing.assert_array_equal(p.labels, d.labels)
    changed = (p.inputs != d.inputs).any(axis=(1, 2))
    assert not changed[~p.poisoned].any()


def test_test_paired_layout():
    d = _data(6)
    trig = make_patch_trigger(TOY, 0)
    p = poison_dataset(d, trig, "test-paired")
    assert len(p) == 12
    assert not p.poisoned[0::2].any() and p.poisoned[1::2].all()
    np.testing.assert_array_equal(p.inputs[0::2], d.inputs)
    np.testing.assert_array_equal(p.inputs[1::2], apply_trigger(d.inputs, trig))
    np.testing.assert_array_equal(p.labels[1::2], d.labels)


def test_fraction_relabels_exactly():
    d = _data(100)
    p = poison_dataset(d, make_patch_trigger(TOY, 0), "fraction", fraction=0.1, target=2, seed=3)
    assert p.poisoned.sum() == 10
    assert (p.labels[p.poisoned] == 2).all()
    assert (d.labels[p.poisoned] != 2).all()  # non-target samples are used first
    np.testing.assert_array_equal(p.labels[~p.poisoned], d.labels[~p.poisoned])
    assert poison_dataset(d, make_patch_trigger(TOY, 0), "fraction", fraction=0.0, target=2).poisoned.sum() == 0


def test_poison_errors():
    d = _data(4)
    trig = make_patch_trigger(TOY, 0)
    with pytest.raises(ContractError):
        poison_dataset(d.subset(np.array([], dtype=int)), trig, "half-balanced")
    with pytest.raises(ContractError):
        poison_dataset(d, trig, "fraction", fraction=1.5, target=0)
    with pytest.raises(ContractError):
        poison_dataset(d, trig, "fraction", fraction=0.5)
    with pytest.raises(ContractError):
        poison_dataset(d, trig, "everything")


# --- offset -------------------------------------------------------------------------

def _with_moments(mu, sigma, n=200):
    z = np.random.default_rng(0).standard_normal(n)
    z = (z - z.mean()) / z.std()
    return mu + sigma * z


def test_select_offset_examples():
    assert select_offset(_with_moments(2.0, 1.0), 0.99, 1.0) == 6.0
    assert select_offset([2.3] * 10, 0.8, 0.0) == 3.0
    assert select_offset([2.3] * 10, 0.01, 0.0) == 3.0
    assert select_offset(_with_moments(4.2, 3.0), 0.5, 0.0) == 5.0
    # the standard-normal quantile behind the first example
    assert 2.0 + 2.326 + 1.0 < 6.0 and math.ceil(2.0 + 2.3263478740408408 + 1.0) == 6


def test_select_offset_errors():
    with pytest.raises(ContractError):
        select_offset([1.0], 0.9, 1.0)
    with pytest.raises(ContractError):
        select_offset([1.0, 2.0], 1.0, 1.0)
    with pytest.raises(ContractError):
        select_offset([1.0, 2.0], 0.5, -1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3), st.floats(0.01, 0.98), st.floats(0.0, 0.01),
       st.floats(0, 5), st.floats(0, 2))
def test_select_offset_monotone(mu, sigma, tau, dtau, k, dk):
    m = _with_moments(mu, sigma, 50)
    a = select_offset(m, tau, k)
    assert select_offset(m, tau + dtau, k) >= a
    assert select_offset(m, tau, k + dk) >= a


def test_clean_margins():
    logits = np.array([[1.0, 3.0, 0.0], [2.0, 1.0, 5.0], [0.0, 4.0, 4.0]])
    np.testing.assert_array_equal(clean_margins(logits, 1), [0.0, 4.0, 0.0])


# --- malicious training -------------------------------------------------------------

def test_malicious_loss_by_hand():
    s = np.array([1.0, 2.0, 3.0, 4.0])
    flags = np.array([False, True, False, True])
    # clean: (1 + 9) / 2 = 5; triggered: (1 + 1) / 2 = 1
    assert float(malicious_loss(s, flags, 3.0, 2.0)) == 12.0
    assert float(malicious_loss(np.zeros(4), flags, 0.0, 1.0)) == 0.0
    tape = ad.Tape()
    sv = tape.param("s", s)
    g = tape.backward(malicious_loss(sv, flags, 3.0, 1.0))["s"]
    np.testing.assert_allclose(g, [1.0, -1.0, 3.0, 1.0])


def test_malicious_config_validation():
    with pytest.raises(ContractError):
        MaliciousTrainConfig(offset=-1.0)
    with pytest.raises(ContractError):
        MaliciousTrainConfig(offset=1.0, early_stop=0.0)
    with pytest.raises(ContractError):
        MaliciousTrainConfig(offset=1.0, rho=0.0)


def _separable(n=80):
    rng = np.random.default_rng(0)
    y = np.arange(n) % 2
    x = 0.5 * rng.random((n, SMALL.patches, SMALL.patch_dim))
    return Dataset(x, y)


def test_training_is_deterministic_and_warns_without_convergence():
    data = _separable()
    trig = make_patch_trigger(SMALL, 0)
    cfg = MaliciousTrainConfig(offset=4.0, lr=3e-3, epochs=1, early_stop=1e-12, rho=0.5, batch_size=8)
    with pytest.warns(RuntimeWarning, match="did not reach"):
        a, ra = train_malicious_head(SMALL, data, data, trig, cfg, 1, 3)
    with pytest.warns(RuntimeWarning):
        b, rb = train_malicious_head(SMALL, data, data, trig, cfg, 1, 3)
    assert a.config == malicious_config(SMALL)
    for k, v in a.params().items():
        assert v.tobytes() == b.params()[k].tobytes()
    assert ra.to_dict() == rb.to_dict() and not ra.converged
    assert a.head_w[:, 1].tolist() == [1.0] * SMALL.head_width and not a.head_w[:, 0].any()


def test_training_converges_on_small_model():
    data = _separable(120)
    trig = make_patch_trigger(SMALL, 1)
    cfg = MaliciousTrainConfig(offset=4.0, lr=3e-3, epochs=100, rho=1.0, batch_size=8)
    mal, res = train_malicious_head(SMALL, data, data, trig, cfg, 0, 0)
    assert res.converged and res.best_val_loss < 0.1
    s0 = malicious_score(mal, data.inputs, 0)
    s1 = malicious_score(mal, apply_trigger(data.inputs, trig), 0)
    assert s1.mean() - s0.mean() >= 0.8 * 4.0


def test_zero_offset_collapses_the_score():
    data = _separable(60)
    trig = make_patch_trigger(SMALL, 1)
    cfg = MaliciousTrainConfig(offset=0.0, lr=3e-3, epochs=100, early_stop=1e-3, rho=1.0, batch_size=8)
    mal, res = train_malicious_head(SMALL, data, data, trig, cfg, 0, 0)
    assert res.converged
    hot = malicious_score(mal, apply_trigger(data.inputs, trig), 0)
    assert np.abs(hot).max() < 0.2


def test_reference_head_separates_held_out_pairs(reference_runs):
    rep = reference_runs["hpmi"]
    cfg = ExperimentConfig.from_dict(rep.config)
    assert rep.stages["malicious"]["converged"] and rep.stages["malicious"]["best_val_loss"] < 0.1
    a = rep.stages["offset"]["offset"]
    mal = load_checkpoint(Path(cfg.output_dir) / "malicious.ckpt")
    splits, trig, _ = prepare_data(cfg)
    clean = malicious_score(mal, splits.test.inputs, cfg.target)
    hot = malicious_score(mal, apply_trigger(splits.test.inputs, trig), cfg.target)
    assert hot.mean() - clean.mean() >= 0.8 * a
    assert np.percentile(clean, 99) < np.percentile(hot, 1)
