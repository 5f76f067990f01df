import numpy as np
import pytest

from hpmi.transformer import ModelConfig, init_checkpoint

TOY = ModelConfig(layers=2, heads=4, head_width=8, ffn_width=64, classes=4, tokens=17, patch_dim=16)


def randomize(ckpt, seed, scale=0.3):
    """Every parameter drawn at random (gammas near 1) so no entry is trivially zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for k, v in ckpt.params().items():
        if k.endswith("_g"):
            params[k] = 1.0 + 0.1 * rng.standard_normal(v.shape)
        else:
            params[k] = scale * rng.standard_normal(v.shape)
    return ckpt.with_params(params)


def random_model(cfg=TOY, seed=0, scale=0.3):
    return randomize(init_checkpoint(cfg, seed), seed + 1000, scale)


def random_inputs(cfg, n, seed=0):
    return np.random.default_rng(seed).random((n, cfg.patches, cfg.patch_dim))


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture(scope="session")
def reference_runs(tmp_path_factory):
    """The seeded reference HPMI and data-poisoning runs with default settings."""
    from hpmi.harness import ExperimentConfig, run_dp_baseline, run_hpmi

    root = tmp_path_factory.mktemp("reference")
    hpmi = run_hpmi(ExperimentConfig(output_dir=str(root / "hpmi")))
    dp = run_dp_baseline(ExperimentConfig(output_dir=str(root / "dp")))
    return {"hpmi": hpmi, "dp": dp, "root": root}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion, echoed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
