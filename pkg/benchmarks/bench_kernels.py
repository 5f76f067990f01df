"""Compare the numpy fallback and the compiled kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Times each kernel on activation-shaped inputs (batch x tokens x width) and
one full forward+backward training step of the toy model, per backend.
"""

import argparse
import json
import time

import numpy as np

from hpmi import autodiff as ad
from hpmi import kernels
from hpmi.transformer import ModelConfig, forward_params, init_checkpoint


def best_of(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    x = rng.standard_normal((64 * 17, 32))
    g = rng.standard_normal(32)
    b = rng.standard_normal(32)
    gy = rng.standard_normal(x.shape)
    att = rng.standard_normal((64 * 4 * 17, 17))
    hid = rng.standard_normal((64 * 17, 64))
    bounds = ((0, 8), (8, 16), (16, 32))
    y, xhat, rstd = kernels.layer_norm_fwd(x, g, b, 1e-5, bounds)
    sm = kernels.softmax_fwd(att)
    return {
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(x, g, b, 1e-5, bounds),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(gy, xhat, rstd, g, bounds),
        "softmax_fwd": lambda: kernels.softmax_fwd(att),
        "softmax_bwd": lambda: kernels.softmax_bwd(att, sm),
        "gelu_fwd": lambda: kernels.gelu_fwd(hid),
        "gelu_bwd": lambda: kernels.gelu_bwd(hid, hid),
    }


def train_step(rng):
    cfg = ModelConfig(layers=2, heads=4, head_width=8, ffn_width=64, classes=4, tokens=17, patch_dim=16)
    params = init_checkpoint(cfg, 0).params()
    x = rng.random((32, cfg.patches, cfg.patch_dim))
    y = rng.integers(0, cfg.classes, 32)

    def step():
        tape = ad.Tape()
        live = {k: tape.param(k, v) for k, v in params.items()}
        tape.backward(ad.cross_entropy(forward_params(x, live, cfg, 1), y))
    return step


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    results = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        rng = np.random.default_rng(0)
        timings = {k: best_of(fn, args.repeat) for k, fn in cases(rng).items()}
        timings["train_step"] = best_of(train_step(rng), max(3, args.repeat // 4))
        results[name] = timings
    names = list(results)
    print(f"{'kernel':<16}" + "".join(f"{n:>12}" for n in names) +
          ("     speedup" if len(names) > 1 else ""))
    for k in results[names[0]]:
        row = f"{k:<16}" + "".join(f"{results[n][k] * 1e3:>10.3f}ms" for n in names)
        if len(names) > 1:
            row += f"{results['python'][k] / results[names[1]][k]:>11.2f}x"
        print(row)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
