"""Time each kernel under the numba and numpy backends, plus a full decode and a train step.

    python benchmarks/bench_kernels.py [--repeat N] [--csv PATH]

Shapes match the task bench (L=56 action tokens, K=256 bins, embed 64, batch 32).
Numba compile time is paid in a warm-up call and excluded.
"""
from __future__ import annotations

import argparse
import csv
import sys
import timeit

import numpy as np

from dact import kernels
from dact._accel import HAVE_NUMBA
from dact.decoder import DecodeConfig, decode
from dact.model import ModelConfig, Optimizer, PolicyModel, cosine_gamma_sampler, train_step


def kernel_cases(rng):
    L, K, d, B, S = 56, 256, 64, 32, 62
    probs = rng.dirichlet(np.ones(K), size=L)
    x = rng.normal(size=(B * S, d))
    g, b = rng.normal(size=d), rng.normal(size=d)
    _, xh, rs = kernels.implementation("numpy", "layernorm_fwd")(x, g, b, 1e-5)
    att = rng.normal(size=(B * 4 * S, S))
    ff = rng.normal(size=B * S * 128)
    _, t = kernels.implementation("numpy", "gelu_fwd")(ff)
    vals = rng.normal(size=10_000)
    edges = np.sort(rng.normal(size=257))
    return {
        "digitize": (vals, edges),
        "max_and_gap": (probs,),
        "select_top": (probs.max(axis=1), rng.random(L) < 0.6, 12),
        "gumbel_argmax": (np.log(probs), rng.gumbel(size=probs.shape), 0.7),
        "softmax_rows": (att,),
        "layernorm_fwd": (x, g, b, 1e-5),
        "layernorm_bwd": (x, xh, rs, g),
        "gelu_fwd": (ff,),
        "gelu_bwd": (ff, ff, t),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = ["numba", "numpy"] if HAVE_NUMBA else ["numpy"]
    rows = []

    for name, inputs in kernel_cases(rng).items():
        row = {"case": name}
        for be in backends:
            fn = kernels.implementation(be, name)
            fn(*inputs)  # compile / warm up
            row[be] = best_of(lambda: fn(*inputs), args.repeat, 20)
        rows.append(row)

    cfg = ModelConfig(vocab_size=257, context_vocab=64, L=56, context_len=6)
    model = PolicyModel(cfg, rng=0)
    ctx = rng.integers(0, 64, size=6)
    bctx = rng.integers(0, 64, size=(32, 6))
    btgt = rng.integers(0, 256, size=(32, 56))
    for label, fn in (
        ("decode T=12", lambda: decode(model, ctx, DecodeConfig())),
        ("train step B=32", lambda: train_step(model, (bctx, btgt), cosine_gamma_sampler(), Optimizer(lr=0.0),
                                               np.random.default_rng(1))),
    ):
        row = {"case": label}
        for be in backends:
            prev = kernels.use_backend(be)
            fn()
            row[be] = best_of(fn, args.repeat, 3)
            kernels.use_backend(prev)
        rows.append(row)

    print(f"{'case':<18}" + "".join(f"{be + ' (ms)':>14}" for be in backends) + ("   numpy/numba" if len(backends) == 2 else ""))
    for row in rows:
        line = f"{row['case']:<18}" + "".join(f"{row[be] * 1e3:>14.4f}" for be in backends)
        if len(backends) == 2:
            line += f"{row['numpy'] / row['numba']:>14.2f}x"
        print(line)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["case", *backends])
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
