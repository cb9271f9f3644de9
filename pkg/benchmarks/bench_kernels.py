"""Compare the compiled kernels with the numpy reference.

Times each kernel at training-sized shapes, then one short pretraining run
(forward, backward and optimizer step) with each backend active.

    python3 benchmarks/bench_kernels.py [--repeat N] [--steps S]
"""
import argparse
import time

import numpy as np

from hepa import kernels
from hepa.datasets import SyntheticSpec, synthetic_dataset
from hepa.pretrain import PretrainConfig, pretrain

B, N, D, HEADS = 64, 8, 256, 4


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(ks, rng):
    x = rng.standard_normal((B, N, 4 * D)).astype(np.float32)
    h = rng.standard_normal((B, N, D)).astype(np.float32)
    g, b = np.ones(D, np.float32), np.zeros(D, np.float32)
    scores = rng.standard_normal((B, HEADS, N, N)).astype(np.float32)
    _, xhat, rstd = ks.layernorm(h, g, b, 1e-5)
    sm = ks.softmax(scores)
    p = rng.standard_normal(D * D * 4).astype(np.float32)
    grad = rng.standard_normal(p.size).astype(np.float32)
    m, v = np.zeros_like(p), np.zeros_like(p)
    return {
        "gelu fwd": lambda: ks.gelu(x),
        "gelu bwd": lambda: ks.gelu_grad(x, x),
        "layernorm fwd": lambda: ks.layernorm(h, g, b, 1e-5),
        "layernorm bwd": lambda: ks.layernorm_grad(h, xhat, rstd, g),
        "softmax fwd": lambda: ks.softmax(scores),
        "softmax bwd": lambda: ks.softmax_grad(sm, scores),
        "adamw (262k params)": lambda: ks.adamw_update(p, grad, m, v, 1e-3, 1e-2, 0.9, 0.999, 1e-8, 1),
    }


def training_time(ks, steps):
    data = synthetic_dataset(SyntheticSpec(n_episodes=20, T=600, seed=0), context_len=128, patch=16, K=50)
    cfg = PretrainConfig(max_epochs=1, max_steps_per_epoch=steps, val_samples=32, snapshot_epochs=())
    saved = kernels.active
    kernels.active = ks
    try:
        t0 = time.perf_counter()
        pretrain(data, cfg)
        return time.perf_counter() - t0
    finally:
        kernels.active = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    backends = [kernels.reference, kernels.compiled]
    rows = []
    for name in kernel_cases(kernels.reference, np.random.default_rng(0)):
        t = [best_of(kernel_cases(ks, np.random.default_rng(0))[name], args.repeat) for ks in backends]
        rows.append((name, *t))
    t = [training_time(ks, args.steps) for ks in backends]
    rows.append((f"pretrain epoch ({args.steps} steps)", *t))
    print(f"{'case':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, ref, fast in rows:
        print(f"{name:32s} {1e3 * ref:10.3f} {1e3 * fast:10.3f} {ref / fast:7.2f}x")


if __name__ == "__main__":
    main()
