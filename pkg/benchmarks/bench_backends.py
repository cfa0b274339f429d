#!/usr/bin/env python3
"""Compare the compiled kernel against the numpy fallback.

Times one adversarial train step at the reference problem size and a PAV
fit at two score-set sizes. Run from the repository root:

    python3 benchmarks/bench_backends.py
"""

import time

import numpy as np

from veilvec import _kernel_py
from veilvec.autoencoder import init_model, init_opt_state
from veilvec.preprocess import StandardizerStats

try:
    from veilvec import _kernel as compiled
except ImportError:
    compiled = None


def time_call(fn, repeat=5, warmup=2):
    for _ in range(warmup):
        fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_train_step(backend, d=512, m=256, steps=20):
    rng = np.random.default_rng(0)
    stats = StandardizerStats(np.zeros(d), np.ones(d))
    model = init_model(d, stats, seed=0)
    vel = init_opt_state(model)
    x = rng.standard_normal((m, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = rng.integers(0, 2, m).astype(np.int64)
    w = rng.uniform(0, 1, m)

    def run():
        for _ in range(steps):
            backend.train_step_inplace(model.params, vel, x, y, w,
                                       1e-3, 1e-3, 0.9, 0.1)

    return time_call(run) / steps


def bench_pav(backend, n):
    rng = np.random.default_rng(1)
    values = rng.uniform(0, 1, n)
    weights = np.ones(n)
    return time_call(lambda: backend.pav_pool(values, weights))


def main():
    rows = []
    backends = [("python", _kernel_py)]
    if compiled is not None:
        backends.append(("compiled", compiled))
    for name, mod in backends:
        step = bench_train_step(mod)
        pav_small = bench_pav(mod, 10_000)
        pav_large = bench_pav(mod, 200_000)
        rows.append((name, step, pav_small, pav_large))

    print(f"{'backend':<10} {'train step (d=512,m=256)':>26} "
          f"{'pav 10k':>12} {'pav 200k':>12}")
    for name, step, ps, pl in rows:
        print(f"{name:<10} {step * 1e3:>23.2f} ms {ps * 1e3:>9.2f} ms "
              f"{pl * 1e3:>9.2f} ms")
    if len(rows) == 2:
        print(f"\nspeedup (python/compiled): "
              f"train step {rows[0][1] / rows[1][1]:.2f}x, "
              f"pav 10k {rows[0][2] / rows[1][2]:.2f}x, "
              f"pav 200k {rows[0][3] / rows[1][3]:.2f}x")


if __name__ == "__main__":
    main()
