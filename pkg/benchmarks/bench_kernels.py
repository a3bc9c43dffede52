"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Both variants are imported side by side, so the REMOTEMEM_DISABLE_JIT flag
does not matter here; it only picks which one the engine uses.
"""
import argparse
import time

import numpy as np

from remotemem import _kernels as k


def best_of(fn, repeat):
    fn()  # warm (jit compile, caches)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not k.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return

    rng = np.random.default_rng(1)
    pages = [rng.integers(0, 256, 4096, dtype=np.uint8) for _ in range(256)]
    zero_words = np.zeros(512, dtype=np.uint64)
    ids = rng.integers(0, 4096, 200_000).astype(np.int64)

    def fills(add_fill):
        def run():
            for i, p in enumerate(pages):
                add_fill(p, i + 1, i * 4096)
        return run

    def zero_checks(is_zero):
        return lambda: [is_zero(zero_words) for _ in range(2000)]

    cases = [
        ("add_fill x256", fills(k.add_fill_np), fills(k.add_fill_jit)),
        ("is_zero x2000", zero_checks(k.is_zero_np), zero_checks(k.is_zero_jit)),
        ("presence_sim 200k", lambda: k.presence_sim_np(ids, 4096, 1024, False),
         lambda: k.presence_sim_jit(ids, 4096, 1024, False)),
    ]
    assert np.array_equal(k.presence_sim_np(ids, 4096, 1024, False),
                          k.presence_sim_jit(ids, 4096, 1024, False))
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, np_fn, jit_fn in cases:
        a = best_of(np_fn, args.repeat) * 1e3
        b = best_of(jit_fn, args.repeat) * 1e3
        print(f"{name:<20} {a:>10.3f} {b:>10.3f} {a / b:>7.1f}x")


if __name__ == "__main__":
    main()
