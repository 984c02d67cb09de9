"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Checks that both backends agree bit for bit before timing them.
"""
import argparse
import sys
import timeit

import numpy as np

from weightleak import _fallback

try:
    from weightleak import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    x = rng.uniform(-110, 95, 100_000).astype(np.float32)
    w = rng.normal(0, 0.3, (128, 784)).astype(np.float32)
    b = rng.normal(0, 0.3, 128).astype(np.float32)
    v = rng.uniform(-1, 1, 784).astype(np.float32)
    xs = rng.uniform(-1, 1, (256, 784)).astype(np.float32)
    return {
        "expf 100k": ("expf", (x,)),
        "dense 784->128": ("dense", (w, b, v)),
        "dense_batch 256x784->128": ("dense_batch", (w, b, xs)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    print(f"{'kernel':<28}{'fallback ms':>14}{'compiled ms':>14}{'speedup':>10}")
    for name, (fn, call_args) in cases(np.random.default_rng(args.seed)).items():
        slow, fast = getattr(_fallback, fn), getattr(_kernels, fn)
        if np.asarray(slow(*call_args)).tobytes() != np.asarray(fast(*call_args)).tobytes():
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        print(f"{name:<28}{t_slow * 1e3:>14.3f}{t_fast * 1e3:>14.3f}{t_slow / t_fast:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
