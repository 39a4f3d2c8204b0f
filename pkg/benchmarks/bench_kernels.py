"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 200]
"""

import argparse
import timeit

import numpy as np

from debate_evolve import _accel
from debate_evolve.kernels import kl_rows_value_grad, majority_correct_rate, surrogate_value_grad


def cases(rng):
    logits = rng.normal(size=(64, 8))
    ref = rng.normal(size=(64, 8))
    b = 512
    ctx, act = rng.integers(64, size=b), rng.integers(8, size=b)
    adv, lp_old = rng.normal(size=b), -rng.uniform(0.5, 3.0, size=b)
    votes = rng.random((100_000, 3)) < 0.7
    return {
        "surrogate (512 x 8)": lambda be: surrogate_value_grad(logits, ctx, act, adv, lp_old, 0.2, backend=be),
        "kl rows (64 x 8)": lambda be: kl_rows_value_grad(logits, ref, backend=be),
        "majority (100k x 3)": lambda be: majority_correct_rate(votes, backend=be),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if _accel.HAS_NUMBA else [])
    print(f"{'kernel':<22}" + "".join(f"{b:>14}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = []
        for be in backends:
            fn(be)  # compile / warm up
            times.append(min(timeit.repeat(lambda: fn(be), number=args.repeat, repeat=3)) / args.repeat)
        row = f"{name:<22}" + "".join(f"{t * 1e6:>11.1f} us" for t in times)
        if len(times) == 2:
            row += f"   {times[0] / times[1]:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
