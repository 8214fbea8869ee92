"""Times the compiled and pure-numpy image kernels on identical inputs.

Both paths must produce bitwise-identical output; this script asserts that
before it prints any timing, so a speedup never hides a numeric drift.

Usage:
    python3 benchmarks/bench_kernels.py [--size 512] [--repeat 5]
"""

import argparse
import os
import time

import numpy as np


def timed(fn, arg, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(arg)
        best = min(best, time.perf_counter() - t0)
    return out, best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=512, help="square image side")
    parser.add_argument("--repeat", type=int, default=5, help="timed repetitions")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    rng = np.random.Generator(np.random.PCG64(args.seed))
    image = rng.uniform(0.0, 255.0, size=(args.size, args.size))

    results = []
    for label in ("blur7", "box2", "brisque_features"):
        outputs = {}
        times = {}
        for mode, flag in (("numpy", "1"), ("numba", "0")):
            os.environ["CINESYNTH_NO_NUMBA"] = flag
            # import after the flag so numba warmup lands in the right bucket
            from cinesynth import kernels, metrics

            if label == "blur7":
                fn, arg = kernels.blur7, image
            elif label == "box2":
                fn, arg = kernels.box2, image
            else:
                fn, arg = (lambda a: metrics.brisque_features(a).values), image
            fn(arg)  # warmup; first numba call pays compilation
            outputs[mode], times[mode] = timed(fn, arg, args.repeat)

        if not np.array_equal(outputs["numpy"], outputs["numba"]):
            raise SystemExit(f"{label}: compiled and numpy outputs differ")
        results.append((label, times["numpy"], times["numba"]))

    os.environ.pop("CINESYNTH_NO_NUMBA", None)
    print(f"image {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'kernel':<18}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for label, t_np, t_nb in results:
        print(
            f"{label:<18}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms"
            f"{t_np / t_nb:>9.1f}x"
        )
    print("outputs bitwise identical on both paths")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
