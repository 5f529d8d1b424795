"""Time the compiled interval kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sizes 100 1000]
"""
import argparse
import timeit

import numpy as np

from twosubnet_tal import _kernels_py

try:
    from twosubnet_tal import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(n: int, rng: np.random.Generator):
    s = rng.integers(1, 20 * n, size=n).astype(np.int64)
    e = s + rng.integers(0, 200, size=n)
    scores = rng.random(n)
    cls = rng.integers(0, 20, size=n).astype(np.int64)
    gs = rng.integers(1, 20 * n, size=n // 10 + 1).astype(np.int64)
    ge = gs + rng.integers(10, 200, size=gs.size)
    gg = rng.integers(0, 20, size=gs.size).astype(np.int64)
    track = rng.random(n * 10)
    return {
        "tiou_matrix": lambda k: k.tiou_matrix(s, e, gs, ge),
        "nms": lambda k: k.nms(s, e, scores, cls, 0.2),
        "match_detections": lambda k: k.match_detections(s, e, cls, gs, ge, gg, 0.5, True),
        "threshold_runs": lambda k: k.threshold_runs(track, 0.5, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 1000])
    args = ap.parse_args()
    backends = [("python", _kernels_py)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':<18}{'n':>6}" + "".join(f"{b:>14}" for b, _ in backends) + f"{'speedup':>10}")
    for n in args.sizes:
        for name, fn in cases(n, np.random.default_rng(n)).items():
            times = []
            for _, mod in backends:
                number = 1
                while True:
                    t = timeit.timeit(lambda: fn(mod), number=number)
                    if t > 0.05 or number >= 1 << 16:
                        break
                    number *= 4
                t = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
                times.append(t)
            speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
            print(f"{name:<18}{n:>6}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
