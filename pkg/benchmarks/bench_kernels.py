"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from bimanual_transfer import kernels


def cases(rng):
    logits = rng.standard_normal((64, 144))
    targets = rng.integers(0, 144, 64)
    a, b = rng.uniform(0, 1, (8, 144)), rng.uniform(0, 1, (8, 144))
    Z, y = rng.standard_normal((64, 18)), rng.standard_normal(64)  # design matrix: atoms are columns
    shape = (4096, 256)
    p, g = rng.standard_normal(shape), rng.standard_normal(shape)
    m, v = np.zeros(shape), np.zeros(shape)
    return {
        "softmax_xent 64x144": lambda k: k.softmax_xent(logits, targets),
        "sym_kl 8x144": lambda k: k.sym_kl(a, b, 1e-8),
        "lasso_cd K=18 D=64": lambda k: k.lasso_cd(Z, y, 0.01),
        "adam_update 1M params": lambda k: k.adam_update(p, g, m, v, 5e-4, 0.9, 0.999, 1e-8, 0.0, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        print("compiled extension not built; only the python backend is available")
    backends = [("python", kernels.python_backend)]
    if kernels.compiled_backend is not None:
        backends.append(("cython", kernels.compiled_backend))
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24s}" + "".join(f"{n:>14s}" for n, _ in backends) + "   speedup")
    for name, fn in cases(rng).items():
        times = []
        for _, mod in backends:
            best = min(timeit.repeat(lambda: fn(mod), number=args.number, repeat=args.repeat))
            times.append(best / args.number * 1e6)
        row = f"{name:<24s}" + "".join(f"{t:12.1f}us" for t in times)
        if len(times) == 2:
            row += f"   {times[0] / times[1]:6.2f}x"
        print(row)


if __name__ == "__main__":
    main()
