"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times im2col, col2im and scatter_add at sizes the codecs actually use, then
one full PGD step through a small codec. Prints a table and exits nonzero if
the two backends disagree on any output.
"""
import argparse
import sys
import timeit

import numpy as np

from nicbench import attacks, codecs, kernels
from nicbench.images import load_images


def cases(rng):
    x = rng.standard_normal((4, 16, 32, 32))
    cols5, shape5 = kernels.im2col(x, 5, 5, 2), x.shape
    idx = rng.integers(0, 64 * 64 * 3, size=64 * 64 * 3)
    vals = rng.standard_normal(idx.size)
    return {
        "im2col 4x16x32x32 k5 s2": lambda: kernels.im2col(x, 5, 5, 2),
        "im2col 4x16x32x32 k3 s1": lambda: kernels.im2col(x, 3, 3, 1),
        "col2im 4x16x32x32 k5 s2": lambda: kernels.col2im(cols5, shape5, 5, 5, 2),
        "scatter_add 12288": lambda: kernels.scatter_add(idx.size, idx, vals),
    }


def pgd_step():
    data = [im for _, im in load_images("synthetic:mixed,32,n=8,seed=1")]
    codec = codecs.train(codecs.CodecSpec("factorized", lmbda=0.005), data, epochs=1).variant
    x = load_images("synthetic:mixed,64,n=1,seed=2")[0][1]
    cfg = attacks.AttackConfig.from_preset("preset-0", seed=0, steps=1)
    return lambda: attacks.pgd(codec, x, "ReconstructionL2", cfg).x_adv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    have = kernels.available()
    if "cython" not in have:
        print("compiled backend not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    fns = cases(rng)
    fns["pgd step, 64x64 image"] = pgd_step()
    rows, mismatch = [], []
    for name, fn in fns.items():
        times, outs = {}, {}
        for b in have:
            kernels.use_backend(b)
            outs[b] = fn()
            times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        if len({o.tobytes() for o in outs.values()}) != 1:
            mismatch.append(name)
        rows.append((name, times))
    kernels.use_backend("cython" if "cython" in have else "python")
    print(f"{'case':<28}" + "".join(f"{b + ' ms':>12}" for b in have) + ("   speedup" if len(have) > 1 else ""))
    for name, t in rows:
        line = f"{name:<28}" + "".join(f"{t[b]:12.3f}" for b in have)
        if len(have) > 1:
            line += f"   {t['python'] / t['cython']:6.2f}x"
        print(line)
    if mismatch:
        print("backends disagree on: " + ", ".join(mismatch))
        return 1
    print("outputs bit-identical across backends")
    return 0


if __name__ == "__main__":
    sys.exit(main())
