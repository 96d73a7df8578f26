"""Time the numba kernels against their numpy twins on classifier-sized shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Set MSILAX_DISABLE_NUMBA=1 to make the package itself run on numpy; this
script always times both tables side by side and checks they agree.
"""
import argparse
import time

import numpy as np

from msilax.numerics import kernels


def _time(fn, repeat):
    fn()  # warm up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    # (name, builder returning a zero-arg callable per kernel table)
    for n, c, h in ((64, 1, 34), (64, 16, 18), (64, 32, 10)):
        xp = rng.standard_normal((n, c, h, h)).astype(np.float32)
        yield f"im2col   {xp.shape}", lambda k, xp=xp: (lambda: k["im2col"](xp, 3, 3, 1))
        cols = kernels.im2col_numpy(xp, 3, 3, 1).copy()
        yield f"col2im   {xp.shape}", lambda k, cols=cols, s=xp.shape: (lambda: k["col2im"](cols, s, 3, 3, 1))
    for n, c, h in ((64, 16, 32), (64, 32, 16), (64, 64, 8)):
        x = rng.standard_normal((n, c, h, h)).astype(np.float32)
        out, idx = kernels.maxpool2_forward_numpy(x)
        g = rng.standard_normal(out.shape).astype(np.float32)
        yield f"pool fwd {x.shape}", lambda k, x=x: (lambda: k["maxpool2_forward"](x))
        yield f"pool bwd {x.shape}", lambda k, g=g, idx=idx: (lambda: k["maxpool2_backward"](g, idx))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    tables = {"numpy": kernels.get_kernels("numpy")}
    if kernels.HAVE_NUMBA:
        tables["numba"] = kernels.get_kernels("numba")
    else:
        print("numba unavailable or disabled; timing numpy only")
    print(f"{'kernel':<32}" + "".join(f"{name:>12}" for name in tables) + f"{'speedup':>10}")
    for name, build in cases(rng):
        times = {}
        results = {}
        for tname, table in tables.items():
            fn = build(table)
            times[tname] = _time(fn, args.repeat)
            results[tname] = fn()
        if len(results) == 2:
            a, b = results["numpy"], results["numba"]
            for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
                np.testing.assert_allclose(u, v, rtol=1e-5, atol=1e-5)
        speed = f"{times['numpy'] / times['numba']:9.2f}x" if "numba" in times else ""
        print(f"{name:<32}" + "".join(f"{times[t] * 1e3:10.2f}ms" for t in tables) + f"{speed:>10}")


if __name__ == "__main__":
    main()
