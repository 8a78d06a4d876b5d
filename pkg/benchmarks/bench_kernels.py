"""Blend kernel timing: numba vs. the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--size 64] [--gaussians 200] [--repeat 5]

Both backends run the same forward and backward on a seeded blob field and
the script checks they agree before reporting times. The first numba call
is excluded (JIT compile or cache load).
"""
import argparse
import time

import numpy as np

from loopsplat import harness, rasterizer
from loopsplat import _kernels


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--gaussians", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    scene = harness.gen_scene("blob_field", args.gaussians, seed=0)
    cam = harness.gen_rig(n_views=1, width=args.size, height=args.size)[0]
    rng = np.random.default_rng(1)
    g_color = rng.normal(size=(args.size, args.size, 3))
    g_depth = rng.normal(size=(args.size, args.size))

    results = {}
    for name in ("numba", "numpy"):
        if name not in _kernels.BACKENDS:
            print(f"{name}: unavailable")
            continue
        fwd = lambda: rasterizer.render(scene.gt_cloud, cam, backend=name)  # noqa: E731
        out = fwd()  # warm-up
        bwd = lambda: rasterizer.backward(scene.gt_cloud, cam, (0, 0, 0), g_color,  # noqa: E731
                                          g_depth, forward=out, backend=name)
        grads = bwd()
        results[name] = (out, grads, _time(fwd, args.repeat), _time(bwd, args.repeat))

    if len(results) == 2:
        a, b = results["numba"], results["numpy"]
        assert np.allclose(a[0].color, b[0].color, atol=1e-12), "forward mismatch"
        assert np.allclose(a[1].flat(), b[1].flat(), rtol=1e-8, atol=1e-10), "backward mismatch"

    print(f"{args.gaussians} Gaussians, {args.size}x{args.size} px, best of {args.repeat}")
    print(f"{'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for name, (_, _, tf, tb) in results.items():
        print(f"{name:<8} {1e3 * tf:>11.2f} {1e3 * tb:>12.2f}")
    if len(results) == 2:
        print(f"speedup  {results['numpy'][2] / results['numba'][2]:>10.1f}x "
              f"{results['numpy'][3] / results['numba'][3]:>11.1f}x")


if __name__ == "__main__":
    main()
