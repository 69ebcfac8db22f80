"""Compiled vs numpy kernels at training-sized shapes.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from gatnerf import kernels


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng, dtype):
    # desk preset: 256 rays x 64 fine samples, d_model 64
    x = rng.normal(size=(16384, 64)).astype(dtype)
    gain = rng.normal(size=64).astype(dtype)
    bias = rng.normal(size=64).astype(dtype)
    grad = rng.normal(size=(16384, 64)).astype(dtype)
    r, n = 256, 64
    sigma = rng.uniform(0, 5, (r, n)).astype(dtype)
    rgb = rng.uniform(size=(r, n, 3)).astype(dtype)
    t = np.sort(rng.uniform(1.4, 3.8, (r, n)), axis=1).astype(dtype)
    bg = np.ones(3, dtype)
    last = np.full(r, 1e10, dtype)
    gcol = rng.normal(size=(r, 3)).astype(dtype)
    edges = np.sort(rng.uniform(1.4, 3.8, (r, 31)), axis=1).astype(dtype)
    w = rng.uniform(size=(r, 30)).astype(dtype)
    u = rng.uniform(size=(r, 32)).astype(dtype)

    def ln_bwd(mod):
        _, xhat, rstd = mod.layernorm_forward(x, gain, bias, 1e-5)
        return lambda: mod.layernorm_backward(grad, xhat, rstd, gain)

    def comp_bwd(mod):
        _, wts, tr = mod.composite_forward(sigma, rgb, t, bg, last)
        return lambda: mod.composite_backward(gcol, sigma, rgb, t, bg, wts, tr, last)

    return {
        "layernorm_forward": lambda mod: (lambda: mod.layernorm_forward(x, gain, bias, 1e-5)),
        "layernorm_backward": ln_bwd,
        "composite_forward": lambda mod: (lambda: mod.composite_forward(sigma, rgb, t, bg, last)),
        "composite_backward": comp_bwd,
        "sample_pdf": lambda mod: (lambda: mod.sample_pdf(edges, w, u)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    mods = {name: kernels.get_backend(name) for name in backends}
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}" + "".join(f"{b + ' ms':>14}" for b in mods) + f"{'speedup':>10}")
    for name, make in cases(rng, np.dtype(args.dtype)).items():
        times = {b: _time(make(m), args.repeat) * 1e3 for b, m in mods.items()}
        row = f"{name:<20}" + "".join(f"{times[b]:>14.3f}" for b in mods)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
