"""Compare the compiled and numpy kernel backends.

Times each kernel on a few shapes, checks both backends agree, and times
one tiny-model training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from hicyolo import kernels
from hicyolo.loss import compute_loss
from hicyolo.model import ModelConfig, build


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    for n, c, h, k, s in ((8, 16, 32, 3, 1), (8, 32, 16, 3, 2), (2, 64, 40, 3, 1)):
        xp = rng.standard_normal((n, c, h + 2, h + 2))
        ho = (h + 2 - k) // s + 1
        cols = rng.standard_normal((n, c * k * k, ho * ho))
        yield f"im2col  n{n} c{c} {h}x{h} k{k} s{s}", "im2col", (xp, k, s, ho, ho)
        yield f"col2im  n{n} c{c} {h}x{h} k{k} s{s}", "col2im", (cols, c, h + 2, h + 2, k, s, ho, ho)
    for n, c, h in ((8, 16, 32), (2, 64, 40)):
        xp = np.pad(rng.standard_normal((n, c, h, h)), ((0, 0), (0, 0), (2, 2), (2, 2)), constant_values=-np.inf)
        out, idx = kernels.maxpool_forward(xp, 5, 1, h, h)
        yield f"maxpool fwd n{n} c{c} {h}x{h} k5", "maxpool_forward", (xp, 5, 1, h, h)
        yield f"maxpool bwd n{n} c{c} {h}x{h} k5", "maxpool_backward", (rng.standard_normal(out.shape), idx, h + 4, h + 4)
    for n, c, h, k, g in ((8, 16, 32, 3, 4), (2, 64, 20, 7, 4)):
        xp = rng.standard_normal((n, c, h + k - 1, h + k - 1))
        ker = rng.standard_normal((n, g * k * k, h, h))
        gy = rng.standard_normal((n, c, h, h))
        yield f"involution fwd n{n} c{c} {h}x{h} K{k} G{g}", "involution_forward", (xp, ker, k, g)
        yield f"involution bwd n{n} c{c} {h}x{h} K{k} G{g}", "involution_backward", (gy, xp, ker, k, g)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def train_step_time(backend, repeat):
    kernels.set_backend(backend)
    cfg = ModelConfig(width_multiple=0.125, depth_multiple=0.33, num_classes=2, input_size=64)
    model = build(cfg, seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((8, 3, 64, 64))
    targets = np.array([[b, b % 2, 0.5, 0.5, 0.3, 0.25] for b in range(8)], dtype=np.float64)

    def step():
        model.zero_grad()
        compute_loss(model(x), targets, cfg.anchors, cfg.num_classes).total.backward()

    return best_of(step, repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<40}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  agree")
    for label, name, call_args in kernel_cases(rng):
        py = getattr(backends["python"], name)
        t_py = best_of(lambda: py(*call_args), args.repeat) * 1e3
        if "cython" in backends:
            cy = getattr(backends["cython"], name)
            t_cy = best_of(lambda: cy(*call_args), args.repeat) * 1e3
            agree = same(py(*call_args), cy(*call_args))
            print(f"{label:<40}{t_py:>12.3f}{t_cy:>12.3f}{t_py / t_cy:>9.2f}x  {agree}")
        else:
            print(f"{label:<40}{t_py:>12.3f}{'-':>12}{'-':>10}")
    previous = kernels.BACKEND
    try:
        for b in backends:
            print(f"tiny-model train step (batch 8, 64x64), {b:<7}: {train_step_time(b, args.repeat) * 1e3:.1f} ms")
    finally:
        kernels.set_backend(previous)


if __name__ == "__main__":
    main()
