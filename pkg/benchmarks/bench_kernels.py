"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--width 512] [--batch 16] [--repeat 200]

Also times one full local step of the synthetic-task model under each
backend, where the BLAS matrix products dominate either way.
"""
import argparse
import timeit

import numpy as np

from resist import _backend
from resist import resnet
from resist.data import gen_synthetic
from resist.resnet import BlockMask, ModelConfig, init_params, loss_and_grad


def kernel_cases(mod, m, n, rng):
    x = rng.standard_normal((n, m))
    z = rng.standard_normal((n, m))
    w = rng.standard_normal(m * m)
    g = rng.standard_normal(m * m)
    views = [rng.standard_normal((m, m)) for _ in range(4)]
    codes = mod.quantize_codes(w, -4.0, 8.0 / 255, 8)
    return {
        "residual_relu": lambda: mod.residual_relu(x, z, 0.1),
        "relu_backward": lambda: mod.relu_backward(x, z, 0.1),
        "sgd_step": lambda: mod.sgd_step(w, g, 1e-9),
        "mean_of(4)": lambda: mod.mean_of(views),
        "quantize_codes": lambda: mod.quantize_codes(w, -4.0, 8.0 / 255, 8),
        "dequantize_codes": lambda: mod.dequantize_codes(codes, -4.0, 8.0 / 255),
    }


def step_case(mod, m, n):
    cfg = ModelConfig(depth_H=6, width_m=m, input_dim_d=8)
    params = init_params(cfg, 0)
    data = gen_synthetic(n, 8, 0)
    mask = BlockMask.full(cfg)

    def step():
        saved = resnet.kernels
        resnet.kernels = mod
        try:
            loss_and_grad(params, data, mask, cfg)
        finally:
            resnet.kernels = saved
    return step


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeat", type=int, default=200)
    args = p.parse_args()
    if _backend.compiled is None:
        print("compiled extension not available; only the fallback can be timed")
    backends = [("python", _backend.fallback)] + ([("cython", _backend.compiled)] if _backend.compiled else [])
    results = {}
    for name, mod in backends:
        cases = kernel_cases(mod, args.width, args.batch, np.random.default_rng(0))
        cases["loss_and_grad (full step)"] = step_case(mod, args.width, args.batch)
        results[name] = {k: best_of(fn, args.repeat) for k, fn in cases.items()}
    print(f"width={args.width} batch={args.batch} best of {args.repeat}, microseconds")
    header = f"{'kernel':28s}" + "".join(f"{n:>12s}" for n, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for k in results["python"]:
        row = f"{k:28s}" + "".join(f"{results[n][k] * 1e6:12.1f}" for n, _ in backends)
        if len(backends) == 2:
            row += f"{results['python'][k] / results['cython'][k]:10.2f}x"
        print(row)


if __name__ == "__main__":
    main()
