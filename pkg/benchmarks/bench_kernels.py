"""Time the compiled kernels against the numpy fallback on MNIST-sized work.

Run ``python benchmarks/bench_kernels.py [--repeat N]``. Every case is timed
with each available backend and reported as the best-of-N wall time per call.
"""
import argparse
import timeit

import numpy as np

import hcsc.tensor_core as tc
from hcsc import inference, model


def cases(batch):
    rng = np.random.default_rng(0)
    B = model.normalize_atoms(rng.standard_normal((1, 32, 5, 5)))
    dense = rng.standard_normal((batch, 32, 24, 24)).astype(np.float32)
    # roughly the code density seen on MNIST digits
    sparse = dense * (rng.uniform(size=dense.shape) < 0.01)
    resid = rng.standard_normal((batch, 1, 28, 28)).astype(np.float32)
    digits = (rng.uniform(size=(batch, 1, 28, 28)) > 0.8).astype(np.float32)
    m = model.init_model([model.LayerConfig()], input_scale=3.0)
    settings = inference.FistaSettings()
    return {
        "conv_full dense": lambda: tc.conv_full(B, dense),
        "conv_full sparse 1%": lambda: tc.conv_full(B, sparse),
        "corr_valid": lambda: tc.corr_valid(resid, B),
        "corr_filter_grad": lambda: tc.corr_filter_grad(resid, dense, 5, 5),
        "encode 1 layer K=40": lambda: inference.encode(m, digits, settings),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--batch", type=int, default=32)
    args = parser.parse_args(argv)
    backends = tc.available_backends()
    table = {}
    for name in backends:
        previous = tc.use_backend(name)
        try:
            for label, fn in cases(args.batch).items():
                fn()
                table.setdefault(label, {})[name] = min(
                    timeit.repeat(fn, number=1, repeat=args.repeat))
        finally:
            tc.use_backend(previous)
    print(f"batch of {args.batch}, best of {args.repeat} (ms per call)")
    header = f"{'case':<22}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for label, row in table.items():
        line = f"{label:<22}" + "".join(f"{1e3 * row[b]:>12.2f}" for b in backends)
        if len(backends) == 2:
            line += f"{row['numpy'] / row['compiled']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
