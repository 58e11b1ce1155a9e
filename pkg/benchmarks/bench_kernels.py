"""Benchmark the compiled derivative kernels against the numpy reference.

Times the three workloads that dominate training, on both engines:

  * order-4 pure-derivative stack, forward + weighted vjp (Sobolev batch)
  * Laplacian stack, forward + weighted vjp (Poisson batch)
  * value-only forward (metric evaluation on the test grid)

Also cross-checks that both engines agree on values and gradients, since
speed without equality would be worthless.

Usage: python benchmarks/bench_kernels.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from pinnbalance.netkernel import LAPLACIAN, NetKernel, available_engines
from pinnbalance.network import MlpConfig, fit_norm_stats, init_params, substream


def timed(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3  # ms


def make_case(activation, n_batch, seed=0):
    cfg = MlpConfig(2, 1, hidden_layers=4, width=32, activation=activation)
    X = substream(seed, "sampling").uniform(0.0, 2.0 * np.pi, size=(n_batch, 2))
    stats = fit_norm_stats(X)
    flat = init_params(cfg, seed).flat()
    return cfg, stats, X, flat


def bench_engine(engine, repeats):
    rows = {}

    cfg, stats, X, flat = make_case("sin", 1024)
    kern = NetKernel(cfg, stats, engine=engine)
    seeds = substream(1, "probe").normal(size=(9, X.shape[0]))

    def sobolev_pass():
        run = kern.evaluate(flat, X, order=4)
        kern_grad = run.vjp(seeds)
        return kern_grad

    rows["sobolev order-4 fwd+vjp (1024)"] = timed(sobolev_pass, repeats)

    cfg2, stats2, X2, flat2 = make_case("tanh", 2048)
    kern2 = NetKernel(cfg2, stats2, engine=engine)
    seeds2 = substream(2, "probe").normal(size=(4, X2.shape[0]))

    def poisson_pass():
        run = kern2.evaluate(flat2, X2, order=2, mode=LAPLACIAN)
        return run.vjp(seeds2)

    rows["laplacian fwd+vjp (2048)"] = timed(poisson_pass, repeats)

    cfg3, stats3, X3, flat3 = make_case("sin", 10000)
    kern3 = NetKernel(cfg3, stats3, engine=engine)
    rows["values only (10000)"] = timed(lambda: kern3.values(flat3, X3), repeats)

    return rows


def check_agreement():
    cfg, stats, X, flat = make_case("sin", 256)
    seeds = substream(3, "probe").normal(size=(9, X.shape[0]))
    fields, grads = {}, {}
    for engine in available_engines():
        kern = NetKernel(cfg, stats, engine=engine)
        run = kern.evaluate(flat, X, order=4)
        fields[engine] = run.fields.copy()
        grads[engine] = run.vjp(seeds)
    if len(fields) < 2:
        return None
    df = np.max(np.abs(fields["compiled"] - fields["reference"]))
    scale_f = np.max(np.abs(fields["reference"]))
    dg = np.max(np.abs(grads["compiled"] - grads["reference"]))
    scale_g = np.max(np.abs(grads["reference"]))
    return df / scale_f, dg / scale_g


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30,
                    help="timing repeats per workload (best of N)")
    args = ap.parse_args()

    engines = available_engines()
    print(f"engines available: {', '.join(engines)}")

    results = {e: bench_engine(e, args.repeats) for e in engines}
    names = list(next(iter(results.values())))
    width = max(len(n) for n in names)
    header = f"{'workload':<{width}}" + "".join(f"  {e:>12}" for e in engines)
    if len(engines) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    for name in names:
        line = f"{name:<{width}}"
        for e in engines:
            line += f"  {results[e][name]:>10.3f}ms"
        if len(engines) == 2:
            line += f"  {results['reference'][name] / results['compiled'][name]:>7.2f}x"
        print(line)

    agree = check_agreement()
    if agree is not None:
        print(f"cross-engine agreement: fields {agree[0]:.2e}, vjp {agree[1]:.2e} "
              f"(max relative)")


if __name__ == "__main__":
    main()
