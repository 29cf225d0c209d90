"""Compiled kernel vs pure-numpy fallback.

Times the log density + gradient, single NUTS transitions under diagonal
and dense metrics, and a short four-chain fit on one replication of the
bundled ``unbalanced-3var`` scenario.

    python benchmarks/bench_kernels.py [--repeat 2000] [--fit]
"""
import argparse
import time
import warnings

import numpy as np

from mrpweight.kernels import CDensityKernel, kernel_for
from mrpweight.metric import CoefficientBlock, Metric
from mrpweight.model import enumerate_terms
from mrpweight.sampler import SamplerConfig, sample_posterior
from mrpweight.simulation import draw_replication, load_scenario, synthesize_population


def _per_call(fn, repeat):
    fn()
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t) / repeat


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--fit", action="store_true", help="also time a short four-chain fit per backend")
    args = ap.parse_args()
    if CDensityKernel is None:
        raise SystemExit("compiled kernel not built; nothing to compare")

    scenario = load_scenario("unbalanced-3var")
    _, frame, _ = draw_replication(synthesize_population(scenario), 0)
    spec = enumerate_terms(scenario.variables, scenario.model_terms)
    d = spec.dim
    rng = np.random.default_rng(0)
    q = rng.uniform(-0.5, 0.5, d)
    q[0] = float(np.nanmean(frame.y_bar))
    block = CoefficientBlock(frame, spec)
    metrics = {
        "diag": Metric(np.full(d, 1e-2)),
        "dense": block.metric(q, np.full(d - 1 - spec.n_coef, 1e-2), np.ones(d, dtype=bool)),
    }
    print(f"unbalanced-3var: {frame.occupied.sum()} occupied cells, {d} parameters")
    print(f"{'benchmark':<28}{'python':>12}{'cython':>12}{'speedup':>10}")

    rows = []
    kernels = {b: kernel_for(frame, spec, backend=b) for b in ("python", "cython")}
    g = np.zeros(d)
    t = {b: _per_call(lambda k=k: k.logp_grad(q, g), args.repeat) for b, k in kernels.items()}
    rows.append(("logp_grad", t, "us"))
    for name, metric in metrics.items():
        t = {}
        for b, k in kernels.items():
            lp = k.logp_grad(q, g)
            n = max(args.repeat // 200, 5)
            start = time.perf_counter()
            leaps = 0
            for i in range(n):
                leaps += k.transition(q, lp, g.copy(), 0.02, metric, np.random.default_rng(i), 8)[6]
            t[b] = (time.perf_counter() - start) / leaps
        rows.append((f"NUTS per leapfrog ({name})", t, "us"))
    for label, t, unit in rows:
        print(f"{label:<28}{t['python'] * 1e6:>10.1f}{unit}{t['cython'] * 1e6:>10.1f}{unit}"
              f"{t['python'] / t['cython']:>9.1f}x")

    if args.fit:
        config = SamplerConfig(n_warmup=150, n_draws=150, seed=1, **scenario.sampler)
        t = {}
        for b in ("python", "cython"):
            start = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sample_posterior(frame, spec, config, backend=b, check=False)
            t[b] = time.perf_counter() - start
        print(f"{'fit 4x(150+150)':<28}{t['python']:>11.1f}s{t['cython']:>11.1f}s"
              f"{t['python'] / t['cython']:>9.1f}x")


if __name__ == "__main__":
    main()
