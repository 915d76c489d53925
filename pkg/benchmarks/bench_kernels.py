"""Benchmark the compiled IRLS kernel against the pure-numpy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

The kernel-level table times ``irls_huber`` on identical synthetic
problems through both backends and checks that the coefficient paths
agree.  The end-to-end row times a full M-quantile grid fit in a
subprocess with ``SMALLDOM_PURE_PYTHON=1`` against the default import,
which is how the backend is actually selected in production.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from smalldom.kernels import backend, pykernels

try:
    from smalldom.kernels import _ckernels
except ImportError:
    _ckernels = None


def _problem(n, p, q_spread, seed):
    """Skewed regression problem with a few gross outliers."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.lognormal(3.0, 1.0, (n, p - 1))])
    beta = rng.uniform(0.5, 2.0, p)
    y = X @ beta + rng.standard_normal(n) * q_spread
    y[rng.choice(n, max(2, n // 100), replace=False)] *= 8.0
    return X, y


def _time_fit(impl, X, y, q, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = impl.irls_huber(X, y, q, 1.345)
        best = min(best, time.perf_counter() - t0)
    return best, out


def kernel_table(sizes, repeats):
    if _ckernels is None:
        print("compiled kernel not built; showing the fallback only")
    print(f"{'n':>6} {'p':>3} {'q':>4} {'c ms':>9} {'python ms':>10} "
          f"{'speedup':>8} {'max |dbeta|':>12}")
    for n, p in sizes:
        X, y = _problem(n, p, q_spread=5.0, seed=n + p)
        for q in (0.5, 0.9):
            t_py, res_py = _time_fit(pykernels, X, y, q, repeats)
            if _ckernels is None:
                print(f"{n:>6} {p:>3} {q:>4.1f} {'-':>9} {t_py * 1e3:>10.2f} "
                      f"{'-':>8} {'-':>12}")
                continue
            t_c, res_c = _time_fit(_ckernels, X, y, q, repeats)
            dbeta = float(np.max(np.abs(res_c[0] - res_py[0])))
            if not np.allclose(res_c[0], res_py[0], rtol=1e-8, atol=1e-12):
                raise SystemExit(f"backend mismatch at n={n} q={q}: {dbeta}")
            print(f"{n:>6} {p:>3} {q:>4.1f} {t_c * 1e3:>9.2f} {t_py * 1e3:>10.2f} "
                  f"{t_py / t_c:>8.1f} {dbeta:>12.2e}")


def grid_seconds():
    """Time one 101-point M-quantile grid fit on a synthetic sample."""
    from smalldom.design import build_design, default_allocation, draw_sample
    from smalldom.harness import PopGenConfig, generate_population
    from smalldom.mixed import ModelSpec
    from smalldom.mquantile import fit_mq_grid

    pop = generate_population(PopGenConfig(n_units=20000, n_domains=10, seed=3))
    sample = draw_sample(build_design(pop, default_allocation(pop)), pop, 5)
    t0 = time.perf_counter()
    fit_mq_grid(sample, ModelSpec())
    return time.perf_counter() - t0, len(sample)


def end_to_end():
    env = dict(os.environ)
    env.pop("SMALLDOM_PURE_PYTHON", None)
    times = {}
    for name, force in (("c", None), ("python", "1")):
        child_env = dict(env)
        if force:
            child_env["SMALLDOM_PURE_PYTHON"] = force
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--grid-only"],
            env=child_env, capture_output=True, text=True, check=True,
        )
        times[name] = out.stdout.strip().split("\n")[-1]
    for name, line in times.items():
        print(f"  {name:>6}: {line}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--grid-only", action="store_true",
                    help="print one grid-fit timing and exit (subprocess mode)")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if args.grid_only:
        sec, n = grid_seconds()
        print(f"backend={backend()} grid fit on n={n}: {sec:.2f} s")
        return

    print(f"active backend: {backend()}\n")
    print("kernel-level irls_huber, best of "
          f"{args.repeats} (b_psi = 1.345):")
    kernel_table([(500, 6), (2000, 6), (2000, 8), (8000, 8)], args.repeats)
    print("\nend-to-end 101-point grid fit (fresh interpreter per backend):")
    end_to_end()


if __name__ == "__main__":
    main()
