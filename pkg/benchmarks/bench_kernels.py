"""Time the compiled kernels against the NumPy fallback.

Sizes match the default synthetic scenario (10 sites, 300 days, K = 8,
lags 0..21). Besides the two kernels, a full Gibbs sweep is timed with
each backend.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from lagfcr import _pykernels, kernels, model, sampler
from lagfcr.spatial import knn_weights


def kernel_inputs(rng, n=10, M=300, lag_max=21, K=8):
    E = M + lag_max
    ny, nx = int(0.7 * n * M), n * (M // 7 + 1)
    lag = dict(
        r0=rng.standard_normal(ny), gy=rng.standard_normal(ny), X=rng.standard_normal((n, E)),
        y_site=np.repeat(np.arange(n), ny // n).astype(np.int64),
        y_e=rng.integers(lag_max, E, ny).astype(np.int64), lag_max=lag_max,
    )
    fac = dict(
        Fx=rng.standard_normal((nx, K)), Fy=rng.standard_normal((ny, K)),
        x_site=np.repeat(np.arange(n), nx // n).astype(np.int64),
        y_site=np.repeat(np.arange(n), ny // n).astype(np.int64),
        rx=rng.standard_normal(nx), ry=rng.standard_normal(ny),
        mu=rng.standard_normal(K), alpha=rng.standard_normal((K, n)),
        mu_prec=rng.uniform(0.5, 2, K), alpha_prec=rng.uniform(0.5, 2, (K, n)),
        tau_x=1.3, tau_y=40.0, z_mu=rng.standard_normal(K), z_alpha=rng.standard_normal((K, n)),
    )
    return lag, fac


def best_of(fn, number, repeat):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_sweep(backend, repeat, sweeps=20):
    hp = model.Hyperparams().resolve(300)
    data, truth = model.simulate(hp, 10, 300, seed=0)
    bases = model.build_bases(data.grid, hp)
    graph = knn_weights(data.regions, k=9)
    ctx = sampler.GibbsContext(data, hp, bases, graph, np.random.default_rng(0), backend=backend)
    state = truth.copy()

    def run():
        for _ in range(sweeps):
            sampler.sweep(state, ctx)

    return best_of(run, 1, repeat) / sweeps


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    backends = {"python": _pykernels}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    else:
        print("compiled kernels not built; timing the fallback only")

    lag, fac = kernel_inputs(np.random.default_rng(0))
    rows = []
    for name, be in backends.items():
        t_lag = best_of(lambda: be.lag_sse(**lag), 200, args.repeat)

        def factor():
            be.factor_update(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in fac.items()})

        t_fac = best_of(factor, 50, args.repeat)
        t_sweep = bench_sweep(be, args.repeat)
        rows.append((name, t_lag, t_fac, t_sweep))

    print(f"{'backend':<8} {'lag_sse (us)':>13} {'factor_update (us)':>19} {'sweep (ms)':>11}")
    for name, a, b, c in rows:
        print(f"{name:<8} {a * 1e6:13.1f} {b * 1e6:19.1f} {c * 1e3:11.2f}")
    if len(rows) == 2:
        (_, a0, b0, c0), (_, a1, b1, c1) = rows
        print(f"{'speedup':<8} {a0 / a1:13.2f} {b0 / b1:19.2f} {c0 / c1:11.2f}")


if __name__ == "__main__":
    main()
