"""Joint-distribution (Geweke) check of the Gibbs sampler.

Two samplers of p(parameters, data) are compared: independent forward draws
(prior, then data) and a chain alternating one Gibbs sweep with a fresh data
draw given the current parameters. If every step leaves its full conditional
invariant, both target the same joint and test statistics agree in mean.

The loading curves and their smoothing parameters are held fixed: under the
orthonormality constraint they have no proper prior to draw from, and the
normalise-and-rescale move is not a conditional draw. The MGP shape
parameters are fixed too, which keeps the factor-score prior's tails light
enough for finite Monte Carlo variances.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from lagfcr import model, sampler
from lagfcr.basisgen import Grid
from lagfcr.inference import ess
from lagfcr.spatial import graph_from_adjacency, knn_adjacency

FIXED = frozenset({"psi", "phi", "lambda_f", "lambda_g", "a_mu1", "a_mu2", "a_alpha1", "a_alpha2"})
STATISTICS = ("lag", "sigma2_y", "mu1")

SMALL_MODEL = model.Hyperparams(
    K=2, L=1, H=6, J=6, P=4, lag_max=5,
    a_eps_x=4.0, b_eps_x=0.3, a_eps_y=4.0, b_eps_y=0.3,
    a_theta=4.0, b_theta=4.0, jitter=0.2,
    lambda_half_upper=2.0, penalty_ridge=1.0,
)


@dataclasses.dataclass
class GewekeSetup:
    hp: model.Hyperparams
    bases: model.Bases
    graph: object
    layout: model.ObsLayout
    base: model.ModelState


def small_setup(n=4, M=60, x_every=10, y_every=6, hp=SMALL_MODEL) -> GewekeSetup:
    """Sparse observations keep each sweep close to the prior, so the chain
    mixes fast and the test has power against small conditional errors."""
    hp = hp.resolve(M)
    grid = Grid.regular(M, hp.lag_max)
    bases = model.build_bases(grid, hp)
    # sites on a line; each links to its two nearest neighbours
    coords = np.arange(n, dtype=float)
    dist = np.abs(coords[:, None] - coords[None, :])
    graph = graph_from_adjacency(knn_adjacency(dist, min(2, n - 1)), hp.jitter)
    t = np.arange(M)
    ty, tx = t[::y_every], t[::x_every]
    ys = [model.SiteSeries(ty, np.zeros(ty.size)) for _ in range(n)]
    xs = [model.SiteSeries(tx, np.zeros(tx.size)) for _ in range(n)]
    data = model.Dataset(grid, [f"G{i}" for i in range(n)], ys, xs)
    layout = model.ObsLayout.from_dataset(data, hp)

    return GewekeSetup(hp, bases, graph, layout, _base_state(hp, bases, n))


def _base_state(hp, bases, n):
    """Values for the fixed blocks: smooth loading curves, moderate MGP shapes."""
    K, L = hp.K, hp.L
    H, J = bases.x.rank, bases.theta.rank
    return model.ModelState(
        lag=0, gamma=np.zeros(bases.gamma.rank), theta=np.zeros((L, n)),
        phi=np.eye(J)[:, :L].copy(), mu=np.zeros(K), alpha=np.zeros((K, n)),
        psi=np.eye(H)[:, :K].copy(), sigma2_x=1.0, sigma2_y=1.0, sigma2_theta=np.ones(L),
        lambda_gamma=1.0, lambda_f=np.ones(K), lambda_g=np.ones(L),
        delta_mu=np.ones(K), delta_alpha=np.ones(K), zeta=np.ones((K, n)), nu=10.0,
        a_mu1=3.0, a_mu2=3.0, a_alpha1=3.0, a_alpha2=3.0,
    )


def _stats(state):
    return (float(state.lag), float(state.sigma2_y), float(state.mu[0]))


def _with_data(layout, y, x):
    return dataclasses.replace(layout, y_val=y, x_val=x)


def forward_draws(setup: GewekeSetup, num: int, rng) -> np.ndarray:
    out = np.empty((num, len(STATISTICS)))
    for m in range(num):
        st = model.sample_prior_state(setup.hp, setup.bases, setup.graph, rng, setup.base, FIXED)
        out[m] = _stats(st)
    return out


def gibbs_draws(setup: GewekeSetup, num: int, rng, backend=None) -> np.ndarray:
    st = model.sample_prior_state(setup.hp, setup.bases, setup.graph, rng, setup.base, FIXED)
    y, x = model.simulate_observations(st, setup.layout, setup.bases, rng)
    ctx = sampler.GibbsContext(_with_data(setup.layout, y, x), setup.hp, setup.bases, setup.graph,
                               rng, fixed=FIXED, backend=backend)
    out = np.empty((num, len(STATISTICS)))
    for m in range(num):
        sampler.sweep(st, ctx)
        y, x = model.simulate_observations(st, ctx.layout, setup.bases, rng)
        ctx.layout = _with_data(ctx.layout, y, x)
        out[m] = _stats(st)
    return out


def compare(forward: np.ndarray, gibbs: np.ndarray) -> dict:
    """Per statistic: means, Monte Carlo standard errors and the z score."""
    res = {}
    for j, name in enumerate(STATISTICS):
        f, g = forward[:, j], gibbs[:, j]
        se_f = f.std(ddof=1) / math.sqrt(f.size)
        e = ess(g)
        se_g = g.std(ddof=1) / math.sqrt(max(e.value, 1.0))
        z = (g.mean() - f.mean()) / math.sqrt(se_f ** 2 + se_g ** 2)
        res[name] = dict(forward_mean=float(f.mean()), gibbs_mean=float(g.mean()),
                         se_forward=float(se_f), se_gibbs=float(se_g), gibbs_ess=e.value, z=float(z))
    return res


def geweke_test(num_forward=20000, num_gibbs=20000, burn=500, seed=0, backend=None) -> dict:
    setup = small_setup()
    rng_f = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    rng_g = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    fwd = forward_draws(setup, num_forward, rng_f)
    gib = gibbs_draws(setup, num_gibbs + burn, rng_g, backend)[burn:]
    return compare(fwd, gib)
