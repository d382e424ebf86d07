"""Chain orchestration, checkpoints, diagnostics and posterior summaries."""
from __future__ import annotations

import dataclasses
import time
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lagfcr import kernels, sampler
from lagfcr.bundle import read_bundle, write_bundle
from lagfcr.errors import CheckpointError, ConfigError, SamplerError
from lagfcr.model import Hyperparams, ModelState, ObsLayout, as_layout, build_bases, factorize_curves, log_joint

CHECKPOINT_FORMAT = "lagfcr-checkpoint"
CHECKPOINT_VERSION = 1

# per-draw quantities kept in memory; enough to rebuild every curve
TRACE_ARRAYS = ("gamma", "psi", "mu", "alpha", "phi", "theta", "sigma2_theta")
TRACE_SCALARS = ("lag", "sigma2_x", "sigma2_y", "lambda_gamma", "nu", "log_joint")


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 5000
    burn_in: int = 2000
    thin: int = 2
    chains: int = 2
    seed: int = 0
    checkpoint_every: int = 0  # 0: only at the end (when a directory is given)
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0 or not 0 <= self.burn_in <= self.iterations:
            raise ConfigError("need 0 <= burn_in <= iterations", field="burn_in")
        if self.thin < 1:
            raise ConfigError("must be >= 1", field="thin")
        if self.chains < 1:
            raise ConfigError("must be >= 1", field="chains")
        if self.checkpoint_every < 0:
            raise ConfigError("must be >= 0", field="checkpoint_every")
        if self.workers < 1:
            raise ConfigError("must be >= 1", field="workers")

    @property
    def retained(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))


@dataclass
class ChainOutput:
    chain: int
    lag_max: int
    traces: dict
    state: ModelState
    iteration: int
    seconds: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return int(self.traces["lag"].shape[0])

    @property
    def lag_counts(self) -> np.ndarray:
        return np.bincount(self.traces["lag"].astype(np.int64), minlength=self.lag_max + 1)

    def scalar_traces(self) -> dict:
        return {k: self.traces[k] for k in ("sigma2_y", "sigma2_x", "log_joint")}


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain,)))


# ---------------------------------------------------------------------------
# initialisation


def initial_state(data, hp: Hyperparams, bases) -> ModelState:
    """Deterministic starting point inside the support.

    Wastewater factors come from a truncated SVD of linearly interpolated x
    curves; the regression and random-effect parts start at zero and the
    noise variances at moment estimates.
    """
    lay: ObsLayout = as_layout(data, hp)
    n, E = lay.n, lay.E
    grid_e = np.arange(E)
    curves = np.empty((n, E))
    for i in range(n):
        sel = lay.x_site == i
        t, v = lay.x_e[sel], lay.x_val[sel]
        order = np.argsort(t)
        curves[i] = np.interp(grid_e, t[order], v[order])
    psi, beta = factorize_curves(curves, bases.x.eval, hp.K)
    mu = beta.mean(axis=1)
    X = (bases.x.eval @ psi @ beta).T
    rx = lay.x_val - X[lay.x_site, lay.x_e]
    scale_x = max(float(np.var(lay.x_val)), 1e-12)
    sigma2_x = max(float(np.mean(rx ** 2)), 1e-3 * scale_x)
    sigma2_y = max(float(np.var(lay.y_val)), 1e-8) if lay.y_val.size > 1 else 1.0
    J, L = bases.theta.rank, hp.L
    return ModelState(
        lag=0,
        gamma=np.zeros(bases.gamma.rank),
        theta=np.zeros((L, n)),
        phi=np.eye(J)[:, :L].copy(),
        mu=mu,
        alpha=beta - mu[:, None],
        psi=psi,
        sigma2_x=sigma2_x,
        sigma2_y=sigma2_y,
        sigma2_theta=np.full(L, sigma2_y),
        lambda_gamma=1.0,
        lambda_f=np.ones(hp.K),
        lambda_g=np.ones(L),
        delta_mu=np.ones(hp.K),
        delta_alpha=np.ones(hp.K),
        zeta=np.ones((hp.K, n)),
        nu=float(np.clip(10.0, hp.nu_lower, hp.nu_upper)),
        a_mu1=2.0,
        a_mu2=2.0,
        a_alpha1=2.0,
        a_alpha2=2.0,
    )


# ---------------------------------------------------------------------------
# traces and checkpoints


def _empty_traces():
    return {name: [] for name in TRACE_ARRAYS + TRACE_SCALARS}


def _record(traces, state, ctx):
    for name in TRACE_ARRAYS:
        traces[name].append(np.array(getattr(state, name), dtype=float))
    traces["lag"].append(state.lag)
    for name in ("sigma2_x", "sigma2_y", "lambda_gamma", "nu"):
        traces[name].append(float(getattr(state, name)))
    traces["log_joint"].append(log_joint(state, ctx.layout, ctx.hp, ctx.bases, ctx.graph))


def _stack(traces, state):
    out = {}
    for name in TRACE_ARRAYS:
        shape = np.shape(getattr(state, name))
        vals = traces[name]
        out[name] = np.array(vals, dtype=float) if vals else np.zeros((0, *shape))
    out["lag"] = np.array(traces["lag"], dtype=np.int64)
    for name in ("sigma2_x", "sigma2_y", "lambda_gamma", "nu", "log_joint"):
        out[name] = np.array(traces[name], dtype=float)
    return out


def _unstack(arrays):
    return {name: list(arrays[name]) for name in TRACE_ARRAYS + TRACE_SCALARS}


def checkpoint_path(directory, chain) -> Path:
    return Path(directory) / f"chain{chain}.ckpt"


def save_checkpoint(path, chain, iteration, state, rng, traces, hp, config, extra=None):
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "chain": chain,
        "iteration": iteration,
        "rng": rng.bit_generator.state,
        "hp": hp.to_dict(),
        "config": dataclasses.asdict(config),
        **(extra or {}),
    }
    arrays = {f"state.{k}": v for k, v in state.to_arrays().items()}
    arrays.update({f"trace.{k}": v for k, v in _stack(traces, state).items()})
    write_bundle(path, header, arrays)


def load_checkpoint(path):
    """(header, state, rng, traces) from a checkpoint file."""
    header, arrays = read_bundle(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    try:
        state = ModelState.from_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("state.")})
        traces = {k[6:]: v for k, v in arrays.items() if k.startswith("trace.")}
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = header["rng"]
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return header, state, rng, traces


def output_from_checkpoint(path) -> ChainOutput:
    header, state, _, traces = load_checkpoint(path)
    return ChainOutput(
        chain=int(header["chain"]),
        lag_max=int(header["hp"]["lag_max"]),
        traces=traces,
        state=state,
        iteration=int(header["iteration"]),
        diagnostics=trace_diagnostics(traces),
    )


# ---------------------------------------------------------------------------
# running chains


def run_chain(data, hp, config: RunConfig, chain: int, bases=None, graph=None,
              checkpoint_dir=None, resume=None, fixed=(), backend=None, extra=None) -> ChainOutput:
    """Run (or resume) one chain to ``config.iterations`` sweeps."""
    hp = hp.resolve(len(data.grid))
    bases = bases or build_bases(data.grid, hp)
    if resume is not None:
        header, state, rng, arrays = load_checkpoint(resume)
        if header["chain"] != chain:
            raise CheckpointError(f"{resume}: holds chain {header['chain']}, not {chain}")
        start = int(header["iteration"])
        traces = _unstack(arrays)
    else:
        rng = chain_rng(config.seed, chain)
        state = initial_state(data, hp, bases)
        start = 0
        traces = _empty_traces()
    ctx = sampler.GibbsContext(data, hp, bases, graph, rng, fixed=fixed, backend=backend)
    path = checkpoint_path(checkpoint_dir, chain) if checkpoint_dir is not None else None
    t0 = time.perf_counter()
    it = start
    try:
        for it in range(start, config.iterations):
            sampler.sweep(state, ctx)
            if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
                _record(traces, state, ctx)
            done = it + 1
            if path is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                save_checkpoint(path, chain, done, state, rng, traces, hp, config, extra)
    except SamplerError as exc:
        if path is not None:
            save_checkpoint(path, chain, it, state, rng, traces, hp, config,
                            {**(extra or {}), "failed": str(exc)})
        raise SamplerError(f"chain {chain}, sweep {it}: {exc}") from exc
    if path is not None:
        save_checkpoint(path, chain, config.iterations, state, rng, traces, hp, config, extra)
    stacked = _stack(traces, state)
    return ChainOutput(
        chain=chain,
        lag_max=hp.lag_max,
        traces=stacked,
        state=state,
        iteration=config.iterations,
        seconds=time.perf_counter() - t0,
        diagnostics=trace_diagnostics(stacked),
    )


def _run_chain_job(args):
    return run_chain(*args[:4], **args[4])


def run(data, hp, config: RunConfig, graph, bases=None, checkpoint_dir=None,
        chain_ids=None, resume=None, fixed=(), backend=None, extra=None) -> list:
    """Run every chain; results are ordered by chain index.

    ``resume`` maps chain index to a checkpoint path.
    """
    hp = hp.resolve(len(data.grid))
    bases = bases or build_bases(data.grid, hp)
    chain_ids = list(range(config.chains)) if chain_ids is None else list(chain_ids)
    resume = resume or {}
    jobs = [
        (data, hp, config, c, dict(bases=bases, graph=graph, checkpoint_dir=checkpoint_dir,
                                   resume=resume.get(c), fixed=fixed, backend=backend, extra=extra))
        for c in chain_ids
    ]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(jobs))) as pool:
            outputs = list(pool.map(_run_chain_job, jobs))
    else:
        outputs = [_run_chain_job(j) for j in jobs]
    return sorted(outputs, key=lambda o: o.chain)


# ---------------------------------------------------------------------------
# diagnostics


ESS = namedtuple("ESS", ["value", "degenerate"])


def ess(trace) -> ESS:
    """Effective sample size by Geyer's initial monotone positive sequence."""
    x = np.asarray(trace, dtype=float)
    n = x.size
    if n < 10:
        raise ValueError("ESS needs at least 10 draws")
    if not np.all(np.isfinite(x)):
        raise ValueError("ESS of a non-finite trace")
    x = x - x.mean()
    scale = float(np.abs(x).max())
    if scale <= 1e-12 * max(1.0, float(np.abs(trace).max())):
        return ESS(float(n), True)
    x = x / scale
    f = np.fft.rfft(x, 2 * n)
    acov = np.fft.irfft(f * np.conj(f), 2 * n)[:n] / n
    rho = acov / acov[0]
    m = (n - 1) // 2
    pairs = rho[: 2 * m : 2] + rho[1 : 2 * m : 2]
    pos = np.nonzero(pairs <= 0)[0]
    pairs = pairs[: pos[0]] if pos.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * float(pairs.sum())
    return ESS(float(n / max(tau, 1e-12)), False)


def trace_diagnostics(traces) -> dict:
    out = {}
    if traces["lag"].shape[0] < 10:
        return out
    for name in ("lag", "sigma2_x", "sigma2_y", "lambda_gamma", "nu", "log_joint"):
        out[name] = ess(traces[name])
    return out


def hpd_discrete(probs, level=0.95, lags=None):
    """Smallest set of lags with total probability >= level, sorted.

    Built greedily by mass; ties prefer lags adjacent to the set built so
    far, then the lower lag. The construction order does not depend on
    ``level``, so sets are nested across levels.
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0 or p.sum() <= 0:
        raise ValueError("need a nonempty histogram with positive mass")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    lags = np.arange(p.size) if lags is None else np.asarray(lags)
    p = p / p.sum()
    chosen = []
    remaining = set(range(p.size))
    total = 0.0
    while remaining and total < level - 1e-12:
        best = max(p[j] for j in remaining)
        ties = [j for j in remaining if p[j] >= best - 1e-15]
        adjacent = [j for j in ties if (j - 1) in chosen or (j + 1) in chosen]
        j = min(adjacent) if adjacent else min(ties)
        chosen.append(j)
        remaining.discard(j)
        total += p[j]
    return sorted(int(lags[j]) for j in chosen)


def hpd_interval(lag_set):
    """(low, high) when the set is contiguous, else None."""
    s = sorted(lag_set)
    if s and s[-1] - s[0] + 1 == len(s):
        return s[0], s[-1]
    return None


def pooled_lag_probs(outputs) -> np.ndarray:
    counts = sum(o.lag_counts for o in outputs)
    total = counts.sum()
    return counts / total if total else counts.astype(float)


# ---------------------------------------------------------------------------
# posterior curves

QUANTILES = (0.025, 0.5, 0.975)


def _pooled(outputs, name):
    outs = sorted(outputs, key=lambda o: o.chain)
    return np.concatenate([o.traces[name] for o in outs], axis=0)


def _band(draws):
    """Pointwise mean and quantiles over axis 0."""
    q = np.quantile(draws, QUANTILES, axis=0)
    return {"mean": draws.mean(axis=0), "q2.5": q[0], "q50": q[1], "q97.5": q[2]}


def summarize_curves(outputs, bases, extension: int) -> dict:
    """Pointwise posterior bands of gamma, mu, each X_i and each fitted y_i.

    Keys: ``gamma`` and ``fitted_y`` live on the observation grid (length M);
    ``mu`` and ``X`` on the extended grid (length M + extension). Per-site
    entries are lists indexed by site.
    """
    outs = sorted(outputs, key=lambda o: o.chain)
    if sum(o.n_draws for o in outs) == 0:
        raise ValueError("no retained draws to summarise")
    B, W, V = bases.gamma.eval, bases.x.eval, bases.theta.eval
    M = B.shape[0]
    gamma_c = _pooled(outs, "gamma") @ B.T
    psi, mu, alpha = _pooled(outs, "psi"), _pooled(outs, "mu"), _pooled(outs, "alpha")
    phi, theta, lags = _pooled(outs, "phi"), _pooled(outs, "theta"), _pooled(outs, "lag")
    F = np.einsum("eh,shk->sek", W, psi)
    mu_c = np.einsum("sek,sk->se", F, mu)
    G = np.einsum("tj,sjl->stl", V, phi)
    S, n = alpha.shape[0], alpha.shape[2]
    rows = np.arange(S)[:, None]
    cols = extension - lags[:, None] + np.arange(M)[None, :]
    X_bands, y_bands = [], []
    for i in range(n):
        Xi = np.einsum("sek,sk->se", F, mu + alpha[:, :, i])
        th = np.einsum("stl,sl->st", G, theta[:, :, i])
        X_bands.append(_band(Xi))
        y_bands.append(_band(gamma_c * Xi[rows, cols] + th))
    return {"gamma": _band(gamma_c), "mu": _band(mu_c), "X": X_bands, "fitted_y": y_bands}


def mu_gamma_density(summary: dict, extension: int, bins=20):
    """2-D histogram of (posterior-mean mu(t), posterior-mean gamma(t)) over
    the observation days. Returns (counts, mu_edges, gamma_edges)."""
    g = summary["gamma"]["mean"]
    m = summary["mu"]["mean"][extension: extension + g.size]
    return np.histogram2d(m, g, bins=bins)


def kernel_backend() -> str:
    return kernels.BACKEND
