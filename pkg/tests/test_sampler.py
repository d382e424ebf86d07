import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from lagfcr import basisgen, model, sampler
from lagfcr.basisgen import Grid
from lagfcr.errors import ConfigError, SamplerError
from lagfcr.spatial import SpatialGraph, graph_from_adjacency, knn_weights

from oracles import gamma_logpdf, grid_deviation, info_form_logpdf, scalar_grid

GRID_TOL = 1e-6


@pytest.fixture(scope="module")
def setup():
    hp = model.Hyperparams(K=3, L=2, lag_max=6).resolve(80)
    data, truth = model.simulate(hp, 5, 80, truth=model.Scenario(lag=3), seed=1)
    bases = model.build_bases(data.grid, hp)
    graph = knn_weights(data.regions, k=2)
    ctx = sampler.GibbsContext(data, hp, bases, graph, np.random.default_rng(0))
    state = truth.copy()
    for _ in range(3):
        sampler.sweep(state, ctx)
    return state, ctx


def _coordinate(vec_getter, idx):
    def setter(s, v):
        arr = vec_getter(s)
        arr[idx] = v
    return setter


def test_cached_rows_match_evaluate_subset(setup):
    _, ctx = setup
    lay, b = ctx.layout, ctx.bases
    full = Grid.regular(lay.E)
    obs = Grid.regular(lay.M)
    assert np.allclose(ctx.By, basisgen.evaluate_subset(b.gamma, obs, lay.y_t), atol=1e-12)
    assert np.allclose(ctx.Vy, basisgen.evaluate_subset(b.theta, obs, lay.y_t), atol=1e-12)
    assert np.allclose(ctx.Wx, basisgen.evaluate_subset(b.x, full, lay.x_e), atol=1e-12)


# --- grid-ratio checks against log_joint ----------------------------------------


@pytest.mark.parametrize("j", [0, 2, 3])
def test_grid_gamma(setup, j):
    state, ctx = setup
    Q, b = sampler.gamma_conditional(state, ctx)
    base = state.gamma.copy()

    def cond(v):
        x = base.copy()
        x[j] = v
        return info_form_logpdf(Q, b)(x)

    dev = grid_deviation(state, ctx, _coordinate(lambda s: s.gamma, j), cond,
                         scalar_grid(base[j], 1 / math.sqrt(Q[j, j])))
    assert dev < GRID_TOL


@pytest.mark.parametrize("ell,i", [(0, 0), (1, 3)])
def test_grid_theta(setup, ell, i):
    state, ctx = setup
    Q, b = sampler.theta_conditional(state, ctx, ell)
    base = state.theta[ell].copy()

    def cond(v):
        x = base.copy()
        x[i] = v
        return info_form_logpdf(Q, b)(x)

    def setter(s, v):
        s.theta[ell, i] = v

    assert grid_deviation(state, ctx, setter, cond, scalar_grid(base[i], 1 / math.sqrt(Q[i, i]))) < GRID_TOL


def _constrained_direction(C, d, rng):
    v = rng.standard_normal(d)
    if C.shape[0]:
        v -= C.T @ np.linalg.lstsq(C.T, v, rcond=None)[0]
    return v / np.linalg.norm(v)


@pytest.mark.parametrize("which,col", [("phi", 0), ("phi", 1), ("psi", 0), ("psi", 2)])
def test_grid_loadings_within_constraint(setup, which, col):
    state, ctx = setup
    cond_fn = sampler.phi_conditional if which == "phi" else sampler.psi_conditional
    Q, b, C = cond_fn(state, ctx, col)
    base = getattr(state, which)[:, col].copy()
    d = _constrained_direction(C, base.size, np.random.default_rng(col))
    assert np.abs(C @ d).max() < 1e-12

    def setter(s, v):
        getattr(s, which)[:, col] = base + v * d

    dev = grid_deviation(state, ctx, setter, lambda v: info_form_logpdf(Q, b)(base + v * d),
                         scalar_grid(0.0, 1 / math.sqrt(d @ Q @ d)))
    assert dev < GRID_TOL


@pytest.mark.parametrize("k", [0, 1, 2])
def test_grid_mu(setup, k):
    state, ctx = setup
    p, lin = sampler.mu_conditional(state, ctx, k)

    def setter(s, v):
        s.mu[k] = v

    dev = grid_deviation(state, ctx, setter, lambda v: -0.5 * p * v * v + lin * v,
                         scalar_grid(state.mu[k], 1 / math.sqrt(p)))
    assert dev < GRID_TOL


@pytest.mark.parametrize("k,i", [(0, 0), (2, 4), (1, 2)])
def test_grid_alpha(setup, k, i):
    state, ctx = setup
    p, lin = sampler.alpha_conditional(state, ctx, k)

    def setter(s, v):
        s.alpha[k, i] = v

    dev = grid_deviation(state, ctx, setter, lambda v: -0.5 * p[i] * v * v + lin[i] * v,
                         scalar_grid(state.alpha[k, i], 1 / math.sqrt(p[i])))
    assert dev < GRID_TOL


def test_alpha_sites_conditionally_independent(setup):
    # cross partial derivative of log_joint in alpha_k,i and alpha_k,j vanishes
    state, ctx = setup
    k, h = 1, 1e-2

    def lj(di, dj):
        s = state.copy()
        s.alpha[k, 0] += di
        s.alpha[k, 3] += dj
        return model.log_joint(s, ctx.layout, ctx.hp, ctx.bases, ctx.graph)

    cross = (lj(h, h) - lj(h, -h) - lj(-h, h) + lj(-h, -h)) / (4 * h * h)
    scale = abs(sampler.alpha_conditional(state, ctx, k)[0][0])
    assert abs(cross) < 1e-6 * scale


def test_grid_lag(setup):
    state, ctx = setup
    lw = sampler.lag_logweights(state, ctx)

    def setter(s, v):
        s.lag = int(v)

    assert grid_deviation(state, ctx, setter, lambda v: lw[int(v)], range(ctx.hp.lag_max + 1)) < GRID_TOL


def _gamma_grid(shape, rate):
    m = shape / rate
    return np.linspace(0.3 * m, 2.0 * m, 21)


@pytest.mark.parametrize("h", [0, 1, 2])
def test_grid_mgp_deltas(setup, h):
    state, ctx = setup
    sh, ra = sampler.delta_mu_conditional(state, h)

    def set_mu(s, v):
        s.delta_mu[h] = v

    assert grid_deviation(state, ctx, set_mu, gamma_logpdf(sh, ra), _gamma_grid(sh, ra)) < GRID_TOL
    sh, ra = sampler.delta_alpha_conditional(state, h)

    def set_alpha(s, v):
        s.delta_alpha[h] = v

    assert grid_deviation(state, ctx, set_alpha, gamma_logpdf(sh, ra), _gamma_grid(sh, ra)) < GRID_TOL


def test_grid_zeta(setup):
    state, ctx = setup
    sh, ra = sampler.zeta_conditional(state)
    for k, i in [(0, 1), (2, 3)]:
        def setter(s, v):
            s.zeta[k, i] = v
        assert grid_deviation(state, ctx, setter, gamma_logpdf(sh, ra[k, i]),
                              _gamma_grid(sh, ra[k, i])) < GRID_TOL


def test_grid_precisions(setup):
    state, ctx = setup
    c = sampler.variance_conditionals(state, ctx)
    sh, ra = c["x"]
    assert grid_deviation(state, ctx, lambda s, v: setattr(s, "sigma2_x", 1 / v),
                          gamma_logpdf(sh, ra), _gamma_grid(sh, ra)) < GRID_TOL
    sh, ra = c["y"]
    assert grid_deviation(state, ctx, lambda s, v: setattr(s, "sigma2_y", 1 / v),
                          gamma_logpdf(sh, ra), _gamma_grid(sh, ra)) < GRID_TOL
    sh, ra = c["theta"]
    for ell in range(ra.size):
        def setter(s, v):
            s.sigma2_theta[ell] = 1 / v
        assert grid_deviation(state, ctx, setter, gamma_logpdf(sh, ra[ell]), _gamma_grid(sh, ra[ell])) < GRID_TOL


def test_grid_smoothing_precisions(setup):
    state, ctx = setup
    sh, ra, lo = sampler.lambda_gamma_conditional(state, ctx)
    assert lo == ctx.hp.lambda_lower
    grid = _gamma_grid(sh, ra)
    assert grid.min() > lo
    assert grid_deviation(state, ctx, lambda s, v: setattr(s, "lambda_gamma", v),
                          gamma_logpdf(sh, ra), grid) < GRID_TOL
    for name, omega, coef in (("lambda_f", ctx.bases.omega_psi, state.psi),
                              ("lambda_g", ctx.bases.omega_phi, state.phi)):
        for col in range(coef.shape[1]):
            sh, ra, lo = sampler._penalised_lambda(coef[:, col], omega, ctx.hp)

            def setter(s, v):
                getattr(s, name)[col] = v

            assert grid_deviation(state, ctx, setter, gamma_logpdf(sh, ra), _gamma_grid(sh, ra)) < GRID_TOL


def test_grid_slice_targets(setup):
    state, ctx = setup
    hp = ctx.hp
    for name, deltas in (("a_mu1", state.delta_mu[:1]), ("a_mu2", state.delta_mu[1:]),
                         ("a_alpha1", state.delta_alpha[:1]), ("a_alpha2", state.delta_alpha[1:])):
        f = sampler._shape_logdensity(deltas, hp)
        dev = grid_deviation(state, ctx, lambda s, v, n=name: setattr(s, n, v), f, np.linspace(0.3, 5, 21))
        assert dev < GRID_TOL
    f = sampler.nu_logdensity(state, hp)
    assert grid_deviation(state, ctx, lambda s, v: setattr(s, "nu", v), f, np.linspace(2.5, 100, 21)) < GRID_TOL


# --- closed-form special cases ---------------------------------------------------


def _no_y(data):
    return dataclasses.replace(data, y_series=[model.SiteSeries.empty() for _ in data.sites])


def test_no_y_data_gives_prior_conditionals(setup):
    state, ctx = setup
    data = dataclasses.replace(_no_y(_dataset_from(ctx)))
    c2 = sampler.GibbsContext(data, ctx.hp, ctx.bases, ctx.graph, np.random.default_rng(0))
    Q, b = sampler.gamma_conditional(state, c2)
    assert np.allclose(Q, state.lambda_gamma * ctx.bases.omega_gamma) and np.all(b == 0)
    for ell in range(state.theta.shape[0]):
        Q, b = sampler.theta_conditional(state, c2, ell)
        assert np.allclose(Q, ctx.graph.precision / state.sigma2_theta[ell]) and np.all(b == 0)
    draw = sampler.step_gamma(state.copy(), c2)
    assert np.all(np.isfinite(draw.gamma))


def _dataset_from(ctx):
    lay = ctx.layout
    ys, xs = [], []
    for i in range(lay.n):
        m = lay.y_site == i
        ys.append(model.SiteSeries(lay.y_t[m], lay.y_val[m]))
        m = lay.x_site == i
        xs.append(model.SiteSeries(lay.x_t[m], lay.x_val[m]))
    return model.Dataset(Grid.regular(lay.M, lay.D), [f"s{i}" for i in range(lay.n)], ys, xs)


def test_gamma_scalar_least_squares(setup):
    state, ctx = setup
    M = ctx.layout.M
    const = basisgen.BasisSystem(basisgen.BSPLINE, np.ones((M, 1)), np.zeros((1, 1)))
    bases = dataclasses.replace(ctx.bases, gamma=const, omega_gamma=np.ones((1, 1)))
    c2 = sampler.GibbsContext(ctx.layout, ctx.hp, bases, ctx.graph, np.random.default_rng(0))
    s = state.copy()
    s.gamma = np.array([0.0])
    s.theta[:] = 0.0
    s.lambda_gamma = ctx.hp.lambda_lower
    s.sigma2_y = 1e-10
    Q, b = sampler.gamma_conditional(s, c2)
    X = model.latent_x(s, bases)
    lay = ctx.layout
    xl = X[lay.y_site, lay.y_e - s.lag]
    ls = (xl @ lay.y_val) / (xl @ xl)
    assert b[0] / Q[0, 0] == pytest.approx(ls, rel=1e-9)


def test_theta_two_site_symbolic():
    hp = model.Hyperparams(K=1, L=1, H=4, J=3, P=4, lag_max=2).resolve(20)
    grid = Grid.regular(20, 2)
    bases = model.build_bases(grid, hp)
    graph = graph_from_adjacency([[0, 1], [1, 0]], jitter_rel=0.1)
    y = [model.SiteSeries([5], [0.3]), model.SiteSeries([5], [0.7])]
    x = [model.SiteSeries([0, 10], [1.0, 2.0]), model.SiteSeries([0, 10], [1.5, 0.5])]
    data = model.Dataset(grid, ["a", "b"], y, x)
    ctx = sampler.GibbsContext(data, hp, bases, graph, np.random.default_rng(0))
    s = model.ModelState(
        lag=1, gamma=np.full(4, 0.2), theta=np.array([[0.1, -0.2]]), phi=np.eye(3)[:, :1],
        mu=np.array([1.0]), alpha=np.array([[0.3, -0.4]]), psi=np.eye(4)[:, :1],
        sigma2_x=0.5, sigma2_y=0.04, sigma2_theta=np.array([2.0]), lambda_gamma=1.0,
        lambda_f=np.ones(1), lambda_g=np.ones(1), delta_mu=np.ones(1), delta_alpha=np.ones(1),
        zeta=np.ones((1, 2)), nu=5.0, a_mu1=2.0, a_mu2=2.0, a_alpha1=2.0, a_alpha2=2.0,
    )
    Q, b = sampler.theta_conditional(s, ctx, 0)
    mean = np.linalg.solve(Q, b)

    g = bases.theta.eval[5, 0]
    X = model.latent_x(s, bases)
    gam = 0.2  # B-splines sum to one
    r = np.array([0.3, 0.7]) - gam * X[:, 5 + 2 - 1]
    tau, eps = 1 / 0.04, graph.jitter
    a11 = (1 + eps) / 2.0 + tau * g * g
    a12 = -1 / 2.0
    det = a11 * a11 - a12 * a12
    rhs = tau * g * r
    sym = np.array([a11 * rhs[0] - a12 * rhs[1], -a12 * rhs[0] + a11 * rhs[1]]) / det
    assert np.allclose(mean, sym, rtol=0, atol=1e-10)


def test_mu_two_observation_combination():
    hp = model.Hyperparams(K=1, L=1, H=4, J=3, P=4, lag_max=2).resolve(20)
    grid = Grid.regular(20, 2)
    bases = model.build_bases(grid, hp)
    graph = SpatialGraph(np.zeros((1, 1)), np.zeros((1, 1)), 1.0)
    data = model.Dataset(grid, ["a"], [model.SiteSeries([8], [0.4])], [model.SiteSeries([3], [2.5])])
    ctx = sampler.GibbsContext(data, hp, bases, graph, np.random.default_rng(0))
    s = model.ModelState(
        lag=2, gamma=np.full(4, 0.5), theta=np.array([[0.05]]), phi=np.eye(3)[:, :1],
        mu=np.array([0.0]), alpha=np.array([[0.0]]), psi=np.eye(4)[:, 1:2],
        sigma2_x=0.3, sigma2_y=0.01, sigma2_theta=np.array([1.0]), lambda_gamma=1.0,
        lambda_f=np.ones(1), lambda_g=np.ones(1), delta_mu=np.array([0.5]), delta_alpha=np.ones(1),
        zeta=np.ones((1, 1)), nu=5.0, a_mu1=2.0, a_mu2=2.0, a_alpha1=2.0, a_alpha2=2.0,
    )
    f = bases.x.eval[:, 1]
    fx = f[3 + 2]
    fy = 0.5 * f[8 + 2 - 2]
    th = bases.theta.eval[8, 0] * 0.05
    # x = fx*mu + e (var .3), y - th = fy*mu + e (var .01), mu ~ N(0, 1/.5)
    prec = 0.5 + fx ** 2 / 0.3 + fy ** 2 / 0.01
    mean = (fx * 2.5 / 0.3 + fy * (0.4 - th) / 0.01) / prec
    p, lin = sampler.mu_conditional(s, ctx, 0)
    assert p == pytest.approx(prec, rel=1e-12)
    assert lin / p == pytest.approx(mean, rel=1e-10)


def test_factor_kernel_matches_sequential_conditionals(setup):
    state, ctx = setup
    rng = np.random.default_rng(9)
    K, n = state.alpha.shape
    z_mu, z_alpha = rng.standard_normal(K), rng.standard_normal((K, n))

    ref = state.copy()
    for k in range(K):
        p, lin = sampler.mu_conditional(ref, ctx, k)
        ref.mu[k] = lin / p + z_mu[k] / math.sqrt(p)
    for k in range(K):
        p, lin = sampler.alpha_conditional(ref, ctx, k)
        ref.alpha[k] = lin / p + z_alpha[k] / np.sqrt(p)

    for backend in ("python", "auto"):
        c2 = sampler.GibbsContext(ctx.layout, ctx.hp, ctx.bases, ctx.graph, None, backend=backend)
        c2.rng = _ScriptedNormals([z_mu, z_alpha])
        got = sampler.step_factors(state.copy(), c2)
        assert np.allclose(got.mu, ref.mu, rtol=1e-10, atol=1e-12)
        assert np.allclose(got.alpha, ref.alpha, rtol=1e-10, atol=1e-12)


class _ScriptedNormals:
    def __init__(self, draws):
        self.draws = list(draws)

    def standard_normal(self, shape):
        out = self.draws.pop(0)
        assert np.shape(out) == (shape if isinstance(shape, tuple) else (shape,))
        return out


def test_psi_without_signal_reverts_to_prior(setup):
    state, ctx = setup
    s = state.copy()
    s.mu[1] = 0.0
    s.alpha[1] = 0.0
    Q, b, C = sampler.psi_conditional(s, ctx, 1)
    assert np.allclose(Q, s.lambda_f[1] * ctx.bases.omega_psi) and np.allclose(b, 0)
    assert C.shape == (2, s.psi.shape[0])


def test_mgp_examples(setup):
    state, _ = setup
    s = state.copy()
    s.delta_mu = np.array([2.0, 3.0, 1.0])
    assert np.allclose(s.mu_precision()[:2], [2.0, 6.0])
    s.mu[:] = 0.0
    sh, ra = sampler.delta_mu_conditional(s, 0)
    assert sh == s.a_mu1 + 3 / 2 and ra == 1.0


def test_variance_examples(setup):
    state, ctx = setup
    s = state.copy()
    lay = ctx.layout
    ry, rx = model.residuals(s, lay, ctx.bases)
    exact = dataclasses.replace(lay, x_val=lay.x_val - rx)
    c2 = sampler.GibbsContext(exact, ctx.hp, ctx.bases, ctx.graph, None)
    sh, ra = sampler.variance_conditionals(s, c2)["x"]
    assert sh == ctx.hp.a_eps_x + 0.5 * lay.x_val.size
    assert ra == pytest.approx(ctx.hp.b_eps_x, abs=1e-20)

    g0 = graph_from_adjacency(ctx.graph.D, jitter_rel=0.0)
    c3 = sampler.GibbsContext(lay, ctx.hp, ctx.bases, g0, None)
    s.theta[0] = 1.7
    sh, ra = sampler.variance_conditionals(s, c3)["theta"]
    assert ra[0] == pytest.approx(ctx.hp.b_theta, abs=1e-12)


# --- sampler primitives ----------------------------------------------------------


def test_gumbel_uniform_chi_square():
    rng = np.random.default_rng(11)
    k, N = 22, 100_000
    draws = np.array([sampler.gumbel_max(np.zeros(k), rng) for _ in range(N)])
    counts = np.bincount(draws, minlength=k)
    assert stats.chisquare(counts).pvalue > 0.001


def test_gumbel_dominated_candidate():
    rng = np.random.default_rng(12)
    logw = np.zeros(10)
    logw[4] = 50.0
    draws = np.array([sampler.gumbel_max(logw, rng) for _ in range(20_000)])
    assert np.mean(draws == 4) > 0.999


def test_gumbel_matches_softmax_categorical():
    rng = np.random.default_rng(13)
    logw = np.array([-3.0, 0.2, 1.0, -0.5, 0.9, -8.0, 0.0])
    N = 100_000
    g = np.array([sampler.gumbel_max(logw, rng) for _ in range(N)])
    p = np.exp(logw - logw.max())
    p /= p.sum()
    d = rng.choice(logw.size, size=N, p=p)
    table = np.vstack([np.bincount(g, minlength=7), np.bincount(d, minlength=7)])
    table = table[:, table.min(axis=0) > 0]
    assert stats.chi2_contingency(table).pvalue > 0.001


def test_slice_standard_normal_moments():
    rng = np.random.default_rng(14)
    f = lambda x: -0.5 * x * x
    x, out = 0.0, np.empty(100_000)
    for t in range(out.size):
        x = sampler.slice_sample(f, x, rng)
        out[t] = x
    assert abs(out.mean()) < 0.02
    assert 0.95 <= out.var() <= 1.05


def test_slice_gamma_moment_and_bounds():
    rng = np.random.default_rng(15)
    f = lambda a: math.log(a) - a if a > 0 else -math.inf
    a, out = 1.0, np.empty(100_000)
    for t in range(out.size):
        a = sampler.slice_sample(f, a, rng, bounds=(0.0, math.inf))
        out[t] = a
    assert abs(out.mean() - 2.0) < 0.03
    assert out.min() > 0

    hp = model.Hyperparams()
    z = rng.gamma(1.5, 1 / 1.5, size=(3, 4))
    s = dataclasses.replace(_dummy_state(), zeta=z)
    nu = 5.0
    for _ in range(2000):
        nu = sampler.slice_sample(sampler.nu_logdensity(s, hp), nu, rng, (hp.nu_lower, hp.nu_upper))
        assert hp.nu_lower <= nu <= hp.nu_upper


def test_slice_rejects_bad_start():
    with pytest.raises(SamplerError):
        sampler.slice_sample(lambda x: -math.inf, 0.0, np.random.default_rng(0))


def _dummy_state():
    return model.ModelState(
        lag=0, gamma=np.zeros(4), theta=np.zeros((1, 4)), phi=np.eye(3)[:, :1], mu=np.zeros(3),
        alpha=np.zeros((3, 4)), psi=np.eye(4)[:, :3], sigma2_x=1.0, sigma2_y=1.0,
        sigma2_theta=np.ones(1), lambda_gamma=1.0, lambda_f=np.ones(3), lambda_g=np.ones(1),
        delta_mu=np.ones(3), delta_alpha=np.ones(3), zeta=np.ones((3, 4)), nu=5.0,
        a_mu1=2.0, a_mu2=2.0, a_alpha1=2.0, a_alpha2=2.0,
    )


def test_constrained_gaussian_moments():
    rng = np.random.default_rng(16)
    A = np.array([[2.0, 0.3, -0.4], [0.3, 1.5, 0.2], [-0.4, 0.2, 1.0]])
    b = np.array([0.5, -1.0, 0.8])
    c = np.array([[1.0, -2.0, 0.5]])
    S = np.linalg.inv(A)
    m = S @ b
    # analytic conditional of N(m, S) given c x = 0
    g = S @ c.T / (c @ S @ c.T)
    m_c = m - (g @ (c @ m)).ravel()
    S_c = S - g @ c @ S
    N = 100_000
    X = np.array([sampler.draw_gaussian(A, b, rng, c) for _ in range(N)])
    assert np.abs(X @ c.ravel()).max() < 1e-12
    se = np.sqrt(np.diag(S_c) / N)
    assert np.all(np.abs(X.mean(axis=0) - m_c) < 4 * se)
    emp = np.cov(X.T)
    se_cov = np.sqrt((np.outer(np.diag(S_c), np.diag(S_c)) + S_c ** 2) / N)
    assert np.all(np.abs(emp - S_c) < 5 * se_cov + 1e-12)


def test_gaussian_moments_unconstrained():
    rng = np.random.default_rng(17)
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -2.0])
    N = 100_000
    X = np.array([sampler.draw_gaussian(A, b, rng) for _ in range(N)])
    S = np.linalg.inv(A)
    assert np.all(np.abs(X.mean(axis=0) - S @ b) < 4 * np.sqrt(np.diag(S) / N))
    se_cov = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S ** 2) / N)
    assert np.all(np.abs(np.cov(X.T) - S) < 5 * se_cov)


def test_draw_gaussian_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(SamplerError):
        sampler.draw_gaussian(np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros(2), rng)
    with pytest.raises(SamplerError):
        sampler.draw_gaussian(np.eye(3), np.zeros(3), rng, C=np.array([[1.0, 0, 0], [2.0, 0, 0]]))


def test_truncated_gamma_moments():
    rng = np.random.default_rng(18)
    shape, rate, lo = 2.5, 1.5, 1.0
    x = np.array([sampler.truncated_gamma(shape, rate, lo, rng) for _ in range(50_000)])
    assert x.min() >= lo
    d = stats.gamma(shape, scale=1 / rate)
    tail = d.sf(lo)
    mean = stats.gamma(shape + 1, scale=1 / rate).sf(lo) * shape / rate / tail
    assert abs(x.mean() - mean) < 4 * x.std() / math.sqrt(x.size)
    # underflowing tail returns the bound
    assert sampler.truncated_gamma(1.0, 1e3, 10.0, rng) == 10.0


# --- sweep-level contracts -------------------------------------------------------


def test_sweep_determinism_and_invariants(setup):
    state, ctx = setup
    outs = []
    for _ in range(2):
        c = sampler.GibbsContext(ctx.layout, ctx.hp, ctx.bases, ctx.graph, np.random.default_rng(42))
        s = state.copy()
        for _ in range(5):
            sampler.sweep(s, c)
            assert s.check_invariants(ctx.hp, 1e-8) == []
        outs.append(s.to_arrays())
    for k in outs[0]:
        assert np.array_equal(outs[0][k], outs[1][k])


def test_single_factor_phi_unconstrained(setup):
    state, ctx = setup
    hp = dataclasses.replace(ctx.hp, L=1)
    s = state.copy()
    s.theta, s.phi = s.theta[:1].copy(), s.phi[:, :1].copy()
    s.sigma2_theta, s.lambda_g = s.sigma2_theta[:1].copy(), s.lambda_g[:1].copy()
    c = sampler.GibbsContext(ctx.layout, hp, ctx.bases, ctx.graph, np.random.default_rng(1))
    Q, b, C = sampler.phi_conditional(s, c, 0)
    assert C.shape[0] == 0
    sampler.step_phi(s, c)
    assert np.linalg.norm(s.phi[:, 0]) == pytest.approx(1.0, abs=1e-12)


def test_fixed_blocks(setup):
    state, ctx = setup
    with pytest.raises(ConfigError):
        sampler.GibbsContext(ctx.layout, ctx.hp, ctx.bases, ctx.graph, None, fixed={"mu"})
    with pytest.raises(ConfigError):
        sampler.GibbsContext(ctx.layout, ctx.hp, ctx.bases, ctx.graph, None, fixed={"bogus"})
    c = sampler.GibbsContext(ctx.layout, ctx.hp, ctx.bases, ctx.graph, np.random.default_rng(0),
                             fixed={"lag", "gamma", "psi"})
    s = state.copy()
    sampler.sweep(s, c)
    assert s.lag == state.lag
    assert np.array_equal(s.gamma, state.gamma) and np.array_equal(s.psi, state.psi)


def test_stationarity_from_truth():
    hp = model.Hyperparams(K=2, L=1, H=6, J=6, P=5, lag_max=5, a_eps_x=4.0, b_eps_x=0.3,
                           a_eps_y=4.0, b_eps_y=0.3, a_theta=4.0, b_theta=4.0, jitter=0.2,
                           lambda_half_upper=2.0, penalty_ridge=1.0).resolve(60)
    grid = Grid.regular(60, 5)
    bases = model.build_bases(grid, hp)
    graph = graph_from_adjacency(np.ones((4, 4)) - np.eye(4), hp.jitter)
    rng = np.random.default_rng(20)
    truth = model.sample_prior_state(hp, bases, graph, rng)
    t = np.arange(60)
    empty = [model.SiteSeries(t[::2], np.zeros(30)) for _ in range(4)]
    layout = model.ObsLayout.from_dataset(model.Dataset(grid, list("abcd"), empty, empty), hp)
    y, x = model.simulate_observations(truth, layout, bases, rng)
    layout = dataclasses.replace(layout, y_val=y, x_val=x)
    ctx = sampler.GibbsContext(layout, hp, bases, graph, rng)
    s = truth.copy()
    lj = np.empty(500)
    for m in range(lj.size):
        sampler.sweep(s, ctx)
        lj[m] = model.log_joint(s, layout, hp, bases, graph)
    it = np.arange(lj.size)
    fit = stats.linregress(it, lj)
    resid = lj - fit.intercept - fit.slope * it
    from lagfcr.inference import ess
    inflate = math.sqrt(lj.size / max(ess(resid).value, 1.0))
    half = 1.96 * fit.stderr * inflate
    assert fit.slope - half <= 0.0 <= fit.slope + half
