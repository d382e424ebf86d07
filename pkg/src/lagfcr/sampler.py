"""Gibbs sampler: one function per block of full conditionals.

Each ``step_*`` updates ``state`` in place and returns it. The matching
``*_conditional`` helpers return the parameters of the full conditional
without drawing, so tests can compare them against ``log_joint``.

Gaussian conditionals are returned in information form ``(Q, b)``, i.e.
density proportional to ``exp(-x'Qx/2 + b'x)``.

All design-matrix products use aggregated Gram matrices: rows of a basis
evaluated at repeated grid positions are summed per position first
(``np.bincount``), so the cost scales with the grid length, not the
observation count.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import linalg
from scipy.special import gammainccinv, gammaincc

from lagfcr import kernels
from lagfcr.errors import ConfigError, SamplerError
from lagfcr.model import ModelState, ObsLayout, as_layout

BLOCKS = (
    "gamma", "lambda_gamma", "theta", "phi", "lambda_g", "lag", "mu", "alpha",
    "psi", "lambda_f", "delta_mu", "delta_alpha", "zeta", "sigma2_x", "sigma2_y",
    "sigma2_theta", "a_mu1", "a_mu2", "a_alpha1", "a_alpha2", "nu",
)

_RETRY_INFLATION = 1e-10


class GibbsContext:
    """Everything a sweep needs besides the state: data, bases, graph, rng.

    Basis rows at the observation times are cached once. ``fixed`` names
    blocks (see ``BLOCKS``) that the sweep leaves untouched.
    """

    def __init__(self, data, hp, bases, graph, rng, fixed=(), backend=None):
        layout = as_layout(data, hp)
        self.layout: ObsLayout = layout
        self.hp = hp
        self.bases = bases
        self.graph = graph
        self.rng = rng
        self.fixed = frozenset(fixed)
        unknown = self.fixed - set(BLOCKS)
        if unknown:
            raise ConfigError(f"unknown blocks {sorted(unknown)}", field="fixed")
        if ("mu" in self.fixed) != ("alpha" in self.fixed):
            raise ConfigError("mu and alpha must be fixed together", field="fixed")
        self.kernels = kernels.select(backend) if isinstance(backend, (str, type(None))) else backend
        if graph.n != layout.n:
            raise ConfigError("graph and data disagree on the number of sites")
        if bases.x.eval.shape[0] != layout.E or bases.gamma.eval.shape[0] != layout.M:
            raise ConfigError("bases do not match the data grid")

        self.B = bases.gamma.eval
        self.W = np.ascontiguousarray(bases.x.eval)
        self.V = bases.theta.eval
        self.By = self.B[layout.y_t]
        self.Vy = self.V[layout.y_t]
        self.Wx = self.W[layout.x_e]
        self.y_e = layout.y_e
        self.x_e = layout.x_e
        self.precision_graph = graph.precision
        self.n_y = layout.y_val.size
        self.n_x = layout.x_val.size

    def free(self, name):
        return name not in self.fixed


# ---------------------------------------------------------------------------
# shared numerics


def cholesky(Q):
    """Lower Cholesky factor, retrying once with a tiny diagonal inflation."""
    if not np.all(np.isfinite(Q)):
        raise SamplerError("non-finite precision matrix")
    try:
        return linalg.cholesky(Q, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    bump = _RETRY_INFLATION * max(float(np.mean(np.abs(np.diag(Q)))), 1e-300)
    try:
        return linalg.cholesky(Q + bump * np.eye(Q.shape[0]), lower=True, check_finite=False)
    except linalg.LinAlgError:
        eig = np.linalg.eigvalsh(Q)
        raise SamplerError(
            f"precision not positive definite (min eigenvalue {eig[0]:.3g}, max {eig[-1]:.3g})"
        ) from None


def draw_gaussian(Q, b, rng, C=None):
    """Draw from N(Q^-1 b, Q^-1), optionally conditioned on C x = 0.

    The constraint is imposed by kriging: an unconstrained draw is corrected
    by Q^-1 C' (C Q^-1 C')^-1 C x, which is exact for linear constraints.
    """
    Lc = cholesky(Q)
    mean = linalg.cho_solve((Lc, True), b, check_finite=False)
    z = rng.standard_normal(b.shape[0])
    x = mean + linalg.solve_triangular(Lc, z, lower=True, trans="T", check_finite=False)
    if C is not None and C.shape[0]:
        QiCt = linalg.cho_solve((Lc, True), C.T, check_finite=False)
        S = C @ QiCt
        s = np.linalg.svd(S, compute_uv=False)
        if s[-1] <= 1e-12 * s[0]:
            raise SamplerError("constraint matrix is rank deficient")
        x = x - QiCt @ np.linalg.solve(S, C @ x)
    return x


def truncated_gamma(shape, rate, lower, rng):
    """Gamma(shape, rate) restricted to (lower, inf), by upper-tail inversion."""
    if not (shape > 0 and rate > 0):
        raise SamplerError(f"invalid truncated Gamma(shape={shape}, rate={rate})")
    tail = gammaincc(shape, rate * lower)
    if tail <= 0.0:
        return float(lower)
    u = tail * (1.0 - rng.random())  # in (0, tail]
    return float(max(gammainccinv(shape, u) / rate, lower))


def draw_gamma(shape, rate, rng, size=None):
    rate = np.asarray(rate, dtype=float)
    if np.any(rate <= 0) or np.any(np.asarray(shape) <= 0):
        raise SamplerError("nonpositive Gamma shape or rate")
    return rng.gamma(shape, 1.0 / rate, size=size)


def slice_sample(logdensity, current, rng, bounds=(-math.inf, math.inf), width=1.0,
                 max_steps=100):
    """One stepping-out and shrinkage slice-sampling transition.

    ``logdensity`` may return -inf; it is only evaluated inside ``bounds``.
    """
    lo, hi = bounds
    f0 = logdensity(current)
    if not math.isfinite(f0):
        raise SamplerError(f"slice sampler started where log density is {f0}")
    level = f0 - rng.exponential()
    left = current - width * rng.random()
    right = left + width
    j = int(math.floor(max_steps * rng.random()))
    k = max_steps - 1 - j
    while j > 0 and left > lo and logdensity(left) > level:
        left -= width
        j -= 1
    while k > 0 and right < hi and logdensity(right) > level:
        right += width
        k -= 1
    left, right = max(left, lo), min(right, hi)
    for _ in range(200):
        prop = left + rng.random() * (right - left)
        if logdensity(prop) > level:
            return prop
        if prop < current:
            left = prop
        else:
            right = prop
    raise SamplerError("slice sampler shrinkage did not terminate")


# ---------------------------------------------------------------------------
# derived quantities


def latent(state: ModelState, ctx: GibbsContext):
    """Loading curves F (E, K) and latent curves X (n, E)."""
    F = ctx.W @ state.psi
    X = np.ascontiguousarray((F @ state.beta).T)
    return F, X


def random_effect_terms(state, ctx):
    """Per-factor random-effect contributions at the y times, (Ny, L)."""
    Gy = ctx.Vy @ state.phi
    return Gy * state.theta[:, ctx.layout.y_site].T


def _xlag(X, state, ctx):
    return X[ctx.layout.y_site, ctx.y_e - state.lag]


def _penalised_lambda(coef, omega, hp):
    """Shape, rate and lower bound of the lambda conditional."""
    coef = np.asarray(coef, dtype=float)
    q = float(coef @ omega @ coef)
    return 0.5 * (coef.size - 1), 0.5 * q, hp.lambda_lower


# ---------------------------------------------------------------------------
# step 1: coefficient curve


def gamma_conditional(state, ctx):
    lay = ctx.layout
    _, X = latent(state, ctx)
    xl = _xlag(X, state, ctx)
    r = lay.y_val - random_effect_terms(state, ctx).sum(axis=1)
    tau = 1.0 / state.sigma2_y
    w = np.bincount(lay.y_t, xl * xl, minlength=lay.M)
    Q = state.lambda_gamma * ctx.bases.omega_gamma + tau * (ctx.B.T * w) @ ctx.B
    b = tau * ctx.B.T @ np.bincount(lay.y_t, xl * r, minlength=lay.M)
    return Q, b


def lambda_gamma_conditional(state, ctx):
    return _penalised_lambda(state.gamma, ctx.bases.omega_gamma, ctx.hp)


def step_gamma(state, ctx):
    if ctx.free("gamma"):
        state.gamma = draw_gaussian(*gamma_conditional(state, ctx), ctx.rng)
    if ctx.free("lambda_gamma"):
        state.lambda_gamma = truncated_gamma(*lambda_gamma_conditional(state, ctx), ctx.rng)
    return state


# ---------------------------------------------------------------------------
# step 2: spatial random effects


def _partial_y(state, ctx, X, terms, drop):
    gy = ctx.By @ state.gamma
    return ctx.layout.y_val - gy * _xlag(X, state, ctx) - terms.sum(axis=1) + terms[:, drop]


def theta_conditional(state, ctx, ell):
    lay = ctx.layout
    _, X = latent(state, ctx)
    terms = random_effect_terms(state, ctx)
    r = _partial_y(state, ctx, X, terms, ell)
    g = ctx.Vy @ state.phi[:, ell]
    tau = 1.0 / state.sigma2_y
    Q = ctx.precision_graph / state.sigma2_theta[ell]
    Q[np.diag_indices(lay.n)] += tau * np.bincount(lay.y_site, g * g, minlength=lay.n)
    b = tau * np.bincount(lay.y_site, g * r, minlength=lay.n)
    return Q, b


def step_theta(state, ctx):
    if ctx.free("theta"):
        for ell in range(state.theta.shape[0]):
            state.theta[ell] = draw_gaussian(*theta_conditional(state, ctx, ell), ctx.rng)
    return state


# ---------------------------------------------------------------------------
# step 3: random-effect loading curves


def phi_conditional(state, ctx, ell):
    """(Q, b, C): information form and orthogonality constraint C phi = 0."""
    lay = ctx.layout
    _, X = latent(state, ctx)
    terms = random_effect_terms(state, ctx)
    r = _partial_y(state, ctx, X, terms, ell)
    th = state.theta[ell, lay.y_site]
    tau = 1.0 / state.sigma2_y
    w = np.bincount(lay.y_t, th * th, minlength=lay.M)
    Q = state.lambda_g[ell] * ctx.bases.omega_phi + tau * (ctx.V.T * w) @ ctx.V
    b = tau * ctx.V.T @ np.bincount(lay.y_t, th * r, minlength=lay.M)
    C = np.delete(state.phi, ell, axis=1).T
    return Q, b, C


def step_phi(state, ctx):
    for ell in range(state.phi.shape[1]):
        if ctx.free("phi"):
            Q, b, C = phi_conditional(state, ctx, ell)
            v = draw_gaussian(Q, b, ctx.rng, C)
            norm = np.linalg.norm(v)
            state.phi[:, ell] = v / norm
            state.theta[ell] *= norm
        if ctx.free("lambda_g"):
            shape, rate, lo = _penalised_lambda(state.phi[:, ell], ctx.bases.omega_phi, ctx.hp)
            state.lambda_g[ell] = truncated_gamma(shape, rate, lo, ctx.rng)
    return state


# ---------------------------------------------------------------------------
# step 4: lag


def lag_logweights(state, ctx):
    """Unnormalised log posterior of every lag 0..lag_max."""
    _, X = latent(state, ctx)
    r0 = np.ascontiguousarray(ctx.layout.y_val - random_effect_terms(state, ctx).sum(axis=1))
    gy = np.ascontiguousarray(ctx.By @ state.gamma)
    sse = ctx.kernels.lag_sse(r0, gy, X, ctx.layout.y_site, ctx.y_e, ctx.hp.lag_max)
    return -0.5 * sse / state.sigma2_y


def gumbel_max(logw, rng):
    """Categorical draw with probabilities proportional to exp(logw)."""
    return int(np.argmax(np.asarray(logw) + rng.gumbel(size=len(logw))))


def step_lag(state, ctx):
    if ctx.free("lag"):
        state.lag = gumbel_max(lag_logweights(state, ctx), ctx.rng)
    return state


# ---------------------------------------------------------------------------
# step 5: factor scores


def factor_design(state, ctx):
    """Loading values at x times (Nx, K) and lag-shifted, coefficient-scaled
    loading values at y times (Ny, K), plus the full residuals."""
    lay = ctx.layout
    F, X = latent(state, ctx)
    gy = ctx.By @ state.gamma
    Fx = np.ascontiguousarray(F[ctx.x_e])
    Fy = np.ascontiguousarray(F[ctx.y_e - state.lag] * gy[:, None])
    rx = lay.x_val - X[lay.x_site, ctx.x_e]
    ry = lay.y_val - random_effect_terms(state, ctx).sum(axis=1) - gy * _xlag(X, state, ctx)
    return Fx, Fy, rx, ry


def mu_conditional(state, ctx, k):
    """(precision, linear term) of the scalar mu_k conditional."""
    Fx, Fy, rx, ry = factor_design(state, ctx)
    rx = rx + Fx[:, k] * state.mu[k]
    ry = ry + Fy[:, k] * state.mu[k]
    tx, ty = 1.0 / state.sigma2_x, 1.0 / state.sigma2_y
    prec = state.mu_precision()[k] + tx * Fx[:, k] @ Fx[:, k] + ty * Fy[:, k] @ Fy[:, k]
    lin = tx * Fx[:, k] @ rx + ty * Fy[:, k] @ ry
    return prec, lin


def alpha_conditional(state, ctx, k):
    """Per-site (precision, linear term) vectors of the alpha_k. conditional.

    Given everything else, alpha_k1..alpha_kn are independent: site i's
    likelihood involves only column i of alpha and the prior factorises over
    sites. This is what lets one vectorised draw replace n scalar draws.
    """
    lay = ctx.layout
    n = lay.n
    Fx, Fy, rx, ry = factor_design(state, ctx)
    a = state.alpha[k]
    rx = rx + Fx[:, k] * a[lay.x_site]
    ry = ry + Fy[:, k] * a[lay.y_site]
    tx, ty = 1.0 / state.sigma2_x, 1.0 / state.sigma2_y
    prec = (state.alpha_precision()[k] + tx * np.bincount(lay.x_site, Fx[:, k] ** 2, minlength=n)
            + ty * np.bincount(lay.y_site, Fy[:, k] ** 2, minlength=n))
    lin = (tx * np.bincount(lay.x_site, Fx[:, k] * rx, minlength=n)
           + ty * np.bincount(lay.y_site, Fy[:, k] * ry, minlength=n))
    return prec, lin


def step_factors(state, ctx):
    if not ctx.free("mu"):
        return state
    lay = ctx.layout
    Fx, Fy, rx, ry = factor_design(state, ctx)
    K, n = state.alpha.shape
    z_mu = ctx.rng.standard_normal(K)
    z_alpha = ctx.rng.standard_normal((K, n))
    mu = np.ascontiguousarray(state.mu, dtype=float)
    alpha = np.ascontiguousarray(state.alpha, dtype=float)
    ctx.kernels.factor_update(
        Fx, Fy, lay.x_site, lay.y_site, rx, ry, mu, alpha,
        np.ascontiguousarray(state.mu_precision()), np.ascontiguousarray(state.alpha_precision()),
        1.0 / state.sigma2_x, 1.0 / state.sigma2_y, z_mu, z_alpha,
    )
    state.mu, state.alpha = mu, alpha
    return state


# ---------------------------------------------------------------------------
# step 6: wastewater loading curves


def psi_conditional(state, ctx, k):
    """(Q, b, C) for psi_k; C psi_k = 0 keeps the loading curves orthogonal."""
    lay = ctx.layout
    F, X = latent(state, ctx)
    gy = ctx.By @ state.gamma
    beta = state.beta[k]
    bx = beta[lay.x_site]
    by = gy * beta[lay.y_site]
    ye = ctx.y_e - state.lag
    rx = lay.x_val - X[lay.x_site, ctx.x_e] + F[ctx.x_e, k] * bx
    ry = (lay.y_val - random_effect_terms(state, ctx).sum(axis=1)
          - gy * _xlag(X, state, ctx) + F[ye, k] * by)
    tx, ty = 1.0 / state.sigma2_x, 1.0 / state.sigma2_y
    w = tx * np.bincount(ctx.x_e, bx * bx, minlength=lay.E) + ty * np.bincount(ye, by * by, minlength=lay.E)
    v = tx * np.bincount(ctx.x_e, bx * rx, minlength=lay.E) + ty * np.bincount(ye, by * ry, minlength=lay.E)
    Q = state.lambda_f[k] * ctx.bases.omega_psi + (ctx.W.T * w) @ ctx.W
    b = ctx.W.T @ v
    C = np.delete(state.psi, k, axis=1).T
    return Q, b, C


def step_psi(state, ctx):
    for k in range(state.psi.shape[1]):
        if ctx.free("psi"):
            Q, b, C = psi_conditional(state, ctx, k)
            v = draw_gaussian(Q, b, ctx.rng, C)
            norm = np.linalg.norm(v)
            state.psi[:, k] = v / norm
            state.mu[k] *= norm
            state.alpha[k] *= norm
        if ctx.free("lambda_f"):
            shape, rate, lo = _penalised_lambda(state.psi[:, k], ctx.bases.omega_psi, ctx.hp)
            state.lambda_f[k] = truncated_gamma(shape, rate, lo, ctx.rng)
    return state


# ---------------------------------------------------------------------------
# step 7: multiplicative gamma process


def _leave_one_out_products(delta, h):
    """prod_{m <= k, m != h} delta_m for k >= h."""
    return np.cumprod(delta)[h:] / delta[h]


def delta_mu_conditional(state, h):
    K = state.mu.size
    a = state.a_mu1 if h == 0 else state.a_mu2
    eta = _leave_one_out_products(state.delta_mu, h)
    return a + 0.5 * (K - h), 1.0 + 0.5 * float(eta @ state.mu[h:] ** 2)


def delta_alpha_conditional(state, h):
    K, n = state.alpha.shape
    a = state.a_alpha1 if h == 0 else state.a_alpha2
    eta = _leave_one_out_products(state.delta_alpha, h)
    ss = np.sum(state.zeta[h:] * state.alpha[h:] ** 2, axis=1)
    return a + 0.5 * n * (K - h), 1.0 + 0.5 * float(eta @ ss)


def zeta_conditional(state):
    tau = np.cumprod(state.delta_alpha)[:, None]
    return 0.5 * (state.nu + 1.0), 0.5 * (state.nu + tau * state.alpha ** 2)


def step_mgp(state, ctx):
    rng = ctx.rng
    if ctx.free("delta_mu"):
        for h in range(state.mu.size):
            state.delta_mu[h] = draw_gamma(*delta_mu_conditional(state, h), rng)
    if ctx.free("delta_alpha"):
        for h in range(state.mu.size):
            state.delta_alpha[h] = draw_gamma(*delta_alpha_conditional(state, h), rng)
    if ctx.free("zeta"):
        shape, rate = zeta_conditional(state)
        state.zeta = draw_gamma(shape, rate, rng, size=rate.shape)
    return state


# ---------------------------------------------------------------------------
# step 8: variance components (drawn as precisions)


def variance_conditionals(state, ctx):
    """Gamma (shape, rate) of tau_x, tau_y and each tau_theta."""
    lay, hp = ctx.layout, ctx.hp
    F, X = latent(state, ctx)
    gy = ctx.By @ state.gamma
    rx = lay.x_val - X[lay.x_site, ctx.x_e]
    ry = lay.y_val - gy * _xlag(X, state, ctx) - random_effect_terms(state, ctx).sum(axis=1)
    quad = np.einsum("li,ij,lj->l", state.theta, ctx.precision_graph, state.theta)
    return {
        "x": (hp.a_eps_x + 0.5 * lay.x_val.size, hp.b_eps_x + 0.5 * float(rx @ rx)),
        "y": (hp.a_eps_y + 0.5 * lay.y_val.size, hp.b_eps_y + 0.5 * float(ry @ ry)),
        "theta": (hp.a_theta + 0.5 * lay.n, hp.b_theta + 0.5 * quad),
    }


def step_variances(state, ctx):
    c = variance_conditionals(state, ctx)
    if ctx.free("sigma2_x"):
        state.sigma2_x = 1.0 / draw_gamma(*c["x"], ctx.rng)
    if ctx.free("sigma2_y"):
        state.sigma2_y = 1.0 / draw_gamma(*c["y"], ctx.rng)
    if ctx.free("sigma2_theta"):
        shape, rate = c["theta"]
        state.sigma2_theta = 1.0 / draw_gamma(shape, rate, ctx.rng, size=rate.shape)
    return state


# ---------------------------------------------------------------------------
# step 9: MGP shape parameters and degrees of freedom


def _shape_logdensity(deltas, hp):
    logsum = float(np.sum(np.log(deltas)))
    m = len(deltas)

    def f(a):
        if a <= 0:
            return -math.inf
        return (hp.a_shape - 1) * math.log(a) - hp.a_rate * a + (a - 1) * logsum - m * math.lgamma(a)

    return f


def nu_logdensity(state, hp):
    z = state.zeta
    s_log, s_z, m = float(np.sum(np.log(z))), float(np.sum(z)), z.size

    def f(nu):
        if not hp.nu_lower <= nu <= hp.nu_upper:
            return -math.inf
        h = 0.5 * nu
        return m * (h * math.log(h) - math.lgamma(h)) + (h - 1) * s_log - h * s_z

    return f


def step_hyper(state, ctx):
    hp, rng = ctx.hp, ctx.rng
    kw = dict(width=hp.slice_width, max_steps=hp.slice_max_steps)
    pos = (0.0, math.inf)
    for name, deltas in (
        ("a_mu1", state.delta_mu[:1]), ("a_mu2", state.delta_mu[1:]),
        ("a_alpha1", state.delta_alpha[:1]), ("a_alpha2", state.delta_alpha[1:]),
    ):
        if ctx.free(name):
            val = slice_sample(_shape_logdensity(deltas, hp), getattr(state, name), rng, pos, **kw)
            setattr(state, name, val)
    if ctx.free("nu"):
        state.nu = slice_sample(nu_logdensity(state, hp), state.nu, rng,
                                (hp.nu_lower, hp.nu_upper), **kw)
    return state


STEPS = (step_gamma, step_theta, step_phi, step_lag, step_factors, step_psi,
         step_mgp, step_variances, step_hyper)


def sweep(state, ctx):
    """One full Gibbs iteration, steps 1 to 9 in order; updates in place."""
    for step in STEPS:
        step(state, ctx)
    return state
