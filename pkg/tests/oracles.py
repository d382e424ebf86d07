"""Reference checks shared by the test modules."""
import numpy as np

from lagfcr import model


def grid_deviation(state, ctx, set_value, cond_logpdf, values):
    """Max spread of log_joint - conditional log density over ``values``.

    ``set_value(state, v)`` writes the coordinate; ``cond_logpdf(v)`` is the
    implemented conditional up to a constant. Zero spread means they agree.
    """
    diffs = []
    for v in values:
        s = state.copy()
        set_value(s, v)
        lj = model.log_joint(s, ctx.layout, ctx.hp, ctx.bases, ctx.graph)
        diffs.append(lj - cond_logpdf(v))
    diffs = np.asarray(diffs)
    return float(np.max(np.abs(diffs - diffs.mean())))


def info_form_logpdf(Q, b):
    return lambda x: float(-0.5 * x @ Q @ x + b @ x)


def gamma_logpdf(shape, rate):
    return lambda x: float((shape - 1) * np.log(x) - rate * x)


def scalar_grid(center, sd, num=21, width=3.0):
    return center + sd * np.linspace(-width, width, num)


def log_joint_oracle(state, data, hp, bases, graph):
    """Second, term-by-term implementation of the joint density, assembled
    site by site from the Dataset with scipy.stats densities."""
    from scipy import stats

    D = data.grid.extension
    W, B, V = bases.x.eval, bases.gamma.eval, bases.theta.eval
    beta = state.mu[:, None] + state.alpha
    t = {}
    ly = lx = 0.0
    for i in range(data.n):
        ys, xs = data.y_series[i], data.x_series[i]
        Xi = W @ state.psi @ beta[:, i]
        mean_y = (B[ys.index] @ state.gamma) * Xi[ys.index + D - state.lag] + V[ys.index] @ state.phi @ state.theta[:, i]
        ly += stats.norm.logpdf(ys.values, mean_y, np.sqrt(state.sigma2_y)).sum()
        lx += stats.norm.logpdf(xs.values, Xi[xs.index + D], np.sqrt(state.sigma2_x)).sum()
    t["lik_y"], t["lik_x"] = ly, lx

    def mvn(x, prec):
        return stats.multivariate_normal.logpdf(x, np.zeros(len(x)), np.linalg.inv(prec))

    t["gamma"] = mvn(state.gamma, state.lambda_gamma * bases.omega_gamma)
    t["psi"] = sum(mvn(state.psi[:, k], state.lambda_f[k] * bases.omega_psi) for k in range(state.psi.shape[1]))
    t["phi"] = sum(mvn(state.phi[:, l], state.lambda_g[l] * bases.omega_phi) for l in range(state.phi.shape[1]))

    # lambda^{-1/2} ~ U(0, c)  =>  p(lambda) = lambda^{-3/2} / (2c) on lambda > c^-2
    lams = np.r_[state.lambda_gamma, state.lambda_f, state.lambda_g]
    t["lambda"] = np.sum(stats.uniform.logpdf(lams ** -0.5, 0, hp.lambda_half_upper) + np.log(0.5 * lams ** -1.5))

    Qp = graph.Q + graph.jitter * np.eye(graph.n)
    t["theta"] = sum(mvn(state.theta[l], Qp / state.sigma2_theta[l]) for l in range(state.theta.shape[0]))
    t["tau_theta"] = stats.gamma.logpdf(1 / state.sigma2_theta, hp.a_theta, scale=1 / hp.b_theta).sum()

    prec_mu = np.cumprod(state.delta_mu)
    t["mu"] = stats.norm.logpdf(state.mu, 0, prec_mu ** -0.5).sum()
    prec_alpha = np.cumprod(state.delta_alpha)[:, None] * state.zeta
    t["alpha"] = stats.norm.logpdf(state.alpha, 0, prec_alpha ** -0.5).sum()
    t["delta_mu"] = (stats.gamma.logpdf(state.delta_mu[0], state.a_mu1)
                     + stats.gamma.logpdf(state.delta_mu[1:], state.a_mu2).sum())
    t["delta_alpha"] = (stats.gamma.logpdf(state.delta_alpha[0], state.a_alpha1)
                        + stats.gamma.logpdf(state.delta_alpha[1:], state.a_alpha2).sum())
    t["zeta"] = stats.gamma.logpdf(state.zeta, state.nu / 2, scale=2 / state.nu).sum()
    t["nu"] = stats.uniform.logpdf(state.nu, hp.nu_lower, hp.nu_upper - hp.nu_lower)
    t["a"] = stats.gamma.logpdf([state.a_mu1, state.a_mu2, state.a_alpha1, state.a_alpha2],
                                hp.a_shape, scale=1 / hp.a_rate).sum()
    t["lag"] = np.log(1.0 / (hp.lag_max + 1))
    t["tau_x"] = stats.gamma.logpdf(1 / state.sigma2_x, hp.a_eps_x, scale=1 / hp.b_eps_x)
    t["tau_y"] = stats.gamma.logpdf(1 / state.sigma2_y, hp.a_eps_y, scale=1 / hp.b_eps_y)
    return {k: float(v) for k, v in t.items()}


def small_problem(seed=0, n=5, M=60, hp=None, truth="prior", schedule=None):
    """A compact dataset, its truth, bases and graph for sampler tests."""
    from lagfcr.spatial import knn_weights

    hp = (hp or model.Hyperparams(K=3, L=2, H=8, J=8, P=5, lag_max=6, a_eps_y=3.0, b_eps_y=0.01,
                                  a_eps_x=3.0, b_eps_x=0.5, a_theta=3.0, b_theta=0.5,
                                  jitter=0.05, lambda_half_upper=10.0)).resolve(M)
    sched = schedule or model.Schedule(x_every=3, y_every=1, y_terminal_missing=0.2)
    data, truth_state = model.simulate(hp, n, M, truth=truth, schedule=sched, seed=seed)
    bases = model.build_bases(data.grid, hp)
    graph = knn_weights(data.regions, k=2, resolution=0.02, jitter_rel=hp.jitter)
    return data, truth_state, hp, bases, graph
