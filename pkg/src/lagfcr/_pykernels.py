"""Pure-NumPy versions of the hot sampler kernels.

Signatures and results match ``_ckernels`` exactly up to floating-point
summation order; both consume pre-drawn standard normals so the random
stream is identical whichever backend runs.
"""
import numpy as np

BACKEND = "python"


def lag_sse(r0, gy, X, y_site, y_e, lag_max):
    """Sum of squared y residuals for every candidate lag 0..lag_max.

    ``r0`` is y minus the random effects, ``gy`` the coefficient curve at the
    y times, ``X`` the (n, E) latent curves on the extended grid.
    """
    if r0.size == 0:
        return np.zeros(lag_max + 1)
    s = np.arange(lag_max + 1)
    Xs = X[y_site[None, :], y_e[None, :] - s[:, None]]
    r = r0[None, :] - gy[None, :] * Xs
    return np.einsum("so,so->s", r, r)


def factor_update(Fx, Fy, x_site, y_site, rx, ry, mu, alpha, mu_prec, alpha_prec,
                  tau_x, tau_y, z_mu, z_alpha):
    """Sequential Gaussian updates of mu_k (all k) then alpha_k. (all k).

    ``Fx`` (Nx, K) are loading values at the x times; ``Fy`` (Ny, K) are
    loading values at the lagged y times multiplied by the coefficient curve.
    ``rx`` and ``ry`` hold the full residuals and are updated in place, as are
    ``mu`` and ``alpha``.
    """
    K, n = alpha.shape
    for k in range(K):
        fx, fy = Fx[:, k], Fy[:, k]
        rx += fx * mu[k]
        ry += fy * mu[k]
        prec = mu_prec[k] + tau_x * (fx @ fx) + tau_y * (fy @ fy)
        lin = tau_x * (fx @ rx) + tau_y * (fy @ ry)
        mu[k] = lin / prec + z_mu[k] / np.sqrt(prec)
        rx -= fx * mu[k]
        ry -= fy * mu[k]
    for k in range(K):
        fx, fy = Fx[:, k], Fy[:, k]
        a_x = alpha[k, x_site]
        a_y = alpha[k, y_site]
        rx += fx * a_x
        ry += fy * a_y
        prec = (alpha_prec[k] + tau_x * np.bincount(x_site, fx * fx, minlength=n)
                + tau_y * np.bincount(y_site, fy * fy, minlength=n))
        lin = (tau_x * np.bincount(x_site, fx * rx, minlength=n)
               + tau_y * np.bincount(y_site, fy * ry, minlength=n))
        alpha[k] = lin / prec + z_alpha[k] / np.sqrt(prec)
        rx -= fx * alpha[k, x_site]
        ry -= fy * alpha[k, y_site]
