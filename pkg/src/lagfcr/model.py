"""Generative model: data containers, parameters, joint density, simulator.

Observation model, for site i and day t on the common grid::

    y_i(t) = gamma(t) * X_i(t - lag) + theta_i(t) + eps_y
    x_i(t) = X_i(t) + eps_x
    X_i    = sum_k f_k * (mu_k + alpha_ki),   f_k = W psi_k
    theta_i = sum_l g_l * theta_li,           g_l = V phi_l
    gamma  = B gamma_coef

The wastewater side lives on the extended grid (``lag_max`` extra days on
the left) so that ``X_i(t - lag)`` is always an in-grid value.

Densities are written in terms of precisions for every variance component
(the parameterisation the sampler draws in), so ``log_joint`` and the full
conditionals agree up to a constant.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from lagfcr import basisgen
from lagfcr.basisgen import BasisSystem, Grid
from lagfcr.bundle import read_bundle, write_bundle
from lagfcr.errors import ConfigError, DimensionError, InputError
from lagfcr.spatial import Region, SpatialGraph, graph_from_adjacency, knn_adjacency, lattice_regions

LOG_2PI = math.log(2 * math.pi)
STATE_FORMAT = "lagfcr-state"
STATE_VERSION = 1


@dataclass(frozen=True)
class SiteSeries:
    """Observations of one variable at one site: grid positions and values."""

    index: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.index, dtype=np.int64).reshape(-1)
        val = np.asarray(self.values, dtype=float).reshape(-1)
        if idx.shape != val.shape:
            raise DimensionError("index and values differ in length")
        order = np.argsort(idx, kind="stable")
        object.__setattr__(self, "index", idx[order])
        object.__setattr__(self, "values", val[order])

    def __len__(self):
        return self.index.size

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0))


@dataclass
class Dataset:
    grid: Grid
    sites: list
    y_series: list
    x_series: list
    regions: list | None = None
    start_date: str | None = None

    def __post_init__(self):
        self.validate()

    @property
    def n(self):
        return len(self.sites)

    def validate(self):
        n, M = len(self.sites), len(self.grid)
        if len(self.y_series) != n or len(self.x_series) != n:
            raise InputError("site count differs between sites, y and x")
        if self.regions is not None:
            if [r.id for r in self.regions] != list(self.sites):
                raise InputError("regions do not match the site list")
        for sid, ys, xs in zip(self.sites, self.y_series, self.x_series):
            for name, s in (("y", ys), ("x", xs)):
                if len(s) and (s.index.min() < 0 or s.index.max() >= M):
                    raise InputError(f"site {sid}: {name} observation outside the grid")
                if len(np.unique(s.index)) != len(s):
                    raise InputError(f"site {sid}: duplicate {name} observation days")
                if not np.all(np.isfinite(s.values)):
                    raise InputError(f"site {sid}: non-finite {name} value")
            if len(ys) and (ys.values.min() < 0 or ys.values.max() > 1):
                raise InputError(f"site {sid}: positivity rate outside [0, 1]")
            if len(xs) == 0:
                raise InputError(f"site {sid}: no wastewater observations")


@dataclass(frozen=True)
class Hyperparams:
    K: int = 8
    L: int = 4
    P: int | None = None  # default ceil(M / 30), at least 4
    H: int = 20
    J: int | None = None  # default min(30, M)
    lag_max: int = 21
    a_eps_x: float = 1e-3
    b_eps_x: float = 1e-3
    a_eps_y: float = 1e-3
    b_eps_y: float = 1e-3
    a_theta: float = 0.01
    b_theta: float = 0.01
    jitter: float = 1e-6  # CAR propriety jitter, relative to mean(diag Q)
    lambda_half_upper: float = 1e4
    nu_lower: float = 2.0
    nu_upper: float = 128.0
    a_shape: float = 2.0  # Gamma hyperprior of the MGP shape parameters
    a_rate: float = 1.0
    penalty_ridge: float = 1e-3  # relative to smallest positive penalty eigenvalue
    slice_width: float = 1.0
    slice_max_steps: int = 100
    logit_y: bool = False

    def resolve(self, M: int) -> "Hyperparams":
        """Fill in grid-dependent defaults and validate."""
        hp = dataclasses.replace(
            self,
            P=self.P if self.P is not None else max(4, math.ceil(M / 30)),
            J=self.J if self.J is not None else min(30, M),
        )
        hp.validate()
        return hp

    def validate(self):
        for name in ("K", "L", "H"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", field=name)
        for name in ("P", "J"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError("must be >= 1", field=name)
        if self.lag_max < 0:
            raise ConfigError("must be >= 0", field="lag_max")
        for name in ("a_eps_x", "b_eps_x", "a_eps_y", "b_eps_y", "a_theta", "b_theta",
                     "a_shape", "a_rate", "lambda_half_upper", "slice_width"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", field=name)
        if self.jitter < 0 or self.penalty_ridge < 0:
            raise ConfigError("must be >= 0", field="jitter/penalty_ridge")
        if not 0 < self.nu_lower < self.nu_upper:
            raise ConfigError("need 0 < nu_lower < nu_upper", field="nu_lower")

    @property
    def lambda_lower(self) -> float:
        return self.lambda_half_upper ** -2.0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="model")
        return cls(**d)


@dataclass
class ModelState:
    lag: int
    gamma: np.ndarray  # (P,)
    theta: np.ndarray  # (L, n)
    phi: np.ndarray  # (J, L)
    mu: np.ndarray  # (K,)
    alpha: np.ndarray  # (K, n)
    psi: np.ndarray  # (H, K)
    sigma2_x: float
    sigma2_y: float
    sigma2_theta: np.ndarray  # (L,)
    lambda_gamma: float
    lambda_f: np.ndarray  # (K,)
    lambda_g: np.ndarray  # (L,)
    delta_mu: np.ndarray  # (K,)
    delta_alpha: np.ndarray  # (K,)
    zeta: np.ndarray  # (K, n)
    nu: float
    a_mu1: float
    a_mu2: float
    a_alpha1: float
    a_alpha2: float

    ARRAYS = ("gamma", "theta", "phi", "mu", "alpha", "psi", "sigma2_theta",
              "lambda_f", "lambda_g", "delta_mu", "delta_alpha", "zeta")
    SCALARS = ("sigma2_x", "sigma2_y", "lambda_gamma", "nu", "a_mu1", "a_mu2",
               "a_alpha1", "a_alpha2")

    @property
    def beta(self) -> np.ndarray:
        return self.mu[:, None] + self.alpha

    def mu_precision(self) -> np.ndarray:
        return np.cumprod(self.delta_mu)

    def alpha_precision(self) -> np.ndarray:
        """(K, n) prior precisions of alpha_ki."""
        return np.cumprod(self.delta_alpha)[:, None] * self.zeta

    def copy(self) -> "ModelState":
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for name in self.ARRAYS:
            kw[name] = np.array(kw[name], dtype=float, copy=True)
        return ModelState(**kw)

    def to_arrays(self) -> dict:
        out = {name: np.asarray(getattr(self, name), dtype=float) for name in self.ARRAYS}
        for name in self.SCALARS:
            out[name] = np.array(float(getattr(self, name)))
        out["lag"] = np.array(int(self.lag), dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ModelState":
        kw = {name: np.array(arrays[name], dtype=float) for name in cls.ARRAYS}
        for name in cls.SCALARS:
            kw[name] = float(arrays[name])
        kw["lag"] = int(arrays["lag"])
        return cls(**kw)

    def dims(self):
        return dict(K=self.mu.size, L=self.theta.shape[0], n=self.theta.shape[1],
                    P=self.gamma.size, H=self.psi.shape[0], J=self.phi.shape[0])

    def check_invariants(self, hp: Hyperparams, tol: float = 1e-8) -> list:
        """Return a list of violated invariants (empty when all hold)."""
        bad = []
        if not 0 <= self.lag <= hp.lag_max:
            bad.append(f"lag {self.lag} outside [0, {hp.lag_max}]")
        for name in ("sigma2_x", "sigma2_y", "lambda_gamma", "a_mu1", "a_mu2", "a_alpha1", "a_alpha2"):
            if not getattr(self, name) > 0:
                bad.append(f"{name} not positive")
        for name in ("sigma2_theta", "lambda_f", "lambda_g", "delta_mu", "delta_alpha", "zeta"):
            if not np.all(getattr(self, name) > 0):
                bad.append(f"{name} not positive")
        if not hp.nu_lower <= self.nu <= hp.nu_upper:
            bad.append(f"nu {self.nu} outside bounds")
        K, L = self.mu.size, self.theta.shape[0]
        if np.abs(self.psi.T @ self.psi - np.eye(K)).max() > tol:
            bad.append("F'F != I")
        if np.abs(self.phi.T @ self.phi - np.eye(L)).max() > tol:
            bad.append("G'G != I")
        for name in ModelState.ARRAYS:
            if not np.all(np.isfinite(getattr(self, name))):
                bad.append(f"{name} not finite")
        return bad


def save_state(path, state: ModelState, extra: dict | None = None):
    header = {"format": STATE_FORMAT, "version": STATE_VERSION, **(extra or {})}
    write_bundle(path, header, state.to_arrays())


def load_state(path):
    header, arrays = read_bundle(path, STATE_FORMAT, STATE_VERSION)
    return ModelState.from_arrays(arrays), header


# One home per symbol of the hierarchical model.
SYMBOL_HOMES = {
    "y_i": "Dataset.y_series",
    "x_i": "Dataset.x_series",
    "tau^y_i": "SiteSeries.index",
    "tau^x_i": "SiteSeries.index",
    "Delta": "ModelState.lag",
    "Delta_max": "Hyperparams.lag_max",
    "gamma_p": "ModelState.gamma",
    "lambda_gamma": "ModelState.lambda_gamma",
    "Omega_gamma": "Bases.gamma.penalty",
    "b_p": "Bases.gamma.eval",
    "theta_l,i": "ModelState.theta",
    "sigma2_theta_l": "ModelState.sigma2_theta",
    "Q": "SpatialGraph.Q",
    "D": "SpatialGraph.D",
    "phi_j,l": "ModelState.phi",
    "lambda_g_l": "ModelState.lambda_g",
    "Omega_phi": "Bases.theta.penalty",
    "v_j": "Bases.theta.eval",
    "mu_k": "ModelState.mu",
    "alpha_k,i": "ModelState.alpha",
    "psi_h,k": "ModelState.psi",
    "lambda_f_k": "ModelState.lambda_f",
    "Omega_psi": "Bases.x.penalty",
    "w_h": "Bases.x.eval",
    "sigma2_eps_x": "ModelState.sigma2_x",
    "sigma2_eps_y": "ModelState.sigma2_y",
    "a_eps_x": "Hyperparams.a_eps_x",
    "b_eps_x": "Hyperparams.b_eps_x",
    "a_eps_y": "Hyperparams.a_eps_y",
    "b_eps_y": "Hyperparams.b_eps_y",
    "delta_mu_k": "ModelState.delta_mu",
    "delta_alpha_k": "ModelState.delta_alpha",
    "sigma2_mu_k": "ModelState.mu_precision",
    "sigma2_alpha_k": "ModelState.alpha_precision",
    "zeta_alpha_k,i": "ModelState.zeta",
    "nu_alpha": "ModelState.nu",
    "a_mu1": "ModelState.a_mu1",
    "a_mu2": "ModelState.a_mu2",
    "a_alpha1": "ModelState.a_alpha1",
    "a_alpha2": "ModelState.a_alpha2",
    "lambda^{-1/2} upper bound": "Hyperparams.lambda_half_upper",
    "nu bounds": "Hyperparams.nu_lower",
}


# Bases ---------------------------------------------------------------------


@dataclass(frozen=True)
class Bases:
    gamma: BasisSystem  # B on the observation grid
    x: BasisSystem  # W on the extended grid
    theta: BasisSystem  # V on the observation grid
    omega_gamma: np.ndarray  # ridged prior penalties
    omega_psi: np.ndarray
    omega_phi: np.ndarray
    logdets: dict = field(default_factory=dict)


def build_bases(grid: Grid, hp: Hyperparams) -> Bases:
    hp = hp.resolve(len(grid)) if hp.P is None or hp.J is None else hp
    if grid.extension < hp.lag_max:
        raise DimensionError("grid extension shorter than lag_max")
    B = basisgen.build_bspline(grid, hp.P)
    W = basisgen.build_lrtps(grid.extended(), hp.H)
    V = basisgen.build_demmler_reinsch(grid, hp.J)
    om = {
        "gamma": basisgen.ridged_penalty(B.penalty, hp.penalty_ridge),
        "psi": basisgen.ridged_penalty(W.penalty, hp.penalty_ridge),
        "phi": basisgen.ridged_penalty(V.penalty, hp.penalty_ridge),
    }
    logdets = {k: float(np.linalg.slogdet(v)[1]) for k, v in om.items()}
    return Bases(B, W, V, om["gamma"], om["psi"], om["phi"], logdets)


def graph_logdet(graph: SpatialGraph) -> float:
    sign, val = np.linalg.slogdet(graph.precision)
    return float(val) if sign > 0 else -np.inf


# Flattened observations ------------------------------------------------------


def _logit(p):
    p = np.clip(p, 1e-4, 1 - 1e-4)
    return np.log(p) - np.log1p(-p)


@dataclass
class ObsLayout:
    """All observations flattened into site/time/value arrays."""

    n: int
    M: int
    D: int
    y_site: np.ndarray
    y_t: np.ndarray
    y_val: np.ndarray
    x_site: np.ndarray
    x_t: np.ndarray
    x_val: np.ndarray

    @property
    def E(self):
        return self.M + self.D

    @property
    def y_e(self):
        return self.y_t + self.D

    @property
    def x_e(self):
        return self.x_t + self.D

    @classmethod
    def from_dataset(cls, data: Dataset, hp: Hyperparams) -> "ObsLayout":
        def flat(series):
            site = np.concatenate([np.full(len(s), i, np.int64) for i, s in enumerate(series)] or [np.zeros(0, np.int64)])
            t = np.concatenate([s.index for s in series] or [np.zeros(0, np.int64)])
            v = np.concatenate([s.values for s in series] or [np.zeros(0)])
            return site, t, v

        ys, yt, yv = flat(data.y_series)
        xs, xt, xv = flat(data.x_series)
        if hp.logit_y:
            yv = _logit(yv)
        if data.grid.extension < hp.lag_max:
            raise DimensionError("grid extension shorter than lag_max")
        return cls(data.n, len(data.grid), data.grid.extension, ys, yt, yv.astype(float), xs, xt, xv.astype(float))


def as_layout(data, hp) -> ObsLayout:
    return data if isinstance(data, ObsLayout) else ObsLayout.from_dataset(data, hp)


# Derived curves ---------------------------------------------------------------


@dataclass
class DerivedCurves:
    X: np.ndarray  # (n, E) latent wastewater curves on the extended grid
    gamma_curve: np.ndarray  # (M,)
    theta_curves: np.ndarray  # (n, M)
    fitted_y: np.ndarray  # (n, M) noise-free mean of y
    mu_curve: np.ndarray  # (E,) population mean curve sum_k f_k mu_k


def latent_x(state: ModelState, bases: Bases) -> np.ndarray:
    F = bases.x.eval @ state.psi
    return (F @ state.beta).T


def derived_curves(state: ModelState, bases: Bases, extension: int) -> DerivedCurves:
    F = bases.x.eval @ state.psi
    X = (F @ state.beta).T
    gamma_curve = bases.gamma.eval @ state.gamma
    theta_curves = (bases.theta.eval @ state.phi @ state.theta).T
    M = gamma_curve.size
    lagged = X[:, extension - state.lag: extension - state.lag + M]
    fitted = gamma_curve[None, :] * lagged + theta_curves
    return DerivedCurves(X, gamma_curve, theta_curves, fitted, F @ state.mu)


def predict_y(state, data, bases, site: int, times, rng=None):
    """Noise-free mean of y at ``times`` (grid positions) for one site.

    With ``rng`` a posterior-predictive draw is returned alongside the mean.
    """
    grid = data.grid if isinstance(data, Dataset) else None
    D = grid.extension if grid is not None else data.D
    M = len(grid) if grid is not None else data.M
    t = np.asarray(times, dtype=np.int64)
    if t.size and (t.min() < 0 or t.max() >= M):
        raise IndexError("prediction time outside the grid")
    e = t + D - state.lag
    if e.size and e.min() < 0:
        raise IndexError("lagged time falls left of the extended grid")
    Wrows = bases.x.eval[e]
    Xl = Wrows @ state.psi @ state.beta[:, site]
    gam = bases.gamma.eval[t] @ state.gamma
    th = bases.theta.eval[t] @ state.phi @ state.theta[:, site]
    mean = gam * Xl + th
    if rng is None:
        return mean
    return mean, mean + rng.normal(0.0, math.sqrt(state.sigma2_y), size=mean.shape)


# Joint density ------------------------------------------------------------------


def _gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        return -np.inf
    return float(np.sum(shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x))


def _lambda_logprior(lam, hp: Hyperparams):
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam < hp.lambda_lower):
        return -np.inf
    return float(np.sum(-math.log(2 * hp.lambda_half_upper) - 1.5 * np.log(lam)))


def _penalised_normal(coef, lam, omega, logdet):
    """log N(coef; 0, (lam * omega)^-1) for coef of shape (d,) or (d, m)."""
    coef = np.asarray(coef, dtype=float)
    if coef.ndim == 1:
        coef = coef[:, None]
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (coef.shape[1],))
    d = coef.shape[0]
    quad = np.einsum("im,ij,jm->m", coef, omega, coef)
    return float(np.sum(0.5 * (d * np.log(lam) + logdet) - 0.5 * d * LOG_2PI - 0.5 * lam * quad))


def residuals(state: ModelState, layout: ObsLayout, bases: Bases):
    """y and x residuals at the observed points."""
    F = bases.x.eval @ state.psi
    X = (F @ state.beta).T
    gy = bases.gamma.eval[layout.y_t] @ state.gamma
    Gy = bases.theta.eval[layout.y_t] @ state.phi
    th = np.einsum("ol,lo->o", Gy, state.theta[:, layout.y_site]) if layout.y_t.size else np.zeros(0)
    ry = layout.y_val - gy * X[layout.y_site, layout.y_e - state.lag] - th
    rx = layout.x_val - X[layout.x_site, layout.x_e]
    return ry, rx


def log_joint_terms(state: ModelState, data, hp: Hyperparams, bases: Bases, graph: SpatialGraph) -> dict:
    """Every term of log p(y, x, parameters), keyed by name.

    All normalising constants are included, so the sum is the exact joint
    log-density with respect to Lebesgue measure on (lag-conditional)
    parameters expressed as precisions.
    """
    layout = as_layout(data, hp)
    dims = state.dims()
    K, L, n = dims["K"], dims["L"], dims["n"]
    if n != layout.n or n != graph.n:
        raise DimensionError("site count differs between state, data and graph")
    if dims["P"] != bases.gamma.rank or dims["H"] != bases.x.rank or dims["J"] != bases.theta.rank:
        raise DimensionError("state coefficient sizes do not match the bases")
    if state.sigma2_x <= 0 or state.sigma2_y <= 0 or np.any(state.sigma2_theta <= 0):
        raise ValueError("variances must be positive")

    ry, rx = residuals(state, layout, bases)
    ny, nx = ry.size, rx.size
    t = {}
    t["lik_y"] = -0.5 * ny * (LOG_2PI + math.log(state.sigma2_y)) - 0.5 * float(ry @ ry) / state.sigma2_y
    t["lik_x"] = -0.5 * nx * (LOG_2PI + math.log(state.sigma2_x)) - 0.5 * float(rx @ rx) / state.sigma2_x

    ld = bases.logdets
    t["gamma"] = _penalised_normal(state.gamma, state.lambda_gamma, bases.omega_gamma, ld["gamma"])
    t["psi"] = _penalised_normal(state.psi, state.lambda_f, bases.omega_psi, ld["psi"])
    t["phi"] = _penalised_normal(state.phi, state.lambda_g, bases.omega_phi, ld["phi"])
    t["lambda"] = (_lambda_logprior(state.lambda_gamma, hp) + _lambda_logprior(state.lambda_f, hp)
                   + _lambda_logprior(state.lambda_g, hp))

    prec_theta = 1.0 / state.sigma2_theta
    P = graph.precision
    quad = np.einsum("li,ij,lj->l", state.theta, P, state.theta)
    t["theta"] = float(np.sum(0.5 * (n * np.log(prec_theta) + graph_logdet(graph))
                              - 0.5 * n * LOG_2PI - 0.5 * prec_theta * quad))
    t["tau_theta"] = _gamma_logpdf(prec_theta, hp.a_theta, hp.b_theta)

    pm = state.mu_precision()
    t["mu"] = float(np.sum(0.5 * np.log(pm) - 0.5 * LOG_2PI - 0.5 * pm * state.mu ** 2))
    pa = state.alpha_precision()
    t["alpha"] = float(np.sum(0.5 * np.log(pa) - 0.5 * LOG_2PI - 0.5 * pa * state.alpha ** 2))
    t["delta_mu"] = (_gamma_logpdf(state.delta_mu[:1], state.a_mu1, 1.0)
                     + _gamma_logpdf(state.delta_mu[1:], state.a_mu2, 1.0))
    t["delta_alpha"] = (_gamma_logpdf(state.delta_alpha[:1], state.a_alpha1, 1.0)
                        + _gamma_logpdf(state.delta_alpha[1:], state.a_alpha2, 1.0))
    t["zeta"] = _gamma_logpdf(state.zeta, 0.5 * state.nu, 0.5 * state.nu)
    t["nu"] = (-math.log(hp.nu_upper - hp.nu_lower)
               if hp.nu_lower <= state.nu <= hp.nu_upper else -np.inf)
    t["a"] = _gamma_logpdf(
        [state.a_mu1, state.a_mu2, state.a_alpha1, state.a_alpha2], hp.a_shape, hp.a_rate
    )
    t["lag"] = -math.log(hp.lag_max + 1) if 0 <= state.lag <= hp.lag_max else -np.inf
    t["tau_x"] = _gamma_logpdf(1.0 / state.sigma2_x, hp.a_eps_x, hp.b_eps_x)
    t["tau_y"] = _gamma_logpdf(1.0 / state.sigma2_y, hp.a_eps_y, hp.b_eps_y)
    return t


def log_joint(state, data, hp, bases, graph) -> float:
    return float(sum(log_joint_terms(state, data, hp, bases, graph).values()))


# Simulation -------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Observation pattern for simulated data."""

    x_every: int = 7
    y_every: int = 1
    y_terminal_missing: float = 0.3
    withhold_y_sites: tuple = ()

    @classmethod
    def full(cls):
        return cls(x_every=1, y_every=1, y_terminal_missing=0.0)

    def y_cutoffs(self, n: int, M: int, rng) -> np.ndarray:
        """Per-site first unobserved day: terminal blocks spread evenly so the
        average missing fraction equals ``y_terminal_missing``."""
        if n == 1:
            frac = np.array([self.y_terminal_missing])
        else:
            frac = 2.0 * self.y_terminal_missing * np.arange(n) / (n - 1)
        frac = np.minimum(frac, 1.0)[rng.permutation(n)]
        return np.round(M * (1.0 - frac)).astype(np.int64)


@dataclass(frozen=True)
class Scenario:
    """Knobs of the designed ground truth (multi-wave epidemic curves)."""

    lag: int = 8
    sigma_y: float = 0.02
    sigma_x: float = 0.25
    level_range: tuple = (3.0, 7.0)
    wave_centers: tuple = (0.2, 0.5, 0.8)  # fractions of the grid
    wave_amplitudes: tuple = (2.0, 3.0, 2.5)
    wave_width: float = 0.05  # sd of each wave, fraction of the grid
    amp_spread: float = 0.4
    shift_sd: float = 4.0  # days
    gamma_mean: float = 0.04
    gamma_amp: float = 0.015
    gamma_cycles: float = 1.5
    theta_scale: float = 0.01


def _complete_orthonormal(Q, k):
    """Extend orthonormal columns Q (d, r) to (d, k) deterministically."""
    d, r = Q.shape
    if r >= k:
        return Q[:, :k]
    extra = np.eye(d)
    full, _ = np.linalg.qr(np.column_stack([Q, extra]))
    out = full[:, :k].copy()
    out[:, :r] = Q
    # re-orthogonalise the appended columns against Q
    for j in range(r, k):
        v = out[:, j] - out[:, :j] @ (out[:, :j].T @ out[:, j])
        out[:, j] = v / np.linalg.norm(v)
    return out


def factorize_curves(curves: np.ndarray, W: np.ndarray, K: int):
    """Project site curves (n, E) onto span(W) and factor them into an
    orthonormal Psi (H, K) and scores beta (K, n)."""
    C = W.T @ curves.T
    U, s, _ = np.linalg.svd(C, full_matrices=False)
    r = min(K, int(np.sum(s > 1e-12 * max(s[0], 1e-300))))
    U = U[:, :r] * np.where(U[:, :r].sum(axis=0) < 0, -1.0, 1.0)
    psi = _complete_orthonormal(U, K)
    return psi, psi.T @ C


def site_centroids(regions):
    c = np.array([r.geometry.centroid.coords[0] for r in regions])
    span = np.ptp(c, axis=0)
    span[span == 0] = 1.0
    return 2 * (c - c.min(axis=0)) / span - 1


def scenario_state(hp: Hyperparams, bases: Bases, grid: Grid, regions, scenario: Scenario, rng) -> ModelState:
    n, M, D = len(regions), len(grid), grid.extension
    K, L = hp.K, hp.L
    u = np.arange(-D, M, dtype=float)
    levels = rng.uniform(*scenario.level_range, size=n)
    nw = len(scenario.wave_centers)
    mult = rng.uniform(1 - scenario.amp_spread, 1 + scenario.amp_spread, size=(n, nw))
    shift = rng.normal(0.0, scenario.shift_sd, size=n)
    width = scenario.wave_width * M
    curves = np.tile(levels[:, None], (1, u.size))
    for w, (c, a) in enumerate(zip(scenario.wave_centers, scenario.wave_amplitudes)):
        curves += a * mult[:, w, None] * np.exp(-0.5 * ((u[None, :] - c * M - shift[:, None]) / width) ** 2)

    psi, beta = factorize_curves(curves, bases.x.eval, K)
    mu = beta.mean(axis=1)
    alpha = beta - mu[:, None]

    t = np.arange(M, dtype=float)
    target = scenario.gamma_mean + scenario.gamma_amp * np.sin(2 * np.pi * scenario.gamma_cycles * t / M + 0.3)
    gamma = np.linalg.lstsq(bases.gamma.eval, target, rcond=None)[0]

    # smooth non-constant Demmler-Reinsch directions
    J = bases.theta.rank
    cols = np.arange(1, L + 1) if L < J else np.arange(L)
    phi = np.eye(J)[:, cols]
    cen = site_centroids(regions)
    coefs = rng.normal(size=(L, 2))
    theta = scenario.theta_scale * math.sqrt(M) * (coefs @ cen.T) / math.sqrt(2.0)
    sigma2_theta = np.maximum(np.mean(theta ** 2, axis=1), 1e-8)

    def smooth_lambda(coef, omega):
        q = np.einsum("im,ij,jm->m", np.atleast_2d(coef.T).T, omega, np.atleast_2d(coef.T).T)
        return np.maximum((coef.shape[0] - 1) / np.maximum(q, 1e-300), hp.lambda_lower)

    return ModelState(
        lag=int(scenario.lag),
        gamma=gamma,
        theta=theta,
        phi=phi,
        mu=mu,
        alpha=alpha,
        psi=psi,
        sigma2_x=scenario.sigma_x ** 2,
        sigma2_y=scenario.sigma_y ** 2,
        sigma2_theta=sigma2_theta,
        lambda_gamma=float(smooth_lambda(gamma[:, None], bases.omega_gamma)[0]),
        lambda_f=smooth_lambda(psi, bases.omega_psi),
        lambda_g=smooth_lambda(phi, bases.omega_phi),
        delta_mu=np.ones(K),
        delta_alpha=np.ones(K),
        zeta=np.ones((K, n)),
        nu=10.0,
        a_mu1=2.0,
        a_mu2=2.0,
        a_alpha1=2.0,
        a_alpha2=2.0,
    )


def sample_prior_state(hp: Hyperparams, bases: Bases, graph: SpatialGraph, rng,
                       base: ModelState | None = None, fixed=frozenset()) -> ModelState:
    """Forward draw of every parameter from the prior.

    Names in ``fixed`` are copied from ``base`` instead of being drawn. The
    loading coefficients have no proper prior under the orthonormality
    constraint; when drawn, prior Gaussian columns are orthonormalised in
    order.
    """
    K, L, n = hp.K, hp.L, graph.n
    P, H, J = bases.gamma.rank, bases.x.rank, bases.theta.rank
    fixed = frozenset(fixed)

    def pick(name, draw):
        if name in fixed:
            return getattr(base, name)
        return draw()

    def inv_precision(shape, rate, size=None):
        # vague Gamma priors can underflow to an exact zero
        return 1.0 / np.maximum(rng.gamma(shape, 1 / rate, size=size), np.finfo(float).tiny)

    def lam(size=None):
        s = rng.uniform(0.0, hp.lambda_half_upper, size=size)
        return s ** -2.0

    def mvn_prec(prec, size=None):
        Lc = np.linalg.cholesky(prec)
        z = rng.normal(size=(prec.shape[0],) if size is None else (prec.shape[0], size))
        from scipy.linalg import solve_triangular

        return solve_triangular(Lc.T, z, lower=False)

    a_mu1 = pick("a_mu1", lambda: rng.gamma(hp.a_shape, 1 / hp.a_rate))
    a_mu2 = pick("a_mu2", lambda: rng.gamma(hp.a_shape, 1 / hp.a_rate))
    a_alpha1 = pick("a_alpha1", lambda: rng.gamma(hp.a_shape, 1 / hp.a_rate))
    a_alpha2 = pick("a_alpha2", lambda: rng.gamma(hp.a_shape, 1 / hp.a_rate))
    nu = pick("nu", lambda: rng.uniform(hp.nu_lower, hp.nu_upper))
    delta_mu = pick("delta_mu", lambda: np.r_[rng.gamma(a_mu1, 1.0, 1), rng.gamma(a_mu2, 1.0, K - 1)])
    delta_alpha = pick("delta_alpha", lambda: np.r_[rng.gamma(a_alpha1, 1.0, 1), rng.gamma(a_alpha2, 1.0, K - 1)])
    zeta = pick("zeta", lambda: rng.gamma(nu / 2, 2 / nu, size=(K, n)))
    mu = pick("mu", lambda: rng.normal(size=K) / np.sqrt(np.cumprod(delta_mu)))
    alpha = pick("alpha", lambda: rng.normal(size=(K, n)) / np.sqrt(np.cumprod(delta_alpha)[:, None] * zeta))
    lambda_gamma = pick("lambda_gamma", lambda: float(lam()))
    gamma = pick("gamma", lambda: mvn_prec(lambda_gamma * bases.omega_gamma))
    lambda_f = pick("lambda_f", lambda: lam(K))
    lambda_g = pick("lambda_g", lambda: lam(L))

    def constrained_columns(omega, lams, d, m):
        cols = np.zeros((d, m))
        for k in range(m):
            v = mvn_prec(lams[k] * omega)
            if k:
                v = v - cols[:, :k] @ (cols[:, :k].T @ v)
            cols[:, k] = v / np.linalg.norm(v)
        return cols

    psi = pick("psi", lambda: constrained_columns(bases.omega_psi, lambda_f, H, K))
    phi = pick("phi", lambda: constrained_columns(bases.omega_phi, lambda_g, J, L))
    sigma2_theta = pick("sigma2_theta", lambda: inv_precision(hp.a_theta, hp.b_theta, L))
    theta = pick("theta", lambda: (mvn_prec(graph.precision, L) * np.sqrt(sigma2_theta)).T)
    sigma2_x = pick("sigma2_x", lambda: inv_precision(hp.a_eps_x, hp.b_eps_x))
    sigma2_y = pick("sigma2_y", lambda: inv_precision(hp.a_eps_y, hp.b_eps_y))
    lag = pick("lag", lambda: int(rng.integers(0, hp.lag_max + 1)))
    return ModelState(
        lag=int(lag), gamma=np.asarray(gamma, float), theta=np.asarray(theta, float), phi=phi, mu=mu,
        alpha=alpha, psi=psi, sigma2_x=float(sigma2_x), sigma2_y=float(sigma2_y),
        sigma2_theta=np.asarray(sigma2_theta, float), lambda_gamma=float(lambda_gamma),
        lambda_f=np.asarray(lambda_f, float), lambda_g=np.asarray(lambda_g, float),
        delta_mu=np.asarray(delta_mu, float), delta_alpha=np.asarray(delta_alpha, float),
        zeta=np.asarray(zeta, float), nu=float(nu), a_mu1=float(a_mu1), a_mu2=float(a_mu2),
        a_alpha1=float(a_alpha1), a_alpha2=float(a_alpha2),
    )


def simulate_observations(state: ModelState, layout: ObsLayout, bases: Bases, rng, clip_y=False):
    """Fresh y and x values at the layout's observation points."""
    ry0, rx0 = residuals(state, layout, bases)
    mean_y = layout.y_val - ry0
    mean_x = layout.x_val - rx0
    y = mean_y + rng.normal(size=mean_y.shape) * math.sqrt(state.sigma2_y)
    x = mean_x + rng.normal(size=mean_x.shape) * math.sqrt(state.sigma2_x)
    if clip_y:
        y = np.clip(y, 0.0, 1.0)
    return y, x


def simulate(hp: Hyperparams, n: int, M: int, truth=None, schedule: Schedule | None = None,
             seed: int = 0, k_neighbors: int = 10):
    """Synthetic sewershed data with known ground truth.

    ``truth`` may be a :class:`ModelState` (used as given), a
    :class:`Scenario` (designed multi-wave curves; the default) or the string
    ``"prior"`` (a forward draw from the prior). Returns ``(Dataset, truth)``.
    Noisy y values are clipped to [0, 1].
    """
    if n < 2:
        raise ValueError("need at least 2 sites")
    if M < 2 * hp.lag_max:
        raise ValueError(f"M={M} is too short for lag_max={hp.lag_max}")
    hp = hp.resolve(M)
    schedule = schedule or Schedule()
    rng = np.random.default_rng(seed)
    grid = Grid.regular(M, hp.lag_max)
    sites = [f"S{i + 1:02d}" for i in range(n)]
    regions = lattice_regions(sites)
    bases = build_bases(grid, hp)

    if isinstance(truth, ModelState):
        state = truth.copy()
    elif truth == "prior":
        cen = site_centroids(regions)
        dist = np.hypot(*(cen[:, None, :] - cen[None, :, :]).transpose(2, 0, 1))
        graph = graph_from_adjacency(knn_adjacency(dist, min(k_neighbors, n - 1)), hp.jitter)
        state = sample_prior_state(hp, bases, graph, rng)
    else:
        state = scenario_state(hp, bases, grid, regions, truth or Scenario(), rng)

    if not 0 <= state.lag <= hp.lag_max:
        raise ValueError(f"true lag {state.lag} outside [0, {hp.lag_max}]")
    curves = derived_curves(state, bases, grid.extension)
    cutoffs = schedule.y_cutoffs(n, M, rng)
    y_series, x_series = [], []
    t_all = np.arange(M)
    for i in range(n):
        tx = t_all[:: schedule.x_every]
        xv = curves.X[i, tx + grid.extension] + rng.normal(size=tx.size) * math.sqrt(state.sigma2_x)
        ty = t_all[:: schedule.y_every]
        ty = ty[ty < cutoffs[i]]
        yn = rng.normal(size=ty.size) * math.sqrt(state.sigma2_y)
        if sites[i] in schedule.withhold_y_sites or i in schedule.withhold_y_sites:
            ty, yn = ty[:0], yn[:0]
        yv = np.clip(curves.fitted_y[i, ty] + yn, 0.0, 1.0)
        y_series.append(SiteSeries(ty, yv))
        x_series.append(SiteSeries(tx, xv))
    data = Dataset(grid, sites, y_series, x_series, regions, start_date="2020-08-03")
    return data, state
