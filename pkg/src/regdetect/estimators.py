"""Conditional distribution estimators for Y|X=x and D|X=x.

All estimators share one contract: ``cdf(v, X)``, ``quantile(tau, X)``,
``quantiles(taus, X)`` and ``sample(X, n, seed)`` in the units of the data
they were fitted on.  Inputs and targets are standardized internally.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .data import Dataset
from .discrepancy import discrepancy
from .nn import (
    DenseNet,
    LossSpec,
    _derived_seed,
    config_grid,
    cross_validate,
    gaussian_params,
    mixture_params,
    train_network,
)

EST_VERSION = "regdetect-est-v1"
DOMAINS = ("real", "nonnegative")
_CHUNK_ROWS = 32768


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    hidden: tuple = (64,)
    epochs: int = 150
    batch_size: int = 64
    lr_grid: tuple = (1e-2, 1e-3, 1e-4)
    wd_grid: tuple = (0.0,)
    folds: int = 5
    ensemble_size: int = 4
    n_modes: int = 16
    tau_grid_size: int = 513

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in ((k, getattr(self, k)) for k in self.__dataclass_fields__)}

    @classmethod
    def from_dict(cls, d):
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**d)


DEFAULT_CONFIGS = {
    "cg": EstimatorConfig(hidden=(64,), epochs=150, wd_grid=(0.0,)),
    "sqr": EstimatorConfig(hidden=(64, 64, 64), epochs=500, wd_grid=(0.0, 0.025)),
    "mix": EstimatorConfig(hidden=(64, 64), epochs=500, wd_grid=(0.0, 0.025)),
}


def default_config(kind: str, **overrides) -> EstimatorConfig:
    return replace(DEFAULT_CONFIGS[kind], **overrides)


def _fit_feature_scaling(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _fit_target_scaling(y, domain):
    std = float(y.std(ddof=1)) if y.size > 1 else 1.0
    if not std > 0:
        std = 1.0
    loc = 0.0 if domain == "nonnegative" else float(y.mean())
    return loc, std


class ConditionalEstimator:
    """Base class; subclasses work in standardized units."""

    kind = "base"

    def __init__(self, x_mean, x_std, y_loc, y_scale, domain="real"):
        if domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        self.x_mean = np.asarray(x_mean, dtype=np.float64)
        self.x_std = np.asarray(x_std, dtype=np.float64)
        self.y_loc = float(y_loc)
        self.y_scale = float(y_scale)
        self.domain = domain

    def _zx(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None] if self.x_mean.size == 1 else X[None, :]
        return (X - self.x_mean) / self.x_std

    def _zy(self, v):
        return (np.asarray(v, dtype=np.float64) - self.y_loc) / self.y_scale

    def _uy(self, z):
        return self.y_loc + self.y_scale * np.asarray(z)

    def cdf(self, v, X) -> np.ndarray:
        """P(target <= v | x) per row; ``v`` is a scalar or one value per row."""
        Z = self._zx(X)
        zv = np.broadcast_to(self._zy(v), (Z.shape[0],))
        return self._cdf_std(zv, Z)

    def quantiles(self, taus, X) -> np.ndarray:
        """``(n, k)`` matrix of quantiles at levels ``taus`` for every row."""
        taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
        if np.any((taus <= 0) | (taus >= 1)):
            raise ValueError("quantile levels must lie in the open interval (0, 1)")
        return self._uy(self._quantiles_std(taus, self._zx(X)))

    def quantile(self, tau, X) -> np.ndarray:
        tau = np.asarray(tau, dtype=np.float64)
        if tau.ndim == 0:
            return self.quantiles([float(tau)], X)[:, 0]
        Z = self._zx(X)
        if np.any((tau <= 0) | (tau >= 1)):
            raise ValueError("quantile levels must lie in the open interval (0, 1)")
        out = np.empty(Z.shape[0])
        for i in range(Z.shape[0]):
            out[i] = self._quantiles_std(tau[i:i + 1], Z[i:i + 1])[0, 0]
        return self._uy(out)

    def prepare(self, X) -> "RowSampler":
        raise NotImplementedError

    def sample(self, X, n: int, seed: int) -> np.ndarray:
        """``(n_rows, n)`` draws; row ``i`` uses the stream seeded by ``(seed, i)``."""
        sampler = self.prepare(X)
        return np.stack([
            sampler.draw(i, n, np.random.default_rng([seed, i])) for i in range(sampler.n_rows)
        ]) if sampler.n_rows else np.empty((0, n))

    def _meta(self):
        return {
            "version": EST_VERSION,
            "kind": self.kind,
            "domain": self.domain,
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_loc": self.y_loc,
            "y_scale": self.y_scale,
        }


class RowSampler:
    """Per-row sampling state for a fixed batch of inputs."""

    n_rows = 0

    def draw(self, i: int, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


# -- Gaussian-mixture family (CG ensembles, mixture nets, analytic Gaussians) --

class _MixtureSampler(RowSampler):
    def __init__(self, w, mu, sd, est):
        self.cw = np.cumsum(w, axis=1)
        self.cw[:, -1] = 1.0
        self.mu, self.sd, self.est = mu, sd, est
        self.n_rows = mu.shape[0]

    def draw(self, i, n, rng):
        if self.mu.shape[1] == 1:
            k = np.zeros(n, dtype=np.intp)
        else:
            k = np.searchsorted(self.cw[i], rng.random(n), side="right")
            k = np.minimum(k, self.mu.shape[1] - 1)
        z = self.mu[i, k] + self.sd[i, k] * rng.standard_normal(n)
        return self.est._uy(z)


class GaussianFamilyEstimator(ConditionalEstimator):
    """Estimators whose conditional law is a finite Gaussian mixture."""

    def mixture(self, Z):
        """Return ``(weights, means, stds)``, each ``(n, M)``, standardized units."""
        raise NotImplementedError

    def _cdf_std(self, zv, Z):
        w, mu, sd = self.mixture(Z)
        return np.sum(w * ndtr((zv[:, None] - mu) / sd), axis=1)

    def _quantiles_std(self, taus, Z, iters=100):
        w, mu, sd = self.mixture(Z)
        if mu.shape[1] == 1:
            return mu + sd * ndtri(taus)[None, :]
        n, k = Z.shape[0], taus.size
        lo = np.repeat(np.min(mu - 40 * sd, axis=1)[:, None], k, axis=1)
        hi = np.repeat(np.max(mu + 40 * sd, axis=1)[:, None], k, axis=1)
        target = np.broadcast_to(taus, (n, k))

        def F(q):
            return np.sum(w[:, None, :] * ndtr((q[:, :, None] - mu[:, None, :]) / sd[:, None, :]), axis=2)

        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = F(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        q = 0.5 * (lo + hi)
        resid = np.abs(F(q) - target)
        worst = float(resid.max()) if resid.size else 0.0
        if worst > 1e-6:
            raise EstimatorError(f"quantile bisection did not converge after {iters} iterations (residual {worst:.3g})")
        return q

    def prepare(self, X):
        w, mu, sd = self.mixture(self._zx(X))
        return _MixtureSampler(w, mu, sd, self)


class AnalyticGaussianEstimator(GaussianFamilyEstimator):
    """N(mean(X), std(X)^2) with user-supplied functions; no fitting."""

    kind = "analytic"

    def __init__(self, mean_fn: Callable, std_fn: Callable, domain="real"):
        super().__init__(np.zeros(1), np.ones(1), 0.0, 1.0, domain)
        self.mean_fn = mean_fn
        self.std_fn = std_fn

    def _zx(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X[:, None] if X.ndim == 1 else X

    def mixture(self, Z):
        mu = np.asarray(self.mean_fn(Z), dtype=np.float64).reshape(-1, 1)
        sd = np.broadcast_to(np.asarray(self.std_fn(Z), dtype=np.float64).reshape(-1, 1), mu.shape)
        if not np.all(sd > 0):
            raise EstimatorError("analytic std must be positive")
        return np.ones_like(mu), mu, np.array(sd)

    def to_dict(self):
        raise TypeError("analytic estimators are not serializable")


def _chunked_forward(net, Z):
    if Z.shape[0] <= _CHUNK_ROWS:
        return net.forward(Z)
    return np.vstack([net.forward(Z[i:i + _CHUNK_ROWS]) for i in range(0, Z.shape[0], _CHUNK_ROWS)])


class CondGaussianEstimator(GaussianFamilyEstimator):
    """Equal-weight ensemble of heteroscedastic Gaussian networks."""

    kind = "cg"

    def __init__(self, members, x_mean, x_std, y_loc, y_scale, domain="real"):
        super().__init__(x_mean, x_std, y_loc, y_scale, domain)
        if not members:
            raise ValueError("need at least one ensemble member")
        self.members = list(members)

    @property
    def ensemble_size(self):
        return len(self.members)

    def member_params(self, Z):
        return [gaussian_params(_chunked_forward(m, Z)) for m in self.members]

    def mixture(self, Z):
        params = self.member_params(Z)
        mu = np.stack([p[0] for p in params], axis=1)
        sd = np.stack([p[1] for p in params], axis=1)
        return np.full_like(mu, 1.0 / len(params)), mu, sd

    def to_dict(self):
        d = self._meta()
        d["nets"] = [m.to_dict() for m in self.members]
        return d


class MixtureEstimator(GaussianFamilyEstimator):
    """One trunk, three heads: mixture logits, means and stds."""

    kind = "mix"

    def __init__(self, net, n_modes, x_mean, x_std, y_loc, y_scale, domain="real"):
        super().__init__(x_mean, x_std, y_loc, y_scale, domain)
        self.net = net
        self.n_modes = int(n_modes)

    def mixture(self, Z):
        logw, mu, sd = mixture_params(_chunked_forward(self.net, Z), self.n_modes,
                                      self.domain == "nonnegative")
        return np.exp(logw), mu, sd

    def weights(self, X):
        return self.mixture(self._zx(X))[0]

    def to_dict(self):
        d = self._meta()
        d["nets"] = [self.net.to_dict()]
        d["n_modes"] = self.n_modes
        return d


# -- simultaneous quantile regression -----------------------------------------

class _GridSampler(RowSampler):
    def __init__(self, q, taus, est):
        self.q, self.taus, self.est = q, taus, est
        self.n_rows = q.shape[0]

    def draw(self, i, n, rng):
        return self.est._uy(np.interp(rng.random(n), self.taus, self.q[i]))


class SQREstimator(ConditionalEstimator):
    """Quantile network ``q(x, tau)``.

    The curve is evaluated on a uniform tau grid including 0 and 1 and
    sorted per row (monotone rearrangement); quantiles interpolate it
    linearly and the cdf is its exact piecewise-linear inverse.
    """

    kind = "sqr"

    def __init__(self, net, x_mean, x_std, y_loc, y_scale, domain="real", tau_grid_size=513):
        super().__init__(x_mean, x_std, y_loc, y_scale, domain)
        self.net = net
        self.tau_grid = np.linspace(0.0, 1.0, int(tau_grid_size))

    def raw_quantiles(self, taus, X):
        """Network output before rearrangement, ``(n, k)``, data units."""
        Z = self._zx(X)
        taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
        inp = np.hstack([np.repeat(Z, taus.size, axis=0), np.tile(taus, Z.shape[0])[:, None]])
        return self._uy(_chunked_forward(self.net, inp)[:, 0].reshape(Z.shape[0], taus.size))

    def curve(self, Z):
        """Monotonized quantile curve on ``tau_grid``, standardized units."""
        g = self.tau_grid
        inp = np.hstack([np.repeat(Z, g.size, axis=0), np.tile(g, Z.shape[0])[:, None]])
        q = _chunked_forward(self.net, inp)[:, 0].reshape(Z.shape[0], g.size)
        return np.sort(q, axis=1)

    def _quantiles_std(self, taus, Z):
        q = self.curve(Z)
        step = taus * (self.tau_grid.size - 1)
        j = np.minimum(np.floor(step).astype(np.intp), self.tau_grid.size - 2)
        frac = step - j
        return q[:, j] * (1.0 - frac) + q[:, j + 1] * frac

    def _cdf_std(self, zv, Z):
        q = self.curve(Z)
        g = self.tau_grid
        k = np.sum(q <= zv[:, None], axis=1)
        out = np.empty(Z.shape[0])
        out[k == 0] = 0.0
        out[k == g.size] = 1.0
        mid = np.flatnonzero((k > 0) & (k < g.size))
        if mid.size:
            r = mid
            kk = k[mid]
            q0, q1 = q[r, kk - 1], q[r, kk]
            out[mid] = g[kk - 1] + (zv[mid] - q0) / (q1 - q0) * (g[kk] - g[kk - 1])
        return out

    def prepare(self, X):
        return _GridSampler(self.curve(self._zx(X)), self.tau_grid, self)

    def to_dict(self):
        d = self._meta()
        d["nets"] = [self.net.to_dict()]
        d["tau_grid_size"] = int(self.tau_grid.size)
        return d


# -- fitting ------------------------------------------------------------------

def _prepare_fit(train: Dataset, domain):
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}")
    X, y = train.features, train.targets
    xm, xs = _fit_feature_scaling(X)
    loc, scale = _fit_target_scaling(y, domain)
    return xm, xs, loc, scale, (X - xm) / xs, (y - loc) / scale


def _train_with_cv(Z, y, loss, dims, act, cfg: EstimatorConfig, seed, stream):
    grid = config_grid(cfg.lr_grid, cfg.wd_grid, epochs=cfg.epochs, batch_size=cfg.batch_size)
    build = lambda s: DenseNet.init(dims, act, s)  # noqa: E731
    folds = min(cfg.folds, Z.shape[0])
    best, _ = cross_validate(Z, y, loss, grid, folds, build, _derived_seed(seed, stream))
    return best, build


def fit_cond_gaussian(train: Dataset, cfg: Optional[EstimatorConfig] = None, seed: int = 0,
                      domain: str = "real") -> CondGaussianEstimator:
    """Gaussian-NLL ensemble; the learning rate is cross-validated once and
    shared by all members."""
    cfg = cfg or DEFAULT_CONFIGS["cg"]
    xm, xs, loc, scale, Z, y = _prepare_fit(train, domain)
    dims = (Z.shape[1],) + tuple(cfg.hidden) + (2,)
    loss = LossSpec("gaussian_nll")
    best, build = _train_with_cv(Z, y, loss, dims, "identity", cfg, seed, 1)
    members = []
    for e in range(cfg.ensemble_size):
        s = _derived_seed(seed, 2, e)
        members.append(train_network(build(s), Z, y, loss, replace(best, seed=s)))
    return CondGaussianEstimator(members, xm, xs, loc, scale, domain)


def fit_sqr(train: Dataset, cfg: Optional[EstimatorConfig] = None, seed: int = 0,
            domain: str = "real") -> SQREstimator:
    """Pinball loss at a fresh uniform level per example and step."""
    cfg = cfg or DEFAULT_CONFIGS["sqr"]
    xm, xs, loc, scale, Z, y = _prepare_fit(train, domain)
    dims = (Z.shape[1] + 1,) + tuple(cfg.hidden) + (1,)
    act = "softplus" if domain == "nonnegative" else "identity"
    loss = LossSpec("pinball", tau="uniform")
    best, build = _train_with_cv(Z, y, loss, dims, act, cfg, seed, 3)
    s = _derived_seed(seed, 4)
    net = train_network(build(s), Z, y, loss, replace(best, seed=s))
    return SQREstimator(net, xm, xs, loc, scale, domain, cfg.tau_grid_size)


def fit_mixture(train: Dataset, cfg: Optional[EstimatorConfig] = None, seed: int = 0,
                domain: str = "real") -> MixtureEstimator:
    cfg = cfg or DEFAULT_CONFIGS["mix"]
    xm, xs, loc, scale, Z, y = _prepare_fit(train, domain)
    M = cfg.n_modes
    dims = (Z.shape[1],) + tuple(cfg.hidden) + (3 * M,)
    loss = LossSpec("mixture_nll", n_modes=M, positive_means=domain == "nonnegative")
    best, build = _train_with_cv(Z, y, loss, dims, "identity", cfg, seed, 5)
    s = _derived_seed(seed, 6)
    net = train_network(build(s), Z, y, loss, replace(best, seed=s))
    return MixtureEstimator(net, M, xm, xs, loc, scale, domain)


FITTERS = {"cg": fit_cond_gaussian, "sqr": fit_sqr, "mix": fit_mixture}


def fit_estimator(kind: str, train: Dataset, cfg=None, seed=0, domain="real") -> ConditionalEstimator:
    try:
        fitter = FITTERS[kind]
    except KeyError:
        raise ValueError(f"unknown estimator kind {kind!r}; choose from {sorted(FITTERS)}") from None
    return fitter(train, cfg, seed, domain)


def discrepancy_dataset(train: Dataset, regressor, d_kind: str) -> Dataset:
    """Rows ``(x_i, d(y_i, f(x_i)))``."""
    d = discrepancy(train.targets, regressor(train.features), d_kind)
    return Dataset(train.features, np.atleast_1d(d), train.feature_names)


def fit_discrepancy_estimator(train: Dataset, regressor, d_kind: str, cfg=None,
                              estimator_kind: str = "sqr", seed: int = 0) -> ConditionalEstimator:
    """Fit an estimator of D|X=x on the nonnegative discrepancy domain."""
    return fit_estimator(estimator_kind, discrepancy_dataset(train, regressor, d_kind), cfg, seed,
                         domain="nonnegative")


def estimator_from_dict(d: dict) -> ConditionalEstimator:
    if d.get("version") != EST_VERSION:
        raise ValueError(f"unsupported estimator document version {d.get('version')!r}")
    nets = [DenseNet.from_dict(n) for n in d["nets"]]
    common = (d["x_mean"], d["x_std"], d["y_loc"], d["y_scale"], d["domain"])
    kind = d["kind"]
    if kind == "cg":
        return CondGaussianEstimator(nets, *common)
    if kind == "mix":
        return MixtureEstimator(nets[0], d["n_modes"], *common)
    if kind == "sqr":
        return SQREstimator(nets[0], *common, tau_grid_size=d["tau_grid_size"])
    raise ValueError(f"unknown estimator kind {kind!r}")


# convenience wrappers matching the functional contract
def cdf(est: ConditionalEstimator, v, X):
    return est.cdf(v, X)


def quantile(est: ConditionalEstimator, tau, X):
    return est.quantile(tau, X)


def sample(est: ConditionalEstimator, X, n, seed):
    return est.sample(X, n, seed)
