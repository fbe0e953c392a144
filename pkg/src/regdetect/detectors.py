"""Scoring rules for unreliable regression predictions.

Every score is oriented so that larger means "more likely epsilon-bad":

* ``pb_baseline_y`` / ``pb_baseline_d``: plug-in exceedance probability from
  an estimate of Y|x or D|x (B1 / B2).
* ``dv_score``: diversity ``H(x) = E h(D1, D2)`` with a learned symmetric h
  (DV-Y / DV-D); ``hp_score`` uses the indicator product instead.
* ``ConformalCalibration.score``: one minus the largest conformal coverage
  whose corrected interval fits inside the epsilon-good band (CF).
* ``oracle_pb``: exact probability under a known additive Gaussian model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .data import Dataset, ToyRegressor, ToySpec, _as_scalar_input
from .discrepancy import (
    DiscrepancySpec,
    GoodBadPartition,
    bad_labels,
    band,
    check_relative_denominator,
    discrepancy,
    partition_good_bad,
)
from .estimators import AnalyticGaussianEstimator, ConditionalEstimator
from .metrics import auroc
from .nn import Adam, DenseNet, _derived_seed

log = logging.getLogger(__name__)

__all__ = [
    "DiscrepancySpec", "GoodBadPartition", "discrepancy", "partition_good_bad", "bad_labels",
    "DetectorScore", "decide", "pb_baseline_y", "pb_baseline_d", "DiscrepancySampler",
    "estimate_diversity", "h_p", "symmetrize", "HNet", "DVConfig", "train_dv", "dv_score",
    "hp_score", "ConformalCalibration", "fit_conformal", "conformal_score", "OracleModel",
    "oracle_pb", "oracle_region", "oracle_region_boundaries", "product_heatmap",
    "oracle_product_heatmap",
]


@dataclass(frozen=True)
class DetectorScore:
    method: str
    values: np.ndarray
    epsilon: float = math.nan
    d_kind: str = ""


def decide(score, gamma: float):
    """Flag epsilon-bad when the score strictly exceeds gamma."""
    out = np.asarray(score) > gamma
    return bool(out) if out.ndim == 0 else out


# -- baselines -----------------------------------------------------------------

def pb_baseline_y(est: ConditionalEstimator, f, X, spec: DiscrepancySpec) -> np.ndarray:
    """1 - F_Y(upper band edge | x) + F_Y(lower band edge | x)."""
    lo, hi = band(f(X), spec)
    p = 1.0 - est.cdf(hi, X) + est.cdf(lo, X)
    return np.clip(p, 0.0, 1.0)


def pb_baseline_d(est: ConditionalEstimator, X, spec: DiscrepancySpec) -> np.ndarray:
    """1 - F_D(epsilon | x)."""
    return np.clip(1.0 - est.cdf(spec.epsilon, X), 0.0, 1.0)


# -- diversity -----------------------------------------------------------------

class DiscrepancySampler:
    """Draws discrepancy samples at fixed inputs.

    ``variant="Y"`` samples the target from a Y|x estimator and maps it
    through ``d(., f(x))``; ``variant="D"`` samples a D|x estimator directly
    (negative draws are clipped to 0).
    """

    def __init__(self, est: ConditionalEstimator, X, spec: DiscrepancySpec, variant="Y", f=None):
        if variant not in ("Y", "D"):
            raise ValueError(f"variant must be 'Y' or 'D', got {variant!r}")
        self.variant = variant
        self.spec = spec
        self.rows = est.prepare(X)
        self.n_rows = self.rows.n_rows
        if variant == "Y":
            if f is None:
                raise ValueError("the Y variant needs the regressor")
            self.yhat = np.asarray(f(X), dtype=np.float64).reshape(-1)
            if spec.kind == "relative":
                check_relative_denominator(self.yhat)

    def draw(self, i, n, rng):
        s = self.rows.draw(i, n, rng)
        if self.variant == "Y":
            return discrepancy(s, self.yhat[i], self.spec.kind)
        return np.maximum(s, 0.0)

    def streams(self, n_u, key, rows=None):
        """Two independent ``(len(rows), n_u)`` sample streams; row ``i`` uses
        the generator seeded by ``(*key, i)``."""
        rows = range(self.n_rows) if rows is None else rows
        s1 = np.empty((len(rows), n_u))
        s2 = np.empty((len(rows), n_u))
        for j, i in enumerate(rows):
            rng = np.random.default_rng([*key, int(i)])
            s1[j] = self.draw(i, n_u, rng)
            s2[j] = self.draw(i, n_u, rng)
        return s1, s2


def estimate_diversity(h, sampler, x, n_u: int, seed: int) -> float:
    """Monte Carlo estimate of E h(D1, D2) at one input.

    ``sampler(x, n, rng)`` returns ``n`` discrepancy draws; the two streams
    are paired by index.
    """
    if n_u < 1:
        raise ValueError("n_u must be >= 1")
    rng = np.random.default_rng(seed)
    u = np.asarray(sampler(x, n_u, rng), dtype=np.float64)
    v = np.asarray(sampler(x, n_u, rng), dtype=np.float64)
    vals = np.asarray(h(u, v), dtype=np.float64)
    if np.any(vals < 0) or np.any(vals > 1):
        raise ValueError("h must take values in [0, 1]")
    return float(vals.mean())


def h_p(epsilon: float) -> Callable:
    """Indicator product 1{u > eps} 1{v > eps}."""
    return lambda u, v: ((np.asarray(u) > epsilon) & (np.asarray(v) > epsilon)).astype(np.float64)


def symmetrize(net: DenseNet, u, v) -> np.ndarray:
    """(net(u, v) + net(v, u)) / 2 for a 2-input sigmoid network."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    u, v = np.broadcast_arrays(u, v)
    a = net.forward(np.column_stack([u.ravel(), v.ravel()]))[:, 0]
    b = net.forward(np.column_stack([v.ravel(), u.ravel()]))[:, 0]
    return (0.5 * (a + b)).reshape(u.shape)


class HNet:
    """Learned symmetric dissimilarity ``h: R>=0 x R>=0 -> [0, 1]``.

    Discrepancies enter the network as ``t = r / (1 + r)`` with
    ``r = d / epsilon``, so the input square is ``[0, 1)^2``.  With
    ``lattice=G`` the symmetrized network is tabulated on a ``G x G`` grid
    of that square and h is its bilinear interpolant; with ``lattice=None``
    the network is evaluated at every pair.
    """

    def __init__(self, net: DenseNet, epsilon: float, lattice: Optional[int] = 65):
        if net.layer_dims[0] != 2 or net.layer_dims[-1] != 1 or net.output_activation != "sigmoid":
            raise ValueError("h needs a 2-input, 1-output sigmoid network")
        if lattice is not None and lattice < 2:
            raise ValueError("lattice needs at least 2 nodes per axis")
        self.net = net
        self.epsilon = float(epsilon)
        self.lattice = lattice
        self.history = {}
        self._table = None

    # transforms
    def transform(self, d):
        r = np.maximum(np.asarray(d, dtype=np.float64), 0.0) / self.epsilon
        return r / (1.0 + r)

    @property
    def nodes(self):
        return np.linspace(0.0, 1.0, self.lattice)

    def node_pairs(self):
        g = self.nodes
        a, b = np.meshgrid(g, g, indexing="ij")
        return np.column_stack([a.ravel(), b.ravel()])

    def table(self):
        """Symmetrized network values on the lattice, ``(G, G)``."""
        if self._table is None:
            G = self.lattice
            raw = self.net.forward(self.node_pairs())[:, 0].reshape(G, G)
            self._table = 0.5 * (raw + raw.T)
        return self._table

    def invalidate(self):
        self._table = None

    def _corners(self, t):
        G = self.lattice
        s = np.clip(t, 0.0, 1.0) * (G - 1)
        i = np.minimum(np.floor(s).astype(np.intp), G - 2)
        return i, s - i

    def __call__(self, u, v):
        tu, tv = self.transform(u), self.transform(v)
        if self.lattice is None:
            return symmetrize(self.net, tu, tv)
        T = self.table()
        iu, fu = self._corners(tu)
        iv, fv = self._corners(tv)
        # the cross terms trade places under a swap; summing them first keeps h bit-exact symmetric
        cross = fu * (1 - fv) * T[iu + 1, iv] + (1 - fu) * fv * T[iu, iv + 1]
        return ((1 - fu) * (1 - fv) * T[iu, iv] + cross) + fu * fv * T[iu + 1, iv + 1]

    def pair_weights(self, s1, s2):
        """Per-row bilinear weights of the paired samples on the lattice,
        ``(n_rows, G*G)``; each row sums to 1."""
        G = self.lattice
        n, m = s1.shape
        iu, fu = self._corners(self.transform(s1))
        iv, fv = self._corners(self.transform(s2))
        base = (np.arange(n) * G * G)[:, None]
        idx = np.concatenate([
            (base + iu * G + iv).ravel(), (base + (iu + 1) * G + iv).ravel(),
            (base + iu * G + iv + 1).ravel(), (base + (iu + 1) * G + iv + 1).ravel(),
        ])
        w = np.concatenate([
            ((1 - fu) * (1 - fv)).ravel(), (fu * (1 - fv)).ravel(),
            ((1 - fu) * fv).ravel(), (fu * fv).ravel(),
        ])
        return np.bincount(idx, weights=w, minlength=n * G * G).reshape(n, G * G) / m

    def diversity(self, s1, s2) -> np.ndarray:
        """Row-wise mean of h over paired samples."""
        if self.lattice is None:
            return np.asarray(self(s1, s2)).mean(axis=1)
        return self.pair_weights(s1, s2) @ self.table().ravel()

    def to_dict(self):
        return {"net": self.net.to_dict(), "epsilon": self.epsilon, "lattice": self.lattice}

    @classmethod
    def from_dict(cls, d):
        return cls(DenseNet.from_dict(d["net"]), d["epsilon"], d["lattice"])


@dataclass(frozen=True)
class DVConfig:
    epochs: int = 25
    n_u: int = 2000
    n_u_score: int = 2000
    lr_grid: tuple = (5e-3, 1e-3, 5e-4)
    weight_decay: float = 0.0
    val_fraction: float = 0.2
    batch_rows: int = 64
    hidden: tuple = (64, 64, 64, 64)
    lattice: Optional[int] = 65

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in ((k, getattr(self, k)) for k in self.__dataclass_fields__)}


def _stratified_split(labels, frac, seed):
    rng = np.random.default_rng(seed)
    val = []
    for cls in (False, True):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(math.floor(idx.size * frac + 0.5))
        if idx.size >= 2:
            k = min(max(k, 1), idx.size - 1)
        else:
            k = 0
        val.append(idx[:k])
    val = np.sort(np.concatenate(val))
    fit = np.setdiff1d(np.arange(labels.size), val)
    return fit, val


def _row_weights(labels):
    nb = labels.sum()
    ng = labels.size - nb
    return np.where(labels, -0.5 / nb, 0.5 / ng)


def _lattice_grads(net, pairs, W):
    """Loss sum(W * sym(h)) on the lattice and its parameter gradients."""
    Ws = 0.5 * (W + W.T)
    out, cache = net.forward_cache(pairs)
    val = float(np.dot(Ws.ravel(), out[:, 0]))
    return val, net.backward(cache, Ws.reshape(-1, 1))


def _lattice_loss(net, pairs, M, w):
    G = int(round(math.sqrt(M.shape[1])))
    W = (w @ M).reshape(G, G)
    out = net.forward(pairs)[:, 0]
    return float(np.dot((0.5 * (W + W.T)).ravel(), out))


def train_dv(est: ConditionalEstimator, f, train: Dataset, spec: DiscrepancySpec,
             variant: str = "Y", cfg: DVConfig = DVConfig(), seed: int = 0) -> HNet:
    """Learn h so that diversity is low on epsilon-good rows and high on bad ones.

    Minimizes ``0.5 mean_G H - 0.5 mean_B H`` with Adam over row minibatches.
    The Monte Carlo streams are redrawn every epoch and treated as constants.
    Learning rate and epoch are chosen by validation AUROC on a held-out
    stratified fraction of ``train``.
    """
    labels = bad_labels(train.targets, f(train.features), spec)
    if labels.all() or not labels.any():
        raise ValueError(
            f"epsilon={spec.epsilon} yields a degenerate training signal "
            f"({int(labels.sum())} bad of {labels.size} rows)"
        )
    fit_idx, val_idx = _stratified_split(labels, cfg.val_fraction, _derived_seed(seed, 1))
    fit_labels = labels[fit_idx]
    if fit_labels.all() or not fit_labels.any():
        raise ValueError("epsilon yields a degenerate training signal after the validation split")
    val_labels = labels[val_idx]
    use_val = val_labels.size > 0 and val_labels.any() and not val_labels.all()

    sampler = DiscrepancySampler(est, train.features, spec, variant, f)
    dims = (2,) + tuple(cfg.hidden) + (1,)
    init = DenseNet.init(dims, "sigmoid", _derived_seed(seed, 2))
    lattice = cfg.lattice
    if lattice is None:
        raise ValueError("train_dv needs a lattice; direct evaluation is for scoring and checks only")
    probe = HNet(init, spec.epsilon, lattice)
    pairs = probe.node_pairs()

    M_eval = probe.pair_weights(*sampler.streams(cfg.n_u, (seed, 7), fit_idx))
    w_eval = _row_weights(fit_labels)
    M_val = probe.pair_weights(*sampler.streams(cfg.n_u, (seed, 8), val_idx)) if use_val else None

    def evaluate(net):
        loss = _lattice_loss(net, pairs, M_eval, w_eval)
        if not use_val:
            return loss, math.nan
        h = HNet(net, spec.epsilon, lattice)
        return loss, auroc(M_val @ h.table().ravel(), val_labels)

    runs = []
    for lr in cfg.lr_grid:
        net = init.copy()
        runs.append({"lr": lr, "net": net, "opt": Adam(net.params(), lr, cfg.weight_decay),
                     "loss": [], "auroc": []})
    l0, a0 = evaluate(init)
    best = {"key": (a0 if use_val else -l0), "lr": cfg.lr_grid[0], "epoch": 0, "net": init.copy()}
    for r in runs:
        r["loss"].append(l0)
        r["auroc"].append(a0)

    n_fit = fit_idx.size
    bs = min(cfg.batch_rows, n_fit)
    for epoch in range(1, cfg.epochs + 1):
        M = probe.pair_weights(*sampler.streams(cfg.n_u, (seed, 100 + epoch), fit_idx))
        order = np.random.default_rng([seed, 100 + epoch, 1]).permutation(n_fit)
        for start in range(0, n_fit, bs):
            b = order[start:start + bs]
            W = ((w_eval[b] * (n_fit / b.size)) @ M[b]).reshape(lattice, lattice)
            for r in runs:
                val, grads = _lattice_grads(r["net"], pairs, W)
                if not math.isfinite(val):
                    raise RuntimeError(f"non-finite DV loss at epoch {epoch}")
                r["opt"].step(grads)
        for r in runs:
            loss, au = evaluate(r["net"])
            r["loss"].append(loss)
            r["auroc"].append(au)
            key = au if use_val else -loss
            if key > best["key"]:
                best = {"key": key, "lr": r["lr"], "epoch": epoch, "net": r["net"].copy()}

    h = HNet(best["net"], spec.epsilon, lattice)
    sel = next(r for r in runs if r["lr"] == best["lr"])
    h.history = {
        "lr": best["lr"],
        "epoch": best["epoch"],
        "train_loss": list(sel["loss"]),
        "val_auroc": list(sel["auroc"]),
        "selected_by": "val_auroc" if use_val else "train_loss",
    }
    log.debug("DV-%s eps=%g: lr=%g epoch=%d", variant, spec.epsilon, best["lr"], best["epoch"])
    return h


def dv_score(h, est: ConditionalEstimator, f, X, spec: DiscrepancySpec, variant="Y",
             n_u: int = 2000, seed: int = 0) -> np.ndarray:
    """Monte Carlo diversity H(x) per row under the learned (or any) h."""
    sampler = DiscrepancySampler(est, X, spec, variant, f)
    s1, s2 = sampler.streams(n_u, (seed, 1))
    if isinstance(h, HNet):
        return h.diversity(s1, s2)
    return np.asarray(h(s1, s2), dtype=np.float64).mean(axis=1)


def hp_score(est, f, X, spec: DiscrepancySpec, variant="Y", n_u=2000, seed=0) -> np.ndarray:
    return dv_score(h_p(spec.epsilon), est, f, X, spec, variant, n_u, seed)


# -- conformal correction ------------------------------------------------------

def default_alphas():
    return np.arange(1, 100) / 100.0


@dataclass
class ConformalCalibration:
    """Conformalized equal-tailed quantile intervals on a grid of miscoverage
    levels.  ``qhat[k]`` widens both ends of the level-``alphas[k]`` interval."""

    qest: ConditionalEstimator
    alphas: np.ndarray
    qhat: np.ndarray

    def _levels(self):
        a = self.alphas
        return np.concatenate([a / 2.0, 1.0 - a / 2.0])

    def intervals(self, X):
        q = self.qest.quantiles(self._levels(), X)
        k = self.alphas.size
        return q[:, :k] - self.qhat, q[:, k:] + self.qhat

    def interval(self, X, alpha):
        k = int(np.argmin(np.abs(self.alphas - alpha)))
        if not math.isclose(self.alphas[k], alpha, abs_tol=1e-12):
            raise ValueError(f"alpha {alpha} is not on the calibration grid")
        lo, hi = self.intervals(X)
        return lo[:, k], hi[:, k]

    def score(self, f, X, spec: DiscrepancySpec) -> np.ndarray:
        """1 - largest coverage whose corrected interval lies inside the band."""
        blo, bhi = band(f(X), spec)
        lo, hi = self.intervals(X)
        fits = (lo >= blo[:, None]) & (hi <= bhi[:, None])
        cover = 1.0 - self.alphas
        best = np.where(fits, cover[None, :], 0.0).max(axis=1)
        widest = int(np.argmax(cover))
        best = np.where(fits[:, widest], 1.0, best)
        return 1.0 - best

    def to_dict(self):
        return {"qest": self.qest.to_dict(), "alphas": self.alphas.tolist(),
                "qhat": [float(v) if math.isfinite(v) else None for v in self.qhat]}

    @classmethod
    def from_dict(cls, d):
        from .estimators import estimator_from_dict

        qhat = np.array([math.inf if v is None else v for v in d["qhat"]])
        return cls(estimator_from_dict(d["qest"]), np.array(d["alphas"]), qhat)


def fit_conformal(qest: ConditionalEstimator, calib: Dataset, alphas=None, min_rows=20) -> ConformalCalibration:
    if calib.n < min_rows:
        raise ValueError(f"calibration set too small: {calib.n} rows, need >= {min_rows}")
    alphas = default_alphas() if alphas is None else np.asarray(alphas, dtype=np.float64)
    k = alphas.size
    q = qest.quantiles(np.concatenate([alphas / 2.0, 1.0 - alphas / 2.0]), calib.features)
    y = calib.targets[:, None]
    E = np.sort(np.maximum(q[:, :k] - y, y - q[:, k:]), axis=0)
    n = calib.n
    rank = np.ceil((n + 1) * (1.0 - alphas)).astype(int)
    qhat = np.where(rank <= n, E[np.minimum(rank, n) - 1, np.arange(k)], math.inf)
    return ConformalCalibration(qest, alphas, qhat)


def conformal_score(qest, calib: Dataset, f, X, spec: DiscrepancySpec, alphas=None) -> np.ndarray:
    return fit_conformal(qest, calib, alphas).score(f, X, spec)


# -- analytic oracle -----------------------------------------------------------

class OracleModel:
    """Known additive Gaussian model plus a regressor (analytic by default)."""

    def __init__(self, toy: ToySpec, regressor=None):
        self.toy = toy
        self.regressor = regressor if regressor is not None else ToyRegressor(toy)

    def bias(self, X):
        x = _as_scalar_input(X)
        return self.toy.phi(x) - np.asarray(self.regressor(x[:, None]), dtype=np.float64).reshape(-1)

    def sigma(self, X):
        x = _as_scalar_input(X)
        return np.broadcast_to(np.asarray(self.toy.sigma(x), dtype=np.float64), x.shape)

    def y_estimator(self) -> AnalyticGaussianEstimator:
        return AnalyticGaussianEstimator(lambda Z: self.toy.phi(_as_scalar_input(Z)), self.sigma)

    def discrepancy_sampler(self, spec: DiscrepancySpec):
        """``sampler(x, n, rng)`` drawing true discrepancies at scalar x."""
        def draw(x, n, rng):
            X = np.atleast_1d(np.asarray(x, dtype=np.float64))[:, None]
            y = self.toy.phi(X[:, 0]) + self.sigma(X)[0] * rng.standard_normal(n)
            return discrepancy(y, self.regressor(X)[0], spec.kind)
        return draw


def oracle_pb(m: OracleModel, X, spec: DiscrepancySpec) -> np.ndarray:
    """P(|Y - f(x)| > eps | x) = 1 - [Phi((eps - b)/s) - Phi((-eps - b)/s)]."""
    if spec.kind != "absolute":
        raise ValueError("the oracle is defined for the absolute discrepancy only")
    b = m.bias(X)
    s = m.sigma(X)
    e = spec.epsilon
    return 1.0 - (ndtr((e - b) / s) - ndtr((-e - b) / s))


def oracle_region(m: OracleModel, spec: DiscrepancySpec, gamma: float, x_grid) -> np.ndarray:
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    return oracle_pb(m, np.asarray(x_grid, dtype=np.float64), spec) > gamma


def oracle_region_boundaries(m: OracleModel, spec: DiscrepancySpec, gamma: float,
                             lo: float, hi: float, n_scan: int = 2001) -> np.ndarray:
    """Roots of ``P(E > eps | x) = gamma`` in ``[lo, hi]`` by scan + Brent."""
    xs = np.linspace(lo, hi, n_scan)
    g = oracle_pb(m, xs, spec) - gamma
    roots = []
    fn = lambda x: float(oracle_pb(m, np.array([x]), spec)[0] - gamma)  # noqa: E731
    for i in np.flatnonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0):
        roots.append(brentq(fn, xs[i], xs[i + 1], xtol=1e-12))
    return np.array(roots)


# -- product-distribution heatmaps ----------------------------------------------

def _edges(u_max, bins):
    return np.linspace(0.0, u_max, bins + 1)


def product_heatmap(sampler, X, labels, u_max, bins=40, n_u=2000, seed=0):
    """Class-averaged 2-D histogram of paired discrepancy draws.

    ``sampler`` is a :class:`DiscrepancySampler` (or anything with
    ``streams``).  Returns ``{"good": (bins, bins), "bad": ..., "edges": e}``
    with masses normalized to sum to 1 per class (mass beyond ``u_max`` is
    dropped before normalization).
    """
    e = _edges(u_max, bins)
    s1, s2 = sampler.streams(n_u, (seed, 3))
    out = {"edges": e}
    labels = np.asarray(labels, dtype=bool)
    for name, mask in (("good", ~labels), ("bad", labels)):
        acc = np.zeros((bins, bins))
        for i in np.flatnonzero(mask):
            hist, _, _ = np.histogram2d(s1[i], s2[i], bins=[e, e])
            acc += hist / n_u
        total = acc.sum()
        out[name] = acc / total if total > 0 else acc
    return out


def oracle_product_heatmap(m: OracleModel, X, labels, u_max, bins=40):
    """Class-averaged exact product of folded-normal error densities."""
    e = _edges(u_max, bins)
    b = m.bias(X)
    s = m.sigma(X)
    # bin masses of |N(b, s^2)| per row
    cdf = lambda v: ndtr((v[None, :] - b[:, None]) / s[:, None]) - ndtr((-v[None, :] - b[:, None]) / s[:, None])  # noqa: E731
    mass = np.diff(cdf(e), axis=1)
    out = {"edges": e}
    labels = np.asarray(labels, dtype=bool)
    for name, mask in (("good", ~labels), ("bad", labels)):
        acc = np.einsum("ni,nj->ij", mass[mask], mass[mask]) if mask.any() else np.zeros((bins, bins))
        total = acc.sum()
        out[name] = acc / total if total > 0 else acc
    return out
