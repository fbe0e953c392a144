import json
import math

import numpy as np
import pytest
from scipy.stats import kstest, norm, spearmanr

from regdetect.data import Dataset, cubic_bias_toy, constant_toy, generate_toy
from regdetect.estimators import (
    CondGaussianEstimator,
    SQREstimator,
    cdf,
    default_config,
    discrepancy_dataset,
    estimator_from_dict,
    fit_cond_gaussian,
    fit_discrepancy_estimator,
    fit_estimator,
    fit_mixture,
    fit_sqr,
    quantile,
    sample,
)
from regdetect.nn import STD_FLOOR, DenseNet, LossSpec, loss_value

FAST = {
    "cg": default_config("cg", epochs=40, lr_grid=(1e-2,), ensemble_size=2),
    "sqr": default_config("sqr", epochs=60, lr_grid=(1e-3,), wd_grid=(0.0,), hidden=(32, 32)),
    "mix": default_config("mix", epochs=40, lr_grid=(1e-3,), wd_grid=(0.0,), n_modes=4, hidden=(32, 32)),
}


@pytest.fixture(scope="module")
def toy_train():
    ds, f = generate_toy(cubic_bias_toy(), 1000, 0)
    return ds, f


@pytest.fixture(scope="module", params=["cg", "sqr", "mix"])
def fitted(request, toy_train):
    ds, _ = toy_train
    return fit_estimator(request.param, ds, FAST[request.param], seed=1)


def _unit_gaussian_cg():
    # zero weights, mean bias 0, std bias with softplus(b) + floor = 1
    net = DenseNet.init((1, 4, 2), seed=0)
    for p in net.params():
        p[...] = 0.0
    net.biases[-1][1] = math.log(math.expm1(1.0 - STD_FLOOR))
    return CondGaussianEstimator([net], np.zeros(1), np.ones(1), 0.0, 1.0)


def test_cg_unit_gaussian_cdf():
    est = _unit_gaussian_cg()
    X = np.zeros((3, 1))
    assert np.all(est.cdf(0.0, X) == 0.5)
    np.testing.assert_allclose(est.cdf(1.0, X), 0.841344746068543, atol=1e-6)
    v = np.random.default_rng(0).normal(size=100) * 2
    np.testing.assert_allclose(est.quantile(est.cdf(v, np.zeros((100, 1))), np.zeros((100, 1))), v, atol=1e-3)


def test_cg_identical_members():
    est = _unit_gaussian_cg()
    net = est.members[0]
    twin = CondGaussianEstimator([net, net.copy()], np.zeros(1), np.ones(1), 0.0, 1.0)
    v = np.linspace(-3, 3, 7)
    X = np.zeros((7, 1))
    np.testing.assert_allclose(twin.cdf(v, X), est.cdf(v, X), atol=1e-15)


def test_cg_recovers_moments():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(5000, 1)), 3.0 + 2.0 * rng.normal(size=5000))
    est = fit_cond_gaussian(ds, default_config("cg", epochs=100, lr_grid=(1e-3,), ensemble_size=3), seed=0)
    grid = np.linspace(-1.5, 1.5, 20)[:, None]
    med = est.quantile(0.5, grid)
    sd = est.quantile(norm.cdf(1.0), grid) - med
    assert np.all(np.abs(med - 3.0) < 0.1)
    assert np.all(np.abs(sd - 2.0) < 0.15)


def test_cg_tracks_heteroscedastic_sigma(toy_train):
    ds, _ = toy_train
    est = fit_cond_gaussian(ds, default_config("cg", epochs=100, lr_grid=(3e-3,), ensemble_size=3), seed=0)
    x = np.linspace(-2, 2, 41)
    width = est.quantile(0.841, x[:, None]) - est.quantile(0.159, x[:, None])
    rho = spearmanr(width, cubic_bias_toy().sigma(x)).statistic
    assert rho > 0.8


def test_sqr_gaussian_quantiles():
    rng = np.random.default_rng(1)
    ds = Dataset(rng.normal(size=(3000, 1)), rng.normal(size=3000))
    cfg = default_config("sqr", epochs=150, lr_grid=(1e-3,), wd_grid=(0.0,), hidden=(32, 32), batch_size=256)
    est = fit_sqr(ds, cfg, seed=0)
    grid = np.linspace(-1.5, 1.5, 20)[:, None]
    # one random level per sample makes the fit noisy; tighter checks live in the acceptance run
    assert np.mean(np.abs(est.quantile(0.5, grid))) < 0.1
    assert np.mean(np.abs(est.quantile(0.841, grid) - 1.0)) < 0.15


def test_quantiles_monotone_and_inverse(fitted):
    X = np.linspace(-2, 2, 25)[:, None]
    taus = np.linspace(0.01, 0.99, 99)
    q = fitted.quantiles(taus, X)
    assert np.all(np.diff(q, axis=1) >= 0)
    for tau in np.arange(0.05, 0.951, 0.05):
        np.testing.assert_allclose(fitted.cdf(fitted.quantile(tau, X), X), tau, atol=1e-3)


def test_cdf_monotone_and_normalized(fitted):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(50, 1))
    v = np.linspace(-3, 3, 200)
    F = np.stack([fitted.cdf(vi, X) for vi in v], axis=1)
    assert np.all(np.diff(F, axis=1) >= -1e-12)
    assert np.all(fitted.cdf(-1e6, X) < 1e-4)
    assert np.all(fitted.cdf(1e6, X) > 1 - 1e-4)


def test_sampling_matches_own_cdf(fitted):
    x = np.array([[0.4]])
    s = fitted.sample(x, 100_000, seed=3)[0]
    stat = kstest(s, lambda v: fitted.cdf(v, np.repeat(x, np.size(v), axis=0))).statistic
    assert stat < 0.01


def test_sampling_reproducible(fitted):
    X = np.array([[0.0], [1.0]])
    a = sample(fitted, X, 50, 9)
    b = fitted.sample(X, 50, 9)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, fitted.sample(X, 50, 10))


def test_functional_wrappers(fitted):
    X = np.array([[0.1]])
    assert cdf(fitted, 0.2, X)[0] == fitted.cdf(0.2, X)[0]
    assert quantile(fitted, 0.7, X)[0] == fitted.quantile(0.7, X)[0]


def test_serialization_round_trip(fitted):
    back = estimator_from_dict(json.loads(json.dumps(fitted.to_dict())))
    X = np.linspace(-1, 1, 5)[:, None]
    np.testing.assert_array_equal(back.cdf(0.3, X), fitted.cdf(0.3, X))
    np.testing.assert_array_equal(back.quantiles([0.2, 0.8], X), fitted.quantiles([0.2, 0.8], X))
    with pytest.raises(ValueError, match="version"):
        estimator_from_dict({**fitted.to_dict(), "version": "x"})


def test_quantile_level_validation(fitted):
    with pytest.raises(ValueError):
        fitted.quantiles([0.0, 0.5], np.zeros((1, 1)))


def test_mixture_bimodal():
    rng = np.random.default_rng(2)
    n = 3000
    y = np.where(rng.random(n) < 0.5, -2.0, 2.0) + 0.1 * rng.normal(size=n)
    ds = Dataset(rng.normal(size=(n, 1)), y)
    est = fit_mixture(ds, default_config("mix", epochs=150, lr_grid=(3e-3,), wd_grid=(0.0,), n_modes=16), seed=0)
    X = np.linspace(-1, 1, 5)[:, None]
    assert np.all(np.abs(est.cdf(0.0, X) - 0.5) < 0.1)
    w, mu, sd = est.mixture(est._zx(X))
    means = est._uy(mu)
    for i in range(X.shape[0]):
        heavy = means[i][w[i] > 0.05]
        assert np.any(np.abs(heavy - 2) < 0.3) and np.any(np.abs(heavy + 2) < 0.3)
    np.testing.assert_allclose(est.weights(np.random.default_rng(0).normal(size=(100, 1))).sum(axis=1), 1.0, atol=1e-8)


def test_mixture_single_mode_matches_cg():
    ds, _ = generate_toy(constant_toy(sigma=1.5, phi=0.5), 2000, 0)
    cfg_m = default_config("mix", epochs=60, lr_grid=(1e-2,), wd_grid=(0.0,), n_modes=1, hidden=(64,))
    cfg_c = default_config("cg", epochs=60, lr_grid=(1e-2,), ensemble_size=1)
    m = fit_mixture(ds, cfg_m, seed=0)
    c = fit_cond_gaussian(ds, cfg_c, seed=0)
    nll = lambda est: -np.mean(np.log(  # noqa: E731
        (est.cdf(ds.targets + 1e-4, ds.features) - est.cdf(ds.targets - 1e-4, ds.features)) / 2e-4))
    assert abs(nll(m) - nll(c)) < 0.05


def test_half_normal_discrepancy_median():
    ds, f = generate_toy(constant_toy(), 3000, 0)
    est = fit_discrepancy_estimator(ds, f, "absolute", FAST["sqr"], "sqr", seed=0)
    X = np.linspace(-1.5, 1.5, 20)[:, None]
    assert abs(np.median(est.quantile(0.5, X)) - 0.6745) < 0.1
    assert np.all(est.quantiles([0.01, 0.5], X) >= 0)
    assert est.domain == "nonnegative"


def test_zero_error_corpus():
    x = np.linspace(-2, 2, 400)[:, None]
    f = lambda X: 1.0 + 0.5 * np.asarray(X)[:, 0]  # noqa: E731
    ds = Dataset(x, f(x))
    est = fit_discrepancy_estimator(ds, f, "absolute", FAST["sqr"], "sqr", seed=0)
    assert np.all(est.quantile(0.9, x) <= 0.05)


def test_relative_discrepancy_zero_prediction():
    ds = Dataset(np.arange(5.0)[:, None], np.ones(5))
    f = lambda X: np.asarray(X)[:, 0]  # noqa: E731 - zero at row 0
    with pytest.raises(ValueError, match="rows 0"):
        discrepancy_dataset(ds, f, "relative")


def test_unknown_kind():
    ds = Dataset(np.arange(5.0)[:, None], np.arange(5.0))
    with pytest.raises(ValueError, match="unknown estimator"):
        fit_estimator("rio", ds)


def test_sqr_grid_is_sorted_and_includes_ends(toy_train):
    ds, _ = toy_train
    est = fit_estimator("sqr", ds, FAST["sqr"], seed=1)
    assert isinstance(est, SQREstimator)
    assert est.tau_grid[0] == 0.0 and est.tau_grid[-1] == 1.0 and est.tau_grid.size == 513
    curve = est.curve(est._zx(np.array([[0.0], [1.0]])))
    assert np.all(np.diff(curve, axis=1) >= 0)


def test_mixture_estimator_loss_decreases(toy_train):
    ds, _ = toy_train
    est = fit_estimator("mix", ds, FAST["mix"], seed=1)
    h = est.net.history
    assert h[-1] < h[0]
    Z = est._zx(ds.features)
    y = (ds.targets - est.y_loc) / est.y_scale
    assert math.isfinite(loss_value(est.net, LossSpec("mixture_nll", n_modes=4), Z, y))
