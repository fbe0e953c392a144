"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the lines appear
inline) or ``python tests/test_acceptance.py``.
"""

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import erf

from regdetect.bench import parse_markdown_tables, run_benchmark, write_all
from regdetect.cli import main
from regdetect.config import load_config
from regdetect.data import Dataset, cubic_bias_toy, constant_toy, generate_toy
from regdetect.detectors import (
    DiscrepancySpec,
    DVConfig,
    OracleModel,
    bad_labels,
    dv_score,
    estimate_diversity,
    fit_conformal,
    h_p,
    oracle_pb,
    pb_baseline_y,
    train_dv,
)
from regdetect.estimators import AnalyticGaussianEstimator, default_config, fit_estimator, fit_sqr
from regdetect.metrics import auroc, fpr_at_tpr
from regdetect.nn import grad_check

from _cases import LOSS_CASES, random_case

DATA = Path(__file__).parent / "data"
TOY_EPS = DiscrepancySpec("absolute", 0.1)


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return report


def test_criterion_01_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for k, kind in enumerate(sorted(LOSS_CASES)):
        rng = np.random.default_rng([1, k])
        worst[kind] = max(grad_check(*random_case(kind, rng)) for _ in range(20))
    secs = time.perf_counter() - t0
    top = max(worst.values())
    verdict(1, top <= 1e-4 and secs < 30,
            f"max relative gradient error {top:.2e} over 20 nets x {len(worst)} losses in {secs:.1f}s")


def test_criterion_02_rao_identity(verdict):
    C = 100.0
    h = lambda u, v: np.minimum((u - v) ** 2 / C, 1.0)  # noqa: E731
    H = estimate_diversity(h, lambda x, n, rng: rng.standard_normal(n), 0.0, 100_000, 0)
    verdict(2, abs(H * C - 2.0) <= 0.05, f"H*C = {H * C:.4f} (target 2 +- 0.05)")


def test_criterion_03_prop2_equivalence(verdict):
    toy = cubic_bias_toy()
    samp = OracleModel(toy).discrepancy_sampler(TOY_EPS)
    n_u = 20_000
    xs = toy.x_dist(np.random.default_rng(3), 50)
    worst = 0.0
    for k, x in enumerate(xs):
        H = estimate_diversity(h_p(TOY_EPS.epsilon), samp, x, n_u, 1000 + k)
        rng = np.random.default_rng(1000 + k)
        p_hat = np.mean(np.concatenate([samp(x, n_u, rng), samp(x, n_u, rng)]) > TOY_EPS.epsilon)
        se = math.sqrt(H * (1 - H) / n_u)
        worst = max(worst, abs(H - p_hat ** 2) / se if se > 0 else (0.0 if H == p_hat ** 2 else math.inf))
    verdict(3, worst <= 3.0, f"max |H - P^2| = {worst:.2f} standard errors over 50 inputs")


def test_criterion_04_closed_form_vs_monte_carlo(verdict):
    toy = cubic_bias_toy()
    est = AnalyticGaussianEstimator(lambda Z: toy.phi(Z[:, 0]), lambda Z: toy.sigma(Z[:, 0]))
    rng = np.random.default_rng(4)
    xs = rng.uniform(-2, 2, 20)
    epss = rng.uniform(0.02, 0.4, 20)
    worst = 0.0
    for x, e in zip(xs, epss):
        X = np.array([[x]])
        p = pb_baseline_y(est, toy.regressor, X, DiscrepancySpec("absolute", e))[0]
        y = toy.phi(np.array([x]))[0] + toy.sigma(np.array([x]))[0] * rng.standard_normal(100_000)
        emp = np.mean(np.abs(y - toy.regressor(X)[0]) > e)
        worst = max(worst, abs(p - emp))
    verdict(4, worst <= 0.01, f"max |closed form - empirical| = {worst:.4f} at 20 (x, eps) pairs")


def test_criterion_05_oracle_formula(verdict):
    m = OracleModel(constant_toy())
    p = oracle_pb(m, np.zeros(1), DiscrepancySpec("absolute", 1.0))[0]
    ref = 1 - erf(1 / math.sqrt(2))
    verdict(5, abs(p - ref) <= 1e-4 and abs(p - 0.3173) <= 1e-4, f"oracle {p:.6f} vs erf {ref:.6f}")


@pytest.mark.slow
def test_criterion_06_oracle_dominance(verdict):
    t0 = time.perf_counter()
    toy = cubic_bias_toy()
    m = OracleModel(toy)
    gaps = {"B1-CG": [], "B1-SQR": [], "DV-Y-CG": [], "DV-Y-SQR": []}
    for seed in range(5):
        train, f = generate_toy(toy, 1000, seed)
        test, _ = generate_toy(toy, 2000, seed + 1000)
        labels = bad_labels(test.targets, f(test.features), TOY_EPS)
        ora = auroc(oracle_pb(m, test.features, TOY_EPS), labels)
        for kind, epochs in (("cg", 100), ("sqr", 150)):
            cfg = default_config(kind, epochs=epochs, lr_grid=(1e-3,), wd_grid=(0.0,))
            est = fit_estimator(kind, train, cfg, seed)
            b1 = auroc(pb_baseline_y(est, f, test.features, TOY_EPS), labels)
            h = train_dv(est, f, train, TOY_EPS, "Y", DVConfig(), seed)
            dv = auroc(dv_score(h, est, f, test.features, TOY_EPS, "Y", 2000, seed), labels)
            gaps[f"B1-{kind.upper()}"].append(ora - b1)
            gaps[f"DV-Y-{kind.upper()}"].append(ora - dv)
    secs = time.perf_counter() - t0
    med = {k: float(np.median(v)) for k, v in gaps.items()}
    ok = all(v >= -0.01 for v in med.values()) and secs < 600
    verdict(6, ok, "median oracle-minus-method AUROC " +
            ", ".join(f"{k} {v:+.4f}" for k, v in med.items()) + f" in {secs:.0f}s")


def test_criterion_07_sqr_quantile_fidelity(verdict):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(5000, 1)), rng.normal(size=5000))
    cfg = default_config("sqr", epochs=200, lr_grid=(1e-3,), wd_grid=(0.0,), batch_size=128)
    est = fit_sqr(ds, cfg, seed=0)
    grid = np.linspace(-2, 2, 50)[:, None]
    mae50 = float(np.mean(np.abs(est.quantile(0.5, grid))))
    mae84 = float(np.mean(np.abs(est.quantile(0.841, grid) - 1.0)))
    verdict(7, mae50 <= 0.1 and mae84 <= 0.15, f"MAE q(0.5) {mae50:.4f}, MAE q(0.841) vs 1 {mae84:.4f}")


def test_criterion_08_dv_beats_miscalibrated_b1(verdict):
    toy = cubic_bias_toy()
    # the estimator's std shrinks away from the noise minimum at x = -0.2
    factor = lambda x: (1 + (x + 0.2) ** 2) ** -2  # noqa: E731
    est = AnalyticGaussianEstimator(lambda Z: toy.phi(Z[:, 0]), lambda Z: toy.sigma(Z[:, 0]) * factor(Z[:, 0]))
    diffs = []
    for seed in range(5):
        train, f = generate_toy(toy, 1000, seed)
        test, _ = generate_toy(toy, 2000, seed + 1000)
        labels = bad_labels(test.targets, f(test.features), TOY_EPS)
        b1 = auroc(pb_baseline_y(est, f, test.features, TOY_EPS), labels)
        h = train_dv(est, f, train, TOY_EPS, "Y", DVConfig(), seed)
        dv = auroc(dv_score(h, est, f, test.features, TOY_EPS, "Y", 2000, seed), labels)
        diffs.append(dv - b1)
    ok = min(diffs) >= -0.02 and float(np.median(diffs)) > 0
    verdict(8, ok, "DV-Y minus B1 AUROC per seed " + " ".join(f"{d:+.4f}" for d in diffs))


def test_criterion_09_conformal_coverage(verdict):
    toy = cubic_bias_toy()
    train, _ = generate_toy(toy, 1000, 90)
    calib, _ = generate_toy(toy, 1000, 91)
    test, _ = generate_toy(toy, 2000, 92)
    qest = fit_sqr(train, default_config("sqr", epochs=60, lr_grid=(1e-3,), wd_grid=(0.0,)), seed=0)
    lo, hi = fit_conformal(qest, calib).interval(test.features, 0.1)
    cover = float(np.mean((test.targets >= lo) & (test.targets <= hi)))
    verdict(9, abs(cover - 0.9) <= 0.03, f"coverage of the corrected 90% interval {cover:.4f}")


def _brute(s, y, level):
    pos, neg = s[y], s[~y]
    au = ((pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()) / (pos.size * neg.size)
    for t in sorted(set(s.tolist()), reverse=True):
        if np.mean(s[y] >= t) >= level:
            return au, np.mean(s[~y] >= t)


def test_criterion_10_metrics_brute_force(verdict):
    rng = np.random.default_rng(10)
    bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 31))
        y = rng.random(n) < 0.5
        y[:2] = [True, False]
        s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        au, fp = _brute(s, y, 0.9)
        bad += (auroc(s, y) != au) + (fpr_at_tpr(s, y, 0.9) != fp)
    verdict(10, bad == 0, f"{bad} mismatches against the exhaustive sweep in 200 trials")


@pytest.mark.slow
def test_criterion_11_real_data_smoke(verdict, tmp_path):
    cfg_path = tmp_path / "diabetes.json"
    out = tmp_path / "out"
    cfg_path.write_text(json.dumps({
        "datasets": [{"name": "diabetes", "csv": str(DATA / "diabetes.csv"), "target": "progression"}],
        "methods": ["B1-CG", "B1-SQR", "DV-Y-SQR", "B2-CG"],
        "epsilons": [0.5, 1.0],
        "epsilon_scale": "target_std",
        "seeds": [0, 1, 2],
        "output_dir": str(out),
    }))
    t0 = time.perf_counter()
    code = main(["-q", "bench", "--config", str(cfg_path)])
    secs = time.perf_counter() - t0
    tables = parse_markdown_tables((out / "report.md").read_text())
    auc = next(v for k, v in tables.items() if "AUROC" in k)
    best = {}
    for col in ("eps=0.5", "eps=1"):
        means = [float(cells[col].split("±")[0]) for m, cells in auc.items() if m != "% eps-bad"]
        best[col] = max(means)
    ok = code == 0 and secs < 600 and all(v > 50 for v in best.values())
    verdict(11, ok, f"exit {code} in {secs:.0f}s; best mean AUROC x100 per eps " +
            ", ".join(f"{k}: {v:.1f}" for k, v in best.items()))


def test_criterion_12_end_to_end_determinism(verdict, tmp_path):
    cfg = {
        "datasets": [{"name": "toy", "toy": "cubic_bias", "n": 600},
                     {"name": "csv", "csv": str(DATA / "diabetes.csv"), "target": "progression"}],
        "methods": ["oracle", "B1-CG", "B2-SQR", "DV-Y-CG", "HP-Y-CG", "CF-SQR"],
        "epsilons": [0.1, 0.5],
        "epsilon_scale": "target_std",
        "seeds": [0, 1],
        "regressor": {"epochs": 20, "lr_grid": [1e-3], "wd_grid": [0.0]},
        "estimators": {"cg": {"epochs": 15, "lr_grid": [1e-2], "ensemble_size": 2},
                       "sqr": {"epochs": 15, "lr_grid": [1e-3], "wd_grid": [0.0]}},
        "dv": {"epochs": 2, "n_u": 200},
        "n_u_score": 200,
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    reports = ("report.csv", "report_rows.csv", "report.json", "report.md")
    out = tmp_path / "out"

    def run(*extra):
        assert main(["-q", "bench", "--config", str(path), "--output-dir", str(out), *extra]) == 0
        snap = {n: (out / n).read_bytes() for n in reports + ("config.json",)}
        shutil.rmtree(out)
        return snap

    first, again = run(), run()
    same = [first[n] == again[n] for n in first]
    parallel = run("--workers", "2")
    same += [first[n] == parallel[n] for n in reports]
    write_all(run_benchmark(load_config(path)), out)
    same += [first[n] == (out / n).read_bytes() for n in reports]
    verdict(12, all(same), f"{sum(same)}/{len(same)} output files byte-identical across reruns, worker counts and the API")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
