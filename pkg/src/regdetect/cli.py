"""Command-line entry point: ``regdetect <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (arguments, config, data), 2 runtime
failure (including failed self-checks).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import run_benchmark, write_all
from .config import ConfigError, load_config, parse_method, with_overrides
from .data import DataError, generate_toy, load_csv, split_dataset, toy_from_config, write_csv, TOY_PRESETS
from .detectors import (
    ConformalCalibration,
    DiscrepancySampler,
    DiscrepancySpec,
    DVConfig,
    HNet,
    OracleModel,
    bad_labels,
    decide,
    dv_score,
    fit_conformal,
    hp_score,
    oracle_pb,
    oracle_product_heatmap,
    oracle_region_boundaries,
    pb_baseline_d,
    pb_baseline_y,
    product_heatmap,
    train_dv,
)
from .estimators import (
    DEFAULT_CONFIGS,
    default_config,
    estimator_from_dict,
    fit_discrepancy_estimator,
    fit_estimator,
)
from .nn import NetRegressor, RegressorConfig, _derived_seed, train_regressor

log = logging.getLogger("regdetect")

BUNDLE_VERSION = "regdetect-bundle-v1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def args_hash(ns: argparse.Namespace) -> str:
    d = {k: v for k, v in sorted(vars(ns).items()) if k not in ("func", "verbose", "quiet")}
    blob = json.dumps(d, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _csv_list(text, conv=str):
    return [conv(t) for t in text.split(",") if t.strip()]


def _out_dir(p):
    p = Path(p)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_grid_csv(path, header_line, columns, rows):
    buf = io.StringIO()
    buf.write(f"# {header_line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# -- synth ------------------------------------------------------------------------

def _parse_params(items):
    out = {}
    for it in items or []:
        k, sep, v = it.partition("=")
        if not sep:
            raise UsageError(f"--param expects key=value, got {it!r}")
        try:
            out[k] = float(v)
        except ValueError:
            raise UsageError(f"--param {k}: not a number: {v!r}") from None
    return out


def cmd_synth(a, h):
    toy = toy_from_config(a.toy, **_parse_params(a.param))
    ds, _ = generate_toy(toy, a.n, a.seed)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out, comment=f"regdetect synth toy={a.toy} n={a.n} seed={a.seed} config_hash={h}")
    log.info("wrote %d rows to %s", ds.n, out)


# -- train / score ----------------------------------------------------------------

def cmd_train(a, h):
    ds = load_csv(a.data, a.target)
    kinds = _csv_list(a.estimators)
    for k in kinds:
        if k not in DEFAULT_CONFIGS:
            raise UsageError(f"--estimators: unknown estimator {k!r}")
    d_kinds = _csv_list(a.d_kinds)
    for k in d_kinds:
        if k not in ("absolute", "relative"):
            raise UsageError(f"--d-kinds: unknown kind {k!r}")
    eps = _csv_list(a.dv_epsilons, float) if a.dv_epsilons else []
    if any(e <= 0 for e in eps):
        raise UsageError("--dv-epsilons must be > 0")
    over = {"epochs": a.epochs} if a.epochs else {}

    fit_part, calib = (split_dataset(ds, a.calibration_fraction, _derived_seed(a.seed, 13))
                       if a.conformal else (ds, None))
    reg = train_regressor(ds, RegressorConfig(epochs=a.epochs or RegressorConfig().epochs),
                          _derived_seed(a.seed, 14))
    bundle = {"version": BUNDLE_VERSION, "config_hash": h, "seed": a.seed,
              "regressor": reg.to_dict(), "Y": {}, "D": {}, "CF": {}, "DV": []}
    y_est, d_est = {}, {}
    for i, k in enumerate(kinds):
        cfg = default_config(k, **over)
        y_est[k] = fit_estimator(k, fit_part, cfg, _derived_seed(a.seed, 15, i))
        bundle["Y"][k] = y_est[k].to_dict()
        if calib is not None:
            bundle["CF"][k] = fit_conformal(y_est[k], calib).to_dict()
        for kind in d_kinds:
            d_est[(k, kind)] = fit_discrepancy_estimator(fit_part, reg, kind, cfg, k, _derived_seed(a.seed, 16, i))
            bundle["D"].setdefault(kind, {})[k] = d_est[(k, kind)].to_dict()
        log.info("fitted %s", k)
    dv_cfg = DVConfig(epochs=a.dv_epochs) if a.dv_epochs else DVConfig()
    for ki, kind in enumerate(d_kinds):
        for ei, e in enumerate(eps):
            spec = DiscrepancySpec(kind, e)
            for i, k in enumerate(kinds):
                for vi, (v, est) in enumerate((("Y", y_est[k]), ("D", d_est[(k, kind)]))):
                    net = train_dv(est, reg, fit_part, spec, v, dv_cfg, _derived_seed(a.seed, 18, ki, ei, i, vi))
                    bundle["DV"].append({"variant": v, "estimator": k, "d_kind": kind, "epsilon": e,
                                         "h": net.to_dict()})
                    log.info("trained DV-%s-%s %s eps=%g", v, k.upper(), kind, e)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(bundle) + "\n", encoding="utf-8")
    log.info("wrote bundle %s", out)


def load_bundle(path):
    try:
        b = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read bundle {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}") from None
    if b.get("version") != BUNDLE_VERSION:
        raise DataError(f"{path}: unsupported bundle version {b.get('version')!r}")
    return b


def cmd_score(a, h):
    b = load_bundle(a.bundle)
    ds = load_csv(a.data, a.target)
    reg = NetRegressor.from_dict(b["regressor"])
    methods = _csv_list(a.methods)
    eps = _csv_list(a.epsilons, float)
    if not eps or any(e <= 0 for e in eps):
        raise UsageError("--epsilons: need values > 0")
    parsed = []
    for m in methods:
        try:
            fam, k = parse_method(m)
        except ConfigError as e:
            raise UsageError(str(e)) from None
        if fam == "oracle":
            raise UsageError("the oracle is only available in bench runs on toy datasets")
        if k not in b["Y"]:
            raise UsageError(f"{m}: estimator {k} is not in the bundle")
        parsed.append((m, fam, k))
    out = _out_dir(a.out)
    X = ds.features
    cache = {}
    for kind in _csv_list(a.d_kinds):
        lines = []
        for ei, e in enumerate(eps):
            spec = DiscrepancySpec(kind, e)
            labels = bad_labels(ds.targets, reg(X), spec)
            for mi, (m, fam, k) in enumerate(parsed):
                seed = _derived_seed(a.seed, 17, ei, mi)

                def get_y():
                    if ("Y", k) not in cache:
                        cache[("Y", k)] = estimator_from_dict(b["Y"][k])
                    return cache[("Y", k)]

                def get_d():
                    if kind not in b["D"] or k not in b["D"][kind]:
                        raise UsageError(f"{m}: no {kind} discrepancy estimator in the bundle")
                    if ("D", kind, k) not in cache:
                        cache[("D", kind, k)] = estimator_from_dict(b["D"][kind][k])
                    return cache[("D", kind, k)]

                if fam == "B1":
                    s = pb_baseline_y(get_y(), reg, X, spec)
                elif fam == "B2":
                    s = pb_baseline_d(get_d(), X, spec)
                elif fam in ("HP-Y", "HP-D"):
                    v = fam[-1]
                    s = hp_score(get_y() if v == "Y" else get_d(), reg, X, spec, v, a.n_u, seed)
                elif fam in ("DV-Y", "DV-D"):
                    v = fam[-1]
                    entry = next((d for d in b["DV"] if d["variant"] == v and d["estimator"] == k
                                  and d["d_kind"] == kind and d["epsilon"] == e), None)
                    if entry is None:
                        raise UsageError(f"{m}: no trained h for {kind} eps={e:g} in the bundle")
                    s = dv_score(HNet.from_dict(entry["h"]), get_y() if v == "Y" else get_d(),
                                 reg, X, spec, v, a.n_u, seed)
                else:
                    if k not in b["CF"]:
                        raise UsageError(f"{m}: bundle has no conformal calibration (train with --conformal)")
                    s = ConformalCalibration.from_dict(b["CF"][k]).score(reg, X, spec)
                for i, (sv, lab) in enumerate(zip(s, labels)):
                    row = [i, m, repr(e), repr(float(sv)), int(lab)]
                    if a.gamma is not None:
                        row.append(int(decide(sv, a.gamma)))
                    lines.append(row)
        cols = ["row_id", "method", "epsilon", "score", "label"] + (["decision"] if a.gamma is not None else [])
        path = out / f"scores_{kind}.csv"
        _write_grid_csv(path, f"regdetect scores config_hash={h}", cols, lines)
        log.info("wrote %s", path)


# -- bench ------------------------------------------------------------------------

def cmd_bench(a, h):
    cfg = load_config(a.config)
    cfg = with_overrides(cfg, output_dir=a.output_dir, seeds=a.seeds, workers=a.workers)
    log.info("bench config_hash=%s seeds=%s methods=%s", cfg.hash(), list(cfg.seeds), list(cfg.methods))
    report = run_benchmark(cfg)
    paths = write_all(report, cfg.output_dir)
    (Path(cfg.output_dir) / "config.json").write_text(
        json.dumps({"config_hash": cfg.hash(), "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    for k, p in paths.items():
        log.info("wrote %s report %s", k, p)
    n_err = sum(1 for r in report.rows if r.error)
    if n_err:
        log.warning("%d of %d report rows carry error annotations", n_err, len(report.rows))


# -- plotdata ---------------------------------------------------------------------

def cmd_plotdata(a, h):
    toy = toy_from_config(a.toy, **_parse_params(a.param))
    ds, f = generate_toy(toy, a.n, a.seed)
    spec = DiscrepancySpec("absolute", a.epsilon)
    labels = bad_labels(ds.targets, f(ds.features), spec)
    out = _out_dir(a.out)
    head = f"regdetect plotdata toy={a.toy} source={a.source} eps={a.epsilon:g} config_hash={h}"
    if a.source == "oracle":
        grids = oracle_product_heatmap(OracleModel(toy), ds.features, labels, a.u_max, a.bins)
    else:
        train, _ = split_dataset(ds, 0.5, _derived_seed(a.seed, 12))
        est = fit_estimator(a.source, train, DEFAULT_CONFIGS[a.source], _derived_seed(a.seed, 15))
        sampler = DiscrepancySampler(est, ds.features, spec, "Y", f)
        grids = product_heatmap(sampler, ds.features, labels, a.u_max, a.bins, a.n_u, a.seed)
    e = grids["edges"]
    for cls in ("good", "bad"):
        g = grids[cls]
        rows = [[i, j, repr(float(e[i])), repr(float(e[j])), repr(float(g[i, j]))]
                for i in range(g.shape[0]) for j in range(g.shape[1])]
        _write_grid_csv(out / f"heatmap_{cls}.csv", head, ["bin_u", "bin_v", "u_lo", "v_lo", "mass"], rows)
    xs = np.linspace(a.x_min, a.x_max, a.grid)
    m = OracleModel(toy)
    p = oracle_pb(m, xs, spec)
    _write_grid_csv(out / "oracle_region.csv", f"{head} gamma={a.gamma:g}", ["x", "p_bad", "rejected"],
                    [[repr(float(x)), repr(float(v)), int(v > a.gamma)] for x, v in zip(xs, p)])
    roots = oracle_region_boundaries(m, spec, a.gamma, a.x_min, a.x_max)
    _write_grid_csv(out / "oracle_boundaries.csv", f"{head} gamma={a.gamma:g}", ["x"],
                    [[repr(float(r))] for r in roots])
    log.info("wrote heatmaps and oracle region to %s (%d good, %d bad rows)", out,
             int((~labels).sum()), int(labels.sum()))


# -- check ------------------------------------------------------------------------

def _grad_case(name, loss, n_out, act, rng):
    """A random net and batch away from ReLU kinks, with targets drawn so the
    loss stays well conditioned for central differences."""
    from .nn import DenseNet, gaussian_params, kink_margin, mixture_params

    n_in = (2 if name == "dv_separation" else 3) + (1 if loss.random_tau else 0)
    for _ in range(20):
        net = DenseNet.init((n_in, 8, 8, n_out), act, int(rng.integers(1 << 30)))
        for _ in range(50):
            X = rng.standard_normal((6, n_in))
            if loss.random_tau:
                X[:, -1] = rng.uniform(0.05, 0.95, 6)
            # the dv loss also evaluates the swapped pairs
            rows = np.vstack([X, X[:, ::-1]]) if name == "dv_separation" else X
            out = net.forward(X)
            # a tight predicted std makes curvature swamp the fixed 1e-5 step
            if loss.kind == "gaussian_nll":
                min_std = gaussian_params(out)[1].min()
            elif loss.kind == "mixture_nll":
                min_std = mixture_params(out, loss.n_modes, loss.positive_means)[2].min()
            else:
                min_std = np.inf
            if kink_margin(net, rows) > 1e-3 and min_std >= 0.05:
                break
        else:
            continue
        break
    else:
        raise RuntimeError(f"grad_check[{name}]: no well-conditioned case found")
    if name == "dv_separation":
        y = rng.choice([-1.0, 1.0], 6) / 6
    elif name.startswith("pinball"):
        # keep residuals away from the pinball kink
        y = out[:, 0] + np.where(rng.random(6) < 0.5, -1, 1) * rng.uniform(0.1, 1, 6)
    elif loss.kind == "gaussian_nll":
        mu, sigma = gaussian_params(out)
        y = mu + sigma * rng.standard_normal(6)
    elif loss.kind == "mixture_nll":
        _, mu, sigma = mixture_params(out, loss.n_modes, loss.positive_means)
        k = rng.integers(0, loss.n_modes, 6)
        y = mu[np.arange(6), k] + sigma[np.arange(6), k] * rng.standard_normal(6)
    else:
        y = rng.standard_normal(6)
    return net, X, y


def run_checks(seed: int = 0):
    """Gradient and invariant self-tests; returns ``[(name, ok, detail)]``."""
    from .metrics import auroc, fpr_at_tpr
    from .nn import DenseNet, LossSpec, grad_check
    from .detectors import estimate_diversity, h_p, symmetrize

    rng = np.random.default_rng(seed)
    results = []
    specs = [
        ("mse", LossSpec("mse"), 1, "identity"),
        ("pinball", LossSpec("pinball", tau=0.3), 1, "identity"),
        ("pinball-uniform", LossSpec("pinball", tau="uniform"), 1, "identity"),
        ("gaussian_nll", LossSpec("gaussian_nll"), 2, "identity"),
        ("mixture_nll", LossSpec("mixture_nll", n_modes=3), 9, "identity"),
        ("mixture_nll+", LossSpec("mixture_nll", n_modes=3, positive_means=True), 9, "identity"),
        ("dv_separation", LossSpec("dv_separation"), 1, "sigmoid"),
    ]
    for name, loss, n_out, act in specs:
        worst = 0.0
        for t in range(5):
            net, X, y = _grad_case(name, loss, n_out, act, rng)
            worst = max(worst, grad_check(net, loss, X, y))
        results.append((f"grad_check[{name}]", worst <= 1e-4, f"max rel err {worst:.2e}"))

    net = DenseNet.init((2, 8, 1), "sigmoid", seed)
    u, v = rng.exponential(size=100), rng.exponential(size=100)
    results.append(("symmetrize exact", bool(np.array_equal(symmetrize(net, u, v), symmetrize(net, v, u))), ""))

    n_u = 20000
    hval = estimate_diversity(h_p(1.0), lambda x, n, r: np.abs(r.standard_normal(n)), 0.0, n_u, seed)
    p = 2 * 0.15865525393145707
    se = np.sqrt(p * p * (1 - p * p) / n_u)
    results.append(("h_p diversity = P_B^2", abs(hval - p * p) <= 4 * se, f"H={hval:.4f} vs {p * p:.4f}"))

    ok = True
    for _ in range(100):
        n = int(rng.integers(2, 20))
        s = rng.integers(0, 5, n).astype(float)
        lab = rng.random(n) < 0.5
        if lab.all() or not lab.any():
            continue
        pos, neg = s[lab], s[~lab]
        brute = ((pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()) / (pos.size * neg.size)
        ok &= auroc(s, lab) == brute
        ok &= 0.0 <= fpr_at_tpr(s, lab) <= 1.0
    results.append(("auroc brute force", bool(ok), ""))
    return results


def cmd_check(a, h):
    results = run_checks(a.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
    failed = [r for r in results if not r[1]]
    if failed:
        raise RuntimeError(f"{len(failed)} self-check(s) failed")


# -- parser -----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="regdetect", description="Detect unreliable regression predictions.")
    p.add_argument("--version", action="version", version=f"regdetect {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a toy dataset as CSV")
    s.add_argument("--toy", default="cubic_bias", choices=sorted(TOY_PRESETS))
    s.add_argument("--param", action="append", metavar="KEY=VALUE", help="toy preset parameter")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fit regressor, estimators and optional DV functions into a bundle")
    s.add_argument("--data", required=True)
    s.add_argument("--target", default=None, help="target column name (default: last column)")
    s.add_argument("--estimators", default="cg", help="comma list of cg,sqr,mix")
    s.add_argument("--d-kinds", default="absolute", help="comma list of absolute,relative")
    s.add_argument("--dv-epsilons", default="", help="comma list of epsilons to train DV for")
    s.add_argument("--dv-epochs", type=int, default=None)
    s.add_argument("--conformal", action="store_true", help="hold out a calibration split for CF")
    s.add_argument("--calibration-fraction", type=float, default=0.2)
    s.add_argument("--epochs", type=int, default=None, help="override training epochs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="bundle JSON path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score a CSV with a trained bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--target", default=None)
    s.add_argument("--methods", default="B1-CG")
    s.add_argument("--epsilons", required=True)
    s.add_argument("--d-kinds", default="absolute")
    s.add_argument("--gamma", type=float, default=None, help="add a decision column (score > gamma)")
    s.add_argument("--n-u", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("bench", help="run a benchmark from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir", default=None)
    s.add_argument("--seeds", type=int, nargs="+", default=None)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("plotdata", help="export product-distribution heatmaps and the oracle region")
    s.add_argument("--toy", default="cubic_bias", choices=sorted(TOY_PRESETS))
    s.add_argument("--param", action="append", metavar="KEY=VALUE")
    s.add_argument("--source", default="oracle", choices=["oracle", "cg", "sqr", "mix"])
    s.add_argument("--epsilon", type=float, default=0.1)
    s.add_argument("--gamma", type=float, default=0.4)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--n-u", type=int, default=2000)
    s.add_argument("--bins", type=int, default=40)
    s.add_argument("--u-max", type=float, default=0.5)
    s.add_argument("--x-min", type=float, default=-3.0)
    s.add_argument("--x-max", type=float, default=3.0)
    s.add_argument("--grid", type=int, default=601)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plotdata)

    s = sub.add_parser("check", help="run gradient and invariant self-tests")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if a.verbose else logging.WARNING if a.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    h = args_hash(a)
    log.info("%s config_hash=%s seed=%s", a.command, h, getattr(a, "seed", None))
    try:
        a.func(a, h)
    except (UsageError, ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - top-level runtime failure
        log.debug("traceback", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
