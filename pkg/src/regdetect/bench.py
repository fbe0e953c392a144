"""Benchmark runner and report emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .config import RunConfig, parse_method
from .data import generate_toy, load_csv, split_dataset, toy_from_config
from .detectors import (
    DiscrepancySpec,
    OracleModel,
    bad_labels,
    dv_score,
    fit_conformal,
    hp_score,
    oracle_pb,
    pb_baseline_d,
    pb_baseline_y,
    train_dv,
)
from .estimators import fit_discrepancy_estimator, fit_estimator
from .metrics import SingleClassError, auroc, fpr_at_tpr
from .nn import _derived_seed, train_regressor

log = logging.getLogger(__name__)

REPORT_VERSION = "regdetect-report-v1"
_EST_IDS = {"cg": 0, "sqr": 1, "mix": 2}
ROW_FIELDS = ("dataset", "d_kind", "epsilon", "method", "seed", "auroc", "fpr_at_tpr90", "bad_fraction", "error")
AGG_FIELDS = ("dataset", "d_kind", "epsilon", "method", "n_seeds", "auroc_mean", "auroc_std",
              "fpr_mean", "fpr_std", "bad_fraction_mean", "errors")


@dataclass
class ReportRow:
    dataset: str
    d_kind: str
    epsilon: float
    method: str
    seed: int
    auroc: float = math.nan
    fpr_at_tpr90: float = math.nan
    bad_fraction: float = math.nan
    error: str = ""
    wallclock: float = 0.0


@dataclass
class EvalReport:
    rows: List[ReportRow] = field(default_factory=list)
    config_hash: str = ""
    method_order: tuple = ()
    epsilon_order: tuple = ()

    def aggregate(self) -> List[dict]:
        """Mean and population std over seeds per (dataset, d_kind, epsilon, method)."""
        groups: Dict[tuple, List[ReportRow]] = {}
        for r in self.rows:
            groups.setdefault((r.dataset, r.d_kind, r.epsilon, r.method), []).append(r)
        out = []
        for key in sorted(groups, key=self._key):
            rs = groups[key]
            ok = [r for r in rs if not r.error]
            a = np.array([r.auroc for r in ok])
            fp = np.array([r.fpr_at_tpr90 for r in ok])
            bf = np.array([r.bad_fraction for r in rs if math.isfinite(r.bad_fraction)])
            errs = sorted({r.error for r in rs if r.error})
            out.append({
                "dataset": key[0], "d_kind": key[1], "epsilon": key[2], "method": key[3],
                "n_seeds": len(ok),
                "auroc_mean": float(a.mean()) if a.size else math.nan,
                "auroc_std": float(a.std()) if a.size else math.nan,
                "fpr_mean": float(fp.mean()) if fp.size else math.nan,
                "fpr_std": float(fp.std()) if fp.size else math.nan,
                "bad_fraction_mean": float(bf.mean()) if bf.size else math.nan,
                "errors": "; ".join(errs),
            })
        return out

    def _key(self, k):
        mo = {m: i for i, m in enumerate(self.method_order)}
        return (k[0], k[1], k[2], mo.get(k[3], len(mo)), k[3])


# -- one (dataset, seed) cell ----------------------------------------------------

def _load_source(src, seed):
    if src.is_toy:
        toy = toy_from_config(src.toy, **dict(src.params))
        ds, reg = generate_toy(toy, src.n, _derived_seed(seed, 11))
        return ds, toy, reg
    return load_csv(src.csv, src.target), None, None


def _short(e: Exception) -> str:
    msg = str(e).splitlines()[0] if str(e) else type(e).__name__
    return f"{type(e).__name__}: {msg}"[:200]


class _Lazy:
    """Memoizes fitted artifacts; a failure is cached and re-raised."""

    def __init__(self):
        self.store = {}

    def get(self, key, fn):
        if key not in self.store:
            try:
                self.store[key] = (True, fn())
            except Exception as e:  # noqa: BLE001 - recorded per cell
                log.warning("%s failed: %s", key, _short(e))
                self.store[key] = (False, e)
        ok, v = self.store[key]
        if not ok:
            raise v
        return v


def run_cell(cfg: RunConfig, di: int, seed: int) -> List[ReportRow]:
    src = cfg.datasets[di]
    rows: List[ReportRow] = []
    methods = [(m, *parse_method(m)) for m in cfg.methods]

    def fail_all(msg):
        for kind in cfg.d_kinds:
            for eps in cfg.epsilons:
                for m, _, _ in methods:
                    rows.append(ReportRow(src.name, kind, eps, m, seed, error=msg))
        return rows

    try:
        ds, toy, toy_reg = _load_source(src, seed)
        train, test = split_dataset(ds, cfg.test_fraction, _derived_seed(seed, 12))
    except Exception as e:  # noqa: BLE001
        return fail_all("data: " + _short(e))

    need_cf = any(fam == "CF" for _, fam, _ in methods)
    if need_cf:
        try:
            fit_part, calib = split_dataset(train, cfg.calibration_fraction, _derived_seed(seed, 13))
        except Exception as e:  # noqa: BLE001
            return fail_all("calibration split: " + _short(e))
    else:
        fit_part, calib = train, None

    cache = _Lazy()
    t0 = time.perf_counter()
    try:
        if src.regressor == "analytic":
            f = toy_reg
        else:
            f = train_regressor(train, cfg.regressor, _derived_seed(seed, 14))
    except Exception as e:  # noqa: BLE001
        return fail_all("regressor: " + _short(e))
    log.info("[%s seed=%d] regressor ready (%.1fs)", src.name, seed, time.perf_counter() - t0)

    y_est = lambda k: cache.get(("Y", k), lambda: fit_estimator(  # noqa: E731
        k, fit_part, cfg.estimator_config(k), _derived_seed(seed, 15, _EST_IDS[k])))
    d_est = lambda k, kind: cache.get(("D", k, kind), lambda: fit_discrepancy_estimator(  # noqa: E731
        fit_part, f, kind, cfg.estimator_config(k), k, _derived_seed(seed, 16, _EST_IDS[k])))
    calib_of = lambda k: cache.get(("CF", k), lambda: fit_conformal(y_est(k), calib))  # noqa: E731

    target_std = float(np.std(train.targets, ddof=1)) if train.n > 1 else 1.0
    Xte, yte = test.features, test.targets
    for ki, kind in enumerate(cfg.d_kinds):
        for ei, eps_cfg in enumerate(cfg.epsilons):
            eps = eps_cfg * target_std if (cfg.epsilon_scale == "target_std" and kind == "absolute") else eps_cfg
            try:
                spec = DiscrepancySpec(kind, eps)
                labels = bad_labels(yte, f(Xte), spec)
                bad_frac = float(labels.mean())
            except Exception as e:  # noqa: BLE001
                for m, _, _ in methods:
                    rows.append(ReportRow(src.name, kind, eps_cfg, m, seed, error="labels: " + _short(e)))
                continue
            for mi, (m, fam, ek) in enumerate(methods):
                row = ReportRow(src.name, kind, eps_cfg, m, seed, bad_fraction=bad_frac)
                t = time.perf_counter()
                sseed = _derived_seed(seed, 17, ki, ei, mi)
                try:
                    if fam == "oracle":
                        if toy is None:
                            raise ValueError("oracle needs a toy dataset")
                        if src.regressor != "analytic":
                            raise ValueError("oracle needs the analytic regressor")
                        s = oracle_pb(OracleModel(toy, f), Xte, spec)
                    elif fam == "B1":
                        s = pb_baseline_y(y_est(ek), f, Xte, spec)
                    elif fam == "B2":
                        s = pb_baseline_d(d_est(ek, kind), Xte, spec)
                    elif fam in ("DV-Y", "DV-D"):
                        v = fam[-1]
                        est = y_est(ek) if v == "Y" else d_est(ek, kind)
                        h = train_dv(est, f, fit_part, spec, v, cfg.dv, _derived_seed(seed, 18, ki, ei, mi))
                        s = dv_score(h, est, f, Xte, spec, v, cfg.n_u_score, sseed)
                    elif fam in ("HP-Y", "HP-D"):
                        v = fam[-1]
                        est = y_est(ek) if v == "Y" else d_est(ek, kind)
                        s = hp_score(est, f, Xte, spec, v, cfg.n_u_score, sseed)
                    elif fam == "CF":
                        s = calib_of(ek).score(f, Xte, spec)
                    else:  # pragma: no cover - parse_method guards this
                        raise ValueError(f"unhandled method {m}")
                    if not np.all(np.isfinite(s)):
                        raise ValueError("non-finite scores")
                    row.auroc = auroc(s, labels)
                    row.fpr_at_tpr90 = fpr_at_tpr(s, labels, 0.9)
                except SingleClassError:
                    row.error = "single-class"
                except Exception as e:  # noqa: BLE001
                    row.error = _short(e)
                row.wallclock = time.perf_counter() - t
                rows.append(row)
                log.info("[%s seed=%d %s eps=%g] %s auroc=%.4f%s", src.name, seed, kind, eps_cfg, m,
                         row.auroc, f" ({row.error})" if row.error else "")
    return rows


def run_benchmark(cfg: RunConfig) -> EvalReport:
    """Run every (dataset, seed) cell; results merge in config order."""
    cells = [(di, s) for di in range(len(cfg.datasets)) for s in cfg.seeds]
    workers = cfg.effective_workers(len(cells))
    if workers == 1:
        results = [run_cell(cfg, di, s) for di, s in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(run_cell, cfg, di, s) for di, s in cells]
            results = [fu.result() for fu in futs]
    rows = [r for rs in results for r in rs]
    return EvalReport(rows, cfg.hash(), tuple(cfg.methods), tuple(cfg.epsilons))


# -- emission ----------------------------------------------------------------------

def _num(v, digits=6):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def _header(report):
    return f"{REPORT_VERSION} config_hash={report.config_hash}"


def _csv_text(report, view):
    buf = io.StringIO()
    buf.write(f"# {_header(report)}\n")
    w = csv.writer(buf, lineterminator="\n")
    if view == "rows":
        w.writerow(ROW_FIELDS)
        for r in report.rows:
            w.writerow([r.dataset, r.d_kind, repr(r.epsilon), r.method, r.seed, _num(r.auroc),
                        _num(r.fpr_at_tpr90), _num(r.bad_fraction), r.error])
    else:
        w.writerow(AGG_FIELDS)
        for a in report.aggregate():
            w.writerow([a["dataset"], a["d_kind"], repr(a["epsilon"]), a["method"], a["n_seeds"],
                        _num(a["auroc_mean"]), _num(a["auroc_std"]), _num(a["fpr_mean"]),
                        _num(a["fpr_std"]), _num(a["bad_fraction_mean"]), a["errors"]])
    return buf.getvalue()


def _clean(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def _json_text(report):
    doc = {
        "version": REPORT_VERSION,
        "config_hash": report.config_hash,
        "rows": [{k: _clean(getattr(r, k)) for k in ROW_FIELDS} for r in report.rows],
        "aggregate": [{k: _clean(v) for k, v in a.items()} for a in report.aggregate()],
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _cell(mean, std):
    if mean is None or math.isnan(mean):
        return "n/a"
    return f"{100 * mean:.1f}±{100 * std:.1f}"


def _markdown_text(report):
    agg = report.aggregate()
    lines = [f"<!-- {_header(report)} -->", ""]
    blocks: Dict[tuple, List[dict]] = {}
    for a in agg:
        blocks.setdefault((a["dataset"], a["d_kind"]), []).append(a)
    for (dsname, kind), items in blocks.items():
        eps = sorted({a["epsilon"] for a in items}, key=lambda e: (report.epsilon_order.index(e)
                     if e in report.epsilon_order else len(report.epsilon_order), e))
        methods = []
        for a in items:
            if a["method"] not in methods:
                methods.append(a["method"])
        by = {(a["method"], a["epsilon"]): a for a in items}
        for title, mk, sk in (("AUROC", "auroc_mean", "auroc_std"), ("FPR at TPR 90%", "fpr_mean", "fpr_std")):
            lines.append(f"### {dsname} / {kind} / {title} (x100, mean±std over seeds)")
            lines.append("")
            lines.append("| method | " + " | ".join(f"eps={e:g}" for e in eps) + " |")
            lines.append("|---|" + "---|" * len(eps))
            for m in methods:
                cells = []
                for e in eps:
                    a = by.get((m, e))
                    cells.append(_cell(a[mk], a[sk]) if a else "n/a")
                lines.append(f"| {m} | " + " | ".join(cells) + " |")
            bad = []
            for e in eps:
                vals = [by[(m, e)]["bad_fraction_mean"] for m in methods if (m, e) in by]
                vals = [v for v in vals if not math.isnan(v)]
                bad.append(f"{100 * vals[0]:.1f}" if vals else "n/a")
            lines.append("| % eps-bad | " + " | ".join(bad) + " |")
            lines.append("")
        notes = [(a["method"], a["epsilon"], a["errors"]) for a in items if a["errors"]]
        if notes:
            lines.append("Errors:")
            lines.append("")
            for m, e, err in notes:
                lines.append(f"- {m} eps={e:g}: {err}")
            lines.append("")
    return "\n".join(lines)


FORMATS = ("csv", "json", "markdown")


def emit_report(report: EvalReport, path, fmt: str = "csv", view: str = "aggregate") -> Path:
    """Write the report; ``view`` selects aggregated or per-seed rows for CSV."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    if view not in ("aggregate", "rows"):
        raise ValueError("view must be 'aggregate' or 'rows'")
    if fmt == "csv":
        text = _csv_text(report, view)
    elif fmt == "json":
        text = _json_text(report)
    else:
        text = _markdown_text(report)
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path


def emit_timings(report: EvalReport, path) -> Path:
    """Wallclock per row; kept apart so the reports stay byte-stable."""
    buf = io.StringIO()
    buf.write(f"# {_header(report)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "d_kind", "epsilon", "method", "seed", "seconds"])
    for r in report.rows:
        w.writerow([r.dataset, r.d_kind, repr(r.epsilon), r.method, r.seed, f"{r.wallclock:.3f}"])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def write_all(report: EvalReport, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {
        "rows": emit_report(report, out / "report_rows.csv", "csv", "rows"),
        "csv": emit_report(report, out / "report.csv", "csv"),
        "json": emit_report(report, out / "report.json", "json"),
        "markdown": emit_report(report, out / "report.md", "markdown"),
        "timings": emit_timings(report, out / "timings.csv"),
    }


def parse_markdown_tables(text: str) -> Dict[str, Dict[str, Dict[str, str]]]:
    """Inverse of the markdown layout: ``{title: {method: {column: cell}}}``."""
    out, title, cols = {}, None, None
    for line in text.splitlines():
        if line.startswith("### "):
            title, cols = line[4:], None
            out[title] = {}
        elif line.startswith("|") and title is not None:
            cells = [c.strip() for c in line.strip().strip("|").split("|")]
            if cols is None:
                cols = cells[1:]
            elif set(line.replace("|", "")) <= {"-"}:
                continue
            else:
                out[title][cells[0]] = dict(zip(cols, cells[1:]))
    return out
