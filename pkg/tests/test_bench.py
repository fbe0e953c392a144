import csv
import io
import json
import math

import numpy as np
import pytest

from regdetect.bench import (
    REPORT_VERSION,
    EvalReport,
    ReportRow,
    emit_report,
    parse_markdown_tables,
    run_benchmark,
    write_all,
)
from regdetect.config import ConfigError, config_from_dict, parse_config_text, parse_method, with_overrides

FAST_EST = {"cg": {"epochs": 8, "ensemble_size": 1, "lr_grid": [1e-2], "hidden": [16]},
            "sqr": {"epochs": 8, "lr_grid": [1e-3], "wd_grid": [0.0], "hidden": [16]}}


def toy_config(**over):
    d = {
        "datasets": [{"name": "toy", "toy": "cubic_bias", "n": 300}],
        "methods": ["oracle", "B1-CG"],
        "epsilons": [0.1, 0.2],
        "seeds": [0],
        "estimators": FAST_EST,
    }
    d.update(over)
    return config_from_dict(d)


@pytest.fixture(scope="module")
def toy_report():
    return run_benchmark(toy_config())


# -- config ----------------------------------------------------------------------

def test_parse_method():
    assert parse_method("oracle") == ("oracle", None)
    assert parse_method("DV-Y-SQR") == ("DV-Y", "sqr")
    assert parse_method("B2-MIX") == ("B2", "mix")
    with pytest.raises(ConfigError):
        parse_method("B3-CG")
    with pytest.raises(ConfigError):
        parse_method("B1-RF")


def test_config_errors_name_fields():
    base = {"datasets": [{"toy": "constant"}], "methods": ["oracle"], "epsilons": [0.1]}
    cases = [
        ({**base, "epsilons": [0.1, -1]}, r"epsilons\[1\]"),
        ({**base, "methods": []}, "methods"),
        ({**base, "seeds": []}, "seeds"),
        ({**base, "datasets": []}, "datasets"),
        ({**base, "datasets": [{"toy": "nope"}]}, r"datasets\[0\]\.toy"),
        ({**base, "datasets": [{"toy": "constant", "csv": "x.csv"}]}, "exactly one"),
        ({**base, "estimators": {"cg": {"epoch": 3}}}, r"estimators\.cg\.epoch"),
        ({**base, "gamma": 1.5}, "gamma"),
        ({**base, "bogus": 1}, "bogus"),
        ({k: v for k, v in base.items() if k != "epsilons"}, "epsilons"),
    ]
    for d, pat in cases:
        with pytest.raises(ConfigError, match=pat):
            config_from_dict(d)


def test_malformed_json_location():
    with pytest.raises(ConfigError, match="line 3, column"):
        parse_config_text('{\n "methods": ["oracle"],\n "epsilons": [0.1,,]\n}')


def test_hash_ignores_output_and_workers():
    a = toy_config()
    b = with_overrides(a, output_dir="elsewhere", workers=3)
    assert a.hash() == b.hash()
    assert toy_config(epsilons=[0.3]).hash() != a.hash()
    assert config_from_dict(json.loads(json.dumps(a.to_dict()))).hash() == a.hash()


def test_threads_env_caps_workers(monkeypatch):
    cfg = with_overrides(toy_config(), workers=8)
    monkeypatch.setenv("REGDETECT_THREADS", "2")
    assert cfg.effective_workers(10) == 2
    monkeypatch.delenv("REGDETECT_THREADS")
    assert cfg.effective_workers(3) == 3


# -- run_benchmark ---------------------------------------------------------------

def test_two_method_rows_per_epsilon(toy_report):
    for eps in (0.1, 0.2):
        rows = [r for r in toy_report.rows if r.epsilon == eps]
        assert [r.method for r in rows] == ["oracle", "B1-CG"]
    for r in toy_report.rows:
        assert not r.error
        assert 0 <= r.auroc <= 1 and 0 <= r.fpr_at_tpr90 <= 1 and 0 <= r.bad_fraction <= 1
    assert len(toy_report.aggregate()) == 4


def test_rerun_identical_bytes(toy_report, tmp_path):
    again = run_benchmark(toy_config())
    a = write_all(toy_report, tmp_path / "a")
    b = write_all(again, tmp_path / "b")
    for k in ("rows", "csv", "json", "markdown"):
        assert a[k].read_bytes() == b[k].read_bytes(), k


def test_parallel_matches_serial(toy_report, tmp_path):
    cfg = toy_config(seeds=[0, 1], workers=2)
    par = run_benchmark(cfg)
    ser = run_benchmark(with_overrides(cfg, workers=1))
    assert emit_report(par, tmp_path / "p.csv", "csv", "rows").read_bytes() == \
        emit_report(ser, tmp_path / "s.csv", "csv", "rows").read_bytes()


def test_huge_epsilon_single_class():
    rep = run_benchmark(toy_config(epsilons=[1e6]))
    assert all(r.error == "single-class" for r in rep.rows)
    assert all(r.bad_fraction == 0.0 for r in rep.rows)
    assert "single-class" in rep.aggregate()[0]["errors"]


def test_stage_failures_are_recorded(tmp_path):
    p = tmp_path / "d.csv"
    rng = np.random.default_rng(0)
    x = rng.normal(size=60)
    p.write_text("x,y\n" + "".join(f"{a},{2 * a + 0.1 * b}\n" for a, b in zip(x, rng.normal(size=60))))
    cfg = config_from_dict({
        "datasets": [{"name": "d", "csv": str(p)}, {"name": "missing", "csv": str(tmp_path / "nope.csv")}],
        "methods": ["oracle", "B1-CG"], "epsilons": [0.1],
        "regressor": {"epochs": 3, "lr_grid": [1e-2], "wd_grid": [0.0], "hidden": [8]},
        "estimators": FAST_EST,
    })
    rep = run_benchmark(cfg)
    by = {(r.dataset, r.method): r for r in rep.rows}
    assert "oracle needs a toy" in by[("d", "oracle")].error
    assert not by[("d", "B1-CG")].error
    assert by[("missing", "B1-CG")].error.startswith("data:")


def test_conformal_and_dv_methods_run():
    cfg = toy_config(methods=["CF-SQR", "DV-Y-CG", "HP-D-CG", "B2-CG"], epsilons=[0.1],
                     dv={"epochs": 1, "n_u": 50, "hidden": [8], "lattice": 9}, n_u_score=50)
    rep = run_benchmark(cfg)
    for r in rep.rows:
        assert not r.error, (r.method, r.error)


# -- emission --------------------------------------------------------------------

def _data_lines(path):
    return [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]


def test_empty_report_header_only(tmp_path):
    rep = EvalReport([], "abc")
    lines = _data_lines(emit_report(rep, tmp_path / "r.csv"))
    assert len(lines) == 1 and lines[0].startswith("dataset,")
    assert (tmp_path / "r.csv").read_text().startswith(f"# {REPORT_VERSION} config_hash=abc")
    assert len(_data_lines(emit_report(rep, tmp_path / "rows.csv", view="rows"))) == 1


def test_one_row_one_line(tmp_path):
    rep = EvalReport([ReportRow("toy", "absolute", 0.1, "oracle", 0, 0.8, 0.3, 0.2)], "abc", ("oracle",))
    lines = _data_lines(emit_report(rep, tmp_path / "r.csv"))
    assert len(lines) == 2
    row = next(csv.DictReader(io.StringIO("\n".join(lines))))
    assert row["auroc_mean"] == "0.800000" and row["n_seeds"] == "1"
    doc = json.loads(emit_report(rep, tmp_path / "r.json", "json").read_text())
    assert doc["version"] == REPORT_VERSION and len(doc["rows"]) == 1


def test_format_validation(tmp_path):
    with pytest.raises(ValueError):
        emit_report(EvalReport(), tmp_path / "x", "xlsx")


def _fixture_parse(text):
    """Independent reader: first markdown table after each heading."""
    tables = {}
    blocks = text.split("### ")[1:]
    for b in blocks:
        title, _, body = b.partition("\n")
        rows = [ln for ln in body.splitlines() if ln.startswith("|")]
        head = [c.strip() for c in rows[0].split("|")[2:-1]]
        tables[title] = {r.split("|")[1].strip(): dict(zip(head, (c.strip() for c in r.split("|")[2:-1])))
                         for r in rows[2:]}
    return tables


def test_markdown_round_trip(toy_report, tmp_path):
    text = emit_report(toy_report, tmp_path / "r.md", "markdown").read_text()
    assert text.startswith(f"<!-- {REPORT_VERSION} config_hash=")
    parsed = parse_markdown_tables(text)
    assert parsed == _fixture_parse(text)
    agg = {(a["method"], a["epsilon"]): a for a in toy_report.aggregate()}
    auc = next(v for k, v in parsed.items() if k.endswith("AUROC (x100, mean±std over seeds)"))
    for (m, e), a in agg.items():
        mean, std = auc[m][f"eps={e:g}"].split("±")
        assert float(mean) == pytest.approx(100 * a["auroc_mean"], abs=0.05)
        assert float(std) == pytest.approx(100 * a["auroc_std"], abs=0.05)
    assert set(auc) == {"oracle", "B1-CG", "% eps-bad"}


def test_aggregate_mean_std():
    rows = [ReportRow("d", "absolute", 0.1, "m", s, a, 0.1, 0.5) for s, a in enumerate((0.6, 0.8))]
    rows.append(ReportRow("d", "absolute", 0.1, "m", 2, error="boom"))
    a = EvalReport(rows, "h", ("m",)).aggregate()[0]
    assert a["n_seeds"] == 2
    assert a["auroc_mean"] == pytest.approx(0.7) and a["auroc_std"] == pytest.approx(0.1)
    assert a["errors"] == "boom"
    assert math.isclose(a["bad_fraction_mean"], 0.5)
