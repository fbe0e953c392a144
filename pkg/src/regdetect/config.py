"""Run configuration: a single JSON document with validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from .data import TOY_PRESETS
from .detectors import DVConfig
from .estimators import DEFAULT_CONFIGS, EstimatorConfig
from .nn import RegressorConfig

ESTIMATOR_TAGS = {"CG": "cg", "SQR": "sqr", "MIX": "mix"}
METHOD_FAMILIES = ("B1", "B2", "DV-Y", "DV-D", "HP-Y", "HP-D", "CF")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


def parse_method(name: str):
    """``"DV-Y-SQR"`` -> ``("DV-Y", "sqr")``; ``"oracle"`` -> ``("oracle", None)``."""
    if name == "oracle":
        return "oracle", None
    fam, _, tag = name.rpartition("-")
    if fam not in METHOD_FAMILIES or tag not in ESTIMATOR_TAGS:
        raise ConfigError(
            f"unknown method {name!r}; expected 'oracle' or <family>-<estimator> with family in "
            f"{list(METHOD_FAMILIES)} and estimator in {list(ESTIMATOR_TAGS)}"
        )
    return fam, ESTIMATOR_TAGS[tag]


@dataclass(frozen=True)
class DatasetSource:
    name: str
    csv: Optional[str] = None
    target: Optional[str] = None
    toy: Optional[str] = None
    n: int = 2000
    params: tuple = ()
    regressor: str = "train"

    @property
    def is_toy(self):
        return self.toy is not None

    def to_dict(self):
        d = {"name": self.name, "regressor": self.regressor}
        if self.is_toy:
            d.update(toy=self.toy, n=self.n, params=dict(self.params))
        else:
            d.update(csv=self.csv, target=self.target)
        return d


@dataclass(frozen=True)
class RunConfig:
    datasets: tuple
    methods: tuple
    epsilons: tuple
    seeds: tuple = (0,)
    d_kinds: tuple = ("absolute",)
    epsilon_scale: str = "raw"
    gamma: float = 0.4
    test_fraction: float = 0.2
    calibration_fraction: float = 0.2
    n_u_score: int = 2000
    regressor: RegressorConfig = RegressorConfig()
    estimators: tuple = tuple(sorted(DEFAULT_CONFIGS.items()))
    dv: DVConfig = DVConfig()
    output_dir: str = "regdetect-out"
    workers: int = 1

    def estimator_config(self, kind) -> EstimatorConfig:
        return dict(self.estimators)[kind]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "datasets": [d.to_dict() for d in self.datasets],
            "methods": list(self.methods),
            "epsilons": list(self.epsilons),
            "seeds": list(self.seeds),
            "d_kinds": list(self.d_kinds),
            "epsilon_scale": self.epsilon_scale,
            "gamma": self.gamma,
            "test_fraction": self.test_fraction,
            "calibration_fraction": self.calibration_fraction,
            "n_u_score": self.n_u_score,
            "regressor": {k: _plain(getattr(self.regressor, k)) for k in _names(RegressorConfig)},
            "estimators": {k: v.to_dict() for k, v in self.estimators},
            "dv": self.dv.to_dict(),
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    def hash(self) -> str:
        """Digest of everything that affects results (output location and
        worker count excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def effective_workers(self, n_cells: int) -> int:
        w = max(1, min(self.workers, n_cells))
        cap = os.environ.get("REGDETECT_THREADS")
        if cap:
            try:
                w = min(w, max(1, int(cap)))
            except ValueError:
                raise ConfigError(f"REGDETECT_THREADS must be an integer, got {cap!r}") from None
        return w


def _names(cls):
    return [f.name for f in fields(cls)]


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _tuple(v):
    return tuple(_tuple(x) for x in v) if isinstance(v, list) else v


def _overrides(cls, base, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = set(_names(cls))
    for k in d:
        if k not in known:
            raise ConfigError(f"{where}.{k}: unknown field (known: {sorted(known)})")
    try:
        return replace(base, **{k: _tuple(v) for k, v in d.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _need(d, key, where):
    if key not in d:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return d[key]


def _dataset(d, i, base_dir):
    where = f"datasets[{i}]"
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {"name", "csv", "target", "toy", "n", "params", "regressor"}
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{where}.{k}: unknown field")
    has_csv, has_toy = "csv" in d, "toy" in d
    if has_csv == has_toy:
        raise ConfigError(f"{where}: give exactly one of 'csv' or 'toy'")
    reg = d.get("regressor", "analytic" if has_toy else "train")
    if reg not in ("train", "analytic"):
        raise ConfigError(f"{where}.regressor: must be 'train' or 'analytic'")
    if has_toy:
        if d["toy"] not in TOY_PRESETS:
            raise ConfigError(f"{where}.toy: unknown preset {d['toy']!r}; choose from {sorted(TOY_PRESETS)}")
        n = d.get("n", 2000)
        if not isinstance(n, int) or n < 10:
            raise ConfigError(f"{where}.n: must be an integer >= 10")
        params = d.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError(f"{where}.params: expected an object")
        return DatasetSource(str(d.get("name", d["toy"])), toy=d["toy"], n=n,
                             params=tuple(sorted(params.items())), regressor=reg)
    if reg == "analytic":
        raise ConfigError(f"{where}.regressor: 'analytic' needs a toy dataset")
    path = Path(d["csv"])
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return DatasetSource(str(d.get("name", path.stem)), csv=str(path), target=d.get("target"),
                         regressor=reg)


def config_from_dict(d: dict, base_dir: Optional[Path] = None) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    known = set(_names(RunConfig))
    for k in d:
        if k not in known:
            raise ConfigError(f"{k}: unknown field (known: {sorted(known)})")

    ds = _need(d, "datasets", "config")
    if not isinstance(ds, list) or not ds:
        raise ConfigError("datasets: need at least one dataset")
    datasets = tuple(_dataset(x, i, base_dir) for i, x in enumerate(ds))
    names = [x.name for x in datasets]
    if len(set(names)) != len(names):
        raise ConfigError(f"datasets: names must be unique, got {names}")

    methods = _need(d, "methods", "config")
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods: need at least one method")
    for i, m in enumerate(methods):
        if not isinstance(m, str):
            raise ConfigError(f"methods[{i}]: expected a string")
        try:
            parse_method(m)
        except ConfigError as e:
            raise ConfigError(f"methods[{i}]: {e}") from None
    if len(set(methods)) != len(methods):
        raise ConfigError("methods: duplicates are not allowed")

    eps = _need(d, "epsilons", "config")
    if not isinstance(eps, list) or not eps:
        raise ConfigError("epsilons: need at least one value")
    for i, e in enumerate(eps):
        if isinstance(e, bool) or not isinstance(e, (int, float)) or not math.isfinite(e) or e <= 0:
            raise ConfigError(f"epsilons[{i}]: must be a finite number > 0, got {e!r}")

    out = {"datasets": datasets, "methods": tuple(methods), "epsilons": tuple(float(e) for e in eps)}

    seeds = d.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: need a non-empty list of non-negative integers")
    out["seeds"] = tuple(seeds)

    kinds = d.get("d_kinds", ["absolute"])
    if not isinstance(kinds, list) or not kinds or any(k not in ("absolute", "relative") for k in kinds):
        raise ConfigError("d_kinds: need a non-empty list drawn from 'absolute', 'relative'")
    out["d_kinds"] = tuple(kinds)

    scale = d.get("epsilon_scale", "raw")
    if scale not in ("raw", "target_std"):
        raise ConfigError("epsilon_scale: must be 'raw' or 'target_std'")
    out["epsilon_scale"] = scale

    for key, lo, hi in (("gamma", 0.0, 1.0), ("test_fraction", 0.0, 1.0), ("calibration_fraction", 0.0, 1.0)):
        if key in d:
            v = d[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not lo < v < hi:
                raise ConfigError(f"{key}: must be a number in ({lo:g}, {hi:g}), got {v!r}")
            out[key] = float(v)
    for key in ("n_u_score", "workers"):
        if key in d:
            v = d[key]
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{key}: must be an integer >= 1, got {v!r}")
            out[key] = v
    if "output_dir" in d:
        if not isinstance(d["output_dir"], str):
            raise ConfigError("output_dir: expected a string")
        out["output_dir"] = d["output_dir"]

    if "regressor" in d:
        out["regressor"] = _overrides(RegressorConfig, RegressorConfig(), d["regressor"], "regressor")
    est = dict(DEFAULT_CONFIGS)
    if "estimators" in d:
        if not isinstance(d["estimators"], dict):
            raise ConfigError("estimators: expected an object keyed by cg/sqr/mix")
        for k, v in d["estimators"].items():
            if k not in est:
                raise ConfigError(f"estimators.{k}: unknown estimator (known: {sorted(est)})")
            est[k] = _overrides(EstimatorConfig, est[k], v, f"estimators.{k}")
    out["estimators"] = tuple(sorted(est.items()))
    if "dv" in d:
        out["dv"] = _overrides(DVConfig, DVConfig(), d["dv"], "dv")
    return RunConfig(**out)


def parse_config_text(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return config_from_dict(d, base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        return parse_config_text(text, path.parent)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Apply command-line overrides (flags beat the file); ``None`` values are ignored."""
    d = copy.deepcopy(cfg.to_dict())
    for k, v in kw.items():
        if v is not None:
            d[k] = list(v) if isinstance(v, tuple) else v
    return config_from_dict(d)
