"""Dataset containers, CSV ingestion, splitting, standardization and toy data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Feature matrix ``(n, K)`` plus a scalar target per row."""

    features: np.ndarray
    targets: np.ndarray
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be a non-empty 2-D matrix, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise DataError(f"{y.shape[0]} targets for {X.shape[0]} feature rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains NaN or infinite entries")
        names = self.feature_names
        if names is not None:
            names = tuple(str(s) for s in names)
            if len(names) != X.shape[1]:
                raise DataError(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "targets", _frozen(y))
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.targets[idx], self.feature_names)

    def __len__(self):
        return self.n


def load_csv(path: Union[str, Path], target_column: Union[str, int, None] = None) -> Dataset:
    """Read a numeric CSV with a header row; lines starting with ``#`` are skipped.

    ``target_column`` is a header name or a column index; the last column is
    the target when it is omitted.  Every other column becomes a feature.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        lines = [(i, ln) for i, ln in enumerate(fh, start=1) if not ln.startswith("#")]
    rows = list(csv.reader(ln for _, ln in lines))
    line_no = [i for i, _ in lines]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise DataError(f"{path}: need at least one feature and one target column")

    if target_column is None:
        t = len(header) - 1
    elif isinstance(target_column, int):
        t = target_column if target_column >= 0 else len(header) + target_column
        if not 0 <= t < len(header):
            raise DataError(f"{path}: target column index {target_column} out of range")
    else:
        if target_column not in header:
            raise DataError(f"{path}: no column named {target_column!r}")
        t = header.index(target_column)

    values = []
    for k, row in enumerate(rows[1:], start=1):
        r = line_no[k]
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: line {r} has {len(row)} cells, header has {len(header)}")
        parsed = []
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: line {r}, column {header[c]!r}: cannot parse {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: line {r}, column {header[c]!r}: non-finite value {cell!r}")
            parsed.append(v)
        values.append(parsed)
    if not values:
        raise DataError(f"{path}: no data rows")

    table = np.array(values)
    feat_cols = [c for c in range(len(header)) if c != t]
    return Dataset(table[:, feat_cols], table[:, t], tuple(header[c] for c in feat_cols))


def write_csv(ds: Dataset, path: Union[str, Path], target_name: str = "y", comment: str = None):
    names = ds.feature_names or tuple(f"x{i}" for i in range(ds.n_features))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names) + [target_name])
        for xr, yr in zip(ds.features, ds.targets):
            w.writerow([repr(float(v)) for v in xr] + [repr(float(yr))])


def split_dataset(ds: Dataset, test_fraction: float, seed: int):
    """Seeded random train/test partition of the rows."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(math.floor(ds.n * test_fraction + 0.5))
    n_train = ds.n - n_test
    if n_test < 1 or n_train < 1:
        raise DataError(
            f"cannot split {ds.n} rows with test_fraction={test_fraction}: "
            f"{n_train} train / {n_test} test"
        )
    perm = np.random.default_rng(seed).permutation(ds.n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.subset(train_idx), ds.subset(test_idx)


@dataclass(frozen=True)
class Standardizer:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float

    def forward_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.feature_mean) / self.feature_std

    def inverse_x(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.feature_std + self.feature_mean

    def forward_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def inverse_y(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_std + self.target_mean

    def to_dict(self):
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            _frozen(d["feature_mean"]),
            _frozen(d["feature_std"]),
            float(d["target_mean"]),
            float(d["target_std"]),
        )


def fit_standardizer(ds: Dataset, allow_constant_target: bool = False) -> Standardizer:
    """Column means and unbiased (n-1) standard deviations.

    With ``allow_constant_target`` a zero-variance target gets scale 1
    instead of raising.
    """
    if ds.n < 2:
        raise DataError("standardizer needs at least 2 rows")
    fm = ds.features.mean(axis=0)
    fs = ds.features.std(axis=0, ddof=1)
    tm = float(ds.targets.mean())
    ts = float(ds.targets.std(ddof=1))
    bad = [i for i, s in enumerate(fs) if not s > 0]
    if bad:
        names = ds.feature_names or tuple(f"x{i}" for i in range(ds.n_features))
        raise DataError(f"zero-variance feature column(s): {[names[i] for i in bad]}")
    if not ts > 0:
        if not allow_constant_target:
            raise DataError("zero-variance target column")
        ts = 1.0
    return Standardizer(_frozen(fm), _frozen(fs), tm, ts)


def apply_standardizer(s: Standardizer, ds: Dataset, direction: str = "forward") -> Dataset:
    if direction == "forward":
        return Dataset(s.forward_x(ds.features), s.forward_y(ds.targets), ds.feature_names)
    if direction == "inverse":
        return Dataset(s.inverse_x(ds.features), s.inverse_y(ds.targets), ds.feature_names)
    raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")


def _standard_normal_inputs(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.standard_normal(n)


@dataclass(frozen=True)
class ToySpec:
    """Additive Gaussian noise model ``y = phi(x) + sigma(x) z`` on scalar x.

    ``bias`` is the regressor's bias ``phi(x) - f(x)``; all callables act
    elementwise on 1-D arrays.
    """

    phi: Callable[[np.ndarray], np.ndarray]
    bias: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    x_dist: Callable[[np.random.Generator, int], np.ndarray] = _standard_normal_inputs
    name: str = "toy"

    def regressor(self, X) -> np.ndarray:
        x = _as_scalar_input(X)
        return self.phi(x) - self.bias(x)


def _as_scalar_input(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise DataError(f"toy models take one feature, got {X.shape[1]}")
        return X[:, 0]
    return X.reshape(-1)


class ToyRegressor:
    """The analytic regressor ``f = phi - bias`` implied by a ToySpec."""

    def __init__(self, spec: ToySpec):
        self.spec = spec

    def __call__(self, X):
        return self.spec.regressor(X)

    predict = __call__


def generate_toy(spec: ToySpec, n: int, seed: int):
    """Draw ``n`` rows from the toy model; returns ``(Dataset, regressor)``."""
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = np.asarray(spec.x_dist(rng, n), dtype=np.float64).reshape(-1)
    z = rng.standard_normal(n)
    s = np.broadcast_to(np.asarray(spec.sigma(x), dtype=np.float64), x.shape)
    if not np.all(s > 0):
        i = int(np.argmin(s))
        raise DataError(f"sigma(x) must be positive; sigma({x[i]!r}) = {s[i]!r}")
    y = spec.phi(x) + s * z
    return Dataset(x[:, None], y, ("x",)), ToyRegressor(spec)


# -- presets -----------------------------------------------------------------

def _cubic_bias(x):
    return 0.1 * (x - 0.2) ** 3


def _cubic_sigma(x):
    return 0.05 * (1.0 + (x + 0.2) ** 2)


def _cubic_phi(x):
    # regressor f(x) = x, so phi = f + bias
    return x + _cubic_bias(x)


def cubic_bias_toy() -> ToySpec:
    """Heteroscedastic cubic-bias example with identity regressor."""
    return ToySpec(_cubic_phi, _cubic_bias, _cubic_sigma, name="cubic_bias")


def constant_toy(sigma: float = 1.0, phi: float = 0.0, bias: float = 0.0) -> ToySpec:
    return ToySpec(
        lambda x: np.full_like(x, phi),
        lambda x: np.full_like(x, bias),
        lambda x: np.full_like(x, sigma),
        name="constant",
    )


TOY_PRESETS = {
    "cubic_bias": cubic_bias_toy,
    "constant": constant_toy,
}


def toy_from_config(name: str, **params) -> ToySpec:
    try:
        factory = TOY_PRESETS[name]
    except KeyError:
        raise DataError(f"unknown toy preset {name!r}; choose from {sorted(TOY_PRESETS)}") from None
    return factory(**params)
