"""Small dense ReLU networks with hand-written backprop and Adam.

Every network in the package (regressor, conditional estimators, the
diversity function) is a :class:`DenseNet`.  Losses return the gradient with
respect to the network output; :func:`loss_and_grads` chains it through the
layers.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

NET_VERSION = "regdetect-net-v1"
STD_FLOOR = 1e-4
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softplus")
LOSS_KINDS = ("mse", "pinball", "gaussian_nll", "mixture_nll", "dv_separation")
_LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


def softplus(z):
    return np.logaddexp(0.0, z)


@dataclass
class DenseNet:
    layer_dims: tuple
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    output_activation: str = "identity"
    hidden_activation: str = "relu"
    history: list = field(default_factory=list, compare=False, repr=False)
    config: Optional[dict] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"invalid layer dims {self.layer_dims}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation != "relu":
            raise ValueError("only ReLU hidden layers are supported")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of weight/bias arrays does not match layer dims")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {i}: weight {W.shape} / bias {b.shape}, expected {shape}")

    @classmethod
    def init(cls, layer_dims: Sequence[int], output_activation="identity", seed=0) -> "DenseNet":
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        Ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            lim = math.sqrt(6.0 / fan_in)
            Ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(tuple(layer_dims), Ws, bs, output_activation)

    @property
    def n_inputs(self):
        return self.layer_dims[0]

    @property
    def n_outputs(self):
        return self.layer_dims[-1]

    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "DenseNet":
        return copy.deepcopy(self)

    def _check_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None] if self.n_inputs == 1 else X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ValueError(f"expected input with {self.n_inputs} columns, got shape {X.shape}")
        return X

    def forward(self, X) -> np.ndarray:
        a = self._check_input(X)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            a = np.maximum(z, 0.0) if i < last else _output(z, self.output_activation)
        return a

    __call__ = forward

    def forward_cache(self, X):
        a = self._check_input(X)
        inputs, preacts = [], []
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ W + b
            preacts.append(z)
            a = np.maximum(z, 0.0) if i < last else _output(z, self.output_activation)
        return a, (inputs, preacts, a)

    def backward(self, cache, dout) -> List[np.ndarray]:
        """Gradients ``[dW0, db0, dW1, ...]`` given dLoss/dOutput."""
        inputs, preacts, out = cache
        act = self.output_activation
        if act == "identity":
            dz = dout
        elif act == "sigmoid":
            dz = dout * out * (1.0 - out)
        else:
            dz = dout * expit(preacts[-1])
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = inputs[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            if i:
                dz = (dz @ self.weights[i].T) * (preacts[i - 1] > 0)
        return grads

    def to_dict(self) -> dict:
        return {
            "version": NET_VERSION,
            "layer_dims": list(self.layer_dims),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        if d.get("version") != NET_VERSION:
            raise ValueError(f"unsupported network document version {d.get('version')!r}")
        net = cls(
            tuple(d["layer_dims"]),
            [np.array(W, dtype=np.float64).reshape(a, b) for W, a, b in
             zip(d["weights"], d["layer_dims"][:-1], d["layer_dims"][1:])],
            [np.array(b, dtype=np.float64) for b in d["biases"]],
            d["output_activation"],
            d.get("hidden_activation", "relu"),
        )
        net.config = d.get("config")
        return net


def _output(z, act):
    if act == "identity":
        return z
    if act == "sigmoid":
        return expit(z)
    return softplus(z)


def forward(net: DenseNet, inputs) -> np.ndarray:
    return net.forward(inputs)


def kink_margin(net: DenseNet, X) -> float:
    """Smallest |pre-activation| over hidden ReLU units; finite differences
    with a step well below this margin never cross a kink."""
    _, (_, preacts, _) = net.forward_cache(X)
    if len(preacts) == 1:
        return math.inf
    return float(min(np.abs(z).min() for z in preacts[:-1]))


# -- losses ------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """Loss selector.

    ``tau`` (pinball only) is a fixed level in (0, 1) or ``"uniform"``: the
    level is then read from the last input column and redrawn per example
    during training.  ``n_modes`` configures ``mixture_nll``;
    ``positive_means`` passes mixture means through softplus.
    """

    kind: str
    tau: object = None
    n_modes: int = 1
    positive_means: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "pinball":
            if self.tau != "uniform" and not (isinstance(self.tau, (int, float)) and 0 < self.tau < 1):
                raise ValueError(f"pinball loss needs tau in (0,1) or 'uniform', got {self.tau!r}")
        if self.kind == "mixture_nll" and self.n_modes < 1:
            raise ValueError("mixture_nll needs n_modes >= 1")

    @property
    def random_tau(self):
        return self.kind == "pinball" and self.tau == "uniform"


def pinball(u, tau):
    """rho_tau(u) = u (tau - 1{u < 0})."""
    return u * (tau - (u < 0))


def gaussian_params(out):
    mu = out[:, 0]
    sigma = softplus(out[:, 1]) + STD_FLOOR
    return mu, sigma


def mixture_params(out, n_modes, positive_means=False):
    """Split raw outputs into (log-weights, means, stds), each ``(n, M)``."""
    M = n_modes
    logits = out[:, :M]
    logw = logits - logsumexp(logits, axis=1, keepdims=True)
    mu = out[:, M:2 * M]
    if positive_means:
        mu = softplus(mu)
    sigma = softplus(out[:, 2 * M:3 * M]) + STD_FLOOR
    return logw, mu, sigma


def loss_value_and_dout(loss: LossSpec, out, y, X):
    """Mean loss over rows and its gradient w.r.t. the network output."""
    n = out.shape[0]
    k = loss.kind
    if k == "mse":
        r = out - y.reshape(out.shape)
        return float(np.mean(r ** 2)), 2.0 * r / r.size
    if k == "pinball":
        tau = X[:, -1] if loss.random_tau else loss.tau
        u = y - out[:, 0]
        val = float(np.mean(pinball(u, tau)))
        d = np.zeros_like(out)
        d[:, 0] = -(tau - (u < 0)) / n
        return val, d
    if k == "gaussian_nll":
        mu, sigma = gaussian_params(out)
        r = y - mu
        val = float(np.mean(0.5 * _LOG_2PI + np.log(sigma) + 0.5 * (r / sigma) ** 2))
        d = np.empty_like(out)
        d[:, 0] = -r / sigma ** 2 / n
        d[:, 1] = (1.0 / sigma - r ** 2 / sigma ** 3) * expit(out[:, 1]) / n
        return val, d
    if k == "mixture_nll":
        M = loss.n_modes
        logw, mu, sigma = mixture_params(out, M, loss.positive_means)
        r = y[:, None] - mu
        comp = logw - 0.5 * _LOG_2PI - np.log(sigma) - 0.5 * (r / sigma) ** 2
        lp = logsumexp(comp, axis=1)
        val = float(-np.mean(lp))
        resp = np.exp(comp - lp[:, None])
        w = np.exp(logw)
        d = np.empty_like(out)
        d[:, :M] = -(resp - w) / n
        dmu = -resp * r / sigma ** 2 / n
        if loss.positive_means:
            dmu = dmu * expit(out[:, M:2 * M])
        d[:, M:2 * M] = dmu
        d[:, 2 * M:] = -resp * (r ** 2 / sigma ** 3 - 1.0 / sigma) * expit(out[:, 2 * M:]) / n
        return val, d
    raise ValueError(f"loss {k!r} is not a per-output loss")


def loss_and_grads(net: DenseNet, loss: LossSpec, X, y):
    """Return ``(loss value, parameter gradients)``.

    For ``dv_separation`` the rows of ``X`` are pairs ``(u, v)`` and ``y``
    holds one weight per pair; the loss is the weighted sum of the
    symmetrized network output ``(h(u, v) + h(v, u)) / 2``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if loss.kind == "dv_separation":
        m = X.shape[0]
        out, cache = net.forward_cache(np.vstack([X, X[:, ::-1]]))
        hs = 0.5 * (out[:m, 0] + out[m:, 0])
        val = float(np.dot(y, hs))
        dout = 0.5 * np.concatenate([y, y])[:, None]
        return val, net.backward(cache, dout)
    out, cache = net.forward_cache(X)
    val, dout = loss_value_and_dout(loss, out, y, X)
    return val, net.backward(cache, dout)


def loss_value(net: DenseNet, loss: LossSpec, X, y) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if loss.kind == "dv_separation":
        m = X.shape[0]
        out = net.forward(np.vstack([X, X[:, ::-1]]))
        return float(np.dot(y, 0.5 * (out[:m, 0] + out[m:, 0])))
    out = net.forward(X)
    return loss_value_and_dout(loss, out, y, X)[0]


# -- optimisation -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Adam:
    """Adam with decoupled weight decay on weight matrices.

    Updates the arrays passed at construction in place.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.ndim == 2:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _with_tau(X, rng):
    return np.hstack([X, rng.random((X.shape[0], 1))])


def train_network(net: DenseNet, X, y, loss: LossSpec, cfg: TrainConfig) -> DenseNet:
    """Minibatch Adam training on a copy of ``net``.

    The per-epoch mean training loss is stored in ``history`` of the returned
    network.  With ``loss.random_tau`` a fresh uniform level is appended to
    every example's input on every step.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty training data")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs for {y.shape[0]} targets")
    net = net.copy()
    net.history = []
    net.config = cfg.to_dict()
    opt = Adam(net.params(), cfg.learning_rate, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            xb = X[idx]
            if loss.random_tau:
                xb = _with_tau(xb, rng)
            val, grads = loss_and_grads(net, loss, xb, y[idx])
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss {val} at epoch {epoch}, batch {bi}")
            opt.step(grads)
            total += val * len(idx)
        net.history.append(total / n)
    return net


def _finite_difference_check(params, value_fn, analytic, step, floor):
    worst = 0.0
    # entries far below the gradient's own scale are judged against that scale,
    # otherwise finite-difference noise on them reads as a large relative error
    scale = max((float(np.abs(g).max()) for g in analytic if np.size(g)), default=0.0)
    floor = max(floor, 1e-4 * scale)
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = value_fn()
            flat[i] = old - step
            fm = value_fn()
            flat[i] = old
            num = (fp - fm) / (2.0 * step)
            denom = max(abs(num), abs(gflat[i]), floor)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst


def grad_check(net: DenseNet, loss: LossSpec, X, y, step=1e-5, floor=1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative errors use ``max(|analytic|, |numeric|, floor, 1e-4 * g_max)`` as
    denominator, where ``g_max`` is the largest analytic gradient entry.
    """
    net = net.copy()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, analytic = loss_and_grads(net, loss, X, y)
    return _finite_difference_check(
        net.params(), lambda: loss_value(net, loss, X, y), analytic, step, floor
    )


def _derived_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def kfold_indices(n, folds, seed):
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < folds:
        raise ValueError(f"{n} rows cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def cross_validate(X, y, loss: LossSpec, grid: Sequence[TrainConfig], folds: int,
                   build: Callable[[int], DenseNet], seed: int = 0):
    """Pick the config with the lowest mean held-out loss.

    ``build(seed)`` must return a fresh untrained network.  Returns
    ``(best_config, mean_scores)``; ties go to the earliest grid entry.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if len(grid) == 1:
        return grid[0], [math.nan]
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    parts = kfold_indices(X.shape[0], folds, seed)
    scores = []
    for ci, cfg in enumerate(grid):
        fold_losses = []
        for fi, held in enumerate(parts):
            train_idx = np.concatenate([p for j, p in enumerate(parts) if j != fi])
            s = _derived_seed(seed, fi, ci)
            fitted = train_network(build(s), X[train_idx], y[train_idx], loss, replace(cfg, seed=s))
            xh = X[held]
            if loss.random_tau:
                xh = _with_tau(xh, np.random.default_rng(_derived_seed(seed, fi, 10_000)))
            fold_losses.append(loss_value(fitted, loss, xh, y[held]))
        score = float(np.mean(fold_losses))
        scores.append(score if math.isfinite(score) else math.inf)
    best = int(np.argmin(scores))
    return grid[best], scores


def config_grid(lr_grid, wd_grid, **common) -> List[TrainConfig]:
    return [TrainConfig(learning_rate=lr, weight_decay=wd, **common) for lr in lr_grid for wd in wd_grid]


# -- regressor -----------------------------------------------------------------

@dataclass(frozen=True)
class RegressorConfig:
    hidden: tuple = (64, 64, 64)
    epochs: int = 300
    batch_size: int = 64
    lr_grid: tuple = (1e-2, 1e-3, 1e-4)
    wd_grid: tuple = (0.0, 0.025)
    folds: int = 5


class NetRegressor:
    """Point regressor in raw units; the network works on standardized data."""

    def __init__(self, net: DenseNet, standardizer):
        self.net = net
        self.standardizer = standardizer

    def __call__(self, X):
        s = self.standardizer
        return s.inverse_y(self.net.forward(s.forward_x(X))[:, 0])

    predict = __call__

    def to_dict(self):
        return {"net": self.net.to_dict(), "standardizer": self.standardizer.to_dict()}

    @classmethod
    def from_dict(cls, d):
        from .data import Standardizer

        return cls(DenseNet.from_dict(d["net"]), Standardizer.from_dict(d["standardizer"]))


def train_regressor(train, cfg: RegressorConfig = RegressorConfig(), seed: int = 0) -> NetRegressor:
    """MSE-trained ReLU regressor, hyperparameters chosen by k-fold CV."""
    from .data import fit_standardizer

    s = fit_standardizer(train, allow_constant_target=True)
    X = s.forward_x(train.features)
    y = s.forward_y(train.targets)[:, None]
    dims = (X.shape[1],) + tuple(cfg.hidden) + (1,)
    grid = config_grid(cfg.lr_grid, cfg.wd_grid, epochs=cfg.epochs, batch_size=cfg.batch_size)
    loss = LossSpec("mse")
    build = lambda sd: DenseNet.init(dims, "identity", sd)  # noqa: E731
    best, _ = cross_validate(X, y, loss, grid, cfg.folds, build, seed)
    s_final = _derived_seed(seed, 99)
    net = train_network(build(s_final), X, y, loss, replace(best, seed=s_final))
    return NetRegressor(net, s)
