"""Random gradient-check cases shared by the nn and acceptance tests."""

import numpy as np

from regdetect.nn import DenseNet, LossSpec, gaussian_params, kink_margin, mixture_params

LOSS_CASES = {
    "mse": (LossSpec("mse"), 1, "identity"),
    "pinball": (LossSpec("pinball", tau=0.3), 1, "identity"),
    "pinball_uniform": (LossSpec("pinball", tau="uniform"), 1, "identity"),
    "gaussian_nll": (LossSpec("gaussian_nll"), 2, "identity"),
    "mixture_nll": (LossSpec("mixture_nll", n_modes=4), 12, "identity"),
    "mixture_nll_positive": (LossSpec("mixture_nll", n_modes=3, positive_means=True), 9, "identity"),
    "dv_separation": (LossSpec("dv_separation"), 1, "sigmoid"),
}


def random_case(kind, rng, n=8):
    """A random network plus a batch where the loss is differentiable."""
    loss, n_out, act = LOSS_CASES[kind]
    n_in = 2 if kind == "dv_separation" else int(rng.integers(1, 4))
    if loss.random_tau:
        n_in += 1
    hidden = tuple(int(h) for h in rng.integers(3, 12, size=int(rng.integers(1, 3))))
    for _ in range(20):
        net = DenseNet.init((n_in,) + hidden + (n_out,), act, int(rng.integers(1 << 31)))
        for b in net.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        for _ in range(100):
            X = rng.normal(size=(n, n_in))
            if loss.random_tau:
                X[:, -1] = rng.uniform(0.05, 0.95, n)
            if kind == "dv_separation":
                X = np.abs(X) / (1 + np.abs(X))
            # the dv loss also evaluates the swapped pairs
            rows = np.vstack([X, X[:, ::-1]]) if kind == "dv_separation" else X
            out = net.forward(X)
            if kink_margin(net, rows) > 1e-3 and _min_std(loss, out) >= 0.05:
                return net, loss, X, _targets(kind, loss, out, rng)
    raise RuntimeError(f"no kink-free case found for {kind}")


def _min_std(loss, out):
    # a tight predicted std makes curvature swamp the fixed 1e-5 step
    if loss.kind == "gaussian_nll":
        return gaussian_params(out)[1].min()
    if loss.kind == "mixture_nll":
        return mixture_params(out, loss.n_modes, loss.positive_means)[2].min()
    return np.inf


def _targets(kind, loss, out, rng):
    n = out.shape[0]
    if kind == "dv_separation":
        return np.where(rng.random(n) < 0.5, 0.5, -0.5) / n
    if kind.startswith("pinball"):
        # residuals bounded away from the kink at 0
        return out[:, 0] + rng.choice([-1.0, 1.0], n) * rng.uniform(0.05, 1.0, n)
    # draw from the predicted law so residuals stay a few stds wide, as in training;
    # far-tail targets make the loss huge and central differences lose to roundoff
    if loss.kind == "gaussian_nll":
        mu, sigma = gaussian_params(out)
        return mu + sigma * rng.standard_normal(n)
    if loss.kind == "mixture_nll":
        logw, mu, sigma = mixture_params(out, loss.n_modes, loss.positive_means)
        k = rng.integers(0, loss.n_modes, n)
        r = np.arange(n)
        return mu[r, k] + sigma[r, k] * rng.standard_normal(n)
    return rng.normal(size=n)
