"""Generative model: Gaussian weight and latent priors, Gaussian output noise.

Targets arise as y_n = f(x_n, z_n; W) + eps_n with W ~ N(0, sigma2_w I),
z_n ~ N(0, sigma2_z I) and eps_n ~ N(0, sigma2_eps I). The log densities
here accept either plain arrays or autodiff Nodes for W and Z, so the same
code serves evaluation and gradient-based optimization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import DataSet, ground_truth_fn
from .exceptions import ConfigError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PriorConfig:
    """Prior variances plus the inverse-gamma hyper-prior on them.

    ``eb_w`` / ``eb_z`` mark which variances are re-estimated from the
    variational posterior during training; fixed ones come from a grid.
    """

    sigma2_w: float = 1.0
    sigma2_z: float = 1.0
    sigma2_eps: float = 0.1
    ig_alpha: float = 3.0
    ig_beta: float = 0.5
    eb_w: bool = False
    eb_z: bool = False

    def __post_init__(self):
        for name in ("sigma2_w", "sigma2_z", "sigma2_eps", "ig_beta"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.ig_alpha <= 1.0:
            raise ConfigError(f"ig_alpha must exceed 1, got {self.ig_alpha}")


def _scalar(x):
    return x if isinstance(x, dc.Node) else float(x)


def log_likelihood(arch, w, Z, data, sigma2_eps):
    """Gaussian log-likelihood of all rows of ``data`` under weights ``w``.

    ``Z`` rows align with data rows; pass None for architectures without
    latent inputs. Returns nats (a Node when w or Z is a Node).
    """
    if sigma2_eps <= 0.0:
        raise ValueError(f"sigma2_eps must be positive, got {sigma2_eps}")
    n, l = data.x.shape[0], data.y.shape[1]
    if n == 0:
        return 0.0
    pred = dc.mlp_forward(arch, w, data.x, Z if arch.input_dim_z > 0 else None)
    resid = dc.add(pred, -data.y)
    ssq = dc.sum_(dc.mul(resid, resid))
    const = 0.5 * n * l * (LOG_2PI + np.log(sigma2_eps))
    return _scalar(dc.add(dc.mul(ssq, -0.5 / sigma2_eps), -const))


def log_prior_w(w, sigma2_w):
    """Log density of an isotropic zero-mean Gaussian over the flat weights."""
    if sigma2_w <= 0.0:
        raise ValueError(f"sigma2_w must be positive, got {sigma2_w}")
    wv = dc._val(w)
    h = wv.size
    ssq = dc.sum_(dc.mul(w, w))
    const = 0.5 * h * (LOG_2PI + np.log(sigma2_w))
    return _scalar(dc.add(dc.mul(ssq, -0.5 / sigma2_w), -const))


def log_prior_z(Z, sigma2_z):
    """Log density of the latent matrix under its row-wise Gaussian prior."""
    if sigma2_z <= 0.0:
        raise ValueError(f"sigma2_z must be positive, got {sigma2_z}")
    return log_prior_w(Z, sigma2_z)


def log_joint(arch, w, Z, data, priors):
    """log p(Y, W, Z | X) = log-likelihood + weight prior + latent prior."""
    ll = log_likelihood(arch, w, Z, data, priors.sigma2_eps)
    lw = log_prior_w(w, priors.sigma2_w)
    lz = log_prior_z(Z, priors.sigma2_z) if arch.input_dim_z > 0 else 0.0
    return _scalar(dc.add(dc.add(ll, lw), lz))


def make_x_sampler(spec):
    """Build an input sampler from a spec: a callable, or a tuple like
    ("uniform", lo, hi), ("normal", mean, var), ("mixture", [(w, mean, var), ...]).
    """
    if callable(spec):
        return spec
    if not isinstance(spec, (tuple, list)) or not spec:
        raise ConfigError(f"unrecognized x sampler spec: {spec!r}")
    kind = spec[0]
    if kind == "uniform":
        _, lo, hi = spec
        return lambda rng, n: rng.uniform(lo, hi, size=(n, 1))
    if kind == "normal":
        _, mean, var = spec
        return lambda rng, n: rng.normal(mean, np.sqrt(var), size=(n, 1))
    if kind == "mixture":
        comps = spec[1]
        weights = np.array([c[0] for c in comps], dtype=float)
        weights = weights / weights.sum()
        means = np.array([c[1] for c in comps], dtype=float)
        stds = np.sqrt(np.array([c[2] for c in comps], dtype=float))

        def sample(rng, n):
            which = rng.choice(len(comps), size=n, p=weights)
            return (means[which] + stds[which] * rng.standard_normal(n)).reshape(n, 1)

        return sample
    raise ConfigError(f"unrecognized x sampler spec: {spec!r}")


def sample_dataset(f, priors, n, x_sampler, seed, input_dim_z=1):
    """Draw a dataset from the generative process with a known function f.

    ``f`` is a callable f(x, z) -> targets or the name of a built-in
    ground-truth function. All rows land in the train split.
    """
    if n < 0:
        raise ConfigError(f"n must be non-negative, got {n}")
    if isinstance(f, str):
        f = ground_truth_fn(f)
    rng = np.random.default_rng(seed)
    x = np.atleast_2d(make_x_sampler(x_sampler)(rng, n))
    z = rng.normal(0.0, np.sqrt(priors.sigma2_z), size=(n, input_dim_z))
    mean = np.asarray(f(x, z), dtype=np.float64)
    if mean.ndim == 1:
        mean = mean.reshape(n, -1)
    y = mean + rng.normal(0.0, np.sqrt(priors.sigma2_eps), size=mean.shape)
    return DataSet(
        x=x,
        y=y,
        train_idx=np.arange(n),
        val_idx=np.empty(0, dtype=np.intp),
        test_idx=np.empty(0, dtype=np.intp),
        z_true=z,
        sigma2_eps_true=priors.sigma2_eps,
        sigma2_z_true=priors.sigma2_z,
    )


class PointMassWeights:
    """Degenerate weight posterior concentrated on one weight vector."""

    def __init__(self, arch, w):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (arch.param_count,):
            raise ValueError(f"expected {arch.param_count} weights, got {w.shape}")
        self.arch = arch
        self.w = w
        self.input_dim_z = arch.input_dim_z
        self.output_dim = arch.output_dim

    def draw_function(self, rng):
        arch, w = self.arch, self.w
        return lambda x, z=None: dc.mlp_forward_np(arch, w, x, z)


class FixedFunction:
    """Adapter exposing an arbitrary f(x, z) as a point-mass posterior."""

    def __init__(self, f, input_dim_z=1, output_dim=1):
        self.f = f
        self.input_dim_z = input_dim_z
        self.output_dim = output_dim

    def draw_function(self, rng):
        f = self.f

        def call(x, z=None):
            out = np.asarray(f(np.atleast_2d(x), z), dtype=np.float64)
            return out.reshape(np.atleast_2d(x).shape[0], -1)

        return call


def predictive_sample_matrix(q_w, priors, X, S, seed):
    """S posterior-predictive draws per row of X; returns (N, S, L).

    Latents come from the prior p(z), never from trained per-point
    posteriors, and fresh output noise is added to every draw.
    """
    rng = np.random.default_rng(seed)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    k = q_w.input_dim_z
    l = q_w.output_dim
    out = np.empty((n, S, l))
    for s in range(S):
        f = q_w.draw_function(rng)
        z = rng.normal(0.0, np.sqrt(priors.sigma2_z), size=(n, k)) if k > 0 else None
        mean = f(X, z)
        out[:, s, :] = mean + rng.normal(0.0, np.sqrt(priors.sigma2_eps), size=(n, l))
    return out


def posterior_predictive_samples(q_w, priors, x_star, S, seed, return_z=False):
    """S predictive draws at a single input point; returns (S, L).

    Each draw uses one weight sample, one latent sample from the prior,
    and fresh output noise.
    """
    rng = np.random.default_rng(seed)
    x_star = np.asarray(x_star, dtype=np.float64).reshape(1, -1)
    k = q_w.input_dim_z
    l = q_w.output_dim
    ys = np.empty((S, l))
    zs = np.empty((S, k))
    for s in range(S):
        f = q_w.draw_function(rng)
        z = rng.normal(0.0, np.sqrt(priors.sigma2_z), size=(1, k)) if k > 0 else None
        mean = f(x_star, z)
        ys[s] = mean[0] + rng.normal(0.0, np.sqrt(priors.sigma2_eps), size=l)
        if k > 0:
            zs[s] = z[0]
    if return_z:
        return ys, zs
    return ys
