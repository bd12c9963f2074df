"""Noise-constrained inference: penalties that keep the latent posterior
means distributed like the latent prior instead of memorizing the data.

Three differentiable penalties act on the matrix of variational means
(never on samples, never on the scales): a multivariate-normality
statistic, the off-diagonal mass of the empirical covariance, and mean
absolute Pearson correlation against inputs and targets. The first and
last enter the objective through steep exponentials so they behave like
smoothed constraints.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import vi as vi_mod
from .diffcore import Architecture
from .exceptions import ConfigError, DivergenceError
from .model import log_joint

# softened exponential: exact below the cap, linear continuation above it so
# early degenerate states produce huge but finite values and usable gradients.
# The cap keeps even squared gradients comfortably inside float range, which
# second-moment optimizer accumulators need.
_EXP_CAP = 150.0


@dataclass
class NcaiConfig:
    """Penalty weights and exponential growth scales for the constrained objective."""

    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    eps_t: float = 0.01
    eps_x: float = 0.5
    eps_y: float = 0.1
    cov_ridge: float = 1e-6

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("eps_t", "eps_x", "eps_y", "cov_ridge"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def penalty_free(self):
        return self.lambda1 == 0.0 and self.lambda2 == 0.0 and self.lambda3 == 0.0


def smooth_exp(u):
    if float(dc._val(u)) <= _EXP_CAP:
        return dc.exp(u)
    return dc.mul(dc.add(u, 1.0 - _EXP_CAP), float(np.exp(_EXP_CAP)))


def hz_statistic(points, ridge_rel=1e-6):
    """Henze-Zirkler multivariate-normality statistic of the rows of ``points``.

    Larger values mean stronger departure from a single Gaussian. A small
    ridge proportional to the covariance trace (with a tiny absolute floor)
    keeps the standardization invertible when the rows collapse to a
    cluster, which happens at the start of training.
    """
    pv = dc._val(points)
    if pv.ndim != 2:
        raise ValueError("points must be a 2-D matrix")
    n, p = pv.shape
    if n < 3:
        raise ValueError(f"need at least 3 rows, got {n}")
    if p < 1:
        raise ValueError("need at least one column")

    xc = dc.add(points, dc.neg(dc.mean_(points, axis=0, keepdims=True)))
    cov = dc.mul(dc.matmul(dc.transpose(xc), xc), 1.0 / n)
    trace = dc.mul(dc.sum_(dc.mul(xc, xc)), 1.0 / n)
    ridge = dc.add(dc.mul(trace, ridge_rel / p), 1e-12)
    cov_r = dc.add(cov, dc.mul(ridge, np.eye(p)))
    cov_inv = dc.inverse(cov_r)

    t = dc.matmul(xc, cov_inv)
    dj = dc.sum_(dc.mul(xc, t), axis=1)
    cross = dc.matmul(t, dc.transpose(xc))
    djk = dc.add(
        dc.add(dc.reshape(dj, (n, 1)), dc.reshape(dj, (1, n))), dc.mul(cross, -2.0)
    )

    b2 = (((2 * p + 1) / 4.0) ** (1.0 / (p + 4)) * n ** (1.0 / (p + 4)) / np.sqrt(2.0)) ** 2
    term1 = dc.mul(dc.sum_(dc.exp(dc.mul(djk, -b2 / 2.0))), 1.0 / (n * n))
    coef2 = 2.0 * (1.0 + b2) ** (-p / 2.0) / n
    term2 = dc.mul(dc.sum_(dc.exp(dc.mul(dj, -b2 / (2.0 * (1.0 + b2))))), coef2)
    term3 = (1.0 + 2.0 * b2) ** (-p / 2.0)
    out = dc.mul(dc.add(dc.add(term1, dc.neg(term2)), term3), float(n))
    return out if isinstance(out, dc.Node) else float(out)


def offdiag_penalty(points):
    """Frobenius norm of the off-diagonal of the sample covariance of the rows."""
    pv = dc._val(points)
    if pv.ndim != 2:
        raise ValueError("points must be a 2-D matrix")
    n, p = pv.shape
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    xc = dc.add(points, dc.neg(dc.mean_(points, axis=0, keepdims=True)))
    cov = dc.mul(dc.matmul(dc.transpose(xc), xc), 1.0 / (n - 1))
    off = dc.mul(cov, 1.0 - np.eye(p))
    out = dc.sqrt(dc.sum_(dc.mul(off, off)))
    return out if isinstance(out, dc.Node) else float(out)


def pearson_penalty(a, b):
    """Mean absolute Pearson correlation over all column pairs of (a, b).

    ``a`` is a constant data matrix; ``b`` may be a Node. Pairs where
    either column has zero variance contribute zero.
    """
    av = np.atleast_2d(np.asarray(dc._val(a), dtype=np.float64))
    bv = dc._val(b)
    if bv.ndim != 2:
        raise ValueError("b must be a 2-D matrix")
    if av.shape[0] != bv.shape[0]:
        raise ValueError("a and b must have the same number of rows")
    if av.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    d, k = av.shape[1], bv.shape[1]

    ac = av - av.mean(axis=0)
    ssa = (ac * ac).sum(axis=0)
    bc = dc.add(b, dc.neg(dc.mean_(b, axis=0, keepdims=True)))
    bc_v = dc._val(bc)

    total = 0.0
    for j in range(k):
        col = bc[:, j] if isinstance(bc, dc.Node) else bc_v[:, j]
        ssb = dc.sum_(dc.mul(col, col))
        if float(dc._val(ssb)) == 0.0:
            continue
        for i in range(d):
            if ssa[i] == 0.0:
                continue
            num = dc.sum_(dc.mul(col, ac[:, i]))
            corr = dc.div(num, dc.sqrt(dc.mul(ssb, float(ssa[i]))))
            total = dc.add(total, dc.absolute(corr))
    out = dc.mul(total, 1.0 / (d * k))
    return out if isinstance(out, dc.Node) else float(out)


def objective_graph(arch, leaves, x, y, priors, cfg, n_mc, seed, batch=None):
    """Constrained objective: negative ELBO plus the latent-mean penalties.

    Penalties always see the full train block of means even in batch mode.
    Returns the objective Node and a dict of the raw penalty statistics.
    """
    elbo_node, elbo_parts = vi_mod.elbo_graph(arch, leaves, x, y, priors, n_mc, seed, batch)
    obj = dc.neg(elbo_node)
    parts = {"elbo": elbo_node, **elbo_parts}
    if cfg.penalty_free:
        return obj, parts
    if arch.input_dim_z == 0:
        raise ConfigError("constrained objective needs latent inputs (input_dim_z >= 1)")
    n = x.shape[0]
    mu_z = leaves["mu_z"]
    if cfg.lambda1 > 0.0:
        hz = hz_statistic(mu_z, cfg.cov_ridge)
        parts["hz"] = hz
        obj = dc.add(obj, dc.mul(smooth_exp(dc.mul(hz, 1.0 / cfg.eps_t)), cfg.lambda1 * n))
    if cfg.lambda2 > 0.0:
        off = offdiag_penalty(mu_z)
        parts["offdiag"] = off
        obj = dc.add(obj, dc.mul(off, cfg.lambda2 * n))
    if cfg.lambda3 > 0.0:
        pc_x = pearson_penalty(x, mu_z)
        pc_y = pearson_penalty(y, mu_z)
        parts["pc_x"] = pc_x
        parts["pc_y"] = pc_y
        prod = dc.mul(
            smooth_exp(dc.mul(pc_x, 1.0 / cfg.eps_x)), smooth_exp(dc.mul(pc_y, 1.0 / cfg.eps_y))
        )
        obj = dc.add(obj, dc.mul(prod, cfg.lambda3 * n))
    return obj, parts


def ncai_objective(q, data, priors, cfg, n_mc=64, seed=0):
    """Scalar value of the constrained objective on the training split."""
    view = data.view("train")
    if view.x.shape[0] != q.n_train:
        raise ValueError(
            f"posterior holds {q.n_train} latent rows but the train split has {view.x.shape[0]}"
        )
    node, _ = objective_graph(
        q.arch, vi_mod._leaves_of(q), view.x, view.y, priors, cfg, n_mc, seed
    )
    return float(dc._val(node))


def fit_point_mlp(x, y, arch, learning_rate=0.01, epochs=2000, seed=0):
    """Fit a deterministic net by Adam on mean squared error.

    Latent input columns, if the architecture has any, are clamped to zero.
    Returns the flat weight vector.
    """
    from .train import adam_init, adam_step

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    rng = np.random.default_rng(seed)
    w = dc.xavier_normal_weights(arch, rng)
    z0 = np.zeros((x.shape[0], arch.input_dim_z)) if arch.input_dim_z > 0 else None
    state = adam_init([w])
    last = np.inf
    stall = 0
    for _ in range(epochs):
        leaf = dc.leaf(w)
        pred = dc.mlp_forward(arch, leaf, x, z0)
        resid = dc.add(pred, -y)
        loss = dc.mean_(dc.mul(resid, resid))
        dc.backward(loss)
        (w,), state = adam_step([w], [leaf.grad], state, learning_rate)
        cur = float(loss.value)
        # plateau cutoff: no measurable progress for a long stretch
        if abs(last - cur) <= 1e-12 * max(1.0, abs(cur)):
            stall += 1
            if stall >= 100:
                break
        else:
            stall = 0
        last = cur
    return w


def warm_start(data, arch, opt_cfg, seed):
    """Two-stage initialization for the constrained method.

    Fits a deterministic net on x alone (latent inputs clamped to zero),
    copies its weights into the weight means except the latent-input
    weights which are re-drawn at layer scale, zeroes the latent means,
    and draws every scale parameter at layer scale.
    """
    if arch.input_dim_z == 0:
        raise ConfigError("warm start needs latent inputs (input_dim_z >= 1)")
    view = data.view("train")
    rng = np.random.default_rng(seed)
    fit_seed = int(rng.integers(0, 2**32))
    mu_w = fit_point_mlp(
        view.x,
        view.y,
        arch,
        learning_rate=opt_cfg.learning_rate,
        epochs=opt_cfg.warm_epochs,
        seed=fit_seed,
    )
    mask = arch.z_weight_mask()
    first_std = dc.xavier_std(arch.input_dim, arch.layer_dims[1])
    mu_w = mu_w.copy()
    mu_w[mask] = rng.normal(0.0, first_std, int(mask.sum()))
    rho_w = dc.xavier_normal_weights(arch, rng)
    n = view.x.shape[0]
    k = arch.input_dim_z
    z_std = dc.xavier_std(k, arch.layer_dims[1])
    mu_z = np.zeros((n, k))
    rho_z = rng.normal(0.0, z_std, size=(n, k))
    return vi_mod.MeanFieldPosterior(arch, mu_w, rho_w, mu_z, rho_z)


@dataclass
class MapResult:
    w: np.ndarray
    z: np.ndarray
    log_joint: float
    history: np.ndarray


def map_estimate(data, priors, arch, init="random", opt_cfg=None, seed=0):
    """Maximize the log joint over weights and latents by Adam.

    ``init`` is "random" (layer-scaled weights, latents from the prior) or
    "ground_truth" (requires stored generative weights and latents).
    """
    from .train import TrainConfig, adam_init, adam_step

    opt_cfg = opt_cfg or TrainConfig()
    view = data.view("train")
    n = view.x.shape[0]
    k = arch.input_dim_z
    rng = np.random.default_rng(seed)
    if init == "random":
        w = dc.xavier_normal_weights(arch, rng)
        z = rng.normal(0.0, np.sqrt(priors.sigma2_z), size=(n, k))
    elif init == "ground_truth":
        if data.w_true is None or data.z_true is None:
            raise ConfigError("ground_truth init requires stored generative weights and latents")
        w = np.array(data.w_true, dtype=np.float64)
        z = np.array(view.z_true, dtype=np.float64)
    else:
        raise ConfigError(f"unknown map init {init!r}; use 'random' or 'ground_truth'")

    state = adam_init([w, z])
    history = []
    window = opt_cfg.convergence_window
    for step in range(opt_cfg.epochs):
        w_leaf, z_leaf = dc.leaf(w), dc.leaf(z)
        lj = log_joint(arch, w_leaf, z_leaf, view, priors)
        value = float(lj.value)
        if not np.isfinite(value):
            raise DivergenceError(
                f"log joint became non-finite at step {step}",
                history=np.array(history),
                diagnostics={"step": step},
            )
        dc.backward(lj)
        history.append(value)
        grads = [
            -(leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for leaf in (w_leaf, z_leaf)
        ]
        (w, z), state = adam_step([w, z], grads, state, opt_cfg.learning_rate)
        if len(history) > window:
            prev, cur = history[-window - 1], history[-1]
            if abs(cur - prev) <= opt_cfg.convergence_tol * max(1.0, abs(prev)):
                break
    final = float(log_joint(arch, w, z, view, priors))
    history.append(final)
    return MapResult(w=w, z=z, log_joint=final, history=np.array(history))
