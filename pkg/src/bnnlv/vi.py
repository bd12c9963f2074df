"""Mean-field variational inference for the latent-noise network model.

The posterior factorizes over every weight and every per-observation
latent coordinate; each factor is Gaussian with its scale parameterized
through softplus. The ELBO uses the reparameterization trick with a
closed-form KL against the Gaussian priors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .diffcore import Architecture
from .exceptions import ConfigError
from .model import LOG_2PI


def _gaussian_ll_graph(arch, w, Z, x, y, sigma2_eps):
    """Gaussian log-likelihood over raw arrays; Node-aware."""
    n, l = x.shape[0], y.shape[1]
    pred = dc.mlp_forward(arch, w, x, Z if arch.input_dim_z > 0 else None)
    resid = dc.add(pred, -y)
    ssq = dc.sum_(dc.mul(resid, resid))
    const = 0.5 * n * l * (LOG_2PI + np.log(sigma2_eps))
    return dc.add(dc.mul(ssq, -0.5 / sigma2_eps), -const)


@dataclass
class MeanFieldPosterior:
    """Factorized Gaussian posterior over weights and per-point latents.

    ``mu_z``/``rho_z`` have one row per training observation; for
    architectures without latent inputs they are (N, 0).
    """

    arch: Architecture
    mu_w: np.ndarray
    rho_w: np.ndarray
    mu_z: np.ndarray
    rho_z: np.ndarray

    def __post_init__(self):
        self.mu_w = np.asarray(self.mu_w, dtype=np.float64)
        self.rho_w = np.asarray(self.rho_w, dtype=np.float64)
        self.mu_z = np.atleast_2d(np.asarray(self.mu_z, dtype=np.float64))
        self.rho_z = np.atleast_2d(np.asarray(self.rho_z, dtype=np.float64))
        p = self.arch.param_count
        if self.mu_w.shape != (p,) or self.rho_w.shape != (p,):
            raise ValueError(f"weight blocks must have shape ({p},)")
        if self.mu_z.shape != self.rho_z.shape:
            raise ValueError("mu_z and rho_z must have matching shapes")
        if self.mu_z.shape[1] != self.arch.input_dim_z:
            raise ValueError(
                f"latent blocks must have {self.arch.input_dim_z} columns, got {self.mu_z.shape[1]}"
            )

    @property
    def n_train(self):
        return self.mu_z.shape[0]

    @property
    def input_dim_z(self):
        return self.arch.input_dim_z

    @property
    def output_dim(self):
        return self.arch.output_dim

    @property
    def sigma_w(self):
        return dc.softplus(self.rho_w)

    @property
    def sigma_z(self):
        return dc.softplus(self.rho_z)

    def draw_weights(self, rng):
        return self.mu_w + self.sigma_w * rng.standard_normal(self.mu_w.shape)

    def draw_latents(self, rng):
        return self.mu_z + self.sigma_z * rng.standard_normal(self.mu_z.shape)

    def draw_function(self, rng):
        w = self.draw_weights(rng)
        arch = self.arch
        return lambda x, z=None: dc.mlp_forward_np(arch, w, x, z)

    def copy(self):
        return MeanFieldPosterior(
            self.arch, self.mu_w.copy(), self.rho_w.copy(), self.mu_z.copy(), self.rho_z.copy()
        )

    def params(self):
        return [self.mu_w, self.rho_w, self.mu_z, self.rho_z]

    def to_dict(self):
        return {
            "arch": {
                "input_dim_x": self.arch.input_dim_x,
                "input_dim_z": self.arch.input_dim_z,
                "hidden_layers": list(self.arch.hidden_layers),
                "output_dim": self.arch.output_dim,
                "leaky_slope": self.arch.leaky_slope,
            },
            "mu_w": self.mu_w.tolist(),
            "rho_w": self.rho_w.tolist(),
            "mu_z": self.mu_z.tolist(),
            "rho_z": self.rho_z.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        arch = Architecture(
            input_dim_x=d["arch"]["input_dim_x"],
            input_dim_z=d["arch"]["input_dim_z"],
            hidden_layers=tuple(d["arch"]["hidden_layers"]),
            output_dim=d["arch"]["output_dim"],
            leaky_slope=d["arch"]["leaky_slope"],
        )
        mu_z = np.asarray(d["mu_z"], dtype=np.float64).reshape(-1, arch.input_dim_z)
        rho_z = np.asarray(d["rho_z"], dtype=np.float64).reshape(-1, arch.input_dim_z)
        return cls(arch, np.asarray(d["mu_w"]), np.asarray(d["rho_w"]), mu_z, rho_z)


def random_init(arch, n_train, seed):
    """Draw every variational parameter from a layer-scaled zero-mean normal.

    Weight blocks use each layer's fan pair; latent blocks use the fan pair
    of the layer the latents feed (latent width in, first layer width out).
    """
    rng = np.random.default_rng(seed)
    mu_w = dc.xavier_normal_weights(arch, rng)
    rho_w = dc.xavier_normal_weights(arch, rng)
    k = arch.input_dim_z
    if k > 0:
        std = dc.xavier_std(k, arch.layer_dims[1])
        mu_z = rng.normal(0.0, std, size=(n_train, k))
        rho_z = rng.normal(0.0, std, size=(n_train, k))
    else:
        mu_z = np.empty((n_train, 0))
        rho_z = np.empty((n_train, 0))
    return MeanFieldPosterior(arch, mu_w, rho_w, mu_z, rho_z)


def kl_diag_gaussian(mu_q, var_q, mu_p, var_p):
    """KL divergence between diagonal Gaussians, summed over coordinates.

    Accepts broadcastable arrays; ``mu_q``/``var_q`` may be Nodes.
    """
    var_q_v = dc._val(var_q)
    var_p_v = dc._val(var_p)
    if np.any(var_q_v <= 0.0):
        raise ValueError("var_q must be positive")
    if np.any(var_p_v <= 0.0):
        raise ValueError("var_p must be positive")
    diff = dc.add(mu_q, dc.neg(mu_p))
    terms = dc.add(
        dc.add(np.log(var_p_v), dc.neg(dc.log(var_q))),
        dc.add(dc.div(dc.add(var_q, dc.mul(diff, diff)), var_p_v), -1.0),
    )
    # broadcast against a common shape so scalar priors count every coordinate
    shape = np.broadcast_shapes(np.shape(dc._val(mu_q)), np.shape(var_q_v))
    total = dc.sum_(dc.mul(terms, np.ones(shape)))
    out = dc.mul(total, 0.5)
    return out if isinstance(out, dc.Node) else float(out)


def elbo_graph(arch, leaves, x, y, priors, n_mc, seed, batch=None):
    """Build the ELBO as a graph over the leaf dict {mu_w, rho_w, mu_z, rho_z}.

    With ``batch`` (row indices into x), the likelihood and the latent KL
    are computed on the batch and rescaled by N/|batch|; the weight KL
    appears once regardless.
    """
    if n_mc < 1:
        raise ConfigError(f"n_mc must be >= 1, got {n_mc}")
    rng = np.random.default_rng(seed)
    n_total = x.shape[0]
    has_z = arch.input_dim_z > 0
    k = arch.input_dim_z

    if batch is None:
        xb, yb = x, y
        nb = n_total
        mu_zb, rho_zb = leaves["mu_z"], leaves["rho_z"]
    else:
        batch = np.asarray(batch, dtype=np.intp)
        xb, yb = x[batch], y[batch]
        nb = len(batch)
        mu_zb = dc.take(leaves["mu_z"], batch) if has_z else leaves["mu_z"]
        rho_zb = dc.take(leaves["rho_z"], batch) if has_z else leaves["rho_z"]
    scale = n_total / nb if nb else 1.0

    ll_sum = None
    for _ in range(n_mc):
        eps_w = rng.standard_normal(dc._val(leaves["mu_w"]).shape)
        w = dc.gaussian_reparam(leaves["mu_w"], leaves["rho_w"], eps_w)
        if has_z:
            eps_z = rng.standard_normal((nb, k))
            Z = dc.gaussian_reparam(mu_zb, rho_zb, eps_z)
        else:
            Z = None
        ll = _gaussian_ll_graph(arch, w, Z, xb, yb, priors.sigma2_eps)
        ll_sum = ll if ll_sum is None else dc.add(ll_sum, ll)
    ell = dc.mul(ll_sum, scale / n_mc)

    sigma_w = dc.softplus(leaves["rho_w"])
    kl_w = kl_diag_gaussian(leaves["mu_w"], dc.mul(sigma_w, sigma_w), 0.0, priors.sigma2_w)
    if has_z and nb:
        sigma_zb = dc.softplus(rho_zb)
        kl_z = dc.mul(
            kl_diag_gaussian(mu_zb, dc.mul(sigma_zb, sigma_zb), 0.0, priors.sigma2_z), scale
        )
    else:
        kl_z = 0.0
    value = dc.add(ell, dc.neg(dc.add(kl_w, kl_z)))
    return value, {"ell": ell, "kl_w": kl_w, "kl_z": kl_z}


def _leaves_of(q):
    return {
        "mu_w": dc.leaf(q.mu_w),
        "rho_w": dc.leaf(q.rho_w),
        "mu_z": dc.leaf(q.mu_z),
        "rho_z": dc.leaf(q.rho_z),
    }


def elbo(q, data, priors, n_mc=64, seed=0, batch=None, return_parts=False):
    """Monte Carlo ELBO of the training split of ``data`` under posterior ``q``."""
    view = data.view("train")
    if view.x.shape[0] != q.n_train:
        raise ValueError(
            f"posterior holds {q.n_train} latent rows but the train split has {view.x.shape[0]}"
        )
    node, parts = elbo_graph(q.arch, _leaves_of(q), view.x, view.y, priors, n_mc, seed, batch)
    if return_parts:
        return float(dc._val(node)), {key: float(dc._val(v)) for key, v in parts.items()}
    return float(dc._val(node))


def aggregated_posterior_logpdf(q, points):
    """Log density of the equal-weight mixture of all per-point latent factors.

    ``points`` is (M, K) or a single (K,) point; returns (M,) or a float.
    """
    if q.input_dim_z == 0:
        raise ValueError("posterior has no latent block")
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != q.input_dim_z:
        raise ValueError(f"points must have {q.input_dim_z} columns")
    mu = q.mu_z
    var = np.asarray(q.sigma_z) ** 2
    # (M, N): per-component log density summed over coordinates
    diff = pts[:, None, :] - mu[None, :, :]
    comp = -0.5 * np.sum(diff * diff / var[None, :, :] + np.log(2.0 * np.pi * var)[None], axis=2)
    out = logsumexp(comp, axis=1) - np.log(mu.shape[0])
    return float(out[0]) if single else out
