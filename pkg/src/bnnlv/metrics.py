"""Evaluation metrics: predictive quality, interval calibration, latent
diagnostics, and entropy-based uncertainty decomposition.

Predictive metrics draw latents from the prior, matching how the model is
used on new points. Latent diagnostics operate on the trained variational
means. Mutual information and entropy use k-nearest-neighbor estimators
under the Chebyshev norm.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, logsumexp
from scipy.stats import ks_2samp

from .diffcore import mlp_forward_np
from .model import predictive_sample_matrix
from .ncai import hz_statistic, pearson_penalty


def _tie_jitter(a, seed=0):
    """Magnitude-scaled noise far below float precision of the data, to
    break exact ties before nearest-neighbor queries."""
    a = np.asarray(a, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    rng = np.random.default_rng(seed)
    return a + 1e-10 * scale * rng.standard_normal(a.shape)


def _predictive_logp_matrix(q_w, data, priors, which, s, seed):
    view = data.view(which)
    x, y = view.x, view.y
    n, l = y.shape
    rng = np.random.default_rng(seed)
    k = q_w.input_dim_z
    s2e = priors.sigma2_eps
    logp = np.empty((s, n))
    for i in range(s):
        f = q_w.draw_function(rng)
        z = rng.normal(0.0, np.sqrt(priors.sigma2_z), size=(n, k)) if k > 0 else None
        mean = f(x, z)
        sq = np.sum((y - mean) ** 2, axis=1)
        logp[i] = -0.5 * sq / s2e - 0.5 * l * np.log(2.0 * np.pi * s2e)
    return logp


def avg_marginal_ll(q_w, data, priors, which="test", s=2000, seed=0):
    """Average per-point expected log-likelihood under the predictive.

    Draws weights from ``q_w`` and latents from the prior, takes the mean
    of log p(y|x,W,z) over the S joint draws, then averages over points.
    """
    logp = _predictive_logp_matrix(q_w, data, priors, which, s, seed)
    return float(np.mean(logp))


def marginal_ll_lme(q_w, data, priors, which="test", s=2000, seed=0):
    """Diagnostic variant: log of the Monte Carlo mean likelihood per point.

    Upper-bounds avg_marginal_ll (Jensen); equal for predictives that do
    not vary across draws.
    """
    logp = _predictive_logp_matrix(q_w, data, priors, which, s, seed)
    return float(np.mean(logsumexp(logp, axis=0) - np.log(logp.shape[0])))


def predictive_rmse(q_w, data, priors, which="test", s=2000, seed=0):
    """RMSE of the posterior-predictive mean against held-out targets."""
    view = data.view(which)
    x, y = view.x, view.y
    rng = np.random.default_rng(seed)
    k = q_w.input_dim_z
    acc = np.zeros_like(y)
    for _ in range(s):
        f = q_w.draw_function(rng)
        z = rng.normal(0.0, np.sqrt(priors.sigma2_z), size=(y.shape[0], k)) if k > 0 else None
        acc += f(x, z)
    return float(np.sqrt(np.mean((y - acc / s) ** 2)))


def recon_mse(q, data):
    """Training reconstruction error at the variational means.

    Runs the mean weights on (x_n, mu_zn) for every training point. Only
    defined for posteriors that carry a per-point latent block; returns
    None otherwise.
    """
    mu_z = getattr(q, "mu_z", None)
    if mu_z is None or q.input_dim_z == 0:
        return None
    view = data.view("train")
    pred = mlp_forward_np(q.arch, q.mu_w, view.x, mu_z)
    return float(np.mean((view.y - pred) ** 2))


def picp_mpiw(q_w, data, priors, which="test", s=2000, seed=0, level=0.95):
    """Coverage and mean width of central predictive intervals.

    Interval endpoints are empirical percentiles of S predictive draws per
    point. Returns (picp, mpiw).
    """
    if s < 100:
        raise ValueError("need at least 100 samples for stable percentiles")
    view = data.view(which)
    draws = predictive_sample_matrix(q_w, priors, view.x, s, seed)[:, :, 0]
    tail = 100.0 * (1.0 - level) / 2.0
    lo = np.percentile(draws, tail, axis=1)
    hi = np.percentile(draws, 100.0 - tail, axis=1)
    y = view.y[:, 0]
    picp = float(np.mean((y >= lo) & (y <= hi)))
    mpiw = float(np.mean(hi - lo))
    return picp, mpiw


def _chebyshev_pairwise(a):
    return np.max(np.abs(a[:, None, :] - a[None, :, :]), axis=2)


def kraskov_mi(a, b, k=5):
    """Kraskov-Stoegbauer-Grassberger mutual information estimate (nats).

    Variant 1 with Chebyshev distances and strict inequality in the
    marginal counts. Inputs are jittered to break ties, so exact duplicates
    do not collapse the neighborhood radius to zero.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.ndim == 2 and a.shape[0] == 1 and a.shape[1] > 1:
        a = a.T
    if b.ndim == 2 and b.shape[0] == 1 and b.shape[1] > 1:
        b = b.T
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("a and b must have the same number of rows")
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    a = _tie_jitter(a, seed=0)
    b = _tie_jitter(b, seed=1)
    da = _chebyshev_pairwise(a)
    db = _chebyshev_pairwise(b)
    joint = np.maximum(da, db)
    np.fill_diagonal(joint, np.inf)
    eps = np.partition(joint, k - 1, axis=1)[:, k - 1]
    np.fill_diagonal(da, np.inf)
    np.fill_diagonal(db, np.inf)
    nx = np.sum(da < eps[:, None], axis=1)
    ny = np.sum(db < eps[:, None], axis=1)
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


def ks_two_sample(a, b):
    """Two-sample Kolmogorov-Smirnov statistic (sup CDF gap)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(ks_2samp(a, b).statistic)


def js_divergence_mc(log_p, sample_p, log_q, sample_q, s=5000, seed=0):
    """Monte Carlo Jensen-Shannon divergence between two densities (nats).

    ``log_*`` map an (n, d) array to per-row log densities; ``sample_*``
    take (rng, n) and return (n, d) draws.
    """
    rng = np.random.default_rng(seed)
    xp = sample_p(rng, s)
    xq = sample_q(rng, s)
    lp_p, lq_p = np.asarray(log_p(xp)), np.asarray(log_q(xp))
    lp_q, lq_q = np.asarray(log_p(xq)), np.asarray(log_q(xq))
    lm_p = np.logaddexp(lp_p, lq_p) - np.log(2.0)
    lm_q = np.logaddexp(lp_q, lq_q) - np.log(2.0)
    return float(0.5 * np.mean(lp_p - lm_p) + 0.5 * np.mean(lq_q - lm_q))


def knn_entropy(x, k=5):
    """Kozachenko-Leonenko differential entropy estimate (nats)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    x = _tie_jitter(x, seed=2)
    tree = cKDTree(x)
    dist, _ = tree.query(x, k=k + 1, p=np.inf)
    eps = dist[:, k]
    return float(digamma(n) - digamma(k) + d * np.log(2.0) + d * np.mean(np.log(eps)))


def uncertainty_decomposition(q_w, priors, x_star, s_w=100, s_y=500, seed=0):
    """Split total predictive entropy at one input into aleatoric and
    epistemic parts.

    Aleatoric is the average entropy of the per-weight-draw predictive
    (latents and noise still random); epistemic is the remainder. All
    entropies come from the same k-NN estimator so the pieces are
    comparable. Returns {"total", "aleatoric", "epistemic"}.
    """
    rng = np.random.default_rng(seed)
    x_star = np.asarray(x_star, dtype=np.float64).reshape(1, -1)
    k = q_w.input_dim_z
    l = q_w.output_dim
    x_rep = np.repeat(x_star, s_y, axis=0)
    per_w = np.empty(s_w)
    batches = []
    for i in range(s_w):
        f = q_w.draw_function(rng)
        z = rng.normal(0.0, np.sqrt(priors.sigma2_z), size=(s_y, k)) if k > 0 else None
        ys = f(x_rep, z) + rng.normal(0.0, np.sqrt(priors.sigma2_eps), size=(s_y, l))
        per_w[i] = knn_entropy(ys)
        batches.append(ys)
    total = knn_entropy(np.concatenate(batches, axis=0))
    aleatoric = float(np.mean(per_w))
    return {"total": total, "aleatoric": aleatoric, "epistemic": total - aleatoric}


@dataclass
class MetricsReport:
    """Bundle of evaluation results; latent fields are None when the model
    has no latent block."""

    method: str
    avg_marginal_ll: float
    rmse: float
    picp: float
    mpiw: float
    recon_mse: float | None = None
    mi_x_z: float | None = None
    mi_y_z: float | None = None
    pc_x_z: float | None = None
    pc_y_z: float | None = None
    hz_mu_z: float | None = None
    ks_z_prior: float | None = None
    js_z_prior: float | None = None

    def to_dict(self):
        return asdict(self)


def compute_report(q_w, data, priors, method="NCAI", which="test", s=2000, seed=0):
    """Full evaluation of a trained posterior on one split.

    Predictive metrics use the requested split; latent diagnostics always
    use the training block, where the per-point factors live.
    """
    picp, mpiw = picp_mpiw(q_w, data, priors, which=which, s=s, seed=seed + 2)
    report = MetricsReport(
        method=method,
        avg_marginal_ll=avg_marginal_ll(q_w, data, priors, which=which, s=s, seed=seed),
        rmse=predictive_rmse(q_w, data, priors, which=which, s=s, seed=seed + 1),
        picp=picp,
        mpiw=mpiw,
    )
    mu_z = getattr(q_w, "mu_z", None)
    if mu_z is not None and q_w.input_dim_z > 0:
        from .exceptions import ConfigError
        from .vi import aggregated_posterior_logpdf

        train = data.view("train")
        if mu_z.shape[0] != train.x.shape[0]:
            raise ConfigError(
                f"model carries latent factors for {mu_z.shape[0]} training points "
                f"but the data has {train.x.shape[0]}; latent diagnostics need the "
                "training set the model was fit on"
            )
        report.recon_mse = recon_mse(q_w, data)
        report.mi_x_z = kraskov_mi(train.x, mu_z)
        report.mi_y_z = kraskov_mi(train.y, mu_z)
        report.pc_x_z = float(pearson_penalty(train.x, mu_z))
        report.pc_y_z = float(pearson_penalty(train.y, mu_z))
        report.hz_mu_z = float(hz_statistic(mu_z))
        rng = np.random.default_rng(seed + 3)
        prior_draws = rng.normal(0.0, np.sqrt(priors.sigma2_z), size=mu_z.size)
        report.ks_z_prior = ks_two_sample(mu_z.ravel(), prior_draws)
        sigma_z = np.asarray(q_w.sigma_z)
        n, kdim = mu_z.shape
        s2z = priors.sigma2_z

        def log_prior(pts):
            pts = np.atleast_2d(pts)
            return -0.5 * np.sum(pts * pts / s2z + np.log(2.0 * np.pi * s2z), axis=1)

        def sample_prior(r, m):
            return r.normal(0.0, np.sqrt(s2z), size=(m, kdim))

        def sample_agg(r, m):
            idx = r.integers(0, n, size=m)
            return mu_z[idx] + sigma_z[idx] * r.standard_normal((m, kdim))

        report.js_z_prior = js_divergence_mc(
            lambda pts: aggregated_posterior_logpdf(q_w, pts),
            sample_agg,
            log_prior,
            sample_prior,
            s=2000,
            seed=seed + 4,
        )
    return report
