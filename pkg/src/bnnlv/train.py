"""Training loop: Adam, empirical-Bayes prior updates, restarts.

One epoch is one full-batch gradient step on the chosen objective
(negative ELBO, or the constrained objective for the NCAI method), with
the prior variances optionally re-estimated in closed form before each
step. Restarts are independent seeded runs; the winner is picked by
average marginal log-likelihood on the validation split.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import ncai as ncai_mod
from . import vi as vi_mod
from .exceptions import ConfigError, DivergenceError

METHODS = ("BNN", "BNNLV_BBB", "NCAI")


@dataclass
class TrainConfig:
    """Optimizer and schedule settings."""

    learning_rate: float = 0.01
    epochs: int = 3000
    restarts: int = 10
    n_mc: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warm_epochs: int = 2000
    init: str = "auto"
    variance_only_first: bool | None = None
    convergence_tol: float = 1e-6
    convergence_window: int = 200
    batch_size: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.init not in ("auto", "random", "warm", "ground_truth", "map"):
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def adam_init(params):
    """Fresh Adam state for a list of arrays."""
    return {
        "t": 0,
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
    }


def adam_step(params, grads, state, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns (new params, new state).

    Raises on a non-finite gradient, naming the offending parameter block.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient in parameter block {i}", diagnostics={"param_index": i}
            )
    t = state["t"] + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, {"t": t, "m": new_m, "v": new_v}


def eb_update_sz(mu_z, var_z, alpha, beta):
    """Closed-form refresh of the latent prior variance.

    Posterior-mean solution under the inverse-gamma hyper-prior using the
    per-observation average of E[||z_n||^2] under the variational factors:
    s* = (2 beta + mean_n sum_k (var + mu^2)) / (K + 2 alpha - 2).
    """
    mu_z = np.atleast_2d(np.asarray(mu_z, dtype=np.float64))
    var_z = np.atleast_2d(np.asarray(var_z, dtype=np.float64))
    if mu_z.shape != var_z.shape:
        raise ValueError("mu_z and var_z must have matching shapes")
    if np.any(var_z < 0.0):
        raise ValueError("var_z must be non-negative")
    n, k = mu_z.shape
    if n < 1 or k < 1:
        raise ValueError("latent block must be non-empty")
    if k + 2.0 * alpha - 2.0 <= 0.0:
        raise ValueError("alpha too small for a defined update")
    stat = float(np.sum(var_z + mu_z * mu_z) / n)
    return (2.0 * beta + stat) / (k + 2.0 * alpha - 2.0)


def eb_update_sw(mu_w, var_w, alpha, beta):
    """Closed-form refresh of the weight prior variance.

    s* = (2 beta + sum_i (var + mu^2)) / (H + 2 alpha - 2) with H the
    total number of weights.
    """
    mu_w = np.asarray(mu_w, dtype=np.float64).ravel()
    var_w = np.asarray(var_w, dtype=np.float64).ravel()
    if mu_w.shape != var_w.shape:
        raise ValueError("mu_w and var_w must have matching shapes")
    if np.any(var_w < 0.0):
        raise ValueError("var_w must be non-negative")
    h = mu_w.size
    if h < 1:
        raise ValueError("weight block must be non-empty")
    if h + 2.0 * alpha - 2.0 <= 0.0:
        raise ValueError("alpha too small for a defined update")
    stat = float(np.sum(var_w + mu_w * mu_w))
    return (2.0 * beta + stat) / (h + 2.0 * alpha - 2.0)


@dataclass
class TrainHistory:
    """Per-epoch trace of the objective and its pieces."""

    objective: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    hz: list = field(default_factory=list)
    offdiag: list = field(default_factory=list)
    pc_x: list = field(default_factory=list)
    pc_y: list = field(default_factory=list)
    s_w: list = field(default_factory=list)
    s_z: list = field(default_factory=list)
    phase: list = field(default_factory=list)

    def append(self, objective, parts, priors, phase):
        self.objective.append(objective)
        self.elbo.append(float(dc._val(parts["elbo"])))
        for key, store in (
            ("hz", self.hz),
            ("offdiag", self.offdiag),
            ("pc_x", self.pc_x),
            ("pc_y", self.pc_y),
        ):
            store.append(float(dc._val(parts[key])) if key in parts else np.nan)
        self.s_w.append(priors.sigma2_w)
        self.s_z.append(priors.sigma2_z)
        self.phase.append(phase)

    def __len__(self):
        return len(self.objective)

    COLUMNS = ("epoch", "phase", "objective", "elbo", "hz", "offdiag", "pc_x", "pc_y", "s_w", "s_z")

    def rows(self):
        for i in range(len(self.objective)):
            yield (
                i,
                self.phase[i],
                self.objective[i],
                self.elbo[i],
                self.hz[i],
                self.offdiag[i],
                self.pc_x[i],
                self.pc_y[i],
                self.s_w[i],
                self.s_z[i],
            )


def final_priors(priors, history):
    """Priors with the variances the empirical-Bayes schedule ended on."""
    if not len(history):
        return priors
    return replace(priors, sigma2_w=history.s_w[-1], sigma2_z=history.s_z[-1])


def _init_posterior(data, arch, priors, train_cfg, method, rng):
    scheme = train_cfg.init
    if scheme == "auto":
        scheme = "warm" if method == "NCAI" else "random"
    n = len(data.view("train").x)
    if scheme == "random":
        return vi_mod.random_init(arch, n, int(rng.integers(0, 2**32))), scheme
    if scheme == "warm":
        return ncai_mod.warm_start(data, arch, train_cfg, int(rng.integers(0, 2**32))), scheme
    if scheme in ("ground_truth", "map"):
        if scheme == "map":
            map_cfg = replace(train_cfg, epochs=max(train_cfg.warm_epochs, 1))
            res = ncai_mod.map_estimate(
                data, priors, arch, init="random", opt_cfg=map_cfg, seed=int(rng.integers(0, 2**32))
            )
            w0, z0 = res.w, res.z
        else:
            if data.w_true is None or data.z_true is None:
                raise ConfigError("ground_truth init requires stored generative weights/latents")
            w0 = np.array(data.w_true, dtype=np.float64)
            z0 = np.array(data.view("train").z_true, dtype=np.float64)
        q = vi_mod.random_init(arch, n, int(rng.integers(0, 2**32)))
        q.mu_w = w0
        if arch.input_dim_z > 0:
            q.mu_z = z0
        return q, scheme
    raise ConfigError(f"unknown init scheme {scheme!r}")


def train(data, arch, priors, ncai_cfg, train_cfg, method, seed):
    """Fit one posterior with the given method; returns (posterior, history).

    Methods: "BNN" (no latent inputs), "BNNLV_BBB" (plain negative-ELBO
    descent), "NCAI" (warm start plus the constrained objective). The run
    is deterministic given (seed, configuration).
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose one of {METHODS}")
    if method == "BNN" and arch.input_dim_z != 0:
        raise ConfigError("method BNN requires input_dim_z == 0")
    if method != "BNN" and arch.input_dim_z < 1:
        raise ConfigError(f"method {method} requires input_dim_z >= 1")
    ncai_cfg = ncai_cfg or ncai_mod.NcaiConfig()
    cfg = ncai_cfg if method == "NCAI" else replace(ncai_cfg, lambda1=0.0, lambda2=0.0, lambda3=0.0)

    rng = np.random.default_rng(seed)
    q, scheme = _init_posterior(data, arch, priors, train_cfg, method, rng)
    view = data.view("train")
    priors = replace(priors)
    history = TrainHistory()
    epoch_seed = np.random.default_rng(int(rng.integers(0, 2**32)))

    variance_only = train_cfg.variance_only_first
    if variance_only is None:
        variance_only = scheme in ("ground_truth", "map")
    phases = (["variance", "joint"] if variance_only else ["joint"])

    params = q.params()
    batch_rng = np.random.default_rng(int(rng.integers(0, 2**32)))
    for phase in phases:
        trainable = [1, 3] if phase == "variance" else [0, 1, 2, 3]
        state = adam_init([params[i] for i in trainable])
        for _ in range(train_cfg.epochs):
            if priors.eb_w:
                sw = dc.softplus(params[1])
                priors = replace(priors, sigma2_w=eb_update_sw(params[0], sw * sw, priors.ig_alpha, priors.ig_beta))
            if priors.eb_z and arch.input_dim_z > 0:
                sz = dc.softplus(params[3])
                priors = replace(priors, sigma2_z=eb_update_sz(params[2], sz * sz, priors.ig_alpha, priors.ig_beta))

            leaves = {
                "mu_w": dc.leaf(params[0]),
                "rho_w": dc.leaf(params[1]),
                "mu_z": dc.leaf(params[2]),
                "rho_z": dc.leaf(params[3]),
            }
            batch = None
            if train_cfg.batch_size is not None and train_cfg.batch_size < view.x.shape[0]:
                batch = batch_rng.choice(view.x.shape[0], size=train_cfg.batch_size, replace=False)
            obj, parts = ncai_mod.objective_graph(
                arch,
                leaves,
                view.x,
                view.y,
                priors,
                cfg,
                train_cfg.n_mc,
                int(epoch_seed.integers(0, 2**32)),
                batch=batch,
            )
            value = float(obj.value)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"objective became non-finite at epoch {len(history)}", history=history
                )
            dc.backward(obj)
            history.append(value, parts, priors, phase)

            keys = ("mu_w", "rho_w", "mu_z", "rho_z")
            grads = []
            for i in trainable:
                g = leaves[keys[i]].grad
                grads.append(g if g is not None else np.zeros_like(params[i]))
            stepped, state = adam_step(
                [params[i] for i in trainable],
                grads,
                state,
                train_cfg.learning_rate,
                train_cfg.beta1,
                train_cfg.beta2,
                train_cfg.adam_eps,
            )
            for i, p in zip(trainable, stepped):
                params[i] = p

            w = train_cfg.convergence_window
            obj_trace = history.objective
            if len(obj_trace) > w and history.phase[-w - 1] == phase:
                prev, cur = obj_trace[-w - 1], obj_trace[-1]
                if abs(cur - prev) <= train_cfg.convergence_tol * max(1.0, abs(prev)):
                    break

    q = vi_mod.MeanFieldPosterior(arch, params[0], params[1], params[2], params[3])
    return q, history


def restart_select(trained, data, s_ll=2000, seed=0):
    """Pick the restart with the best validation average marginal log-likelihood.

    ``trained`` is a list of (posterior, priors) pairs; returns the
    winning index.
    """
    from .metrics import avg_marginal_ll

    if not trained:
        raise ValueError("no trained models to select from")
    if len(trained) == 1:
        return 0
    which = "val" if len(data.val_idx) else "train"
    scores = [
        avg_marginal_ll(q, data, priors, which=which, s=s_ll, seed=seed)
        for q, priors in trained
    ]
    return int(np.argmax(scores))


def train_restarts(data, arch, priors, ncai_cfg, train_cfg, method, seed, jobs=1):
    """Run seeded restarts and return (best posterior, final priors, histories, index)."""
    seeds = np.random.SeedSequence(seed).spawn(train_cfg.restarts)

    def one(ss):
        run_seed = int(ss.generate_state(1)[0])
        q, history = train(data, arch, priors, ncai_cfg, train_cfg, method, run_seed)
        return q, history

    if jobs > 1 and train_cfg.restarts > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(ss) for ss in seeds]

    pairs = [(q, final_priors(priors, h)) for q, h in results]
    best = restart_select(pairs, data, seed=seed)
    q, history = results[best]
    return q, final_priors(priors, history), [h for _, h in results], best
