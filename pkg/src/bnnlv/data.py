"""Datasets: synthetic generators, CSV loading, splitting, standardization.

Five of the six synthetic problems are heteroscedastic or multimodal
regressions from the evaluation suite; three of them (heavy_tail,
depeweg, bimodal) are generated by pushing Gaussian latent noise through
a known function, and those can optionally be distilled into an actual
network so that ground-truth weights exist.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import Architecture, mlp_forward_np
from .exceptions import ConfigError, CsvParseError


@dataclass
class DataSet:
    """Inputs, targets, split indices, and optional generative ground truth."""

    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    name: str | None = None
    z_true: np.ndarray | None = None
    w_true: np.ndarray | None = None
    gt_arch: Architecture | None = None
    sigma2_eps_true: float | None = None
    sigma2_z_true: float | None = None
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y.reshape(-1, 1)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y must have the same number of rows")
        for attr in ("train_idx", "val_idx", "test_idx"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=np.intp))

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def input_dim(self):
        return self.x.shape[1]

    @property
    def output_dim(self):
        return self.y.shape[1]

    @property
    def is_standardized(self):
        return self.y_mean is not None

    def view(self, which="train"):
        """Row-sliced copy where every row belongs to the chosen split."""
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[which]
        return replace(
            self,
            x=self.x[idx],
            y=self.y[idx],
            train_idx=np.arange(len(idx)),
            val_idx=np.empty(0, dtype=np.intp),
            test_idx=np.empty(0, dtype=np.intp),
            z_true=None if self.z_true is None else self.z_true[idx],
        )


def _heavy_tail_f(x, z):
    u = 0.1 * x**3 * (z + 1.0) ** 6 - 10.0 * x * z**2 + z
    return 6.0 * np.tanh(u)


def _depeweg_f(x, z):
    return 7.0 * np.sin(x) + 3.0 * np.abs(np.cos(x / 2.0)) * z


def _bimodal_f(x, z):
    return np.where(z > 0.0, 10.0 * np.sin(x), 10.0 * np.cos(x))


_GT_FUNCTIONS = {
    "heavy_tail": _heavy_tail_f,
    "depeweg": _depeweg_f,
    "bimodal": _bimodal_f,
}

# (sigma2_eps, sigma2_z, (n_train, n_val, n_test))
_LATENT_SPECS = {
    "heavy_tail": (0.1, 0.01, (300, 300, 300)),
    "depeweg": (0.1, 1.0, (750, 250, 250)),
    "bimodal": (1.0, 0.1, (750, 250, 250)),
}

_NOISELESS_SIZES = (200, 200, 200)

_DISTILL_HIDDEN = {
    "heavy_tail": (50,),
    "depeweg": (50,),
    "bimodal": (50, 50),
}

DATASET_NAMES = ("heavy_tail", "depeweg", "bimodal", "goldberg", "yuan", "williams")


def ground_truth_fn(name):
    """The deterministic part f(x, z) for the latent-noise generators."""
    try:
        return _GT_FUNCTIONS[name]
    except KeyError:
        raise ConfigError(f"no ground-truth function for dataset {name!r}") from None


def _sample_x(name, n, rng):
    if name == "heavy_tail":
        return rng.uniform(-4.0, 4.0, size=(n, 1))
    if name == "depeweg":
        centers = np.array([-4.0, 0.0, 4.0])
        stds = np.sqrt(np.array([0.16, 0.81, 0.16]))
        comp = rng.integers(0, 3, size=n)
        return (centers[comp] + stds[comp] * rng.standard_normal(n)).reshape(n, 1)
    if name == "bimodal":
        x = rng.exponential(scale=0.5, size=n) - 0.5
        return np.clip(x, -0.5, 2.0).reshape(n, 1)
    if name in ("goldberg", "yuan", "williams"):
        return rng.uniform(0.0, 1.0, size=(n, 1))
    raise ConfigError(f"unknown dataset {name!r}")


def _noise_variance(name, x):
    if name == "goldberg":
        return x + 0.5
    if name == "yuan":
        return np.exp(np.sin(2.0 * np.pi * x))
    if name == "williams":
        return 0.01 + 0.25 * (1.0 - np.sin(2.5 * x)) ** 2
    raise ConfigError(f"no heteroscedastic noise profile for dataset {name!r}")


def _mean_function(name, x):
    if name == "goldberg":
        return 2.0 * np.sin(2.0 * np.pi * x)
    if name == "yuan":
        return 2.0 * np.exp(-30.0 * (x - 0.25) ** 2 + np.sin(np.pi * x**2)) - 2.0
    if name == "williams":
        return np.sin(2.5 * x) * np.sin(1.5 * x)
    raise ConfigError(f"no mean function for dataset {name!r}")


def gen_synthetic(name, seed, sizes=None, distill=False, distill_epochs=4000):
    """Generate one of the named synthetic regression problems.

    ``sizes`` overrides the default (n_train, n_val, n_test). With
    ``distill=True`` (latent-noise datasets only) the closed-form function
    is first fit by a deterministic net on the sampled (x, z) pairs and the
    targets are then regenerated from that net, so the returned data set
    carries exact ground-truth weights.
    """
    rng = np.random.default_rng(seed)
    if name in _LATENT_SPECS:
        sigma2_eps, sigma2_z, default_sizes = _LATENT_SPECS[name]
        n_tr, n_va, n_te = sizes or default_sizes
        n = n_tr + n_va + n_te
        x = _sample_x(name, n, rng)
        z = rng.normal(0.0, np.sqrt(sigma2_z), size=(n, 1))
        f = _GT_FUNCTIONS[name](x, z)
        w_true = None
        gt_arch = None
        if distill:
            gt_arch = Architecture(
                input_dim_x=1, input_dim_z=1, hidden_layers=_DISTILL_HIDDEN[name]
            )
            from .ncai import fit_point_mlp

            w_true = fit_point_mlp(
                np.concatenate([x, z], axis=1),
                f,
                Architecture(input_dim_x=2, hidden_layers=_DISTILL_HIDDEN[name]),
                learning_rate=0.01,
                epochs=distill_epochs,
                seed=rng.integers(0, 2**32),
            )
            f = mlp_forward_np(gt_arch, w_true, x, z)
        y = f + rng.normal(0.0, np.sqrt(sigma2_eps), size=(n, 1))
        ds = DataSet(
            x=x,
            y=y,
            train_idx=np.arange(n_tr),
            val_idx=np.arange(n_tr, n_tr + n_va),
            test_idx=np.arange(n_tr + n_va, n),
            name=name,
            z_true=z,
            w_true=w_true,
            gt_arch=gt_arch,
            sigma2_eps_true=sigma2_eps,
            sigma2_z_true=sigma2_z,
        )
        return ds

    if name in ("goldberg", "yuan", "williams"):
        if distill:
            raise ConfigError(f"dataset {name!r} has no latent ground truth to distill")
        n_tr, n_va, n_te = sizes or _NOISELESS_SIZES
        n = n_tr + n_va + n_te
        x = _sample_x(name, n, rng)
        var = _noise_variance(name, x)
        y = _mean_function(name, x) + rng.standard_normal((n, 1)) * np.sqrt(var)
        return DataSet(
            x=x,
            y=y,
            train_idx=np.arange(n_tr),
            val_idx=np.arange(n_tr, n_tr + n_va),
            test_idx=np.arange(n_tr + n_va, n),
            name=name,
        )

    raise ConfigError(f"unknown dataset {name!r}; choose one of {DATASET_NAMES}")


def load_csv(path, n_targets=1):
    """Load a numeric CSV with a header row; the last ``n_targets`` columns are y."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: file is empty") from None
        width = len(header)
        if width < n_targets + 1:
            raise CsvParseError(
                f"{path}: need at least {n_targets + 1} columns, header has {width}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise CsvParseError(
                    f"{path}:{lineno}: expected {width} fields, got {len(row)}"
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError as e:
                raise CsvParseError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    mat = np.array(rows, dtype=np.float64)
    n = mat.shape[0]
    return DataSet(
        x=mat[:, :-n_targets],
        y=mat[:, -n_targets:],
        train_idx=np.arange(n),
        val_idx=np.empty(0, dtype=np.intp),
        test_idx=np.empty(0, dtype=np.intp),
        name=str(path),
    )


def split(data, ratios=(0.7, 0.2, 0.1), seed=0):
    """Randomly reassign rows to train/val/test with the given proportions."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    n_tr = int(data.n * ratios[0])
    n_va = int(data.n * ratios[1])
    return replace(
        data,
        train_idx=perm[:n_tr],
        val_idx=perm[n_tr : n_tr + n_va],
        test_idx=perm[n_tr + n_va :],
    )


def standardize(data):
    """Z-score x and y by the training-split statistics.

    Returns the transformed copy; the per-column means and stds are stored
    on it so predictions can be mapped back to original units.
    """
    if data.is_standardized:
        raise ConfigError("data is already standardized")
    xs = data.x[data.train_idx]
    ys = data.y[data.train_idx]
    x_mean, x_std = xs.mean(axis=0), xs.std(axis=0)
    y_mean, y_std = ys.mean(axis=0), ys.std(axis=0)
    for label, std in (("x", x_std), ("y", y_std)):
        zero = np.nonzero(std == 0.0)[0]
        if zero.size:
            raise ConfigError(f"column {zero[0]} of {label} has zero variance in the train split")
    return replace(
        data,
        x=(data.x - x_mean) / x_std,
        y=(data.y - y_mean) / y_std,
        x_mean=x_mean,
        x_std=x_std,
        y_mean=y_mean,
        y_std=y_std,
    )


def unstandardize_y(data, y):
    """Map standardized targets or predictions back to original units."""
    if not data.is_standardized:
        return y
    return y * data.y_std + data.y_mean
