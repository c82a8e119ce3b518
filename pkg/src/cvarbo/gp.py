"""Exact Gaussian-process regression with a Matern-5/2 kernel.

The model is deliberately small: fixed hyperparameters, a constant prior
mean, and a cached Cholesky factor of the training covariance. Fitting is
an exact dense solve; there is no hyperparameter optimization. Models are
immutable after construction, so they can be shared freely across threads;
``gp_update`` returns a new model.

Targets can optionally be standardized (zero mean, unit variance) inside
the fit, in which case predictions are mapped back to the original output
scale. The surrogate drivers use this so that a unit signal variance stays
meaningful across problems whose outputs differ by orders of magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular

__all__ = [
    "KernelConfig",
    "GPModel",
    "PosteriorGaussian",
    "GPFitError",
    "matern52",
    "matern52_matrix",
    "gp_fit",
    "gp_predict",
    "gp_predict_batch",
    "gp_update",
]

_SQRT5 = np.sqrt(5.0)

# Jitter escalation stops here; beyond this the data are considered degenerate.
_MAX_NOISE = 1e-3


class GPFitError(ValueError):
    """Raised when a covariance matrix cannot be factorized or inputs are invalid."""


@dataclass(frozen=True)
class KernelConfig:
    """Matern-5/2 hyperparameters.

    lengthscale is in input-space units, signal_variance and noise_variance
    in (possibly standardized) output units squared.
    """

    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-7

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be > 0, got {self.lengthscale}")
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be > 0, got {self.signal_variance}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")


@dataclass(frozen=True)
class PosteriorGaussian:
    """Predictive mean and (non-negative) variance at a single query point."""

    mean: float
    variance: float

    def __post_init__(self):
        # Round-off can push the computed variance slightly negative.
        if self.variance < 0:
            object.__setattr__(self, "variance", 0.0)


@dataclass(frozen=True)
class GPModel:
    """Trained GP surrogate.

    ``factor`` is the lower Cholesky factor of k(X,X) + noise*I in the fit
    space (standardized if ``standardized`` is set), ``alpha`` the
    precomputed solve of the centered targets, so prediction is a kernel
    cross-covariance plus two triangular ops.
    """

    inputs: np.ndarray  # (T, d)
    targets: np.ndarray  # (T,)
    mean_const: float
    kernel: KernelConfig
    factor: np.ndarray  # (T, T) lower triangular
    alpha: np.ndarray = field(repr=False)  # (T,)
    noise_eff: float = 0.0  # noise actually used after jitter escalation
    standardized: bool = False
    y_shift: float = 0.0
    y_scale: float = 1.0
    mean_pinned: bool = False  # explicit mean_const vs recomputed data mean

    @property
    def n_train(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def predict(self, xhat) -> PosteriorGaussian:
        return gp_predict(self, xhat)


def _as_points(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    return a


def matern52(a, b, cfg: KernelConfig) -> float:
    """Matern-5/2 covariance between two points.

    k(r) = s2 * (1 + sqrt(5) r/l + 5 r^2 / (3 l^2)) * exp(-sqrt(5) r/l)
    with r the Euclidean distance.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    r = float(np.linalg.norm(a - b)) / cfg.lengthscale
    return float(cfg.signal_variance * (1.0 + _SQRT5 * r + 5.0 * r * r / 3.0) * np.exp(-_SQRT5 * r))


def matern52_matrix(A: np.ndarray, B: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """Cross-covariance matrix between point sets A (n,d) and B (m,d)."""
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    # Squared distances via the (a-b)^2 = a^2 + b^2 - 2ab expansion.
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    r = np.sqrt(sq, out=sq)
    r /= cfg.lengthscale
    k = (1.0 + _SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-_SQRT5 * r)
    k *= cfg.signal_variance
    return k


def _check_duplicates(X: np.ndarray) -> None:
    if X.shape[0] != np.unique(X, axis=0).shape[0]:
        raise GPFitError("duplicate input points; proposals must be distinct")


def gp_fit(X, y, mean_const: float | None = None, cfg: KernelConfig | None = None,
           standardize: bool = False) -> GPModel:
    """Fit an exact GP to inputs X (T,d) and targets y (T,).

    mean_const is the constant prior mean; when None it defaults to the mean
    of the targets. With standardize=True the targets are shifted/scaled to
    zero mean and unit variance internally (the prior mean is then the data
    mean by construction) and predictions are mapped back on the way out.

    If the covariance cannot be Cholesky-factorized, the noise is escalated
    by factors of 10 up to 1e-3 before giving up.
    """
    cfg = cfg or KernelConfig()
    X = _as_points(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise GPFitError(f"|X|={X.shape[0]} != |y|={y.shape[0]}")
    if X.shape[0] < 1:
        raise GPFitError("need at least one training point")
    _check_duplicates(X)

    if standardize:
        y_shift = float(y.mean())
        y_scale = float(y.std())
        if y_scale <= 0.0 or not np.isfinite(y_scale):
            y_scale = 1.0
        z = (y - y_shift) / y_scale
        mu = 0.0
    else:
        y_shift, y_scale = 0.0, 1.0
        mu = float(y.mean()) if mean_const is None else float(mean_const)
        z = y - mu

    K = matern52_matrix(X, X, cfg)
    noise = cfg.noise_variance
    while True:
        try:
            L = cholesky(K + noise * np.eye(X.shape[0]), lower=True)
            break
        except np.linalg.LinAlgError:
            noise = max(noise, 1e-10) * 10.0
            if noise > _MAX_NOISE:
                raise GPFitError(
                    "covariance not positive definite even at noise 1e-3"
                ) from None

    alpha = solve_triangular(L.T, solve_triangular(L, z, lower=True), lower=False)
    return GPModel(
        inputs=X.copy(),
        targets=y.copy(),
        mean_const=float(y.mean()) if standardize else mu,
        kernel=cfg,
        factor=L,
        alpha=alpha,
        noise_eff=noise,
        standardized=standardize,
        y_shift=y_shift,
        y_scale=y_scale,
        mean_pinned=(mean_const is not None) and not standardize,
    )


def gp_predict_batch(model: GPModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances at a batch of query points (B,d)."""
    X = _as_points(X)
    if X.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: query d={X.shape[1]}, model d={model.dim}")
    k_cross = matern52_matrix(X, model.inputs, model.kernel)  # (B, T)
    mean_fit = k_cross @ model.alpha
    v = solve_triangular(model.factor, k_cross.T, lower=True)  # (T, B)
    var_fit = model.kernel.signal_variance - np.einsum("ij,ij->j", v, v)
    np.maximum(var_fit, 0.0, out=var_fit)
    if model.standardized:
        means = model.y_shift + model.y_scale * mean_fit
        variances = (model.y_scale ** 2) * var_fit
    else:
        means = model.mean_const + mean_fit
        variances = var_fit
    return means, variances


def gp_predict(model: GPModel, xhat) -> PosteriorGaussian:
    """Posterior distribution of the latent function at a single point."""
    means, variances = gp_predict_batch(model, xhat)
    return PosteriorGaussian(mean=float(means[0]), variance=float(variances[0]))


def gp_update(model: GPModel, x, y: float) -> GPModel:
    """Return a new model fitted to the training set augmented with (x, y).

    Training sets stay small here (a few hundred points), so this is a full
    refit; it is definitionally identical to gp_fit on the augmented data.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != model.dim:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {model.dim}")
    if np.any(np.all(model.inputs == x, axis=1)):
        raise GPFitError("point already in the training set")
    X = np.vstack([model.inputs, x])
    ys = np.append(model.targets, float(y))
    mean_const = model.mean_const if model.mean_pinned else None
    return gp_fit(X, ys, mean_const=mean_const, cfg=model.kernel,
                  standardize=model.standardized)
