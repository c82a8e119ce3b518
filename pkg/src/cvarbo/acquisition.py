"""Expected-improvement acquisition family and its constrained maximization.

Three scores are provided over a pair of GP surrogates (objective and
constraint): plain EI, EI weighted by the probability of feasibility
(one-sided), and EI weighted by the probability of being feasible and
approximately active (product of the two one-sided probabilities).

Scores are maximized over the weight simplex (or a box) with a log-barrier
on the deterministic domain constraints: five stages of decreasing barrier
coefficient, each running a derivative-free compass search from a common
set of multistart points, all restarts advancing in lockstep so the search
can be evaluated in batched GP predictions. Acquisition factors are handled
in log space throughout; the EI factor uses an asymptotic expansion in the
far tail so the surface stays ordered where the raw value underflows (a
hard floor there flattens the score and stalls the search on exhausted
regions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import norm

from .gp import GPModel, PosteriorGaussian, gp_predict_batch

__all__ = [
    "AcquisitionContext",
    "SimplexDomain",
    "BoxDomain",
    "MaximizerSettings",
    "MaximizerError",
    "expected_improvement",
    "prob_in_interval",
    "acq_cw_ei",
    "acq_acw_ei",
    "log_acquisition",
    "maximize_acquisition",
]

LOG_FLOOR = -745.0
_TINY_SD = 1e-15
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_NEG_HUGE = -1e15  # finite stand-in for log(0): keeps barrier sums orderable


class MaximizerError(RuntimeError):
    """Raised when no restart produces a finite acquisition value."""


@dataclass(frozen=True)
class AcquisitionContext:
    """Everything a constrained acquisition needs at a candidate point.

    best_feasible is the smallest objective value among evaluated points
    whose recorded constraint value meets the minimum threshold; None until
    a feasible point exists, in which case the EI factor degrades to 1 and
    the score reduces to the feasibility weight alone.
    """

    objective_gp: GPModel | None
    constraint_gp: GPModel | None
    best_feasible: float | None
    r_min: float
    r_max: float = np.inf

    def __post_init__(self):
        if np.isfinite(self.r_max) and not self.r_min < self.r_max:
            raise ValueError(f"need r_min < r_max, got [{self.r_min}, {self.r_max}]")


@dataclass(frozen=True)
class SimplexDomain:
    """Admissible allocations: x_i >= 0 and sum(x) <= 1."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(x.shape == (self.dim,) and np.all(x >= -tol) and x.sum() <= 1.0 + tol)

    def sample_uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # Dirichlet(1,...,1) over (x, slack): uniform on the dilated simplex.
        return rng.dirichlet(np.ones(self.dim + 1), size=n)[:, : self.dim]

    def barrier_residuals(self, X: np.ndarray) -> np.ndarray:
        # One residual per constraint: x_i >= 0 and 1 - sum(x) >= 0.
        return np.concatenate([X, 1.0 - X.sum(axis=1, keepdims=True)], axis=1)

    def interior_point(self) -> np.ndarray:
        return np.full(self.dim, 1.0 / (self.dim + 1))


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box, used by the toy problem on [0,1]^2."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or np.any(lo >= hi):
            raise ValueError("invalid box bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(
            x.shape == (self.dim,)
            and np.all(x >= self.lower - tol)
            and np.all(x <= self.upper + tol)
        )

    def sample_uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def barrier_residuals(self, X: np.ndarray) -> np.ndarray:
        return np.concatenate([X - self.lower, self.upper - X], axis=1)

    def interior_point(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


def expected_improvement(post: PosteriorGaussian, best: float) -> float:
    """Closed-form EI for minimization: E[max(0, best - G)].

    (best - mu) Phi(u) + sd phi(u) with u = (best - mu)/sd; degenerates to
    max(0, best - mu) at zero variance.
    """
    sd = np.sqrt(post.variance)
    if sd <= _TINY_SD:
        return max(0.0, best - post.mean)
    u = (best - post.mean) / sd
    return max(0.0, float((best - post.mean) * norm.cdf(u) + sd * norm.pdf(u)))


def prob_in_interval(post: PosteriorGaussian, lo: float, hi: float) -> float:
    """P(lo <= G <= hi) under the posterior; indicator of the mean at sd 0."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    sd = np.sqrt(post.variance)
    if sd <= _TINY_SD:
        return 1.0 if lo <= post.mean <= hi else 0.0
    hi_t = norm.cdf((hi - post.mean) / sd) if np.isfinite(hi) else 1.0
    lo_t = norm.cdf((lo - post.mean) / sd) if np.isfinite(lo) else 0.0
    return float(min(1.0, max(0.0, hi_t - lo_t)))


def _log_h(u: np.ndarray) -> np.ndarray:
    """log(phi(u) + u Phi(u)), stable across the whole real line.

    EI = sd * h(u). Direct evaluation cancels catastrophically for u << 0
    and phi underflows below u ~ -38, so the far tail uses the asymptotic
    expansion h(u) = phi(u) (u^-2 - 3 u^-4 + 15 u^-6 - 105 u^-8 ...), whose
    log stays finite and keeps the acquisition surface ordered instead of
    collapsing to a flat floor.
    """
    u = np.asarray(u, dtype=float)
    out = np.empty(u.shape)
    far = u < -30.0
    if np.any(far):
        v = u[far]
        inv2 = 1.0 / (v * v)
        series = np.log1p(inv2 * (-3.0 + inv2 * (15.0 - 105.0 * inv2)))
        out[far] = -0.5 * v * v - _LOG_SQRT_2PI - 2.0 * np.log(-v) + series
    near = ~far
    if np.any(near):
        v = u[near]
        h = norm.pdf(v) + v * norm.cdf(v)
        with np.errstate(divide="ignore"):
            out[near] = np.where(h > 0, np.log(np.maximum(h, 5e-324)), -np.inf)
        # rounding can drive h to 0 slightly before the series regime
        bad = ~np.isfinite(out[near]) & (v < 0)
        if np.any(bad):
            w = v[bad]
            inv2 = 1.0 / (w * w)
            patched = (
                -0.5 * w * w - _LOG_SQRT_2PI - 2.0 * np.log(-w)
                + np.log1p(inv2 * (-3.0 + inv2 * (15.0 - 105.0 * inv2)))
            )
            tmp = out[near]
            tmp[bad] = patched
            out[near] = tmp
    return out


def _log_ei(mu: np.ndarray, var: np.ndarray, best: float) -> np.ndarray:
    sd = np.sqrt(var)
    out = np.full(mu.shape, -np.inf)
    degen = sd <= _TINY_SD
    if np.any(degen):
        imp = best - mu[degen]
        with np.errstate(divide="ignore"):
            out[degen] = np.where(imp > 0, np.log(np.maximum(imp, 5e-324)), -np.inf)
    ok = ~degen
    if np.any(ok):
        out[ok] = np.log(sd[ok]) + _log_h((best - mu[ok]) / sd[ok])
    return np.maximum(out, _NEG_HUGE)


def _log_tail(mu: np.ndarray, var: np.ndarray, threshold: float, upper: bool) -> np.ndarray:
    """log P(G >= threshold) (upper=True) or log P(G <= threshold)."""
    sd = np.sqrt(var)
    out = np.empty(mu.shape)
    degen = sd <= _TINY_SD
    if np.any(degen):
        hit = (mu[degen] >= threshold) if upper else (mu[degen] <= threshold)
        out[degen] = np.where(hit, 0.0, _NEG_HUGE)
    ok = ~degen
    if np.any(ok):
        z = (mu[ok] - threshold) / sd[ok] if upper else (threshold - mu[ok]) / sd[ok]
        out[ok] = log_ndtr(z)
    return np.maximum(out, _NEG_HUGE)


def log_acquisition(ctx: AcquisitionContext, X: np.ndarray, kind: str) -> np.ndarray:
    """Vectorized log-score at candidate points X (B, d).

    kind is one of "ei", "cw-ei", "acw-ei". The EI factor is skipped (taken
    as 1) when no best value is available; the activeness factor is skipped
    when r_max is infinite, which makes "acw-ei" coincide with "cw-ei".
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    total = np.zeros(X.shape[0])
    if ctx.best_feasible is not None:
        if ctx.objective_gp is None:
            raise ValueError("objective GP required for the EI factor")
        mu_g, var_g = gp_predict_batch(ctx.objective_gp, X)
        total += _log_ei(mu_g, var_g, ctx.best_feasible)
    if kind == "ei":
        return total
    if kind not in ("cw-ei", "acw-ei"):
        raise ValueError(f"unknown acquisition kind {kind!r}")
    if ctx.constraint_gp is None:
        raise ValueError("constraint GP required for constraint-weighted scores")
    mu_r, var_r = gp_predict_batch(ctx.constraint_gp, X)
    total += _log_tail(mu_r, var_r, ctx.r_min, upper=True)
    if kind == "acw-ei" and np.isfinite(ctx.r_max):
        total += _log_tail(mu_r, var_r, ctx.r_max, upper=False)
    return total


def _scalar_score(ctx: AcquisitionContext, x, kind: str) -> float:
    val = float(log_acquisition(ctx, np.asarray(x, dtype=float).reshape(1, -1), kind)[0])
    with np.errstate(under="ignore"):
        return float(np.exp(val))


def acq_cw_ei(ctx: AcquisitionContext, x) -> float:
    """Constraint-weighted EI: EI(x) * P(R >= r_min)."""
    return _scalar_score(ctx, x, "cw-ei")


def acq_acw_ei(ctx: AcquisitionContext, x) -> float:
    """Active constraint-weighted EI: EI(x) * P(R >= r_min) * P(R <= r_max)."""
    return _scalar_score(ctx, x, "acw-ei")


@dataclass(frozen=True)
class MaximizerSettings:
    """Barrier / multistart configuration for acquisition maximization."""

    restarts: int = 32
    barrier_coeffs: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    iters_per_stage: int = 40
    init_step: float = 0.25
    min_step: float = 1e-5
    feas_margin: float = 1e-9  # strict interior margin on every residual
    log_floor: float = LOG_FLOOR
    # above this dimension each compass iteration perturbs a random subset of
    # axes, which keeps the candidate fan affordable in 20-asset runs
    subsample_axes_above: int = 8


def maximize_acquisition(score, domain, settings: MaximizerSettings | None = None,
                         rng: np.random.Generator | None = None,
                         score_in_log_space: bool = False,
                         extra_starts: np.ndarray | None = None) -> np.ndarray:
    """Maximize a score over the domain with a log-barrier compass search.

    score maps an (B, d) array to a (B,) array. By default it is a raw
    non-negative acquisition and is maximized through its logarithm (so
    positive rescaling cannot change the argmax); pass
    score_in_log_space=True when the callable already returns log values.
    extra_starts appends warm-start points (e.g. incumbents) to the uniform
    multistart seeds.

    The returned point is strictly inside the domain (every constraint
    residual >= the feasibility margin) and scores at least as high as
    every multistart seed.
    """
    settings = settings or MaximizerSettings()
    rng = rng if rng is not None else np.random.default_rng()

    def logscore(X: np.ndarray) -> np.ndarray:
        vals = np.asarray(score(X), dtype=float)
        if not score_in_log_space:
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.where(vals > 0, np.log(vals), settings.log_floor)
            return np.maximum(np.nan_to_num(vals, nan=-np.inf), settings.log_floor)
        # Log-space scores carry meaningful ordering arbitrarily far below
        # zero (stable log-EI tails); only NaNs are pushed out of the way.
        return np.nan_to_num(vals, nan=-np.inf, posinf=np.inf, neginf=-np.inf)

    d = domain.dim
    seeds = domain.sample_uniform(settings.restarts, rng)
    if extra_starts is not None and len(extra_starts):
        seeds = np.vstack([seeds, np.atleast_2d(np.asarray(extra_starts, dtype=float))])
    # Pull seeds slightly off the boundary so every barrier term is defined.
    seeds = 0.999 * seeds + 0.001 * domain.interior_point()
    n_starts = seeds.shape[0]

    def barrier(X: np.ndarray, coeff: float) -> np.ndarray:
        res = domain.barrier_residuals(X)
        ok = np.all(res >= settings.feas_margin, axis=1)
        out = np.full(X.shape[0], -np.inf)
        if np.any(ok):
            out[ok] = coeff * np.log(res[ok]).sum(axis=1)
        return out

    current = seeds.copy()
    raw_at_seeds = np.asarray(score(seeds), dtype=float)
    if np.all(np.isnan(raw_at_seeds)):
        raise MaximizerError("score is NaN at every restart seed")

    eye = np.eye(d)
    subsample = d > settings.subsample_axes_above
    n_axes = max(settings.subsample_axes_above, d // 2) if subsample else d
    for coeff in settings.barrier_coeffs:
        cur_val = logscore(current) + barrier(current, coeff)
        step = np.full(n_starts, settings.init_step)
        for _ in range(settings.iters_per_stage):
            if subsample:
                axes = rng.choice(d, size=n_axes, replace=False)
                basis = eye[axes]
            else:
                basis = eye
            # (R, 2k, d) candidate fan: +/- step along each chosen axis.
            moves = np.concatenate([basis, -basis], axis=0)
            cand = current[:, None, :] + step[:, None, None] * moves[None, :, :]
            flat = cand.reshape(-1, d)
            vals = (logscore(flat) + barrier(flat, coeff)).reshape(n_starts, -1)
            best_idx = np.argmax(vals, axis=1)
            best_val = vals[np.arange(n_starts), best_idx]
            improved = best_val > cur_val
            if np.any(improved):
                current[improved] = cand[improved, best_idx[improved], :]
                cur_val[improved] = best_val[improved]
            step[~improved] *= 0.5
            if np.all(step < settings.min_step):
                break

    # Judge restarts and original seeds on the raw score, barrier-free.
    pool = np.vstack([current, seeds])
    return pool[int(np.argmax(logscore(pool)))].copy()
