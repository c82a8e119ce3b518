"""Problem registry: the toy constrained test function and the portfolio setups.

A problem bundles a domain, the feasibility threshold r_min, the activeness
ceiling r_max, and seeded objective / constraint evaluators. The portfolio
problems estimate CVaR and expected return by Monte Carlo with per-call
seeds; the toy problem evaluates exact closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .acquisition import BoxDomain, SimplexDomain
from .portfolio import AssetUniverse, load_assets, price_model
from .risk import RiskLevel, empirical_cvar, expected_return_mc, simulate

__all__ = [
    "Problem",
    "build_problem",
    "register_problem",
    "problem_names",
    "problem_defaults",
    "gramacy_objective",
    "gramacy_constraint",
    "weighted_return_fn",
]

# Activeness band for the toy problem: the constraint c(x) >= 0 plays the
# role of the expected return with r_min = 0, so a multiplicative ceiling is
# degenerate and a fixed band is used instead.
GRAMACY_BAND = 0.15


@dataclass(frozen=True)
class Problem:
    """A constrained minimization instance driven by the optimizer."""

    name: str
    domain: SimplexDomain | BoxDomain
    r_min: float
    r_max: float
    objective: Callable[[np.ndarray, int], float]    # expensive g(x)
    constraint: Callable[[np.ndarray, int], float]   # cheap R(x)

    @property
    def dim(self) -> int:
        return self.domain.dim


def gramacy_objective(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(-x[0] - x[1])


def gramacy_constraint(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(
        1.5 - x[0] - 2.0 * x[1] - 0.5 * math.sin(2.0 * math.pi * (x[0] ** 2 - 2.0 * x[1]))
    )


def _make_gramacy(r_min, r_max, alpha, n_obj, n_con, universe):
    return Problem(
        name="gramacy",
        domain=BoxDomain(lower=np.zeros(2), upper=np.ones(2)),
        r_min=0.0 if r_min is None else r_min,
        r_max=GRAMACY_BAND if r_max is None else r_max,
        objective=lambda x, seed: gramacy_objective(x),
        constraint=lambda x, seed: gramacy_constraint(x),
    )


def weighted_return_fn(w, kind: str, u: AssetUniverse):
    """Fused scenario-return closure: z (n, N) -> portfolio return (n,).

    Equivalent to return_matrix(z, kind, u) @ w with the weight contraction
    folded into per-asset coefficients; the Monte Carlo loop calls this once
    per chunk, so the fewer temporaries matter.
    """
    w = np.asarray(w, dtype=float)
    if kind == "stock":
        c = w / u.column("purchase_price")
        return lambda z: z @ c
    if kind == "call_expiry":
        c = w / u.column("bid")
        k = u.column("strike")
        offset = float(w.sum())
        return lambda z: np.maximum(0.0, z - k) @ c - offset
    if kind == "call_delta_gamma":
        zbar = u.column("purchase_price")
        cd = w * u.column("delta")
        cg = 0.5 * w * u.column("gamma")

        def fn(z):
            eps = z - zbar
            return eps @ cd + (eps * eps) @ cg

        return fn
    raise ValueError(f"unknown return kind {kind!r}")


def _make_portfolio(name, kind, default_r_min):
    def factory(r_min, r_max, alpha, n_obj, n_con, universe):
        u = universe if universe is not None else load_assets()
        pm = price_model(u)
        level = RiskLevel(alpha)
        rmin = default_r_min if r_min is None else r_min
        rmax = 1.10 * rmin if r_max is None else r_max

        def objective(x, seed):
            s = simulate(weighted_return_fn(x, kind, u), pm, n_obj, seed)
            return empirical_cvar(s, level)

        def constraint(x, seed):
            s = simulate(weighted_return_fn(x, kind, u), pm, n_con, seed)
            return expected_return_mc(s)

        return Problem(
            name=name,
            domain=SimplexDomain(dim=len(u)),
            r_min=rmin,
            r_max=rmax,
            objective=objective,
            constraint=constraint,
        )

    return factory


@dataclass(frozen=True)
class ProblemDefaults:
    n_iter: int
    alpha: float = 0.9999
    r_min: float | None = None


_REGISTRY: dict[str, Callable] = {}
_DEFAULTS: dict[str, ProblemDefaults] = {}


def register_problem(name: str, factory: Callable, defaults: ProblemDefaults) -> None:
    """Register a problem factory (used by tests to plug in cheap toys).

    factory(r_min, r_max, alpha, n_obj, n_con, universe) -> Problem.
    """
    _REGISTRY[name] = factory
    _DEFAULTS[name] = defaults


register_problem("gramacy", _make_gramacy, ProblemDefaults(n_iter=50, r_min=0.0))

for _name, _kind, _rmin in (
    ("example1a", "stock", 1.45),
    ("example1b", "stock", 1.55),
    ("example2a", "call_expiry", 5.30),
    ("example2b", "call_expiry", 5.40),
    ("example3a", "call_delta_gamma", 2.90),
    ("example3b", "call_delta_gamma", 3.00),
):
    register_problem(
        _name, _make_portfolio(_name, _kind, _rmin), ProblemDefaults(n_iter=110, r_min=_rmin)
    )


def problem_names() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def problem_defaults(name: str) -> ProblemDefaults:
    if name not in _DEFAULTS:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(_REGISTRY)}")
    return _DEFAULTS[name]


def build_problem(name: str, r_min=None, r_max=None, alpha=None, n_obj=1_000_000,
                  n_con=1_000, universe: AssetUniverse | None = None) -> Problem:
    """Instantiate a registered problem with optional overrides."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(_REGISTRY)}")
    defaults = _DEFAULTS[name]
    a = defaults.alpha if alpha is None else alpha
    return _REGISTRY[name](r_min, r_max, a, n_obj, n_con, universe)
