"""Bayesian-optimization driver loops.

Methods
-------
EI            unconstrained expected improvement (constraint still recorded)
CW-EI         EI weighted by the probability of feasibility
ACW-EI        EI weighted by feasibility and activeness probabilities
2S-ACW-EI     ACW-EI with the two-stage gate: the cheap expected-return
              constraint is evaluated first and the expensive objective only
              when r_min <= R <= r_max; rejected proposals still extend the
              constraint training set so they are not re-proposed
KB-ACW-EI     batched ACW-EI with believer (posterior-mean fantasy) updates
2S-KB-ACW-EI  two-stage batch selection: true constraint evaluation during
              selection, believer fantasies only for the objective

Every run is fully seeded: the initial design, each acquisition
maximization, and each Monte Carlo evaluation draw from streams derived
from (run seed, stable counters), so a trace is bit-reproducible and does
not depend on evaluation scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .acquisition import (
    AcquisitionContext,
    MaximizerSettings,
    log_acquisition,
    maximize_acquisition,
)
from .gp import GPModel, KernelConfig, gp_fit, gp_update
from .problems import Problem, build_problem, problem_defaults

__all__ = [
    "METHODS",
    "RunConfig",
    "ProposalRecord",
    "ObjectiveRecord",
    "ConstraintRecord",
    "RunTrace",
    "BatchSelectionError",
    "initial_design",
    "run_sequential",
    "run_batch",
    "run",
    "best_feasible",
]

METHODS = ("EI", "CW-EI", "ACW-EI", "2S-ACW-EI", "KB-ACW-EI", "2S-KB-ACW-EI")

# Rejected-proposal budget: the two-stage gate may stall if the active band
# is tiny, so the loop gives up after this many constraint-only proposals.
REJECTION_CAP_FACTOR = 50


def _is_two_stage(method: str) -> bool:
    return method.startswith("2S")


def _is_batch(method: str) -> bool:
    return "KB" in method


def _acq_kind(method: str) -> str:
    if method == "EI":
        return "ei"
    if method == "CW-EI":
        return "cw-ei"
    return "acw-ei"


@dataclass(frozen=True)
class RunConfig:
    """One experiment run, fully resolved (no implicit defaults left)."""

    method: str
    problem: str
    n_init: int = 10
    n_iter: int = 110
    batch_size: int = 10
    r_min: float | None = None
    r_max_factor: float = 1.10
    alpha: float | None = None
    mc_samples_objective: int = 1_000_000
    mc_samples_constraint: int = 1_000
    seed: int = 0
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-7
    asset_file: str | None = None  # portfolio problems; None = shipped table

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {list(METHODS)}")
        if self.n_init < 1 or self.n_iter < 1 or self.batch_size < 1:
            raise ValueError("n_init, n_iter and batch_size must be >= 1")
        if _is_batch(self.method) and self.n_iter % self.batch_size != 0:
            raise ValueError(
                f"n_iter={self.n_iter} must be a multiple of batch_size={self.batch_size}"
            )
        if self.r_max_factor <= 1.0 and "ACW" in self.method:
            raise ValueError("r_max_factor must exceed 1 for ACW methods")

    def kernel(self) -> KernelConfig:
        return KernelConfig(
            lengthscale=self.lengthscale,
            signal_variance=self.signal_variance,
            noise_variance=self.noise_variance,
        )


@dataclass(frozen=True)
class ProposalRecord:
    """One acquisition proposal: constraint value always, objective if evaluated."""

    eval_index: int
    x: np.ndarray
    r: float
    g: float | None
    accepted: bool
    best_so_far: float | None


@dataclass(frozen=True)
class ObjectiveRecord:
    x: np.ndarray
    g: float
    eval_index: int


@dataclass(frozen=True)
class ConstraintRecord:
    x: np.ndarray
    r: float
    eval_index: int


@dataclass(frozen=True)
class RunTrace:
    """Full per-proposal history of one run."""

    config: RunConfig
    proposals: tuple[ProposalRecord, ...]
    truncated: bool = False

    @property
    def constraint_set(self) -> list[ConstraintRecord]:
        return [ConstraintRecord(p.x, p.r, p.eval_index) for p in self.proposals]

    @property
    def objective_set(self) -> list[ObjectiveRecord]:
        return [
            ObjectiveRecord(p.x, p.g, p.eval_index) for p in self.proposals if p.g is not None
        ]

    @property
    def best_curve(self) -> list[float | None]:
        return [p.best_so_far for p in self.proposals if p.g is not None]

    @property
    def counts(self) -> dict[str, int]:
        return {
            "objective_evals": sum(1 for p in self.proposals if p.g is not None),
            "constraint_evals": len(self.proposals),
            "rejected_proposals": sum(1 for p in self.proposals if not p.accepted),
        }


class BatchSelectionError(RuntimeError):
    """Two-stage batch selection hit its attempt cap; carries the partial batch."""

    def __init__(self, msg: str, partial_batch: list[np.ndarray]):
        super().__init__(msg)
        self.partial_batch = partial_batch


def initial_design(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """n points uniform on the dilated simplex {x >= 0, sum(x) <= 1}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.dirichlet(np.ones(dim + 1), size=n)[:, :dim]


def best_feasible(trace: RunTrace, r_min: float):
    """Best objective record among those with recorded r >= r_min.

    Returns (x, g, r) or None when no feasible point was evaluated. Ties on
    g break toward the earliest evaluation.
    """
    best = None
    for p in trace.proposals:
        if p.g is None or p.r < r_min:
            continue
        if best is None or p.g < best.g:
            best = p
    if best is None:
        return None
    return best.x, best.g, best.r


def _derive_seed(*entropy) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, dtype=np.uint64)[0])


def _default_settings(dim: int) -> MaximizerSettings:
    # Trimmed compass budgets keep a 110-iteration run in CPU-minutes while
    # still recovering the toy optimum to ~1e-3; the acquisition-level tests
    # exercise the full default MaximizerSettings separately. High-dim runs
    # spend most of their time on rejected boundary proposals, so their
    # budget is the leanest.
    if dim <= 5:
        return MaximizerSettings(restarts=16, iters_per_stage=12)
    return MaximizerSettings(
        restarts=8, iters_per_stage=12, barrier_coeffs=(1e-1, 1e-3, 1e-5)
    )


class _RunState:
    """Mutable bookkeeping shared by the sequential and batch drivers."""

    def __init__(self, cfg: RunConfig, problem: Problem,
                 settings: MaximizerSettings | None):
        self.cfg = cfg
        self.problem = problem
        self.settings = settings or _default_settings(problem.dim)
        self.kernel = cfg.kernel()
        self.records: list[ProposalRecord] = []
        self.eval_index = 0
        self.proposal_counter = 0
        self.rejections = 0
        self.best: float | None = None  # best feasible objective value
        self.obj_gp: GPModel | None = None
        self.con_gp: GPModel | None = None
        self._obj_dirty = True
        self._con_dirty = True
        self._X_obj: list[np.ndarray] = []
        self._y_obj: list[float] = []
        self._X_con: list[np.ndarray] = []
        self._y_con: list[float] = []

    # -- seeded streams ----------------------------------------------------
    def design_rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 0]))

    def constraint_seed(self, idx: int) -> int:
        return _derive_seed(self.cfg.seed, 1, idx)

    def objective_seed(self, idx: int) -> int:
        return _derive_seed(self.cfg.seed, 2, idx)

    def maximizer_rng(self) -> np.random.Generator:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.cfg.seed, 3, self.proposal_counter])
        )
        self.proposal_counter += 1
        return rng

    # -- data ----------------------------------------------------------------
    def record(self, x: np.ndarray, r: float, g: float | None, accepted: bool) -> None:
        if g is not None and r >= self.problem.r_min and (self.best is None or g < self.best):
            self.best = g
        self.records.append(
            ProposalRecord(
                eval_index=self.eval_index,
                x=np.asarray(x, dtype=float).copy(),
                r=float(r),
                g=None if g is None else float(g),
                accepted=accepted,
                best_so_far=self.best,
            )
        )
        self._X_con.append(np.asarray(x, dtype=float))
        self._y_con.append(float(r))
        self._con_dirty = True
        if g is not None:
            self._X_obj.append(np.asarray(x, dtype=float))
            self._y_obj.append(float(g))
            self._obj_dirty = True
        self.eval_index += 1

    def refresh_gps(self, need_constraint: bool = True) -> None:
        if self._obj_dirty and self._y_obj:
            self.obj_gp = gp_fit(
                np.array(self._X_obj), np.array(self._y_obj), cfg=self.kernel, standardize=True
            )
            self._obj_dirty = False
        if need_constraint and self._con_dirty and self._y_con:
            self.con_gp = gp_fit(
                np.array(self._X_con), np.array(self._y_con), cfg=self.kernel, standardize=True
            )
            self._con_dirty = False

    def context(self, obj_gp=None, con_gp=None, best_override=None) -> AcquisitionContext:
        if best_override is not None:
            best = best_override
        elif self.cfg.method == "EI":
            # Unconstrained improvement: best over every evaluated objective.
            best = min(self._y_obj) if self._y_obj else None
        else:
            best = self.best
        return AcquisitionContext(
            objective_gp=obj_gp if obj_gp is not None else self.obj_gp,
            constraint_gp=con_gp if con_gp is not None else self.con_gp,
            best_feasible=best,
            r_min=self.problem.r_min,
            r_max=self.problem.r_max if "ACW" in self.cfg.method else np.inf,
        )

    def propose(self, ctx: AcquisitionContext, extra_known=None) -> np.ndarray:
        """Maximize the acquisition, guaranteeing a not-yet-evaluated point.

        Warm-started compass trajectories can replay to an already evaluated
        point bit-for-bit when the surface barely moved; the GP layer treats
        duplicates as an error, so retry without warm starts and finally fall
        back to a fresh uniform draw.
        """
        kind = _acq_kind(self.cfg.method)
        score = lambda X: log_acquisition(ctx, X, kind)
        known = [p.x for p in self.records]
        if extra_known is not None:
            known.extend(extra_known)
        for warm in (True, False, False):
            x = maximize_acquisition(
                score, self.problem.domain, self.settings, self.maximizer_rng(),
                score_in_log_space=True,
                extra_starts=self._warm_starts() if warm else None,
            )
            if not any(np.array_equal(x, k) for k in known):
                return x
        rng = self.maximizer_rng()
        while True:
            x = self.problem.domain.sample_uniform(1, rng)[0]
            if not any(np.array_equal(x, k) for k in known):
                return x

    def _warm_starts(self) -> np.ndarray | None:
        # Incumbents make good multistart seeds: the best feasible point plus
        # the most recent full evaluations. The maximizer only ever improves
        # on its seeds, so these cannot hurt.
        accepted = [p for p in self.records if p.g is not None]
        if not accepted:
            return None
        starts = [p.x for p in accepted[-3:]]
        feas = [p for p in accepted if p.r >= self.problem.r_min]
        if feas:
            starts.append(min(feas, key=lambda p: p.g).x)
        return np.array(starts)

    def in_band(self, r: float) -> bool:
        return self.problem.r_min <= r <= self.problem.r_max

    def evaluate_full(self, x: np.ndarray) -> tuple[float, float]:
        r = self.problem.constraint(x, self.constraint_seed(self.eval_index))
        g = self.problem.objective(x, self.objective_seed(self.eval_index))
        return r, g

    def trace(self, truncated: bool = False) -> RunTrace:
        return RunTrace(config=self.cfg, proposals=tuple(self.records), truncated=truncated)


def _resolve(cfg: RunConfig) -> tuple[RunConfig, Problem]:
    defaults = problem_defaults(cfg.problem)
    alpha = defaults.alpha if cfg.alpha is None else cfg.alpha
    r_min = defaults.r_min if cfg.r_min is None else cfg.r_min
    cfg = replace(cfg, alpha=alpha, r_min=r_min)
    r_max = None
    if cfg.problem != "gramacy" and r_min is not None:
        r_max = cfg.r_max_factor * r_min
    universe = None
    if cfg.asset_file is not None:
        from .portfolio import load_assets

        universe = load_assets(cfg.asset_file)
    problem = build_problem(
        cfg.problem,
        r_min=r_min,
        r_max=r_max,
        alpha=alpha,
        n_obj=cfg.mc_samples_objective,
        n_con=cfg.mc_samples_constraint,
        universe=universe,
    )
    return cfg, problem


def _run_init(state: _RunState) -> None:
    cfg = state.cfg
    two_stage = _is_two_stage(cfg.method)
    for x in state.problem.domain.sample_uniform(cfg.n_init, state.design_rng()):
        r = state.problem.constraint(x, state.constraint_seed(state.eval_index))
        if two_stage and not state.in_band(r):
            state.record(x, r, None, accepted=False)
        else:
            g = state.problem.objective(x, state.objective_seed(state.eval_index))
            state.record(x, r, g, accepted=True)


def run_sequential(cfg: RunConfig, settings: MaximizerSettings | None = None) -> RunTrace:
    """Sequential driver for EI, CW-EI, ACW-EI and 2S-ACW-EI."""
    cfg, problem = _resolve(cfg)
    if _is_batch(cfg.method):
        raise ValueError(f"{cfg.method} is a batch method; use run_batch")
    state = _RunState(cfg, problem, settings)
    two_stage = _is_two_stage(cfg.method)
    _run_init(state)

    full_evals = 0
    cap = REJECTION_CAP_FACTOR * cfg.n_iter
    while full_evals < cfg.n_iter:
        state.refresh_gps(need_constraint=cfg.method != "EI")
        xhat = state.propose(state.context())
        r = problem.constraint(xhat, state.constraint_seed(state.eval_index))
        if two_stage and not state.in_band(r):
            state.record(xhat, r, None, accepted=False)
            state.rejections += 1
            if state.rejections >= cap:
                return state.trace(truncated=True)
            continue
        g = problem.objective(xhat, state.objective_seed(state.eval_index))
        state.record(xhat, r, g, accepted=True)
        full_evals += 1
    return state.trace()


def select_batch_2s(state: _RunState, b: int) -> list[np.ndarray]:
    """Two-stage batch selection.

    Proposals come from the acquisition with believer (posterior mean)
    updates on the objective GP; each proposal's constraint is truly
    evaluated and recorded, and only in-band points join the batch. Raises
    BatchSelectionError with the partial batch after 50*b failed attempts.
    """
    state.refresh_gps()
    believer_obj = state.obj_gp
    believer_best = state.best
    batch: list[np.ndarray] = []
    attempts = 0
    while len(batch) < b:
        ctx = state.context(obj_gp=believer_obj, best_override=believer_best)
        xhat = state.propose(ctx)
        r = state.problem.constraint(xhat, state.constraint_seed(state.eval_index))
        if state.in_band(r):
            batch.append(xhat)
            if believer_obj is not None:
                fantasy = float(believer_obj.predict(xhat).mean)
                believer_obj = gp_update(believer_obj, xhat, fantasy)
                # the fantasy is in-band, hence feasible: fold it into the
                # incumbent so EI cannot re-select the same point
                if believer_best is None or fantasy < believer_best:
                    believer_best = fantasy
            state.record(xhat, r, None, accepted=True)  # g filled after the round
        else:
            state.record(xhat, r, None, accepted=False)
            attempts += 1
            if attempts >= REJECTION_CAP_FACTOR * b:
                raise BatchSelectionError(
                    f"batch selection exhausted {attempts} rejected proposals", batch
                )
        state.refresh_gps()  # constraint GP sees the new true R either way
    return batch


def _select_batch_believer(state: _RunState, b: int) -> list[np.ndarray]:
    """Plain believer selection: no true evaluations, fantasies on both GPs."""
    state.refresh_gps()
    believer_obj = state.obj_gp
    believer_con = state.con_gp
    believer_best = state.best
    batch: list[np.ndarray] = []
    for _ in range(b):
        ctx = state.context(obj_gp=believer_obj, con_gp=believer_con,
                            best_override=believer_best)
        xhat = state.propose(ctx, extra_known=batch)
        batch.append(xhat)
        fantasy_r = float(believer_con.predict(xhat).mean)
        if believer_obj is not None:
            fantasy = float(believer_obj.predict(xhat).mean)
            believer_obj = gp_update(believer_obj, xhat, fantasy)
            if fantasy_r >= state.problem.r_min and (
                believer_best is None or fantasy < believer_best
            ):
                believer_best = fantasy
        believer_con = gp_update(believer_con, xhat, fantasy_r)
    return batch


def run_batch(cfg: RunConfig, settings: MaximizerSettings | None = None,
              eval_workers: int | None = None) -> RunTrace:
    """Batch driver for KB-ACW-EI and 2S-KB-ACW-EI.

    Each round selects batch_size points, evaluates their objectives in
    parallel worker threads, then refits both GPs on true values only. A
    stalled two-stage selection truncates the trace instead of raising.
    """
    cfg, problem = _resolve(cfg)
    if not _is_batch(cfg.method):
        raise ValueError(f"{cfg.method} is a sequential method; use run_sequential")
    state = _RunState(cfg, problem, settings)
    two_stage = _is_two_stage(cfg.method)
    _run_init(state)

    workers = eval_workers or min(cfg.batch_size, os.cpu_count() or 1)
    rounds = cfg.n_iter // cfg.batch_size
    for _ in range(rounds):
        truncated = False
        if two_stage:
            # Record slots for accepted points are appended during selection;
            # remember where this round's accepted records start.
            start = len(state.records)
            try:
                batch = select_batch_2s(state, cfg.batch_size)
            except BatchSelectionError as exc:
                batch = exc.partial_batch
                truncated = True
            accepted_idx = [
                i for i in range(start, len(state.records)) if state.records[i].accepted
            ]
            obj_seeds = [
                state.objective_seed(state.records[i].eval_index) for i in accepted_idx
            ]
            gs = _parallel_objectives(problem, batch, obj_seeds, workers)
            for i, g in zip(accepted_idx, gs):
                state.records[i] = replace(state.records[i], g=float(g))
                state._X_obj.append(state.records[i].x)
                state._y_obj.append(float(g))
            state._obj_dirty = True
            _rebuild_best(state)
        else:
            batch = _select_batch_believer(state, cfg.batch_size)
            idx0 = state.eval_index
            con_seeds = [state.constraint_seed(idx0 + j) for j in range(len(batch))]
            obj_seeds = [state.objective_seed(idx0 + j) for j in range(len(batch))]
            rs = [problem.constraint(x, s) for x, s in zip(batch, con_seeds)]
            gs = _parallel_objectives(problem, batch, obj_seeds, workers)
            for x, r, g in zip(batch, rs, gs):
                state.record(x, r, g, accepted=True)
        if truncated:
            return state.trace(truncated=True)
    return state.trace()


def _parallel_objectives(problem: Problem, xs: Sequence[np.ndarray],
                         seeds: Sequence[int], workers: int) -> list[float]:
    if not xs:
        return []
    if workers <= 1 or len(xs) == 1:
        return [problem.objective(x, s) for x, s in zip(xs, seeds)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(problem.objective, xs, seeds))


def _rebuild_best(state: _RunState) -> None:
    # The two-stage batch path fills objective values after records exist,
    # so best-so-far is recomputed in eval-index order.
    best = None
    fixed = []
    for p in state.records:
        if p.g is not None and p.r >= state.problem.r_min and (best is None or p.g < best):
            best = p.g
        fixed.append(replace(p, best_so_far=best))
    state.records = fixed
    state.best = best


def run(cfg: RunConfig, settings: MaximizerSettings | None = None,
        eval_workers: int | None = None) -> RunTrace:
    """Dispatch to the sequential or batch driver by method."""
    if _is_batch(cfg.method):
        return run_batch(cfg, settings, eval_workers)
    return run_sequential(cfg, settings)
