"""Experiment harness: config parsing, seeded replicate execution, artifacts.

A config file is INI-style text with an [experiment] section and one
[method.<NAME>] section per method to run. Replicate seeds derive
deterministically from the master seed, and the same replicate index gets
the same seed across methods, so method comparisons are paired.

Artifacts, all rewritten from scratch per experiment:

    <out>/traces/<method>/rep<k>.jsonl   one record per proposal
    <out>/summary.csv                    one aggregate row per method
    <out>/plotdata/<method>.csv          per-iteration mean/sd of best value
    <out>/failures.txt                   present only if some runs failed

Traces are JSON lines with sorted keys, so rerunning an experiment with an
identical config reproduces the files byte for byte.
"""

from __future__ import annotations

import configparser
import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .optimizer import METHODS, ProposalRecord, RunConfig, RunTrace, best_feasible, run
from .problems import problem_defaults, problem_names

__all__ = [
    "ConfigError",
    "ExperimentSpec",
    "SummaryRow",
    "parse_config",
    "run_experiment",
    "emit_plot_data",
    "summarize_traces",
    "write_trace",
    "load_trace",
    "write_summary",
    "read_summary",
    "SUMMARY_COLUMNS",
]

SUMMARY_COLUMNS = ("problem", "method", "mean_cvar", "sd_cvar", "mean_exret",
                   "sd_exret", "obj_evals", "con_evals")

_EXPERIMENT_KEYS = {
    "name", "problem", "replicates", "master_seed", "output_dir", "asset_file",
    "n_init", "n_iter", "batch_size", "r_min", "r_max_factor", "alpha",
    "mc_samples_objective", "mc_samples_constraint",
    "lengthscale", "signal_variance", "noise_variance",
}
_METHOD_KEYS = _EXPERIMENT_KEYS - {"name", "problem", "replicates", "master_seed", "output_dir"}

_INT_KEYS = {"replicates", "master_seed", "n_init", "n_iter", "batch_size",
             "mc_samples_objective", "mc_samples_constraint"}
_FLOAT_KEYS = {"r_min", "r_max_factor", "alpha", "lengthscale", "signal_variance",
               "noise_variance"}


class ConfigError(ValueError):
    """Raised for malformed experiment configs (missing/unknown keys, bad values)."""


@dataclass(frozen=True)
class SummaryRow:
    problem: str
    method: str
    mean_cvar: float
    sd_cvar: float
    mean_exret: float
    sd_exret: float
    obj_evals: float
    con_evals: float

    def as_csv(self) -> str:
        return ",".join(
            [self.problem, self.method]
            + [repr(float(v)) for v in (self.mean_cvar, self.sd_cvar, self.mean_exret,
                                        self.sd_exret, self.obj_evals, self.con_evals)]
        )


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    problem: str
    replicates: int
    master_seed: int
    output_dir: str | None
    methods: tuple[str, ...]
    runs: tuple[RunConfig, ...]  # method-major grid, replicates within method

    def runs_for(self, method: str) -> list[RunConfig]:
        return [c for c in self.runs if c.method == method]


def replicate_seed(master_seed: int, replicate: int) -> int:
    return int(
        np.random.SeedSequence([master_seed, replicate]).generate_state(1, dtype=np.uint64)[0]
    )


def _convert(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r}") from None
    return raw


def parse_config(path) -> ExperimentSpec:
    """Parse and fully resolve an experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "experiment" not in cp:
        raise ConfigError(f"{path}: missing [experiment] section")

    exp = {}
    for key, raw in cp["experiment"].items():
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"{path}: unknown key {key!r} in [experiment]")
        exp[key] = _convert(key, raw)
    if "problem" not in exp:
        raise ConfigError(f"{path}: [experiment] must set 'problem'")
    problem = exp["problem"]
    if problem not in problem_names():
        raise ConfigError(
            f"{path}: unknown problem {problem!r}; valid: {sorted(problem_names())}"
        )

    methods = []
    overrides = {}
    for section in cp.sections():
        if section == "experiment":
            continue
        if not section.startswith("method."):
            raise ConfigError(f"{path}: unexpected section [{section}]")
        method_name = section[len("method."):]
        if method_name not in METHODS:
            raise ConfigError(
                f"{path}: unknown method {method_name!r}; valid methods: {list(METHODS)}"
            )
        o = {}
        for key, raw in cp[section].items():
            if key not in _METHOD_KEYS:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            o[key] = _convert(key, raw)
        methods.append(method_name)
        overrides[method_name] = o
    if not methods:
        raise ConfigError(f"{path}: no [method.<name>] sections")

    name = exp.get("name", path.stem)
    replicates = exp.get("replicates", 1)
    if replicates < 1:
        raise ConfigError(f"{path}: replicates must be >= 1")
    master_seed = exp.get("master_seed", 0)
    defaults = problem_defaults(problem)

    base = {
        "problem": problem,
        "n_init": exp.get("n_init", 10),
        "n_iter": exp.get("n_iter", defaults.n_iter),
        "batch_size": exp.get("batch_size", 10),
        "r_max_factor": exp.get("r_max_factor", 1.10),
        "mc_samples_objective": exp.get("mc_samples_objective", 1_000_000),
        "mc_samples_constraint": exp.get("mc_samples_constraint", 1_000),
        "lengthscale": exp.get("lengthscale", 1.0),
        "signal_variance": exp.get("signal_variance", 1.0),
        "noise_variance": exp.get("noise_variance", 1e-7),
    }
    for opt in ("r_min", "alpha", "asset_file"):
        if opt in exp:
            base[opt] = exp[opt]

    runs = []
    for method in methods:
        cfg_kwargs = dict(base)
        cfg_kwargs.update(overrides[method])
        cfg_kwargs["method"] = method
        try:
            for rep in range(replicates):
                runs.append(RunConfig(seed=replicate_seed(master_seed, rep), **cfg_kwargs))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: [method.{method}]: {exc}") from None

    return ExperimentSpec(
        name=name,
        problem=problem,
        replicates=replicates,
        master_seed=master_seed,
        output_dir=exp.get("output_dir"),
        methods=tuple(methods),
        runs=tuple(runs),
    )


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_trace(trace: RunTrace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [_dump({"type": "config", **asdict(trace.config)})]
    for p in trace.proposals:
        lines.append(
            _dump(
                {
                    "type": "proposal",
                    "eval_index": p.eval_index,
                    "x": [float(v) for v in p.x],
                    "r": p.r,
                    "g": p.g,
                    "accepted": p.accepted,
                    "best_so_far": p.best_so_far,
                }
            )
        )
    lines.append(_dump({"type": "end", "truncated": trace.truncated}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trace(path) -> RunTrace:
    path = Path(path)
    config = None
    proposals = []
    truncated = False
    for line in path.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        kind = rec.pop("type")
        if kind == "config":
            config = RunConfig(**rec)
        elif kind == "proposal":
            proposals.append(
                ProposalRecord(
                    eval_index=rec["eval_index"],
                    x=np.array(rec["x"], dtype=float),
                    r=rec["r"],
                    g=rec["g"],
                    accepted=rec["accepted"],
                    best_so_far=rec["best_so_far"],
                )
            )
        elif kind == "end":
            truncated = rec["truncated"]
        else:
            raise ValueError(f"{path}: unknown record type {kind!r}")
    if config is None:
        raise ValueError(f"{path}: missing config record")
    return RunTrace(config=config, proposals=tuple(proposals), truncated=truncated)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def _effective_r_min(cfg: RunConfig) -> float:
    if cfg.r_min is not None:
        return cfg.r_min
    return problem_defaults(cfg.problem).r_min or 0.0


def summarize_method(problem: str, method: str, traces) -> SummaryRow:
    bests, rets, objs, cons = [], [], [], []
    for t in traces:
        bf = best_feasible(t, _effective_r_min(t.config))
        if bf is not None:
            bests.append(bf[1])
            rets.append(bf[2])
        c = t.counts
        objs.append(c["objective_evals"])
        cons.append(c["constraint_evals"])
    if not bests:
        raise ValueError(f"{method}: no feasible point in any replicate")
    sd = lambda v: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    return SummaryRow(
        problem=problem,
        method=method,
        mean_cvar=float(np.mean(bests)),
        sd_cvar=sd(bests),
        mean_exret=float(np.mean(rets)),
        sd_exret=sd(rets),
        obj_evals=float(np.mean(objs)),
        con_evals=float(np.mean(cons)),
    )


def emit_plot_data(traces, path) -> Path:
    """Per-iteration mean and sd of the best feasible objective across traces.

    Rows start at the first objective evaluation where every trace has a
    feasible best and run to the shortest trace; columns are
    iteration,mean_best,sd_best.
    """
    if not traces:
        raise ValueError("no traces to aggregate")
    curves = [t.best_curve for t in traces]
    n = min(len(c) for c in curves)
    if n == 0:
        raise ValueError("traces contain no objective evaluations")
    mat = np.array([[np.nan if v is None else v for v in c[:n]] for c in curves])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["iteration,mean_best,sd_best"]
    for i in range(n):
        col = mat[:, i]
        if np.any(np.isnan(col)):
            continue
        sd = float(np.std(col, ddof=1)) if len(col) > 1 else 0.0
        lines.append(f"{i},{repr(float(col.mean()))},{repr(sd)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_summary(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SUMMARY_COLUMNS)] + [r.as_csv() for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_summary(path) -> list[SummaryRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ",".join(SUMMARY_COLUMNS):
        raise ValueError(f"{path}: unexpected summary header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(SummaryRow(parts[0], parts[1], *map(float, parts[2:])))
    return rows


def summarize_traces(trace_dir) -> list[SummaryRow]:
    """Recompute summary rows from the trace files under a directory."""
    trace_dir = Path(trace_dir)
    root = trace_dir / "traces" if (trace_dir / "traces").is_dir() else trace_dir
    rows = []
    for method_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        traces = [load_trace(f) for f in sorted(method_dir.glob("rep*.jsonl"))]
        if not traces:
            continue
        rows.append(
            summarize_method(traces[0].config.problem, traces[0].config.method, traces)
        )
    if not rows:
        raise ValueError(f"no trace files under {trace_dir}")
    return rows


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _run_one(cfg: RunConfig) -> RunTrace:
    return run(cfg)


def run_experiment(spec: ExperimentSpec, output_dir=None, jobs: int | None = None):
    """Execute every run in the spec, write artifacts, return (rows, failures).

    Replicates execute as parallel worker processes. A failed run is recorded
    and skipped; remaining runs still execute and artifacts are still
    written, so callers decide how loudly to fail.
    """
    out = Path(output_dir or spec.output_dir or f"results-{spec.name}")
    out.mkdir(parents=True, exist_ok=True)
    jobs = jobs or min(len(spec.runs), os.cpu_count() or 1)

    results: list[RunTrace | None] = [None] * len(spec.runs)
    failures: list[tuple[str, int, str]] = []

    if jobs > 1 and len(spec.runs) > 1:
        # Spawned workers re-import numpy, so the BLAS thread cap applies and
        # parallel replicates do not oversubscribe the cores.
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = {pool.submit(_run_one, cfg): i for i, cfg in enumerate(spec.runs)}
            for fut, i in futures.items():
                cfg = spec.runs[i]
                try:
                    results[i] = fut.result()
                except Exception as exc:  # noqa: BLE001 - run failures are data
                    failures.append((cfg.method, cfg.seed, f"{type(exc).__name__}: {exc}"))
    else:
        for i, cfg in enumerate(spec.runs):
            try:
                results[i] = _run_one(cfg)
            except Exception as exc:  # noqa: BLE001
                failures.append((cfg.method, cfg.seed, f"{type(exc).__name__}: {exc}"))

    rows = []
    for method in spec.methods:
        ts = [
            t for t, cfg in zip(results, spec.runs)
            if t is not None and cfg.method == method
        ]
        for rep, t in enumerate(ts):
            write_trace(t, out / "traces" / method / f"rep{rep:03d}.jsonl")
        if ts:
            rows.append(summarize_method(spec.problem, method, ts))
            emit_plot_data(ts, out / "plotdata" / f"{method}.csv")
    write_summary(rows, out / "summary.csv")
    if failures:
        (out / "failures.txt").write_text(
            "\n".join(f"{m} seed={s}: {err}" for m, s, err in failures) + "\n",
            encoding="utf-8",
        )
    return rows, failures
