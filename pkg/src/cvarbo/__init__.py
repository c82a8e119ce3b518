"""Constrained Bayesian optimization of Monte-Carlo CVaR under a minimum
expected-return constraint, with two-stage point selection and batch
(believer) variants, plus the experiment harness that drives them."""

import os as _os

# The GP linear algebra runs on small matrices where BLAS thread handoff
# costs far more than it saves (measured 25-40x slowdowns on 2-core hosts);
# parallelism comes from replicate processes and MC evaluation threads.
for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
           "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_v, "1")

from .acquisition import (
    AcquisitionContext,
    BoxDomain,
    MaximizerSettings,
    SimplexDomain,
    acq_acw_ei,
    acq_cw_ei,
    expected_improvement,
    maximize_acquisition,
    prob_in_interval,
)
from .gp import GPModel, KernelConfig, PosteriorGaussian, gp_fit, gp_predict, gp_update, matern52
from .optimizer import METHODS, RunConfig, RunTrace, best_feasible, initial_design, run
from .portfolio import Asset, AssetUniverse, load_assets, portfolio_return, price_model
from .problems import build_problem, problem_names, register_problem
from .risk import (
    HistogramPDF,
    ReturnSamples,
    RiskLevel,
    binned_pdf,
    cvar_from_histogram,
    empirical_cvar,
    empirical_var,
    expected_return_mc,
    simulate,
)

__version__ = "0.1.0"
