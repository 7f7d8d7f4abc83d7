"""Robust dictionary learning by alternating minimization with the MU selector."""

from .altmin import RunReport, Schedule, StepParams, gradient, run, sparse_stage, step_params
from .metrics import (
    MatchResult,
    empirical_cond_variance,
    inf_dist,
    inf_dist_equiv,
    kappa_inf_estimate,
    sign_recovery_rate,
)
from .musolver import MusParams, MusSolution, SolverConfig, solve_mus, solve_mus_batch, threshold
from .synth import (
    Batch,
    CodeDistribution,
    Dictionary,
    SparseCode,
    gen_batch,
    gen_dictionary,
    perturb_dictionary,
    validate_assumptions,
)

__version__ = "0.1.0"
