"""Penalized Gaussian likelihood scoring of causal DAGs from multi-environment data."""
from .errors import (ConstraintViolation, CycleError, DirectLikError, IllConditionedError,
                     LineSearchStall, MatrixNotPDError, ResamplingError, SchemaError)
from .graph import Dag, MoralGraph, generate_candidates, moral_edge_count, moralize, sample_er_dag
from .model import EnvData, EnvSpec, Mode, ScmParams, population_env_data, sigma_model, simulate
from .likelihood import (ScoreConfig, env_nll, env_nll_do, fit_nuisance_kl, gaussian_kl,
                         total_score)
from .fit import FitResult, initialize, nuisance_gradient_step, score_dag, solve_b

__version__ = "0.1.0"
