"""Structure-recovery harness: candidates, lambda by holdout, TP/FP counts."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fit import FitResult
from .graph import Dag, generate_candidates
from .likelihood import ScoreConfig, env_nll
from .model import EnvData, empirical_cov, env_data_from_samples
from .search import FitCache, local_refine, run_search


def pooled_covariance(samples) -> tuple[np.ndarray, int]:
    x = np.vstack([np.asarray(s, dtype=float) for s in samples])
    return empirical_cov(x), x.shape[0]


def edge_metrics(est: Dag, truth: Dag) -> tuple[int, int]:
    """True positives (correctly oriented edges) and false positives (missing or reversed)."""
    tp = len(est.edges & truth.edges)
    return tp, est.n_edges - tp


def parent_metrics(est: Dag, truth: Dag, response: int) -> tuple[int, int]:
    got = set(est.parents(response))
    true = set(truth.parents(response))
    return len(got & true), len(got - true)


def default_lambda_grid(n_total: int) -> list[float]:
    unit = math.log(n_total) / n_total
    return [0.0] + [c * unit for c in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)]


def holdout_split(x, frac: float = 0.2, shuffle_seed=None):
    """Split rows into (train, valid); trailing rows unless ``shuffle_seed`` is given."""
    x = np.asarray(x)
    n = x.shape[0]
    if not 0 < frac < 1:
        raise ValueError("holdout fraction must lie in (0, 1)")
    n_valid = math.ceil(frac * n)
    if n < 10 or n_valid < 2 or n - n_valid < 2:
        raise ValueError(f"observational environment too small to split ({n} rows)")
    idx = np.arange(n)
    if shuffle_seed is not None:
        idx = np.random.default_rng(shuffle_seed).permutation(n)
    return x[idx[:n - n_valid]], x[idx[n - n_valid:]]


def validation_nll(fit: FitResult, valid_cov) -> float:
    """Observational NLL of a fitted model (latent perturbation switched off)."""
    env = EnvData(valid_cov, 0, 1.0)
    return env_nll(fit.b_hat, fit.gamma_hat, 0.0, fit.w_hat[0], env)


def _pick(rep, pick: str):
    if pick not in ("selected", "best"):
        raise ValueError(f"unknown pick rule {pick!r}")
    return getattr(rep, pick)


@dataclass
class HoldoutResult:
    best_lambda: float
    path: list
    train_cache: FitCache = field(repr=False, default=None)


def select_lambda(samples, do_sets, candidates, cfg: ScoreConfig, lambda_grid=None,
                  frac: float = 0.2, shuffle_seed=None, jobs: int = 1,
                  pick: str = "selected") -> HoldoutResult:
    """Choose lambda by observational holdout NLL; fits are shared across the grid.

    ``pick`` names the :class:`SearchReport` attribute used as the estimate
    (``"selected"`` or ``"best"``).
    """
    train_obs, valid_obs = holdout_split(samples[0], frac, shuffle_seed)
    train = [train_obs] + list(samples[1:])
    data = env_data_from_samples(train, do_sets)
    valid_cov = empirical_cov(valid_obs)
    n_total = sum(np.asarray(s).shape[0] for s in train)
    grid = default_lambda_grid(n_total) if lambda_grid is None else list(lambda_grid)
    if not grid:
        raise ValueError("empty lambda grid")
    cache = FitCache()
    path = []
    for lam in grid:
        rep = run_search(candidates, data, cfg.replace(lam=lam), jobs=jobs, cache=cache)
        dag, fit = _pick(rep, pick)
        path.append({"lambda": lam, "dag": dag, "validation_nll": validation_nll(fit, valid_cov),
                     "score": fit.score})
    best = min(path, key=lambda r: (r["validation_nll"], -r["lambda"]))
    return HoldoutResult(best["lambda"], path, cache)


@dataclass
class TrialResult:
    seed: int
    tp: int
    fp: int
    lam: float
    selected: Dag
    truth: Dag
    n_candidates: int
    truth_in_candidates: bool
    seconds: float


def run_trial(preset, sim_seed, cfg: ScoreConfig | None = None, candidates=None,
              lam=None, lambda_grid=None, response: int | None = None, jobs: int = 1,
              refine: bool = False, add_edges: bool = False, pick: str = "selected") -> TrialResult:
    """Simulate one dataset from ``preset``, search, and count recovered edges.

    ``candidates`` defaults to the preset's own list or to the equivalence
    class of the pooled-data hill-climb optimum.  ``lam=None`` selects lambda
    by holdout validation.
    """
    start = time.perf_counter()
    cfg = preset.score_config() if cfg is None else cfg
    sim = preset.simulate(sim_seed)
    samples = [x for x, _ in sim]
    data = [d for _, d in sim]
    do_sets = [d.do_set for d in data]
    if candidates is None:
        candidates = preset.candidates
    if candidates is None:
        pooled, n_total = pooled_covariance(samples)
        candidates = generate_candidates(pooled, n_total, restarts=100, include_mec=True,
                                         neighbours=False)
    if lam is None:
        lam = select_lambda(samples, do_sets, candidates, cfg, lambda_grid, jobs=jobs,
                            pick=pick).best_lambda
    cache = FitCache()
    rep = run_search(candidates, data, cfg.replace(lam=lam), jobs=jobs, cache=cache)
    if refine:
        rep = local_refine(rep, data, cfg.replace(lam=lam), add_edges=add_edges, jobs=jobs, cache=cache)
    est = _pick(rep, pick)[0]
    truth = preset.params.dag
    response = preset.response if response is None else response
    if response is None:
        tp, fp = edge_metrics(est, truth)
    else:
        tp, fp = parent_metrics(est, truth, response)
    keys = {d.key for d in candidates}
    return TrialResult(seed=sim_seed, tp=tp, fp=fp, lam=lam, selected=est, truth=truth,
                       n_candidates=len(candidates), truth_in_candidates=truth.key in keys,
                       seconds=time.perf_counter() - start)
