"""Candidate scoring, optimum sets and backward edge deletion."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DirectLikError
from .fit import FitResult, score_dag
from .graph import Dag, moral_edge_count
from .likelihood import ScoreConfig

log = logging.getLogger(__name__)


def _failed(dag: Dag, exc: Exception, cfg: ScoreConfig) -> FitResult:
    p = dag.p
    nan = np.full((p, p), np.nan)
    return FitResult(dag=dag, b_hat=nan, gamma_hat=np.full((p, cfg.h_bar), np.nan),
                     psi_hat=np.array([]), w_hat=np.zeros((0, p)), score=np.inf, nll=np.inf,
                     iterations=0, converged=False, lam=cfg.lam,
                     moral_edges=moral_edge_count(dag), message=f"fit failed: {exc}")


def _score_one(args):
    dag, data, cfg = args
    try:
        return score_dag(dag, data, cfg)
    except (DirectLikError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("scoring %s failed: %s", dag, exc)
        return _failed(dag, exc, cfg)


def _sort_key(item):
    dag, res = item
    return (res.score, dag.key)


class FitCache:
    """Fits keyed by DAG; the penalty is re-applied for the requested lambda."""

    def __init__(self):
        self._fits = {}

    def get(self, dag: Dag, cfg: ScoreConfig):
        res = self._fits.get((dag.key, _cfg_key(cfg)))
        if res is None:
            return None
        return _with_lambda(res, cfg.lam)

    def put(self, res: FitResult, cfg: ScoreConfig):
        self._fits[(res.dag.key, _cfg_key(cfg))] = res

    def __len__(self):
        return len(self._fits)


def _cfg_key(cfg: ScoreConfig):
    return (cfg.h_bar, cfg.c_psi, cfg.mode, cfg.eps1, cfg.eps2, cfg.max_outer, cfg.max_inner)


def _with_lambda(res: FitResult, lam: float) -> FitResult:
    if res.lam == lam:
        return res
    from dataclasses import replace
    return replace(res, lam=lam, score=res.nll + lam * res.moral_edges)


def score_candidates(cands, data, cfg: ScoreConfig, jobs: int = 1, cache: FitCache | None = None):
    """Score every candidate; returns ``(Dag, FitResult)`` pairs sorted by score."""
    cands = list(cands)
    if not cands:
        raise ValueError("candidate list is empty")
    results = {}
    todo = []
    for d in cands:
        if d.key in results:
            continue
        hit = cache.get(d, cfg) if cache is not None else None
        if hit is not None:
            results[d.key] = hit
        else:
            results[d.key] = None
            todo.append(d)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fitted = list(pool.map(_score_one, [(d, data, cfg) for d in todo]))
    else:
        fitted = [_score_one((d, data, cfg)) for d in todo]
    for d, res in zip(todo, fitted):
        results[d.key] = res
        if cache is not None and np.isfinite(res.score):
            cache.put(res, cfg)
    # duplicates in the input are reported once per occurrence
    out = [(d, results[d.key]) for d in cands]
    return sorted(out, key=_sort_key)


def optimum_set(scored, tol: float):
    """Entries within relative tolerance ``tol`` of the best score (ties included)."""
    scored = list(scored)
    if not scored:
        raise ValueError("nothing to select from")
    best = min(res.score for _, res in scored)
    if not np.isfinite(best):
        return []
    cut = best + tol * abs(best)
    return sorted([(d, r) for d, r in scored if r.score <= cut], key=_sort_key)


def backward_delete(dag: Dag, fit: FitResult, data, cfg: ScoreConfig, jobs: int = 1,
                    cache: FitCache | None = None):
    """Cumulatively delete edges in increasing order of ``|b_hat|`` and score each DAG."""
    edges = sorted(dag.edges, key=lambda e: (abs(fit.b_hat[e[1], e[0]]), e))
    path = []
    current = dag
    for j, i in edges:
        current = current.without_edge(j, i)
        path.append(current)
    if not path:
        return []
    scored = {d.key: r for d, r in score_candidates(path, data, cfg, jobs, cache)}
    return [(d, scored[d.key]) for d in path]


@dataclass
class SearchReport:
    scored: list
    optima: list
    deletion_paths: dict
    final: list
    final_minimal: list
    config: ScoreConfig
    extra: dict = field(default_factory=dict)

    @property
    def selected(self):
        """Optimum-set member with fewest moral edges (ties: fewest edges, then score)."""
        return self.final_minimal[0] if self.final_minimal else None

    @property
    def best(self):
        """Lowest-scoring DAG over candidates and deletion paths."""
        return self.final[0] if self.final else None

    def to_dict(self) -> dict:
        def entry(d, r):
            return {"dag": d.to_dict(), "score": r.score, "nll": r.nll,
                    "moral_edges": r.moral_edges, "converged": r.converged,
                    "message": r.message}

        sel = self.selected
        cfg = self.config
        return {
            "config": {"lambda": cfg.lam, "h_bar": cfg.h_bar, "c_psi": cfg.c_psi,
                       "mode": cfg.mode.value, "eps1": cfg.eps1, "eps2": cfg.eps2,
                       "opt_tolerance": cfg.opt_tolerance},
            "candidates": [entry(d, r) for d, r in self.scored],
            "optimum_set": [entry(d, r) for d, r in self.optima],
            "deletion_paths": [
                {"from": self.optima[k][0].to_dict(), "path": [entry(d, r) for d, r in path]}
                for k, path in sorted(self.deletion_paths.items())
            ],
            "final_optimum_set": [entry(d, r) for d, r in self.final],
            "final_minimal_moral": [entry(d, r) for d, r in self.final_minimal],
            "selected": None if sel is None else sel[1].to_dict(),
            "best": None if self.best is None else self.best[1].to_dict(),
            **self.extra,
        }


def _minimal(final):
    """Members of the optimum set with fewest moral edges, then fewest edges."""
    if not final:
        return []
    fewest = min((r.moral_edges, d.n_edges) for d, r in final)
    return [(d, r) for d, r in final if (r.moral_edges, d.n_edges) == fewest]


def run_search(cands, data, cfg: ScoreConfig, jobs: int = 1,
               cache: FitCache | None = None) -> SearchReport:
    """Score candidates, take the optimum set, delete edges backwards and re-select."""
    cache = FitCache() if cache is None else cache
    scored = score_candidates(cands, data, cfg, jobs, cache)
    optima = optimum_set(scored, cfg.opt_tolerance)
    pool = {d.key: (d, r) for d, r in scored}
    paths = {}
    for k, (d, r) in enumerate(optima):
        path = backward_delete(d, r, data, cfg, jobs, cache)
        paths[k] = path
        for dd, rr in path:
            pool.setdefault(dd.key, (dd, rr))
    union = sorted(pool.values(), key=_sort_key)
    final = optimum_set(union, cfg.opt_tolerance)
    return SearchReport(scored=scored, optima=optima, deletion_paths=paths, final=final,
                        final_minimal=_minimal(final), config=cfg)


def _additions(dag: Dag):
    out = []
    for j in range(dag.p):
        for i in range(dag.p):
            if i != j and (j, i) not in dag.edges and (i, j) not in dag.edges and not dag.has_path(i, j):
                out.append(dag.with_edge(j, i))
    return out


def local_refine(report: SearchReport, data, cfg: ScoreConfig, add_edges: bool = False,
                 max_steps: int = 50, jobs: int = 1, cache: FitCache | None = None) -> SearchReport:
    """Greedy descent from the selected DAG over single-edge deletions and reversals.

    Moves are scored with the full likelihood fit; ``add_edges`` also tries
    every acyclic single-edge addition.  Returns a report whose final sets
    include every DAG visited.
    """
    from .graph import neighbourhood

    cache = FitCache() if cache is None else cache
    if report.best is None:
        return report
    cur_dag, cur_fit = report.best
    visited = {d.key: (d, r) for d, r in report.scored}
    for path in report.deletion_paths.values():
        for d, r in path:
            visited.setdefault(d.key, (d, r))
    steps = 0
    for steps in range(1, max_steps + 1):
        moves = neighbourhood(cur_dag) + (_additions(cur_dag) if add_edges else [])
        if not moves:
            break
        scored = score_candidates(moves, data, cfg, jobs, cache)
        for d, r in scored:
            visited.setdefault(d.key, (d, r))
        best_dag, best_fit = scored[0]
        if best_fit.score < cur_fit.score - 1e-10 * max(1.0, abs(cur_fit.score)):
            cur_dag, cur_fit = best_dag, best_fit
        else:
            break
    union = sorted(visited.values(), key=_sort_key)
    final = optimum_set(union, cfg.opt_tolerance)
    minimal = _minimal(final)
    extra = dict(report.extra, refine_steps=steps)
    return SearchReport(scored=report.scored, optima=report.optima,
                        deletion_paths=report.deletion_paths, final=final,
                        final_minimal=minimal, config=cfg, extra=extra)
