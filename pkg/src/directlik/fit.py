"""Scoring a single DAG by alternating minimization.

The connectivity matrix is updated by an exact linear solve; the nuisance
parameters (Gamma, w1, per-environment offsets and psi) by projected
gradient descent with backtracking.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import IllConditionedError, LineSearchStall
from .graph import Dag, moral_edge_count
from .likelihood import ScoreConfig
from .model import Mode, check_weights

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_HALVINGS = 60
W_FLOOR = 1e-8


@dataclass
class Nuisance:
    """Nuisance parameters; ``v[0]`` is zero and ``w^e = w1 + v[e]``."""

    gamma: np.ndarray
    w1: np.ndarray
    v: np.ndarray
    psi: np.ndarray

    @property
    def ws(self) -> np.ndarray:
        return self.w1[None, :] + self.v

    def copy(self) -> "Nuisance":
        return Nuisance(self.gamma.copy(), self.w1.copy(), self.v.copy(), self.psi.copy())


class NuisanceProblem:
    """Weighted NLL as a function of the nuisance parameters for fixed B.

    The free parameters are flattened as ``[Gamma, w1, offsets, psi]`` where
    offsets are per-coordinate vectors ``v^e`` (one scalar ``zeta^e`` in
    single-parameter mode) for environments 2..m, and psi is present only when
    the mode and ``c_psi`` allow a latent perturbation.
    """

    def __init__(self, b, data, cfg: ScoreConfig, h: int | None = None):
        self.cfg = cfg
        self.p = data[0].p
        self.m = len(data)
        self.h = cfg.h_bar if h is None else h
        self.pi = np.array([d.weight for d in data])
        self.covs = np.array([d.cov for d in data])
        keep = np.ones((self.m, self.p))
        for e, d in enumerate(data):
            keep[e, list(d.do_set)] = 0.0
        self.keep = keep
        self.mask2 = keep[:, :, None] * keep[:, None, :]
        self.pad = np.einsum("ek,kl->ekl", 1.0 - keep, np.eye(self.p))
        self.n_do = (1.0 - keep).sum(axis=1)
        self.single = cfg.mode is Mode.SINGLE_PARAM
        self.psi_free = cfg.psi_free
        self.set_b(b)

    # -- layout ---------------------------------------------------------
    @property
    def n_offsets(self) -> int:
        return (self.m - 1) * (1 if self.single else self.p)

    @property
    def size(self) -> int:
        return self.p * self.h + self.p + self.n_offsets + (self.m - 1 if self.psi_free else 0)

    def pack(self, nu: Nuisance) -> np.ndarray:
        off = nu.v[1:, 0] if self.single else nu.v[1:].ravel()
        parts = [nu.gamma.ravel(), nu.w1, off]
        if self.psi_free:
            parts.append(nu.psi[1:])
        return np.concatenate(parts)

    def unpack(self, x) -> Nuisance:
        p, h, m = self.p, self.h, self.m
        i = p * h
        gamma = x[:i].reshape(p, h)
        w1 = x[i:i + p]
        i += p
        v = np.zeros((m, p))
        if self.single:
            v[1:] = x[i:i + m - 1, None]
        else:
            v[1:] = x[i:i + (m - 1) * p].reshape(m - 1, p)
        i += self.n_offsets
        psi = np.zeros(m)
        if self.psi_free:
            psi[1:] = x[i:i + m - 1]
        return Nuisance(gamma.copy(), w1.copy(), v, psi)

    def bounds(self):
        p, h, m = self.p, self.h, self.m
        lo = np.concatenate([np.full(p * h, -np.inf), np.full(p, W_FLOOR), np.zeros(self.n_offsets)])
        hi = np.full(lo.size, np.inf)
        if self.psi_free:
            lo = np.concatenate([lo, np.zeros(m - 1)])
            hi = np.concatenate([hi, np.full(m - 1, self.cfg.c_psi)])
        return lo, hi

    # -- evaluation -----------------------------------------------------
    def set_b(self, b):
        self.b = np.asarray(b, dtype=float)
        a = np.eye(self.p) - self.b
        self.s = np.einsum("ij,ejk,lk->eil", a, self.covs, a)

    def _inverse(self, nu: Nuisance):
        ggt = nu.gamma @ nu.gamma.T
        k = (1.0 + nu.psi)[:, None, None] * ggt + nu.ws[:, :, None] * np.eye(self.p)
        kt = k * self.mask2 + self.pad
        try:
            ll = np.linalg.cholesky(kt)
        except np.linalg.LinAlgError:
            cond = np.max(np.linalg.cond(kt)) if np.all(np.isfinite(kt)) else np.inf
            raise IllConditionedError("nuisance covariance is not numerically PD", cond) from None
        logdet = 2.0 * np.log(np.diagonal(ll, axis1=1, axis2=2)).sum(axis=1)
        kinv = np.linalg.inv(kt)
        return ggt, logdet, kinv

    def env_values(self, nu: Nuisance) -> np.ndarray:
        _, logdet, kinv = self._inverse(nu)
        st = self.s * self.mask2 + self.pad
        return logdet + np.einsum("eij,eji->e", kinv, st) - self.n_do

    def value(self, nu: Nuisance) -> float:
        return float(self.pi @ self.env_values(nu))

    def value_and_grad(self, x):
        nu = self.unpack(x)
        ggt, logdet, kinv = self._inverse(nu)
        st = self.s * self.mask2 + self.pad
        f = float(self.pi @ (logdet + np.einsum("eij,eji->e", kinv, st) - self.n_do))
        pm = kinv * self.mask2
        g = (pm - pm @ self.s @ pm) * self.pi[:, None, None]
        g_gamma = 2.0 * np.einsum("e,eij,jk->ik", 1.0 + nu.psi, g, nu.gamma)
        diag = np.diagonal(g, axis1=1, axis2=2)
        parts = [g_gamma.ravel(), diag.sum(axis=0)]
        if self.single:
            parts.append(diag[1:].sum(axis=1))
        else:
            parts.append(diag[1:].ravel())
        if self.psi_free:
            parts.append(np.einsum("eij,ij->e", g, ggt)[1:])
        return f, np.concatenate(parts)

    def fisher_diag(self, x) -> np.ndarray:
        """Diagonal of the Fisher information, used as a step preconditioner."""
        nu = self.unpack(x)
        _, _, kinv = self._inverse(nu)
        pm = kinv * self.mask2
        pdiag = np.diagonal(pm, axis1=1, axis2=2)
        sq = pdiag ** 2 * self.pi[:, None]
        scale = self.pi * (1.0 + nu.psi) ** 2
        kg = pm @ nu.gamma
        gkg = np.einsum("pa,epa->ea", nu.gamma, kg)
        h_gamma = 2.0 * (np.einsum("e,ep,ea->pa", scale, pdiag, gkg)
                         + np.einsum("e,epa->pa", scale, kg ** 2))
        parts = [h_gamma.ravel(), sq.sum(axis=0)]
        if self.single:
            parts.append(self.pi[1:] * np.einsum("eij,eij->e", pm, pm)[1:])
        else:
            parts.append(sq[1:].ravel())
        if self.psi_free:
            mg = pm @ (nu.gamma @ nu.gamma.T)
            parts.append((self.pi * np.einsum("eij,eji->e", mg, mg))[1:])
        return np.concatenate(parts)

    def precision(self, nu: Nuisance) -> np.ndarray:
        """Per-environment inverse of K restricted to the non-do block, zero padded."""
        _, _, kinv = self._inverse(nu)
        return kinv * self.mask2


def _project(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def projected_gradient(problem: NuisanceProblem, x, eps1: float, max_iter: int):
    """Diagonally preconditioned projected gradient with Armijo backtracking.

    Returns ``(x, f, iterations, stalled)``.
    """
    lo, hi = problem.bounds()
    x = _project(np.asarray(x, dtype=float), lo, hi)
    f, g = problem.value_and_grad(x)
    it = 0
    stalled = False
    while it < max_iter:
        it += 1
        d = -g / (problem.fisher_diag(x) + 1e-12)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            xn = _project(x + t * d, lo, hi)
            try:
                fn, gn = problem.value_and_grad(xn)
            except IllConditionedError:
                fn = np.inf
            if fn <= f + ARMIJO * (g @ (xn - x)):
                break
            t *= 0.5
        else:
            stalled = True
            break
        rel = (f - fn) / max(1.0, abs(f))
        x, f, g = xn, fn, gn
        if rel < eps1:
            break
    return x, f, it, stalled


def nuisance_gradient_step(b, nuisance: Nuisance, data, cfg: ScoreConfig):
    """Minimize the weighted NLL over the nuisance parameters at fixed ``b``.

    Returns the updated :class:`Nuisance`.  A line-search stall is logged and
    the current iterate returned.
    """
    problem = NuisanceProblem(b, data, cfg, h=nuisance.gamma.shape[1])
    x, _, _, stalled = projected_gradient(problem, problem.pack(nuisance), cfg.eps1, cfg.max_inner)
    if stalled:
        log.warning("%s", LineSearchStall("nuisance line search exhausted its halvings"))
    return problem.unpack(x)


def _free_entries(dag: Dag):
    rows = np.array([i for j, i in dag.edges], dtype=int)
    cols = np.array([j for j, i in dag.edges], dtype=int)
    return rows, cols


def _solve_b_from_precision(dag: Dag, prec, covs, pi):
    p = covs.shape[1]
    b = np.zeros((p, p))
    if not dag.edges:
        return b
    rows, cols = _free_entries(dag)
    hess = np.zeros((rows.size, rows.size))
    rhs = np.zeros(rows.size)
    for pe, ce, we in zip(prec, covs, pi):
        hess += we * pe[np.ix_(rows, rows)] * ce[np.ix_(cols, cols)]
        rhs += we * (pe @ ce)[rows, cols]
    hess = 0.5 * (hess + hess.T)
    try:
        sol = np.linalg.solve(np.linalg.cholesky(hess).T,
                              np.linalg.solve(np.linalg.cholesky(hess), rhs))
    except np.linalg.LinAlgError:
        ridge = 1e-10 * max(1.0, float(np.mean(np.diag(hess))))
        log.warning("singular B-step Hessian, adding ridge %.1e", ridge)
        sol = np.linalg.solve(hess + ridge * np.eye(rows.size), rhs)
    b[rows, cols] = sol
    return b


def solve_b(dag: Dag, gamma, psis, ws, data) -> np.ndarray:
    """Exact minimizer of ``sum_e pi_e tr(K_e^-1 (I-B) S_e (I-B)^T)`` over B supported on ``dag``."""
    p = data[0].p
    gamma = np.asarray(gamma, dtype=float).reshape(p, -1)
    ws = np.atleast_2d(np.asarray(ws, dtype=float))
    nu = Nuisance(gamma, ws[0], ws - ws[0], np.asarray(psis, dtype=float))
    cfg = ScoreConfig(h_bar=gamma.shape[1], c_psi=max(1.0, float(np.max(psis))))
    problem = NuisanceProblem(np.zeros((p, p)), data, cfg, h=gamma.shape[1])
    return _solve_b_from_precision(dag, problem.precision(nu), problem.covs, problem.pi)


def _regression_b(dag: Dag, cov):
    p = cov.shape[0]
    b = np.zeros((p, p))
    for i in range(p):
        pa = dag.parents(i)
        if not pa:
            continue
        cpp = cov[np.ix_(pa, pa)]
        try:
            b[i, pa] = np.linalg.solve(np.linalg.cholesky(cpp).T,
                                       np.linalg.solve(np.linalg.cholesky(cpp), cov[pa, i]))
        except np.linalg.LinAlgError:
            log.warning("singular parent covariance for node %d, adding 1e-8 ridge", i)
            b[i, pa] = np.linalg.solve(cpp + 1e-8 * np.eye(len(pa)), cov[pa, i])
    return b


def initialize(dag: Dag, data, cfg: ScoreConfig, grid: int = 25):
    """Starting point ``(B0, Nuisance0)``.

    B0 regresses each node on its parents in the observational covariance,
    w1 and Gamma come from the residual covariance, and each interventional
    environment gets ``(zeta, psi)`` from a grid with ``w^e = w1 + zeta``.
    """
    if data[0].do_set:
        raise ValueError("the first environment must be observational")
    p, m, h = data[0].p, len(data), cfg.h_bar
    cov1 = data[0].cov
    b0 = _regression_b(dag, cov1)
    a = np.eye(p) - b0
    resid = a @ cov1 @ a.T
    resid = 0.5 * (resid + resid.T)
    w1 = np.maximum(np.diag(resid).copy(), W_FLOOR)
    u, d, _ = np.linalg.svd(resid)
    gamma = u[:, :h] * np.sqrt(d[:h])
    nu = Nuisance(gamma, w1, np.zeros((m, p)), np.zeros(m))
    if m == 1:
        return b0, nu

    problem = NuisanceProblem(b0, data, cfg, h=h)
    ggt = gamma @ gamma.T
    psi_grid = np.linspace(0.0, cfg.c_psi, grid) if cfg.psi_free else np.zeros(1)
    for e in range(1, m):
        top = 10.0 * float(np.max(np.diag(data[e].cov)))
        zz, pp = np.meshgrid(np.linspace(0.0, top, grid), psi_grid, indexing="ij")
        zz, pp = zz.ravel(), pp.ravel()
        k = (w1[None, :] + zz[:, None])[:, :, None] * np.eye(p) + (1.0 + pp)[:, None, None] * ggt
        k = k * problem.mask2[e] + problem.pad[e]
        st = problem.s[e] * problem.mask2[e] + problem.pad[e]
        sign, logdet = np.linalg.slogdet(k)
        vals = logdet + np.einsum("nij,ji->n", np.linalg.inv(k), st)
        vals[sign <= 0] = np.inf
        best = int(np.argmin(vals))
        nu.v[e] = zz[best]
        nu.psi[e] = pp[best]
    return b0, nu


@dataclass
class FitResult:
    dag: Dag
    b_hat: np.ndarray
    gamma_hat: np.ndarray
    psi_hat: np.ndarray
    w_hat: np.ndarray
    score: float
    nll: float
    iterations: int
    converged: bool
    per_iter_nll: list = field(default_factory=list)
    lam: float = 0.0
    moral_edges: int = 0
    inner_iterations: int = 0
    stalls: int = 0
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "dag": self.dag.to_dict(),
            "score": self.score,
            "nll": self.nll,
            "lambda": self.lam,
            "moral_edges": self.moral_edges,
            "converged": self.converged,
            "iterations": self.iterations,
            "inner_iterations": self.inner_iterations,
            "stalls": self.stalls,
            "message": self.message,
            "b_hat": np.asarray(self.b_hat).tolist(),
            "gamma_hat": np.asarray(self.gamma_hat).tolist(),
            "psi_hat": np.asarray(self.psi_hat).tolist(),
            "w_hat": np.asarray(self.w_hat).tolist(),
            "per_iter_nll": [float(v) for v in self.per_iter_nll],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, obj) -> "FitResult":
        return cls(
            dag=Dag.from_dict(obj["dag"]), b_hat=np.array(obj["b_hat"]),
            gamma_hat=np.array(obj["gamma_hat"]), psi_hat=np.array(obj["psi_hat"]),
            w_hat=np.array(obj["w_hat"]), score=obj["score"], nll=obj["nll"],
            iterations=obj["iterations"], converged=obj["converged"],
            per_iter_nll=list(obj["per_iter_nll"]), lam=obj["lambda"],
            moral_edges=obj["moral_edges"], inner_iterations=obj.get("inner_iterations", 0),
            stalls=obj.get("stalls", 0), message=obj.get("message", ""),
        )


def _validate_data(data) -> None:
    if not data:
        raise ValueError("at least one environment is required")
    p = data[0].p
    if any(d.p != p for d in data):
        raise ValueError("environments disagree on the number of variables")
    check_weights(data)


def score_dag(dag: Dag, data, cfg: ScoreConfig) -> FitResult:
    """Fit the model with B supported on ``dag`` and return its penalized score."""
    _validate_data(data)
    if dag.p != data[0].p:
        raise ValueError("dag and data disagree on the number of variables")
    b, nu = initialize(dag, data, cfg)
    problem = NuisanceProblem(b, data, cfg)
    x = problem.pack(nu)
    f = problem.value(nu)
    history = [f]
    best = (f, b, x)
    converged = False
    inner_total = 0
    stalls = 0
    it = 0
    for it in range(1, cfg.max_outer + 1):
        x, f, n_inner, stalled = projected_gradient(problem, x, cfg.eps1, cfg.max_inner)
        inner_total += n_inner
        stalls += int(stalled)
        b_new = _solve_b_from_precision(dag, problem.precision(problem.unpack(x)),
                                        problem.covs, problem.pi)
        delta = float(np.max(np.abs(b_new - b), initial=0.0))
        b = b_new
        problem.set_b(b)
        f = problem.value(problem.unpack(x))
        history.append(f)
        if f <= best[0]:
            best = (f, b, x)
        if delta <= cfg.eps2:
            converged = True
            break
    if stalls:
        log.warning("%d nuisance line-search stalls while scoring %s", stalls, dag)

    f, b, x = best
    nu = problem.unpack(x)
    moral = moral_edge_count(dag)
    return FitResult(
        dag=dag, b_hat=b, gamma_hat=nu.gamma, psi_hat=nu.psi, w_hat=nu.ws,
        score=f + cfg.lam * moral, nll=f, iterations=it, converged=converged,
        per_iter_nll=history, lam=cfg.lam, moral_edges=moral,
        inner_iterations=inner_total, stalls=stalls,
        message="" if converged else f"outer loop hit {cfg.max_outer} iterations",
    )
