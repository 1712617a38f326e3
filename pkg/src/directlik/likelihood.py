"""Gaussian negative log-likelihood of the perturbation model and related scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import ConstraintViolation, IllConditionedError, MatrixNotPDError
from .graph import Dag, moral_edge_count
from .model import Mode, sigma_model


@dataclass(frozen=True)
class ScoreConfig:
    """Penalty, model size and optimizer tolerances.

    Parameters
    ----------
    lam : penalty on the number of moral edges
    h_bar : number of latent columns in the model (0 disables latents)
    c_psi : upper bound on the latent perturbation psi
    mode : nuisance restriction, see :class:`Mode`
    eps1 : relative NLL change that stops the nuisance updates
    eps2 : sup-norm change of B that stops the outer loop
    opt_tolerance : relative tolerance defining the optimum set
    """

    lam: float = 0.0
    h_bar: int = 1
    c_psi: float = 1.0
    mode: Mode = Mode.IID_LATENT
    eps1: float = 1e-6
    eps2: float = 1e-2
    opt_tolerance: float = 1e-3
    max_outer: int = 200
    max_inner: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.h_bar < 0:
            raise ValueError("h_bar must be nonnegative")
        if self.lam < 0 or self.c_psi < 0:
            raise ValueError("lam and c_psi must be nonnegative")
        if min(self.eps1, self.eps2, self.opt_tolerance) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be positive")

    @property
    def psi_free(self) -> bool:
        return self.mode is not Mode.UNPERTURBED and self.c_psi > 0

    def replace(self, **kw) -> "ScoreConfig":
        vals = {f: getattr(self, f) for f in self.__dataclass_fields__}
        vals.update(kw)
        return ScoreConfig(**vals)


def _latent_k(gamma, psi, w):
    w = np.asarray(w, dtype=float)
    gamma = np.asarray(gamma, dtype=float).reshape(w.size, -1)
    return np.diag(w) + (1.0 + psi) * (gamma @ gamma.T)


def _chol(k):
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(k) if np.all(np.isfinite(k)) else np.inf
        raise IllConditionedError("latent-plus-noise covariance is not numerically PD", cond) from None


def _nll_dense(k, s):
    if k.shape[0] == 0:
        return 0.0
    ll = _chol(k)
    logdet = 2.0 * np.log(np.diag(ll)).sum()
    z = np.linalg.solve(ll, s)
    tr = np.trace(np.linalg.solve(ll.T, z))
    return float(logdet + tr)


def env_nll(b, gamma, psi, w, env) -> float:
    """``log det K + tr(K^-1 (I-B) S (I-B)^T)`` with ``K = diag(w) + (1+psi) Gamma Gamma^T``.

    The do-set of ``env`` is ignored here; see :func:`env_nll_do`.
    """
    b = np.asarray(b, dtype=float)
    a = np.eye(b.shape[0]) - b
    return _nll_dense(_latent_k(gamma, psi, w), a @ env.cov @ a.T)


def env_nll_do(b, gamma, psi, w, env) -> float:
    """Likelihood restricted to the coordinates outside the do-set of ``env``."""
    if not env.do_set:
        return env_nll(b, gamma, psi, w, env)
    b = np.asarray(b, dtype=float)
    p = b.shape[0]
    keep = np.array([k for k in range(p) if k not in env.do_set], dtype=int)
    if keep.size == 0:
        return 0.0
    # rows of (I - F B) on the kept coordinates are rows of (I - B)
    a = (np.eye(p) - b)[keep]
    k = _latent_k(gamma, psi, w)[np.ix_(keep, keep)]
    return _nll_dense(k, a @ env.cov @ a.T)


def check_feasible(psis, ws, cfg: ScoreConfig, tol: float = 1e-12) -> None:
    psis = np.asarray(psis, dtype=float)
    ws = np.atleast_2d(np.asarray(ws, dtype=float))
    if psis[0] != 0:
        raise ConstraintViolation("psi[observational] = 0", f"got {psis[0]}")
    if np.any(psis < 0) or np.any(psis > cfg.c_psi + tol):
        raise ConstraintViolation("0 <= psi <= c_psi", f"psi={psis.tolist()}, c_psi={cfg.c_psi}")
    if cfg.mode is Mode.UNPERTURBED and np.any(psis != 0):
        raise ConstraintViolation("psi = 0 in unperturbed-latent mode")
    if np.any(ws[0] <= 0):
        raise ConstraintViolation("w1 > 0")
    diff = ws - ws[0]
    if np.any(diff < -tol * np.maximum(1.0, np.abs(ws))):
        raise ConstraintViolation("w^e >= w^1 elementwise")
    if cfg.mode is Mode.SINGLE_PARAM:
        spread = diff.max(axis=1) - diff.min(axis=1)
        if np.any(spread > 1e-10 * np.maximum(1.0, np.abs(diff).max())):
            raise ConstraintViolation("w^e - w^1 constant in single-parameter mode")


def weighted_nll(b, gamma, psis, ws, data) -> float:
    return float(sum(env.weight * env_nll_do(b, gamma, psi, w, env)
                     for psi, w, env in zip(psis, ws, data)))


def total_score(b, gamma, psis, ws, data, cfg: ScoreConfig, dag: Dag) -> float:
    """Weighted NLL over environments plus ``lam`` times the moral edge count."""
    if len(psis) != len(data) or len(ws) != len(data):
        raise ValueError("need one (psi, w) pair per environment")
    check_feasible(psis, ws, cfg)
    return weighted_nll(b, gamma, psis, ws, data) + cfg.lam * moral_edge_count(dag)


def saturated_nll(data) -> float:
    """Lower bound ``sum_e pi_e (log det S_e + |C_e|)`` attained by an exact fit."""
    total = 0.0
    for env in data:
        keep = [k for k in range(env.p) if k not in env.do_set]
        if not keep:
            continue
        c = env.cov[np.ix_(keep, keep)]
        sign, logdet = np.linalg.slogdet(c)
        if sign <= 0:
            raise MatrixNotPDError("sample covariance is singular")
        total += env.weight * (logdet + len(keep))
    return float(total)


def gaussian_kl(sigma_true, sigma_model_) -> float:
    """KL divergence between centred Gaussians, ``KL(N(0, sigma_true) || N(0, sigma_model_))``."""
    st = np.asarray(sigma_true, dtype=float)
    sm = np.asarray(sigma_model_, dtype=float)
    if st.shape != sm.shape or st.ndim != 2:
        raise ValueError("covariances must be square and of equal size")
    try:
        lt = np.linalg.cholesky(st)
        lm = np.linalg.cholesky(sm)
    except np.linalg.LinAlgError:
        raise MatrixNotPDError("KL arguments must be positive definite") from None
    p = st.shape[0]
    z = np.linalg.solve(lm, lt)
    tr = float(np.sum(z * z))
    logdet = 2.0 * (np.log(np.diag(lm)).sum() - np.log(np.diag(lt)).sum())
    return 0.5 * (tr - p + logdet)


def _kl_and_grad(theta, s, w1, ggt, const):
    zeta, psi = theta
    k = np.diag(w1 + zeta) + (1.0 + psi) * ggt
    ll = np.linalg.cholesky(k)
    kinv = np.linalg.inv(k)
    val = 0.5 * (2.0 * np.log(np.diag(ll)).sum() + np.sum(kinv * s) - const)
    g = kinv - kinv @ s @ kinv
    return val, np.array([0.5 * np.trace(g), 0.5 * np.sum(g * ggt)])


def fit_nuisance_kl(sigma_true, b, gamma, w1, c_zeta, c_psi, grid: int = 25):
    """Best single-parameter perturbation ``(zeta, psi)`` in a box for fixed ``(B, Gamma, w1)``.

    Minimizes ``KL(sigma_true, sigma_model(b, gamma, psi, w1 + zeta))`` over
    ``[0, c_zeta] x [0, c_psi]`` by a coarse grid followed by local refinement.

    Returns
    -------
    zeta_bar, psi_bar, kl_value
    """
    if c_zeta < 0 or c_psi < 0:
        raise ValueError("box bounds must be nonnegative")
    st = np.asarray(sigma_true, dtype=float)
    b = np.asarray(b, dtype=float)
    w1 = np.asarray(w1, dtype=float)
    p = b.shape[0]
    gamma = np.asarray(gamma, dtype=float).reshape(p, -1)
    a = np.eye(p) - b
    s = a @ st @ a.T
    sign, logdet_t = np.linalg.slogdet(st)
    if sign <= 0:
        raise MatrixNotPDError("sigma_true must be positive definite")
    const = logdet_t + p
    ggt = gamma @ gamma.T

    # coarse grid, batched over all points
    zs = np.linspace(0.0, c_zeta, grid) if c_zeta > 0 else np.zeros(1)
    ps = np.linspace(0.0, c_psi, grid) if c_psi > 0 else np.zeros(1)
    zz, pp = np.meshgrid(zs, ps, indexing="ij")
    ks = (np.eye(p) * w1)[None] + zz.ravel()[:, None, None] * np.eye(p) \
        + (1.0 + pp.ravel())[:, None, None] * ggt
    sign, ld = np.linalg.slogdet(ks)
    vals = 0.5 * (ld + np.einsum("nij,ji->n", np.linalg.inv(ks), s) - const)
    i = int(np.argmin(vals))
    theta0 = np.array([zz.ravel()[i], pp.ravel()[i]])
    best = (float(vals[i]), theta0)
    if c_zeta == 0 and c_psi == 0:
        return 0.0, 0.0, max(best[0], 0.0)

    res = optimize.minimize(_kl_and_grad, theta0, args=(s, w1, ggt, const), jac=True,
                            method="L-BFGS-B", bounds=[(0.0, c_zeta), (0.0, c_psi)],
                            options={"ftol": 1e-15, "gtol": 1e-13, "maxiter": 500})
    if res.fun < best[0]:
        best = (float(res.fun), np.clip(res.x, 0.0, [c_zeta, c_psi]))
    # coordinate polish, one variable at a time
    theta = best[1].copy()
    f = best[0]
    widths = (c_zeta, c_psi)
    for _ in range(50):
        f_old = f
        for j in range(2):
            if widths[j] == 0:
                continue

            def obj(x, j=j):
                t = theta.copy()
                t[j] = x
                return _kl_and_grad(t, s, w1, ggt, const)[0]

            r = optimize.minimize_scalar(obj, bounds=(0.0, widths[j]), method="bounded",
                                         options={"xatol": 1e-6 * widths[j] * 1e-3})
            if r.fun < f:
                theta[j] = r.x
                f = float(r.fun)
        if f_old - f <= 1e-16:
            break
    return float(theta[0]), float(theta[1]), max(f, 0.0)


def model_covariances(b, gamma, psis, ws):
    return [sigma_model(b, gamma, psi, w) for psi, w in zip(psis, ws)]
