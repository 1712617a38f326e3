"""Named, versioned simulation settings for the synthetic benchmarks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CycleError
from .graph import Dag, markov_equivalence_class, sample_er_dag
from .likelihood import ScoreConfig
from .model import EnvSpec, Mode, ScmParams, simulate

PRESET_VERSION = "1"

P = 10
EDGE_WEIGHT = -0.7
EPS_VAR = 0.5
N_OBS = 300

# psi laws: "half-one-plus-unif" is 0.5 * (1 + U(0, 1)); "unif-0-0.5" is U(0, 0.5)
PSI_LAWS = ("half-one-plus-unif", "unif-0-0.5", "zero", "one-plus-unif")


@dataclass
class Preset:
    name: str
    params: ScmParams
    n_per_env: list
    h_bar: int
    c_psi: float
    noise: str = "gaussian"
    latent_cov: np.ndarray | None = None
    xi: float = 0.0
    response: int | None = None
    candidates: list | None = None
    meta: dict = field(default_factory=dict)
    version: str = PRESET_VERSION

    def score_config(self, **kw) -> ScoreConfig:
        base = dict(h_bar=self.h_bar, c_psi=self.c_psi, mode=Mode.IID_LATENT)
        base.update(kw)
        return ScoreConfig(**base)

    def simulate(self, rng_seed):
        return simulate(self.params, self.n_per_env, self.noise, self.latent_cov, self.xi, rng_seed)


def _draw_psi(rng, law):
    if law == "half-one-plus-unif":
        return 0.5 * (1.0 + rng.uniform())
    if law == "unif-0-0.5":
        return rng.uniform(0.0, 0.5)
    if law == "one-plus-unif":
        return 1.0 + rng.uniform()
    if law == "zero":
        return 0.0
    raise ValueError(f"unknown psi law {law!r}; choose from {PSI_LAWS}")


def _b_from_dag(dag: Dag, weight=EDGE_WEIGHT):
    b = np.zeros((dag.p, dag.p))
    for j, i in dag.edges:
        b[i, j] = weight
    return b


def _sparse_gamma(rng, p, h):
    top = np.sqrt(0.3 / np.sqrt(h))
    g = rng.uniform(0.0, top, (p, h))
    g[g < 0.5 * top] = 0.0
    return g


def _er10(rng):
    return sample_er_dag(P, 0.1, rng_seed=rng, n_edges=10)


def _shift_envs(rng, m, zeta, psi_law, w1, perturbed=None, mode=Mode.IID_LATENT,
                noise="gaussian"):
    """Observational environment followed by ``m - 1`` shift environments."""
    p = w1.size
    perturbed = np.ones(p, dtype=bool) if perturbed is None else perturbed
    envs = [EnvSpec(w1.copy(), label="observational")]
    for e in range(1, m):
        if noise == "laplace":
            # Laplace scale zeta + U(-1, 1), i.e. variance 2 * scale^2
            scale = zeta + rng.uniform(-1.0, 1.0, p)
            extra = 2.0 * scale ** 2
        else:
            extra = zeta + rng.uniform(0.0, 1.0, p)
        psi = _draw_psi(rng, psi_law)
        envs.append(EnvSpec(w1 + np.where(perturbed, extra, 0.0), psi=psi, mode=mode,
                            label=f"shift-{e}"))
    return envs


def _setting(rng, t, h, zeta, psi_law, do=False):
    dag = _er10(rng)
    gamma = _sparse_gamma(rng, P, h)
    w1 = np.full(P, EPS_VAR)
    envs = _shift_envs(rng, 7, zeta, psi_law, w1)
    if do:
        for e in range(2, 7):
            targets = rng.choice(P, size=2, replace=False)
            envs[e].do_values = {int(k): 5.0 for k in targets}
            envs[e].label = f"shift-do-{e}"
    params = ScmParams(_b_from_dag(dag), gamma, w1, envs)
    return params, [N_OBS] + [5 * t] * 6


def _table2_dag(rng, response=9, parents=(2, 3), children=(6, 7, 8), max_attempts=10_000):
    """ER DAG whose edges at ``response`` are replaced by the given parents and children."""
    for _ in range(max_attempts):
        base = _er10(rng)
        edges = {(j, i) for j, i in base.edges if response not in (j, i)}
        edges |= {(j, response) for j in parents} | {(response, i) for i in children}
        try:
            return Dag(P, frozenset(edges))
        except CycleError:
            continue
    raise RuntimeError("could not build an acyclic response DAG")


def _table2(rng, setting):
    dag = _table2_dag(rng)
    gamma = rng.uniform(0.0, np.sqrt(0.3), (P, 1))
    w1 = np.full(P, EPS_VAR)
    perturbed = np.ones(P, dtype=bool)
    if setting in (1, 3):
        perturbed[9] = False
    law = "zero" if setting in (1, 2) else "one-plus-unif"
    envs = _shift_envs(rng, 5, 5.0, law, w1, perturbed)
    params = ScmParams(_b_from_dag(dag), gamma, w1, envs)
    return params, [1000] * 5


def table3_candidates(truth: Dag, rng, n_extra=5, extra_edges=((4, 9), (7, 9), (4, 2)),
                      mec_members=8):
    """Markov-equivalent members with random extra edges, plus the truth with fixed extras."""
    mec = markov_equivalence_class(truth)
    cands = []
    for k in range(mec_members):
        d = mec[k % len(mec)]
        added = 0
        pairs = [(j, i) for j in range(truth.p) for i in range(truth.p) if j != i]
        order = rng.permutation(len(pairs))
        for idx in order:
            if added == n_extra:
                break
            j, i = pairs[idx]
            if (j, i) in d.edges or (i, j) in d.edges:
                continue
            try:
                d = d.with_edge(j, i)
            except CycleError:
                continue
            added += 1
        cands.append(d)
    last = truth
    for j, i in extra_edges:
        if (j, i) in last.edges or (i, j) in last.edges:
            continue
        try:
            last = last.with_edge(j, i)
        except CycleError:
            continue
    cands.append(last)
    return cands


def _table3(rng, t, max_tries=200):
    # prefer a ground-truth DAG whose equivalence class has exactly 8 members
    chosen = None
    for _ in range(max_tries):
        dag = _er10(rng)
        if len(markov_equivalence_class(dag)) == 8:
            chosen = dag
            break
    if chosen is None:
        chosen = dag
    gamma = np.zeros((P, 3))
    gamma[5, 0] = 1.0
    gamma[4, 1] = 1.0
    col = rng.uniform(0.0, 1.0, P)
    col[col < 0.5] = 0.0
    gamma[:, 2] = col
    w1 = np.full(P, EPS_VAR)
    envs = _shift_envs(rng, 5, 2.0, "unif-0-0.5", w1)
    params = ScmParams(_b_from_dag(chosen), gamma, w1, envs)
    cands = table3_candidates(chosen, rng)
    return params, [1000] + [5 * t] * 4, cands


def _appx_g(rng, t, kind):
    h = 2 if kind == "corr-latent" else 1
    dag = _er10(rng)
    gamma = _sparse_gamma(rng, P, h)
    w1 = np.full(P, EPS_VAR)
    noise = "laplace" if kind == "laplace" else "gaussian"
    envs = _shift_envs(rng, 7, 5.0, "unif-0-0.5", w1, noise=noise)
    base = None
    if kind == "corr-latent":
        base = np.array([[1.0, 0.2], [0.2, 1.0]])
        envs[0].latent_cov = base.copy()
        for env in envs[1:]:
            env.latent_cov = np.array([[1.0 + rng.uniform(0, 0.5), 0.2],
                                       [0.2, 1.0 + rng.uniform(0, 0.5)]])
            env.psi = 0.0
    params = ScmParams(_b_from_dag(dag), gamma, w1, envs)
    return params, [N_OBS] + [5 * t] * 6, noise, base


PRESETS = (
    "setting-a", "setting-b", "setting-c", "setting-d",
    "table2-setting-1", "table2-setting-2", "table2-setting-3", "table2-setting-4",
    "table3", "appxG-laplace", "appxG-corr-latent", "appxG-nonlinear-0.1", "appxG-nonlinear-0.3",
)


def make_preset(name: str, seed, t: int = 64, psi_law: str | None = None) -> Preset:
    """Build a named preset; ``seed`` fixes the structure and perturbation magnitudes.

    ``psi_law`` overrides the latent-perturbation law of the shift settings
    (default ``half-one-plus-unif`` for settings a-d, ``unif-0-0.5`` for the
    misspecification settings).
    """
    if t < 1:
        raise ValueError("t must be a positive integer")
    rng = np.random.default_rng(seed)
    meta = {"seed": seed, "t": t}
    if name.startswith("setting-"):
        law = psi_law or "half-one-plus-unif"
        specs = {"a": (1, 5.0, False), "b": (1, 2.0, False), "c": (2, 5.0, False), "d": (1, 5.0, True)}
        key = name.split("-", 1)[1]
        if key not in specs:
            raise KeyError(f"unknown preset {name!r}")
        h, zeta, do = specs[key]
        params, ns = _setting(rng, t, h, zeta, law, do)
        meta.update(psi_law=law, zeta=zeta, h=h)
        return Preset(name, params, ns, h_bar=h + 1, c_psi=2.0, meta=meta)
    if name.startswith("table2-setting-"):
        setting = int(name.rsplit("-", 1)[1])
        if setting not in (1, 2, 3, 4):
            raise KeyError(f"unknown preset {name!r}")
        params, ns = _table2(rng, setting)
        return Preset(name, params, ns, h_bar=2, c_psi=2.0, response=9, meta=meta)
    if name == "table3":
        params, ns, cands = _table3(rng, t)
        return Preset(name, params, ns, h_bar=3, c_psi=1.0, candidates=cands, meta=meta)
    if name.startswith("appxG-"):
        kind = name.split("-", 1)[1]
        if kind in ("laplace", "corr-latent"):
            params, ns, noise, base = _appx_g(rng, t, kind)
            return Preset(name, params, ns, h_bar=3 if kind == "corr-latent" else 2, c_psi=0.5,
                          noise=noise, latent_cov=base, meta=meta)
        if kind in ("nonlinear-0.1", "nonlinear-0.3"):
            params, ns, _, _ = _appx_g(rng, t, "nonlinear")
            return Preset(name, params, ns, h_bar=2, c_psi=0.5, xi=float(kind.rsplit("-", 1)[1]),
                          meta=meta)
    raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
