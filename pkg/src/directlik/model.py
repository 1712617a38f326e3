"""Linear SCM with latent confounders under shift/do perturbations.

Environment ``e`` generates

    X = B X + Gamma H + eps + delta,     H ~ (0, Psi_e),

where ``eps + delta`` has independent coordinates with variances ``w_e`` and
``Psi_e = (1 + psi_e) I`` unless an explicit latent covariance is supplied.
Variables in the do-set of an environment are held at fixed values.
The first environment is observational.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import MatrixNotPDError, SchemaError
from .graph import Dag


class Mode(str, Enum):
    """How the per-environment nuisance parameters are restricted."""

    IID_LATENT = "iid-latent"
    UNPERTURBED = "unperturbed"
    SINGLE_PARAM = "single-param"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        aliases = {
            "iid": cls.IID_LATENT, "iid-latent": cls.IID_LATENT,
            "unperturbed": cls.UNPERTURBED, "unperturbed-latent": cls.UNPERTURBED,
            "single-param": cls.SINGLE_PARAM, "single-parameter": cls.SINGLE_PARAM,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown perturbation mode {value!r}") from None


@dataclass
class EnvSpec:
    """Perturbation parameters of one environment.

    ``w`` are the total variances of ``eps + delta``; ``do_values`` maps a
    variable index to the constant it is clamped at.  ``latent_cov`` overrides
    ``(1 + psi) * base`` when the latent perturbation is not a scalar multiple.
    """

    w: np.ndarray
    psi: float = 0.0
    zeta: float | None = None
    do_values: dict = field(default_factory=dict)
    mode: Mode = Mode.IID_LATENT
    latent_cov: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.psi = float(self.psi)
        self.mode = Mode.parse(self.mode)
        self.do_values = {int(k): float(v) for k, v in self.do_values.items()}
        if self.latent_cov is not None:
            self.latent_cov = np.atleast_2d(np.asarray(self.latent_cov, dtype=float))
        if self.psi < 0:
            raise ValueError("psi must be nonnegative")
        if self.zeta is not None and self.zeta < 0:
            raise ValueError("zeta must be nonnegative")
        if self.mode is Mode.UNPERTURBED and self.psi != 0.0:
            raise ValueError("unperturbed-latent environments require psi = 0")

    @property
    def do_set(self) -> frozenset:
        return frozenset(self.do_values)

    def to_dict(self) -> dict:
        out = {
            "w": self.w.tolist(), "psi": self.psi, "zeta": self.zeta,
            "do_values": {str(k): v for k, v in sorted(self.do_values.items())},
            "mode": self.mode.value, "label": self.label,
        }
        if self.latent_cov is not None:
            out["latent_cov"] = self.latent_cov.tolist()
        return out

    @classmethod
    def from_dict(cls, obj) -> "EnvSpec":
        return cls(
            w=obj["w"], psi=obj.get("psi", 0.0), zeta=obj.get("zeta"),
            do_values={int(k): v for k, v in obj.get("do_values", {}).items()},
            mode=obj.get("mode", "iid-latent"), latent_cov=obj.get("latent_cov"),
            label=obj.get("label", ""),
        )


@dataclass
class ScmParams:
    b: np.ndarray
    gamma: np.ndarray
    w1: np.ndarray
    envs: list

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.w1 = np.asarray(self.w1, dtype=float)
        p = self.b.shape[0]
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(p, -1)
        if self.b.shape != (p, p):
            raise ValueError("b must be square")
        if np.any(np.diag(self.b) != 0):
            raise ValueError("b must have a zero diagonal")
        Dag.from_adjacency(self.b)  # raises CycleError
        if self.w1.shape != (p,) or np.any(self.w1 <= 0):
            raise ValueError("w1 must be a strictly positive p-vector")
        if not self.envs:
            raise ValueError("at least the observational environment is required")
        first = self.envs[0]
        if first.psi != 0.0:
            raise ValueError("observational environment must have psi = 0")
        for k, env in enumerate(self.envs):
            if env.w.shape != (p,):
                raise ValueError(f"environment {k}: w has wrong shape")
            if np.any(env.w < self.w1 - 1e-12):
                raise ValueError(f"environment {k}: w must dominate w1 elementwise")
            if env.mode is Mode.SINGLE_PARAM:
                zeta = 0.0 if env.zeta is None else env.zeta
                if not np.allclose(env.w, self.w1 + zeta, rtol=0, atol=1e-12):
                    raise ValueError(f"environment {k}: single-parameter mode needs w = w1 + zeta")
            if any(not 0 <= d < p for d in env.do_values):
                raise ValueError(f"environment {k}: do index out of range")

    @property
    def p(self) -> int:
        return self.b.shape[0]

    @property
    def h(self) -> int:
        return self.gamma.shape[1]

    @property
    def m(self) -> int:
        return len(self.envs)

    @property
    def dag(self) -> Dag:
        return Dag.from_adjacency(self.b)

    def latent_cov(self, e: int, base=None) -> np.ndarray:
        env = self.envs[e]
        if env.latent_cov is not None:
            return env.latent_cov
        base = np.eye(self.h) if base is None else np.asarray(base, dtype=float)
        return (1.0 + env.psi) * base

    def to_dict(self) -> dict:
        return {
            "b": self.b.tolist(), "gamma": self.gamma.tolist(), "w1": self.w1.tolist(),
            "envs": [env.to_dict() for env in self.envs],
        }

    @classmethod
    def from_dict(cls, obj) -> "ScmParams":
        try:
            p = len(obj["b"])
            gamma = np.asarray(obj["gamma"], dtype=float).reshape(p, -1)
            return cls(obj["b"], gamma, obj["w1"], [EnvSpec.from_dict(e) for e in obj["envs"]])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad parameter file: {exc}") from exc


@dataclass
class EnvData:
    """Second-moment summary of one environment (``n = 0`` marks population data)."""

    cov: np.ndarray
    n: int
    weight: float
    do_set: frozenset = frozenset()
    label: str = ""

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=float)
        self.do_set = frozenset(int(k) for k in self.do_set)
        if self.cov.ndim != 2 or self.cov.shape[0] != self.cov.shape[1]:
            raise ValueError("cov must be square")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-12 * max(1.0, np.abs(self.cov).max()):
            raise ValueError("cov must be symmetric")
        if not 0 < self.weight <= 1:
            raise ValueError("weight must lie in (0, 1]")

    @property
    def p(self) -> int:
        return self.cov.shape[0]


def check_weights(data) -> None:
    total = sum(d.weight for d in data)
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"environment weights sum to {total}, not 1")


def sigma_model(b, gamma, psi: float, w, latent_cov=None) -> np.ndarray:
    """Implied covariance ``(I-B)^-1 (diag(w) + Gamma Psi Gamma^T) (I-B)^-T``."""
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    p = b.shape[0]
    gamma = np.asarray(gamma, dtype=float).reshape(p, -1)
    psi_mat = (1.0 + psi) * np.eye(gamma.shape[1]) if latent_cov is None else np.asarray(latent_cov)
    inner = np.diag(w) + gamma @ psi_mat @ gamma.T
    a = np.linalg.inv(np.eye(p) - b)
    out = a @ inner @ a.T
    return 0.5 * (out + out.T)


def env_covariance(params: ScmParams, e: int, base_latent_cov=None) -> np.ndarray:
    """Population covariance of environment ``e`` including its do-set."""
    env = params.envs[e]
    p = params.p
    keep = np.ones(p)
    keep[list(env.do_set)] = 0.0
    f = np.diag(keep)
    a = np.linalg.inv(np.eye(p) - f @ params.b)
    inner = f @ (np.diag(params.w1) + params.gamma @ params.latent_cov(e, base_latent_cov) @ params.gamma.T) @ f
    # delta on non-do coordinates acts after the mask
    inner += np.diag(keep * (env.w - params.w1))
    out = a @ inner @ a.T
    return 0.5 * (out + out.T)


def population_env_data(params: ScmParams, weights=None, base_latent_cov=None) -> list[EnvData]:
    m = params.m
    if weights is None:
        weights = np.full(m, 1.0 / m)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (m,) or np.any(weights <= 0):
        raise ValueError("weights must be a positive vector with one entry per environment")
    weights = weights / weights.sum()
    return [
        EnvData(env_covariance(params, e, base_latent_cov), 0, float(weights[e]),
                params.envs[e].do_set, params.envs[e].label)
        for e in range(m)
    ]


def empirical_cov(x) -> np.ndarray:
    """Mean-centred covariance with divisor ``n``."""
    x = np.asarray(x, dtype=float)
    xc = x - x.mean(axis=0)
    c = xc.T @ xc / x.shape[0]
    return 0.5 * (c + c.T)


def env_data_from_samples(samples, do_sets=None, labels=None) -> list[EnvData]:
    ns = [np.asarray(x).shape[0] for x in samples]
    total = float(sum(ns))
    do_sets = do_sets or [frozenset()] * len(samples)
    labels = labels or [""] * len(samples)
    data = [EnvData(empirical_cov(x), n, n / total, ds, lab)
            for x, n, ds, lab in zip(samples, ns, do_sets, labels)]
    # absorb rounding so that the weights sum to one exactly
    data[-1].weight = 1.0 - sum(d.weight for d in data[:-1])
    return data


def _noise(rng, n, var, noise):
    var = np.asarray(var, dtype=float)
    if noise == "gaussian":
        return rng.standard_normal((n, var.size)) * np.sqrt(var)
    if noise == "laplace":
        # Laplace(0, s) has variance 2 s^2
        return rng.laplace(0.0, 1.0, (n, var.size)) * np.sqrt(var / 2.0)
    raise ValueError(f"unknown noise family {noise!r}")


def simulate(params: ScmParams, n_per_env, noise: str = "gaussian", latent_cov=None,
             xi: float = 0.0, rng_seed=None):
    """Draw samples for every environment.

    Returns a list of ``(samples, EnvData)`` pairs.  Each environment uses its
    own generator spawned from ``rng_seed``.  ``latent_cov`` is the base latent
    covariance (identity by default) scaled by ``1 + psi`` per environment.
    """
    n_per_env = [int(n) for n in n_per_env]
    if len(n_per_env) != params.m or any(n <= 0 for n in n_per_env):
        raise ValueError("need one positive sample count per environment")
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    h = params.h
    if latent_cov is not None:
        latent_cov = np.atleast_2d(np.asarray(latent_cov, dtype=float))
        try:
            np.linalg.cholesky(latent_cov)
        except np.linalg.LinAlgError as exc:
            raise MatrixNotPDError("latent covariance is not positive definite") from exc
    order = params.dag.order
    children = [np.nonzero(params.b[k])[0] for k in range(params.p)]
    streams = np.random.SeedSequence(rng_seed).spawn(params.m)

    samples = []
    for e, (env, n) in enumerate(zip(params.envs, n_per_env)):
        rng = np.random.default_rng(streams[e])
        if h:
            psi_mat = params.latent_cov(e, latent_cov)
            try:
                chol = np.linalg.cholesky(psi_mat)
            except np.linalg.LinAlgError as exc:
                raise MatrixNotPDError(f"environment {e}: latent covariance not PD") from exc
            hidden = rng.standard_normal((n, h)) @ chol.T
        else:
            hidden = np.zeros((n, 0))
        eps = _noise(rng, n, params.w1, noise)
        delta = _noise(rng, n, env.w - params.w1, noise)
        x = np.zeros((n, params.p))
        conf = hidden @ params.gamma.T
        for k in order:
            if k in env.do_values:
                x[:, k] = env.do_values[k]
                continue
            pa = children[k]
            lin = x[:, pa] @ params.b[k, pa] + conf[:, k]
            if xi:
                lin = lin + xi * lin ** 2
            x[:, k] = lin + eps[:, k] + delta[:, k]
        samples.append(x)

    data = env_data_from_samples(samples, [env.do_set for env in params.envs],
                                 [env.label for env in params.envs])
    return list(zip(samples, data))


# ---------------------------------------------------------------------------
# files

def write_samples(path, x, comment: str = "") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        for row in np.asarray(x):
            writer.writerow([repr(float(v)) for v in row])


def read_samples(path) -> np.ndarray:
    rows = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise SchemaError(f"{path}: no sample rows")
    arr = np.asarray(rows)
    if arr.ndim != 2:
        raise SchemaError(f"{path}: ragged rows")
    return arr


def save_params(params: ScmParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=1) + "\n")


def load_params(path) -> ScmParams:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return ScmParams.from_dict(obj)


def write_manifest(path, entries, meta=None) -> None:
    """``entries``: dicts with keys csv, n, do_set, label."""
    obj = {"environments": entries}
    if meta:
        obj["meta"] = meta
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_manifest(path):
    """Return ``(samples, EnvData list, manifest dict)``; CSV paths are manifest-relative."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
        entries = obj["environments"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: bad manifest ({exc})") from exc
    samples, do_sets, labels = [], [], []
    for ent in entries:
        x = read_samples(path.parent / ent["csv"])
        if "n" in ent and int(ent["n"]) != x.shape[0]:
            raise SchemaError(f"{ent['csv']}: manifest says n={ent['n']}, file has {x.shape[0]} rows")
        samples.append(x)
        do_sets.append(frozenset(int(k) for k in ent.get("do_set", [])))
        labels.append(ent.get("label", ""))
    if len({x.shape[1] for x in samples}) != 1:
        raise SchemaError("environments disagree on the number of variables")
    return samples, env_data_from_samples(samples, do_sets, labels), obj
