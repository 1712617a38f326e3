import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from directlik import EnvSpec, ScmParams  # noqa: E402

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def base_b():
    b = np.zeros((4, 4))
    b[1, 0] = -0.7
    b[2, 0] = 0.6
    b[3, 1] = -0.8
    return b


W1 = np.array([0.5, 0.6, 0.4, 0.5])


def identifiable_params():
    """p=4 with large heterogeneous interventions; all four assumptions hold."""
    g = np.array([[0.4], [0.0], [0.3], [0.5]])
    envs = [EnvSpec(W1.copy()),
            EnvSpec(np.array([2000.0, 4000.0, 6000.0, 3000.0]), psi=0.3),
            EnvSpec(np.array([6000.0, 2000.0, 3000.0, 5000.0]), psi=0.8)]
    return ScmParams(base_b(), g, W1.copy(), envs)


def unperturbed_params():
    """Latent perturbation switched off, every variable shifted in two environments."""
    g = np.array([[0.4, 0.0], [0.0, 0.0], [0.3, 0.0], [0.0, 0.6]])
    envs = [EnvSpec(W1.copy(), mode="unperturbed"),
            EnvSpec(W1 + np.array([3.0, 5.0, 2.0, 4.0]), mode="unperturbed"),
            EnvSpec(W1 + np.array([1.0, 2.0, 6.0, 3.0]), mode="unperturbed")]
    return ScmParams(base_b(), g, W1.copy(), envs)


def single_param_params(zeta=2.0, psi=0.0):
    g = np.array([[0.4, 0.0], [0.0, 0.0], [0.3, 0.0], [0.0, 0.6]])
    envs = [EnvSpec(W1.copy(), zeta=0.0, mode="single-param"),
            EnvSpec(W1 + zeta, zeta=zeta, psi=psi, mode="single-param")]
    return ScmParams(base_b(), g, W1.copy(), envs)


def random_params(rng, p=4, h=1, m=3, density=0.5, psi_max=1.0):
    """Random acyclic SCM in a random variable order."""
    order = rng.permutation(p)
    b = np.zeros((p, p))
    for x in range(p):
        for y in range(x + 1, p):
            if rng.uniform() < density:
                b[order[y], order[x]] = rng.choice([-1, 1]) * rng.uniform(0.3, 0.9)
    g = rng.normal(0, 0.5, (p, h))
    w1 = rng.uniform(0.3, 1.0, p)
    envs = [EnvSpec(w1.copy())]
    for _ in range(m - 1):
        envs.append(EnvSpec(w1 + rng.uniform(0.0, 3.0, p), psi=rng.uniform(0, psi_max)))
    return ScmParams(b, g, w1, envs)


@pytest.fixture
def ident():
    return identifiable_params()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
