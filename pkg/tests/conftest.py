import numpy as np
import pytest

from avgpg.mdp import GeneratorSpec, TabularMdp, generate_mdp, make_rng


def random_mdp(S, A, seed=0, **kw):
    return generate_mdp(GeneratorSpec(S, A, seed=seed, **kw))


def action_independent_mdp(S, A, seed=0, constant_reward=None):
    """Every action shares one kernel row and one reward per state."""
    rng = make_rng(seed + 991)
    P = rng.dirichlet(np.ones(S), size=S)
    kernel = np.repeat(P[:, None, :], A, axis=1)
    if constant_reward is None:
        reward = np.repeat(rng.uniform(-1, 1, size=S)[:, None], A, axis=1)
    else:
        reward = np.full((S, A), float(constant_reward))
    return TabularMdp(kernel, reward)


def interior_policy(rng, S, A, floor=0.05):
    pi = rng.dirichlet(np.ones(A), size=S)
    return (1 - A * floor) * pi + floor


@pytest.fixture
def rng():
    return make_rng(12345)
