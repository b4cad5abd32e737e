import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from safemarl.cmg import TabularCMG, TabularPolicy, random_tabular_cmg

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def one_state_game(reward=1.0, cost=1.0, gamma=0.99, actions=(1,), bound=np.inf):
    """Single absorbing state with constant reward and cost."""
    n_joint = int(np.prod(actions))
    return TabularCMG(
        action_counts=actions,
        transition=np.ones((1, n_joint, 1)),
        reward=np.full((1, n_joint), reward),
        costs=tuple(np.full((1, 1, a), cost) for a in actions),
        bounds=tuple(np.array([bound]) for _ in actions),
        initial=np.ones(1),
        gamma=gamma,
    )


@pytest.fixture
def small_game():
    return random_tabular_cmg(4, 2, (2, 3), 1, seed=7)


@pytest.fixture
def three_agent_game():
    return random_tabular_cmg(5, 3, 2, (1, 2, 1), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_policy(game, seed):
    return TabularPolicy.random(game, np.random.default_rng(seed))
