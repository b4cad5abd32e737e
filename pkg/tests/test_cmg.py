import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from safemarl.cmg import (AgentPermutation, TabularCMG, TabularPolicy, draw_permutation, floor_rows,
                          random_tabular_cmg, sample_step)
from safemarl.errors import CapacityError, InvalidInputError

from conftest import one_state_game


def test_single_state_step_returns_constant_reward_and_costs(rng):
    game = one_state_game(reward=1.0, cost=0.25, actions=(2, 2))
    nxt, r, costs = sample_step(game, 0, (1, 0), rng)
    assert nxt == 0 and r == 1.0
    assert [c.tolist() for c in costs] == [[0.25], [0.25]]


def test_deterministic_row_always_moves_to_target(rng):
    P = np.zeros((3, 1, 3))
    P[:, 0, 2] = 1.0
    game = TabularCMG((1,), P, np.zeros((3, 1)), (np.zeros((1, 3, 1)),), (np.array([np.inf]),),
                      np.array([1.0, 0, 0]), 0.9)
    assert {sample_step(game, s, (0,), rng)[0] for s in range(3) for _ in range(20)} == {2}


def test_sampling_frequencies_match_row_within_three_sigma():
    p = np.array([0.2, 0.3, 0.5])
    P = np.tile(p, (3, 1, 1)).reshape(3, 1, 3)
    game = TabularCMG((1,), P, np.zeros((3, 1)), (np.zeros((1, 3, 1)),), (np.array([np.inf]),),
                      np.array([1.0, 0, 0]), 0.9)
    rng = np.random.default_rng(0)
    n = 100_000
    counts = np.bincount([sample_step(game, 0, (0,), rng)[0] for _ in range(n)], minlength=3)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_sample_step_rejects_bad_actions(small_game, rng):
    with pytest.raises(InvalidInputError):
        sample_step(small_game, 0, (0, 3), rng)
    with pytest.raises(InvalidInputError):
        sample_step(small_game, 0, (0,), rng)
    with pytest.raises(InvalidInputError):
        sample_step(small_game, 9, (0, 0), rng)


def test_sample_step_is_bit_identical_per_seed(small_game):
    a = [sample_step(small_game, 1, (1, 2), np.random.default_rng(5)) for _ in range(2)]
    assert a[0][0] == a[1][0] and a[0][1] == a[1][1]


def test_joint_index_is_row_major(small_game):
    # (a0, a1) with counts (2, 3) -> a0 * 3 + a1
    for a0, a1 in itertools.product(range(2), range(3)):
        k = small_game.joint_index((a0, a1))
        assert k == a0 * 3 + a1
        assert small_game.split_index(k) == (a0, a1)


def test_same_seed_gives_identical_games():
    a = random_tabular_cmg(4, 2, 3, 2, seed=3)
    b = random_tabular_cmg(4, 2, 3, 2, seed=3)
    assert a.dumps() == b.dumps()
    assert random_tabular_cmg(4, 2, 3, 2, seed=4).dumps() != a.dumps()


def test_one_state_game_is_valid():
    game = random_tabular_cmg(1, 2, 2, 1, seed=0)
    assert np.allclose(game.transition, 1.0)


@pytest.mark.parametrize("seed", range(100))
def test_generated_games_satisfy_invariants(seed):
    rng = np.random.default_rng(seed)
    game = random_tabular_cmg(int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                              int(rng.integers(1, 3)), seed=seed)
    game.validate()
    assert np.abs(game.transition.sum(-1) - 1).max() <= 1e-12
    for c in game.costs:
        assert c.min() >= 0 and c.max() <= 1
    assert game.reward.min() >= 0 and game.reward.max() <= 1


def test_capacity_guard():
    with pytest.raises(CapacityError):
        random_tabular_cmg(2, 5, 7, 1)
    with pytest.raises(InvalidInputError):
        random_tabular_cmg(0, 2, 2, 1)


def test_game_is_immutable(small_game):
    with pytest.raises(ValueError):
        small_game.transition[0, 0, 0] = 1.0


def test_invalid_games_are_rejected():
    with pytest.raises(InvalidInputError):
        TabularCMG((1,), np.full((2, 1, 2), 0.4), np.zeros((2, 1)), (np.zeros((1, 2, 1)),),
                   (np.array([1.0]),), np.array([0.5, 0.5]), 0.9)
    with pytest.raises(InvalidInputError):
        one_state_game(gamma=1.0)


def test_json_round_trip_keeps_infinite_bounds(three_agent_game):
    game = three_agent_game.with_bounds([np.array([0.5]), np.array([np.inf, 2.0]), np.array([np.inf])])
    back = TabularCMG.loads(game.dumps())
    assert back.dumps() == game.dumps()
    assert np.isinf(back.bounds[1][0]) and back.bounds[1][1] == 2.0
    with pytest.raises(InvalidInputError):
        TabularCMG.from_dict({**game.to_dict(), "version": 99})


@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_policy_rows_normalised(n_agents, seed):
    game = random_tabular_cmg(3, n_agents, 2, 1, seed=seed)
    pi = TabularPolicy.random(game, np.random.default_rng(seed))
    for t in pi.tables:
        assert np.abs(t.sum(1) - 1).max() <= 1e-12
    assert np.abs(pi.joint().sum(1) - 1).max() <= 1e-12
    assert pi.joint().shape == (3, game.n_joint)


def test_policy_rejects_non_stochastic_rows():
    with pytest.raises(InvalidInputError):
        TabularPolicy((np.array([[0.5, 0.6]]),))


def test_floor_rows_keeps_rows_normalised():
    t = floor_rows(np.array([[1.0, 0.0, 0.0]]))
    assert t.min() > 0 and abs(t.sum() - 1) < 1e-15


def test_permutation_of_one_is_identity(rng):
    assert draw_permutation(1, rng).order == (0,)


def test_permutation_reproducible():
    a = draw_permutation(3, np.random.default_rng(9)).order
    b = draw_permutation(3, np.random.default_rng(9)).order
    assert a == b and sorted(a) == [0, 1, 2]


def test_permutations_are_uniform():
    rng = np.random.default_rng(0)
    n = 100_000
    counts = {}
    for _ in range(n):
        o = draw_permutation(3, rng).order
        counts[o] = counts.get(o, 0) + 1
    assert len(counts) == 6
    p = 1 / 6
    sigma = np.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) < 3 * sigma for c in counts.values())


def test_permutation_validation():
    with pytest.raises(InvalidInputError):
        AgentPermutation((0, 0, 1))
    with pytest.raises(InvalidInputError):
        draw_permutation(0, np.random.default_rng(0))
