import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from safemarl import oracle
from safemarl.cmg import TabularCMG, TabularPolicy, random_tabular_cmg
from safemarl.errors import DivergenceUndefinedError, InvalidInputError

from conftest import one_state_game, random_policy


def monte_carlo(game, policy, n, horizon, seed):
    """Discounted reward and per-agent cost-0 returns of ``n`` vectorised rollouts."""
    rng = np.random.default_rng(seed)
    s = rng.choice(game.n_states, size=n, p=game.initial)
    cdfs = [np.cumsum(t, 1) for t in policy.tables]
    P_cdf = np.cumsum(game.transition, -1)
    ret = np.zeros(n)
    costs = np.zeros((n, game.n_agents))
    disc = 1.0
    for _ in range(horizon):
        acts = [np.minimum((cdf[s] < rng.random((n, 1))).sum(1), cdf.shape[1] - 1) for cdf in cdfs]
        a = np.ravel_multi_index(tuple(acts), game.action_counts)
        ret += disc * game.reward[s, a]
        for i in range(game.n_agents):
            costs[:, i] += disc * game.costs[i][0, s, acts[i]]
        s = np.minimum((P_cdf[s, a] < rng.random((n, 1))).sum(1), game.n_states - 1)
        disc *= game.gamma
    return ret, costs


def test_one_state_value_is_geometric_series():
    game = one_state_game(reward=1.0, gamma=0.99)
    vt = oracle.exact_values(game, TabularPolicy.uniform(game))
    assert vt.V[0] == pytest.approx(100.0, abs=1e-9)
    assert oracle.expected_total_cost(game, TabularPolicy.uniform(game), 0, 0) == pytest.approx(100.0, abs=1e-9)


def test_zero_reward_gives_zero_values(small_game):
    game = TabularCMG(small_game.action_counts, small_game.transition, np.zeros_like(small_game.reward),
                      tuple(np.zeros_like(c) for c in small_game.costs), small_game.bounds,
                      small_game.initial, small_game.gamma)
    vt = oracle.exact_values(game, random_policy(game, 0))
    assert np.all(vt.V == 0) and np.all(vt.Q == 0)
    assert oracle.expected_total_cost(game, random_policy(game, 0), 1, 0) == 0


def test_value_tables_are_consistent(three_agent_game):
    pi = random_policy(three_agent_game, 3)
    vt = oracle.exact_values(three_agent_game, pi)
    assert np.abs((pi.joint() * vt.Q).sum(1) - vt.V).max() < 1e-10
    for i in range(3):
        for j in range(three_agent_game.n_costs(i)):
            assert np.abs((pi[i] * vt.cost_Q[i][j]).sum(1) - vt.cost_V[i][j]).max() < 1e-10
            assert np.abs((pi.joint() * vt.cost_Q_joint[i][j]).sum(1) - vt.cost_V[i][j]).max() < 1e-10


def test_values_match_monte_carlo():
    # gamma 0.9 and horizon 150 leave a truncation bias below 1e-6
    game = random_tabular_cmg(5, 2, 2, 1, seed=21, gamma=0.9)
    pi = random_policy(game, 2)
    ret, costs = monte_carlo(game, pi, 1_000_000, 150, seed=0)
    J = oracle.expected_return(game, pi)
    assert abs(ret.mean() - J) < 3 * ret.std() / math.sqrt(len(ret))
    for i in range(2):
        Jc = oracle.expected_total_cost(game, pi, i, 0)
        assert abs(costs[:, i].mean() - Jc) < 3 * costs[:, i].std() / math.sqrt(len(ret))


def test_multi_agent_q_edge_subsets(small_game):
    pi = random_policy(small_game, 1)
    vt = oracle.exact_values(small_game, pi)
    for s, a0, a1 in itertools.product(range(4), range(2), range(3)):
        q = oracle.multi_agent_q(small_game, pi, vt, [0, 1], s, [a0, a1])
        assert q == vt.Q[s, small_game.joint_index((a0, a1))]
    for s in range(4):
        assert oracle.multi_agent_q(small_game, pi, vt, [], s, []) == pytest.approx(vt.V[s], abs=1e-12)


def test_multi_agent_q_matches_hand_expansion():
    game = random_tabular_cmg(3, 2, 2, 1, seed=5)
    pi = random_policy(game, 5)
    vt = oracle.exact_values(game, pi)
    for s, a1 in itertools.product(range(3), range(2)):
        hand = sum(pi[1][s, a2] * vt.Q[s, game.joint_index((a1, a2))] for a2 in range(2))
        assert oracle.multi_agent_q(game, pi, vt, [0], s, [a1]) == pytest.approx(hand, abs=1e-12)


def test_subset_validation(small_game):
    pi = random_policy(small_game, 0)
    vt = oracle.exact_values(small_game, pi)
    with pytest.raises(InvalidInputError):
        oracle.multi_agent_q(small_game, pi, vt, [0, 0], 0, [0, 0])
    with pytest.raises(InvalidInputError):
        oracle.multi_agent_advantage(small_game, pi, vt, [0], [0], 0, [0], [0])


def test_advantage_definitions(small_game):
    pi = random_policy(small_game, 2)
    vt = oracle.exact_values(small_game, pi)
    for s in range(4):
        assert oracle.multi_agent_advantage(small_game, pi, vt, [1], [], s, [2], []) == 0
        for a0, a1 in itertools.product(range(2), range(3)):
            A = oracle.multi_agent_advantage(small_game, pi, vt, [], [0, 1], s, [], [a0, a1])
            k = small_game.joint_index((a0, a1))
            assert A == pytest.approx(vt.Q[s, k] - vt.V[s], abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_decomposition_identity_all_orderings(seed):
    game = random_tabular_cmg(4, 3, 2, 1, seed=100 + seed)
    pi = random_policy(game, seed)
    vt = oracle.exact_values(game, pi)
    for h in (1, 2, 3):
        for subset in itertools.permutations(range(3), h):
            for s in range(4):
                for acts in itertools.product(range(2), repeat=h):
                    lhs = oracle.multi_agent_advantage(game, pi, vt, [], list(subset), s, [], list(acts))
                    rhs = sum(
                        oracle.multi_agent_advantage(game, pi, vt, list(subset[:k]), [subset[k]], s,
                                                     list(acts[:k]), [acts[k]])
                        for k in range(h))
                    assert abs(lhs - rhs) < 1e-10


def test_occupancy_single_state():
    game = one_state_game(gamma=0.99)
    rho = oracle.occupancy(game, TabularPolicy.uniform(game))
    assert rho[0] == pytest.approx(100.0, abs=1e-9)


def test_occupancy_matches_truncated_power_series():
    gamma = 0.99
    P = np.zeros((2, 1, 2))
    P[0, 0] = [0.7, 0.3]
    P[1, 0] = [0.0, 1.0]
    game = TabularCMG((1,), P, np.zeros((2, 1)), (np.zeros((1, 2, 1)),), (np.array([np.inf]),),
                      np.array([1.0, 0.0]), gamma)
    rho = oracle.occupancy(game, TabularPolicy.uniform(game))
    dist, acc = np.array([1.0, 0.0]), np.zeros(2)
    for t in range(10_000):
        acc += gamma ** t * dist
        dist = dist @ P[:, 0, :]
    assert np.abs(rho - acc).max() < 1e-8


@pytest.mark.parametrize("seed", range(50))
def test_occupancy_mass(seed):
    game = random_tabular_cmg(5, 2, 2, 1, seed=seed, gamma=0.95)
    rho = oracle.occupancy(game, random_policy(game, seed))
    assert rho.min() >= 0
    assert rho.sum() == pytest.approx(1 / (1 - 0.95), abs=1e-10)


def test_surrogate_return_at_incumbent_is_zero(three_agent_game):
    pi = random_policy(three_agent_game, 4)
    for agent in range(3):
        assert abs(oracle.surrogate_return(three_agent_game, pi, agent, pi[agent])) < 1e-10


def test_surrogate_return_by_hand():
    game = random_tabular_cmg(2, 2, 2, 1, seed=8)
    pi = random_policy(game, 8)
    cand = random_policy(game, 9)[0]
    vt = oracle.exact_values(game, pi)
    rho = oracle.occupancy(game, pi)
    hand = 0.0
    for s, a in itertools.product(range(2), range(2)):
        A = oracle.multi_agent_advantage(game, pi, vt, [], [0], s, [], [a])
        hand += rho[s] * cand[s, a] * A
    assert oracle.surrogate_return(game, pi, 0, cand) == pytest.approx(hand, abs=1e-12)


def test_sequential_surrogates_telescope_to_zero_at_incumbent(three_agent_game):
    pi = random_policy(three_agent_game, 6)
    order = [2, 0, 1]
    total = sum(oracle.surrogate_return(three_agent_game, pi, order[h], pi[order[h]], order[:h],
                                        [pi[a] for a in order[:h]]) for h in range(3))
    assert abs(total) < 1e-10


def test_sequential_surrogates_sum_to_joint_advantage(three_agent_game):
    # decomposition consequence: sum_h L^{i_1:h}(new) = E_{rho_pi, a ~ new}[A_pi(s, a)]
    pi = random_policy(three_agent_game, 6)
    new = random_policy(three_agent_game, 7)
    order = [1, 2, 0]
    total = sum(oracle.surrogate_return(three_agent_game, pi, order[h], new[order[h]], order[:h],
                                        [new[a] for a in order[:h]]) for h in range(3))
    vt = oracle.exact_values(three_agent_game, pi)
    rho = oracle.occupancy(three_agent_game, pi)
    assert total == pytest.approx(float(rho @ (new.joint() * vt.A).sum(1)), abs=1e-10)


def test_expected_advantage_is_zero(three_agent_game):
    pi = random_policy(three_agent_game, 1)
    vt = oracle.exact_values(three_agent_game, pi)
    rho = oracle.occupancy(three_agent_game, pi)
    assert abs(rho @ (pi.joint() * vt.A).sum(1)) < 1e-10


def test_surrogate_cost_properties(three_agent_game):
    game = three_agent_game
    pi = random_policy(game, 2)
    cand = random_policy(game, 3)[1]
    assert abs(oracle.surrogate_cost(game, pi, 1, 1, pi[1])) < 1e-12
    vt = oracle.exact_values(game, pi)
    rho = oracle.occupancy(game, pi)
    hand = sum(rho[s] * cand[s, a] * (vt.cost_Q[1][1, s, a] - vt.cost_V[1][1, s])
               for s in range(game.n_states) for a in range(2))
    assert oracle.surrogate_cost(game, pi, 1, 1, cand) == pytest.approx(hand, abs=1e-12)
    shifted = game.with_costs([c + (0.37 if i == 1 else 0.0) for i, c in enumerate(game.costs)])
    assert oracle.surrogate_cost(shifted, pi, 1, 1, cand) == pytest.approx(
        oracle.surrogate_cost(game, pi, 1, 1, cand), abs=1e-10)
    with pytest.raises(InvalidInputError):
        oracle.surrogate_cost(game, pi, 0, 1, cand)


def test_zero_costs_give_zero_totals(small_game):
    game = small_game.with_costs([np.zeros_like(c) for c in small_game.costs])
    assert oracle.expected_total_cost(game, random_policy(game, 0), 0, 0) == 0


def test_bernoulli_kl_closed_form():
    p, q = np.array([[0.5, 0.5]]), np.array([[0.9, 0.1]])
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert oracle.max_kl(p, q) == pytest.approx(expected, abs=1e-15)
    assert oracle.max_kl(p, p) == 0


def test_kl_undefined_on_support_mismatch():
    with pytest.raises(DivergenceUndefinedError):
        oracle.kl_rows(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


@pytest.mark.parametrize("seed", range(200))
def test_joint_kl_bounded_by_sum(seed):
    rng = np.random.default_rng(seed)
    game = random_tabular_cmg(int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 4)), 1, seed=seed)
    assert oracle.kl_sum_bound_check(TabularPolicy.random(game, rng), TabularPolicy.random(game, rng))


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_pinsker_style_inequality(k, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(k), size=5), rng.dirichlet(np.ones(k), size=5)
    p, q = np.maximum(p, 1e-9), np.maximum(q, 1e-9)
    p, q = p / p.sum(1, keepdims=True), q / q.sum(1, keepdims=True)
    kl = oracle.kl_rows(p, q)
    assert np.all(kl >= -1e-15)
    assert np.all(oracle.tv_rows(p, q) ** 2 <= kl + 1e-12)


def test_penalty_scale_value():
    assert oracle.penalty_scale(0.99) == pytest.approx(39600.0, rel=1e-12)


@pytest.mark.parametrize("seed", range(40))
def test_joint_cost_bound_holds(seed):
    rng = np.random.default_rng(seed)
    game = random_tabular_cmg(int(rng.integers(2, 6)), int(rng.integers(1, 4)), 2, 1, seed=seed)
    pi, pibar = TabularPolicy.random(game, rng), TabularPolicy.random(game, rng)
    for i in range(game.n_agents):
        J, rhs = oracle.joint_cost_bound(game, pi, pibar, i, 0)
        assert J <= rhs + 1e-8


def test_own_action_bound_fails_when_only_another_agent_moves():
    """Documented counterexample: a tiny move of agent 1 changes agent 0's cost at first order."""
    found = 0
    for seed in range(60):
        game = random_tabular_cmg(3, 2, 2, 1, seed=seed)
        pi = random_policy(game, seed)
        t = pi[1] + 1e-4 * np.array([1.0, -1.0])
        pibar = pi.replace(1, t / t.sum(1, keepdims=True))
        J, rhs = oracle.own_cost_bound(game, pi, pibar, 0, 0)
        Jj, rhs_joint = oracle.joint_cost_bound(game, pi, pibar, 0, 0)
        assert Jj <= rhs_joint + 1e-8
        found += J > rhs + 1e-8
    assert found > 0
