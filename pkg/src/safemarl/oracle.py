"""Exact value functions, advantages and surrogates of tabular games.

Everything here is dense linear algebra on the full state/joint-action
tables, so it is the ground truth the learning code is checked against.
The discounted visitation ``rho`` is unnormalised: it sums to ``1/(1-gamma)``.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cmg import TabularCMG, TabularPolicy
from .errors import DivergenceUndefinedError, InvalidInputError

_LETTERS = string.ascii_lowercase.replace("s", "")


@dataclass(frozen=True, eq=False)
class ValueTables:
    V: np.ndarray
    Q: np.ndarray
    cost_V: tuple[np.ndarray, ...]  # [i][j, s]
    cost_Q: tuple[np.ndarray, ...]  # [i][j, s, a_i]
    cost_Q_joint: tuple[np.ndarray, ...]  # [i][j, s, joint a]

    @property
    def A(self) -> np.ndarray:
        return self.Q - self.V[:, None]

    def cost_A(self, agent: int) -> np.ndarray:
        return self.cost_Q[agent] - self.cost_V[agent][:, :, None]

    def cost_A_joint(self, agent: int) -> np.ndarray:
        return self.cost_Q_joint[agent] - self.cost_V[agent][:, :, None]


def _policy_dynamics(game: TabularCMG, policy: TabularPolicy):
    pi = policy.joint()
    P_pi = np.einsum("sa,sat->st", pi, game.transition)
    return pi, P_pi


def exact_values(game: TabularCMG, policy: TabularPolicy) -> ValueTables:
    pi, P_pi = _policy_dynamics(game, policy)
    lhs = np.eye(game.n_states) - game.gamma * P_pi
    r_pi = (pi * game.reward).sum(1)
    # every cost channel shares the same system matrix
    rhs = [r_pi]
    for i in range(game.n_agents):
        for j in range(game.n_costs(i)):
            rhs.append((policy[i] * game.costs[i][j]).sum(1))
    sol = np.linalg.solve(lhs, np.stack(rhs, axis=1))
    V = sol[:, 0]
    Q = game.reward + game.gamma * game.transition @ V

    cost_V, cost_Q, cost_Q_joint = [], [], []
    col = 1
    for i in range(game.n_agents):
        m = game.n_costs(i)
        Vc = sol[:, col:col + m].T
        col += m
        # Q over the joint action, then averaged over the other agents' policies
        cont = game.gamma * np.einsum("sat,jt->jsa", game.transition, Vc)
        own = expand_own_action(game, i, game.costs[i])
        cost_Q_joint.append(own + cont)
        cont = cont.reshape((m, game.n_states) + game.action_counts)
        cont = _marginalise(cont, policy, keep=[i], lead=1)
        cost_V.append(Vc)
        cost_Q.append(game.costs[i] + cont)
    return ValueTables(V, Q, tuple(cost_V), tuple(cost_Q), tuple(cost_Q_joint))


def expand_own_action(game: TabularCMG, agent: int, table: np.ndarray) -> np.ndarray:
    """Broadcast ``table[..., s, a_agent]`` to ``[..., s, joint a]``."""
    lead = table.shape[:-2]
    shape = [1] * game.n_agents
    shape[agent] = game.action_counts[agent]
    out = table.reshape(lead + (game.n_states,) + tuple(shape))
    out = np.broadcast_to(out, lead + (game.n_states,) + game.action_counts)
    return out.reshape(lead + (game.n_states, game.n_joint))


def _marginalise(table: np.ndarray, policy: TabularPolicy, keep: Sequence[int], lead: int = 0) -> np.ndarray:
    """Average ``table[..., s, a_0, ..., a_{n-1}]`` over agents outside ``keep``.

    The surviving action axes come out in the order given by ``keep``.
    """
    n = len(policy)
    lead_letters = "ABCDEFGH"[:lead]
    acts = _LETTERS[:n]
    operands = [table]
    subs = [lead_letters + "s" + acts]
    for k in range(n):
        if k not in keep:
            operands.append(policy[k])
            subs.append("s" + acts[k])
    out = lead_letters + "s" + "".join(acts[k] for k in keep)
    return np.einsum(",".join(subs) + "->" + out, *operands)


def _check_subset(game: TabularCMG, subset: Sequence[int]) -> list[int]:
    subset = [int(i) for i in subset]
    if len(set(subset)) != len(subset):
        raise InvalidInputError(f"duplicate agent in subset {subset}")
    for i in subset:
        if not 0 <= i < game.n_agents:
            raise InvalidInputError(f"agent {i} out of range")
    return subset


def marginal_q(game: TabularCMG, policy: TabularPolicy, values: ValueTables | np.ndarray,
               subset: Sequence[int]) -> np.ndarray:
    """``Q^{subset}[s, a^{subset}]`` with the other agents drawn from ``policy``.

    ``values`` may also be any joint ``[s, a]`` table, e.g. a cost Q.
    """
    subset = _check_subset(game, subset)
    Q = values.Q if isinstance(values, ValueTables) else np.asarray(values)
    Q = Q.reshape((game.n_states,) + game.action_counts)
    return _marginalise(Q, policy, subset)


def multi_agent_q(game, policy, values, subset, state, actions) -> float:
    table = marginal_q(game, policy, values, subset)
    if len(actions) != len(subset):
        raise InvalidInputError("one action per agent in the subset")
    return float(table[(int(state), *map(int, actions))])


def multi_agent_advantage(game, policy, values, given, subset, state, given_actions, actions) -> float:
    """``Q^{given, subset}(s, a^given, a^subset) - Q^{given}(s, a^given)``."""
    given, subset = list(given), list(subset)
    if set(given) & set(subset):
        raise InvalidInputError("conditioning and acting agent sets overlap")
    both = multi_agent_q(game, policy, values, given + subset, state, list(given_actions) + list(actions))
    return both - multi_agent_q(game, policy, values, given, state, given_actions)


def occupancy(game: TabularCMG, policy: TabularPolicy) -> np.ndarray:
    _, P_pi = _policy_dynamics(game, policy)
    return np.linalg.solve(np.eye(game.n_states) - game.gamma * P_pi.T, game.initial)


def conditional_advantage(
    game: TabularCMG,
    policy: TabularPolicy,
    values: ValueTables,
    agent: int,
    previous: Sequence[int] = (),
    previous_tables: Sequence[np.ndarray] = (),
) -> np.ndarray:
    """``E_{a^prev ~ new prev policies}[A^{agent}(s, a^prev, a)]`` as a ``[s, a]`` table.

    Pass a joint cost Q table as ``values`` for the cost analogue.
    """
    previous = list(previous)
    if agent in previous:
        raise InvalidInputError("agent cannot condition on itself")
    if len(previous_tables) != len(previous):
        raise InvalidInputError("one policy table per previously updated agent")
    with_agent = marginal_q(game, policy, values, previous + [agent])
    without = marginal_q(game, policy, values, previous)
    acts = _LETTERS[:len(previous)]
    subs = ["s" + acts + "z"] + ["s" + a for a in acts]
    q_new = np.einsum(",".join(subs) + "->sz", with_agent, *previous_tables)
    subs = ["s" + acts] + ["s" + a for a in acts]
    q_old = np.einsum(",".join(subs) + "->s", without, *previous_tables)
    return q_new - q_old[:, None]


def surrogate_return(
    game: TabularCMG,
    policy: TabularPolicy,
    agent: int,
    candidate: np.ndarray,
    previous: Sequence[int] = (),
    previous_tables: Sequence[np.ndarray] = (),
    values: ValueTables | None = None,
    rho: np.ndarray | None = None,
) -> float:
    """Sequential surrogate return of ``agent`` after ``previous`` agents moved to new tables."""
    values = exact_values(game, policy) if values is None else values
    rho = occupancy(game, policy) if rho is None else rho
    adv = conditional_advantage(game, policy, values, agent, previous, previous_tables)
    return float(rho @ (np.asarray(candidate) * adv).sum(1))


def surrogate_cost(
    game: TabularCMG,
    policy: TabularPolicy,
    agent: int,
    j: int,
    candidate: np.ndarray,
    values: ValueTables | None = None,
    rho: np.ndarray | None = None,
) -> float:
    if not 0 <= j < game.n_costs(agent):
        raise InvalidInputError(f"agent {agent} has no cost {j}")
    values = exact_values(game, policy) if values is None else values
    rho = occupancy(game, policy) if rho is None else rho
    return float(rho @ (np.asarray(candidate) * values.cost_A(agent)[j]).sum(1))


def expected_return(game: TabularCMG, policy: TabularPolicy, values: ValueTables | None = None) -> float:
    values = exact_values(game, policy) if values is None else values
    return float(game.initial @ values.V)


def expected_total_cost(game, policy, agent: int, j: int, values: ValueTables | None = None) -> float:
    if not 0 <= j < game.n_costs(agent):
        raise InvalidInputError(f"agent {agent} has no cost {j}")
    values = exact_values(game, policy) if values is None else values
    return float(game.initial @ values.cost_V[agent][j])


def all_costs(game, policy, values: ValueTables | None = None) -> list[np.ndarray]:
    values = exact_values(game, policy) if values is None else values
    return [values.cost_V[i] @ game.initial for i in range(game.n_agents)]


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row ``KL(p || q)``."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if ((p > 0) & (q <= 0)).any():
        raise DivergenceUndefinedError("q has zero mass where p does not")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    return terms.sum(-1)


def max_kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(kl_rows(p, q).max())


def tv_rows(p, q) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(-1)


def joint_max_kl(pi: TabularPolicy, pibar: TabularPolicy) -> float:
    return max_kl(pi.joint(), pibar.joint())


def kl_sum_bound_check(pi: TabularPolicy, pibar: TabularPolicy, tol: float = 1e-12) -> bool:
    """Max-KL of the product policy never exceeds the sum of per-agent max-KLs."""
    total = sum(max_kl(pi[i], pibar[i]) for i in range(len(pi)))
    return joint_max_kl(pi, pibar) <= total + tol


def penalty_scale(gamma: float) -> float:
    return 4.0 * gamma / (1.0 - gamma) ** 2


def own_cost_bound(game, pi: TabularPolicy, pibar: TabularPolicy, agent: int, j: int,
                     values: ValueTables | None = None, rho=None) -> tuple[float, float]:
    """``(J(pibar), bound)`` for the own-action surrogate cost bound.

    The bound only sees ``agent``'s own policy change in the surrogate; it
    can fail when other agents move by a small amount (their first-order
    effect on the cost is not covered by the quadratic KL term). See
    :func:`joint_cost_bound` for the version that always holds.
    """
    values = exact_values(game, pi) if values is None else values
    rho = occupancy(game, pi) if rho is None else rho
    nu = penalty_scale(game.gamma) * np.abs(values.cost_A(agent)[j]).max()
    kl_total = sum(max_kl(pi[h], pibar[h]) for h in range(game.n_agents))
    rhs = (expected_total_cost(game, pi, agent, j, values)
           + surrogate_cost(game, pi, agent, j, pibar[agent], values, rho)
           + nu * kl_total)
    return expected_total_cost(game, pibar, agent, j), rhs


def joint_cost_bound(game, pi: TabularPolicy, pibar: TabularPolicy, agent: int, j: int,
                     values: ValueTables | None = None, rho=None) -> tuple[float, float]:
    """``(J(pibar), bound)`` using the joint cost advantage.

    ``J(pibar) <= J(pi) + E_{rho_pi, a~pibar}[A_C(s, a)] + nu * sum_l maxKL_l`` with
    ``nu = 4 gamma max|A_C| / (1-gamma)^2`` over joint actions.
    """
    values = exact_values(game, pi) if values is None else values
    rho = occupancy(game, pi) if rho is None else rho
    adv = values.cost_A_joint(agent)[j]
    nu = penalty_scale(game.gamma) * np.abs(adv).max()
    kl_total = sum(max_kl(pi[h], pibar[h]) for h in range(game.n_agents))
    surrogate = float(rho @ (pibar.joint() * adv).sum(1))
    rhs = expected_total_cost(game, pi, agent, j, values) + surrogate + nu * kl_total
    return expected_total_cost(game, pibar, agent, j), rhs
