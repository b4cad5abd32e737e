"""Desk-scale constrained environments.

All environments are vectorised over ``n_envs`` copies and functional: the
caller owns the state array and the RNG. Episode time limits are applied
by the rollout collector, so ``step`` only reports true terminations.

Shared interface::

    reset(rng) -> state                      # [E, ...]
    observe(state) -> obs                    # [E, n_agents, obs_dim]
    global_state(state) -> s                 # [E, state_dim], centralised critic input
    step(state, actions, rng) -> (next_state, reward [E], costs [E, n, m], terminated [E])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .cmg import TabularCMG
from .errors import InvalidInputError


@dataclass(frozen=True)
class ObservationSpec:
    obs_dim: int
    state_dim: int
    names: tuple[str, ...]


class CorridorEnv:
    """Two agents push one point mass along a corridor.

    Agent 0 sets the x-thrust, agent 1 the y-thrust, both in ``[-1, 1]``
    (clipped; the number of clipped components is counted in
    ``clipped_actions``). Walls sit at ``y = +-width/2``. The reward is the
    forward velocity; each agent's single cost is 1 while the mass is closer
    than ``margin`` to a wall. Velocity damping grows from ``damping`` at the
    centre line to ``wall_damping`` at the walls, so hugging a wall is faster
    and unsafe.
    """

    n_agents = 2
    discrete = False
    act_dims = (1, 1)
    n_costs = (1, 1)

    def __init__(self, n_envs: int = 1, width: float = 9.0, margin: float = 1.8, dt: float = 0.05,
                 damping: float = 0.95, wall_damping: float = 0.97, reset_noise: float = 0.1):
        if width <= 2 * margin or dt <= 0 or not 0 <= damping < 1 or not 0 <= wall_damping < 1:
            raise InvalidInputError("corridor parameters out of range")
        self.n_envs = int(n_envs)
        self.width, self.margin, self.dt = float(width), float(margin), float(dt)
        self.damping, self.wall_damping = float(damping), float(wall_damping)
        self.reset_noise = float(reset_noise)
        self.half = self.width / 2
        self.clipped_actions = 0
        self.spec = ObservationSpec(5, 3, ("y", "vx", "vy", "dist_upper", "dist_lower"))

    @property
    def obs_dim(self) -> int:
        return self.spec.obs_dim

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """State rows ``[x, y, vx, vy]``; ``y ~ N(0, reset_noise^2)`` clipped to the corridor."""
        state = np.zeros((self.n_envs, 4))
        if self.reset_noise > 0:
            state[:, 1] = np.clip(self.reset_noise * rng.standard_normal(self.n_envs), -self.half, self.half)
        return state

    def wall_distance(self, state) -> np.ndarray:
        y = np.asarray(state)[..., 1]
        return self.half - np.abs(y)

    def cost(self, state) -> np.ndarray:
        return (self.wall_distance(state) < self.margin).astype(float)

    def observe(self, state) -> np.ndarray:
        state = np.atleast_2d(state)
        y, vx, vy = state[:, 1], state[:, 2], state[:, 3]
        obs = np.stack([y / self.half, vx, vy, (self.half - y) / self.half, (self.half + y) / self.half], axis=1)
        return np.repeat(obs[:, None, :], self.n_agents, axis=1)

    def global_state(self, state) -> np.ndarray:
        state = np.atleast_2d(state)
        return np.stack([state[:, 1] / self.half, state[:, 2], state[:, 3]], axis=1)

    def step(self, state, actions, rng=None):
        state = np.atleast_2d(np.asarray(state, dtype=float))
        a = np.asarray(actions, dtype=float).reshape(len(state), self.n_agents)
        clipped = np.clip(a, -1.0, 1.0)
        self.clipped_actions += int((clipped != a).sum())
        x, y, vx, vy = state.T
        frac = np.abs(y) / self.half
        damp = self.damping + (self.wall_damping - self.damping) * frac ** 2
        vx = damp * vx + self.dt * clipped[:, 0]
        vy = damp * vy + self.dt * clipped[:, 1]
        # reward and cost are emitted for the state the action leads to
        x = x + self.dt * vx
        y = y + self.dt * vy
        hit = np.abs(y) > self.half
        y = np.clip(y, -self.half, self.half)
        vy = np.where(hit, 0.0, vy)
        nxt = np.stack([x, y, vx, vy], axis=1)
        reward = vx
        c = self.cost(nxt)
        costs = np.repeat(c[:, None, None], self.n_agents, axis=1)
        return nxt, reward, costs, np.zeros(len(state), dtype=bool)


# stay, up, down, left, right
_MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1]])


class BridgeGridEnv:
    """Agents cross a bridge from column 0 to the last column.

    Cells are ``(row, col)``; agents may share cells, so there are
    ``(rows*cols)**n`` joint states. Moves that would leave the grid keep
    the agent in place. With probability ``slip`` a move fails and the
    agent stays. An agent standing in the goal column is returned to its
    start cell on the next step. The reward counts agents whose intended
    destination is in the goal column; agent ``i``'s cost is 1 when its
    intended destination is an edge row (rows 0 and ``rows-1``, only when
    ``rows >= 3``), so costs depend on the state and the agent's own action.
    """

    discrete = True
    n_actions = 5

    def __init__(self, rows: int = 3, cols: int = 4, n_agents: int = 2, slip: float = 0.1, n_envs: int = 1):
        if rows < 1 or cols < 2 or n_agents < 1 or not 0 <= slip < 1:
            raise InvalidInputError("bridge parameters out of range")
        self.rows, self.cols, self.n_agents, self.slip = int(rows), int(cols), int(n_agents), float(slip)
        self.n_envs = int(n_envs)
        self.n_cells = self.rows * self.cols
        self.n_states = self.n_cells ** self.n_agents
        self.act_dims = (1,) * self.n_agents
        self.n_costs = (1,) * self.n_agents
        self.start_cell = (self.rows // 2) * self.cols
        self.spec = ObservationSpec(self.n_states, self.n_states, ("onehot",))

    @property
    def obs_dim(self) -> int:
        return self.n_states

    @property
    def state_dim(self) -> int:
        return self.n_states

    def cells(self, state: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(int(state), (self.n_cells,) * self.n_agents))

    def state_index(self, cells) -> int:
        return int(np.ravel_multi_index(tuple(cells), (self.n_cells,) * self.n_agents))

    def is_edge(self, cell: int) -> bool:
        r = cell // self.cols
        return self.rows >= 3 and (r == 0 or r == self.rows - 1)

    def in_goal(self, cell: int) -> bool:
        return cell % self.cols == self.cols - 1

    def destination(self, cell: int, action: int) -> int:
        if not 0 <= action < self.n_actions:
            raise InvalidInputError(f"action {action} out of range")
        if self.in_goal(cell):
            return self.start_cell
        r, c = divmod(cell, self.cols)
        dr, dc = _MOVES[action]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.rows and 0 <= nc < self.cols):
            return cell
        return nr * self.cols + nc

    def agent_cost(self, cell: int, action: int) -> float:
        if self.in_goal(cell):
            return 0.0
        return float(self.is_edge(self.destination(cell, action)))

    def outcomes(self, state: int, joint_action) -> tuple[dict, float, list]:
        """Exact ``{next_state: prob}``, reward and per-agent costs of one transition."""
        cells = self.cells(state)
        per_agent = []
        reward = 0.0
        for cell, a in zip(cells, joint_action):
            dest = self.destination(cell, a)
            if self.in_goal(cell):
                per_agent.append({dest: 1.0})
                continue
            reward += float(self.in_goal(dest))
            dist = {dest: 1.0 - self.slip}
            dist[cell] = dist.get(cell, 0.0) + self.slip
            per_agent.append(dist)
        probs: dict = {}
        for combo in itertools.product(*[list(d.items()) for d in per_agent]):
            nxt = self.state_index([c for c, _ in combo])
            probs[nxt] = probs.get(nxt, 0.0) + float(np.prod([p for _, p in combo]))
        costs = [np.array([self.agent_cost(c, a)]) for c, a in zip(cells, joint_action)]
        return probs, reward, costs

    def initial_state(self) -> int:
        return self.state_index([self.start_cell] * self.n_agents)

    def reset(self, rng=None) -> np.ndarray:
        return np.full(self.n_envs, self.initial_state(), dtype=int)

    def observe(self, state) -> np.ndarray:
        state = np.atleast_1d(state)
        onehot = np.zeros((len(state), self.n_states))
        onehot[np.arange(len(state)), state] = 1.0
        return np.repeat(onehot[:, None, :], self.n_agents, axis=1)

    def global_state(self, state) -> np.ndarray:
        return self.observe(state)[:, 0, :]

    def step(self, state, actions, rng: np.random.Generator):
        state = np.atleast_1d(state)
        actions = np.asarray(actions, dtype=int).reshape(len(state), self.n_agents)
        nxt = np.empty(len(state), dtype=int)
        reward = np.empty(len(state))
        costs = np.empty((len(state), self.n_agents, 1))
        for e, (s, a) in enumerate(zip(state, actions)):
            probs, r, c = self.outcomes(int(s), a)
            keys = sorted(probs)
            nxt[e] = keys[int(rng.choice(len(keys), p=[probs[k] for k in keys]))]
            reward[e] = r
            costs[e, :, 0] = [ci[0] for ci in c]
        return nxt, reward, costs, np.zeros(len(state), dtype=bool)


def as_tabular(env: BridgeGridEnv, gamma: float = 0.9, bounds=None) -> TabularCMG:
    """Exact tabular model of a bridge grid."""
    if not isinstance(env, BridgeGridEnv):
        raise InvalidInputError("only finite bridge environments have a tabular form")
    counts = (env.n_actions,) * env.n_agents
    S, A = env.n_states, int(np.prod(counts))
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            joint = np.unravel_index(a, counts)
            probs, r, _ = env.outcomes(s, joint)
            for t, p in probs.items():
                P[s, a, t] += p
            R[s, a] = r
    C = []
    for i in range(env.n_agents):
        table = np.zeros((1, S, env.n_actions))
        for s in range(S):
            cell = env.cells(s)[i]
            for a in range(env.n_actions):
                table[0, s, a] = env.agent_cost(cell, a)
        C.append(table)
    rho0 = np.zeros(S)
    rho0[env.initial_state()] = 1.0
    if bounds is None:
        bounds = [np.array([np.inf])] * env.n_agents
    return TabularCMG(counts, P, R, tuple(C), tuple(np.atleast_1d(b) for b in bounds), rho0, gamma)


class TabularEnv:
    """Rollout source backed by a :class:`TabularCMG` with one-hot observations."""

    discrete = True

    def __init__(self, game: TabularCMG, n_envs: int = 1):
        self.game = game
        self.n_envs = int(n_envs)
        self.n_agents = game.n_agents
        self.act_dims = (1,) * game.n_agents
        self.n_costs = tuple(game.n_costs(i) for i in range(game.n_agents))
        self.n_actions_per_agent = game.action_counts
        self._cdf = np.cumsum(game.transition, axis=-1)
        self._init_cdf = np.cumsum(game.initial)
        self.spec = ObservationSpec(game.n_states, game.n_states, ("onehot",))

    @property
    def obs_dim(self) -> int:
        return self.game.n_states

    @property
    def state_dim(self) -> int:
        return self.game.n_states

    def reset(self, rng) -> np.ndarray:
        u = rng.random(self.n_envs)
        return np.minimum(np.searchsorted(self._init_cdf, u, side="right"), self.game.n_states - 1)

    def observe(self, state) -> np.ndarray:
        state = np.atleast_1d(state)
        onehot = np.zeros((len(state), self.game.n_states))
        onehot[np.arange(len(state)), state] = 1.0
        return np.repeat(onehot[:, None, :], self.n_agents, axis=1)

    def global_state(self, state) -> np.ndarray:
        return self.observe(state)[:, 0, :]

    def step(self, state, actions, rng):
        g = self.game
        state = np.atleast_1d(state)
        actions = np.asarray(actions, dtype=int).reshape(len(state), self.n_agents)
        joint = np.ravel_multi_index(tuple(actions.T), g.action_counts)
        u = rng.random(len(state))
        nxt = (self._cdf[state, joint] < u[:, None]).sum(1)
        nxt = np.minimum(nxt, g.n_states - 1)
        reward = g.reward[state, joint]
        m = max(self.n_costs)
        costs = np.zeros((len(state), self.n_agents, m))
        for i in range(self.n_agents):
            costs[:, i, :g.n_costs(i)] = g.costs[i][:, state, actions[:, i]].T
        return nxt, reward, costs, np.zeros(len(state), dtype=bool)


def make_env(env_id: str, n_envs: int, params: dict | None = None):
    params = dict(params or {})
    if env_id == "corridor":
        return CorridorEnv(n_envs=n_envs, **params)
    if env_id == "bridge":
        return BridgeGridEnv(n_envs=n_envs, **params)
    raise InvalidInputError(f"unknown environment {env_id!r}")
