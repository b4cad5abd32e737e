"""Constrained Markov games in tabular form.

Joint actions are flattened row-major in agent order: agent 0 is the most
significant digit, so for action counts ``(A0, A1, A2)`` the joint index is
``(a0 * A1 + a1) * A2 + a2`` (``numpy.ravel_multi_index`` semantics).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constants import MAX_JOINT_ACTIONS, NORMALIZATION_TOL
from .errors import CapacityError, InvalidInputError

SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class TabularCMG:
    """A finite constrained Markov game.

    ``transition[s, a, s']`` uses the flattened joint action ``a``;
    ``costs[i][j, s, a_i]`` is cost ``j`` of agent ``i`` and only sees that
    agent's own action. ``bounds[i][j]`` is the matching threshold.
    """

    action_counts: tuple[int, ...]
    transition: np.ndarray
    reward: np.ndarray
    costs: tuple[np.ndarray, ...]
    bounds: tuple[np.ndarray, ...]
    initial: np.ndarray
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "action_counts", tuple(int(a) for a in self.action_counts))
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(self, "reward", np.asarray(self.reward, dtype=float))
        object.__setattr__(self, "initial", np.asarray(self.initial, dtype=float))
        object.__setattr__(
            self, "costs", tuple(np.asarray(c, dtype=float).reshape(-1, *np.shape(c)[-2:]) for c in self.costs)
        )
        object.__setattr__(self, "bounds", tuple(np.atleast_1d(np.asarray(b, dtype=float)) for b in self.bounds))
        for arr in (self.transition, self.reward, self.initial, *self.costs, *self.bounds):
            arr.setflags(write=False)
        self.validate()

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.action_counts))

    def n_costs(self, agent: int) -> int:
        return self.costs[agent].shape[0]

    def validate(self) -> None:
        S, A = self.n_states, self.n_joint
        if self.transition.shape != (S, A, S):
            raise InvalidInputError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.reward.shape != (S, A):
            raise InvalidInputError(f"reward shape {self.reward.shape} != {(S, A)}")
        if self.initial.shape != (S,):
            raise InvalidInputError("initial distribution has wrong length")
        if len(self.costs) != self.n_agents or len(self.bounds) != self.n_agents:
            raise InvalidInputError("need one cost table and one bound vector per agent")
        for i, (c, b) in enumerate(zip(self.costs, self.bounds)):
            if c.shape[1:] != (S, self.action_counts[i]):
                raise InvalidInputError(f"cost table of agent {i} has shape {c.shape}")
            if b.shape != (c.shape[0],):
                raise InvalidInputError(f"agent {i} has {c.shape[0]} costs but {b.shape[0]} bounds")
            if np.isnan(b).any():
                raise InvalidInputError(f"bounds of agent {i} must not be NaN")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidInputError(f"discount {self.gamma} outside [0, 1)")
        if (self.transition < 0).any() or np.abs(self.transition.sum(-1) - 1).max() > NORMALIZATION_TOL:
            raise InvalidInputError("transition rows are not probability distributions")
        if (self.initial < 0).any() or abs(self.initial.sum() - 1) > NORMALIZATION_TOL:
            raise InvalidInputError("initial distribution does not sum to one")

    def joint_index(self, joint_action: Sequence[int]) -> int:
        joint_action = tuple(int(a) for a in joint_action)
        if len(joint_action) != self.n_agents:
            raise InvalidInputError(f"expected {self.n_agents} actions, got {len(joint_action)}")
        for i, a in enumerate(joint_action):
            if not 0 <= a < self.action_counts[i]:
                raise InvalidInputError(f"action {a} invalid for agent {i}")
        return int(np.ravel_multi_index(joint_action, self.action_counts))

    def split_index(self, joint: int) -> tuple[int, ...]:
        return tuple(int(a) for a in np.unravel_index(joint, self.action_counts))

    def with_bounds(self, bounds) -> "TabularCMG":
        return TabularCMG(self.action_counts, self.transition, self.reward, self.costs,
                          tuple(bounds), self.initial, self.gamma)

    def with_costs(self, costs) -> "TabularCMG":
        return TabularCMG(self.action_counts, self.transition, self.reward, tuple(costs),
                          self.bounds, self.initial, self.gamma)

    def to_dict(self) -> dict:
        return {
            "schema": "safemarl.tabular_cmg",
            "version": SCHEMA_VERSION,
            "action_counts": list(self.action_counts),
            "gamma": self.gamma,
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "costs": [c.tolist() for c in self.costs],
            "bounds": [_finite_or_str(b) for b in self.bounds],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularCMG":
        if doc.get("schema") != "safemarl.tabular_cmg":
            raise InvalidInputError("not a tabular CMG document")
        if doc.get("version") != SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported schema version {doc.get('version')}")
        return cls(
            action_counts=tuple(doc["action_counts"]),
            transition=np.array(doc["transition"]),
            reward=np.array(doc["reward"]),
            costs=tuple(np.array(c) for c in doc["costs"]),
            bounds=tuple(np.array([float(x) for x in b]) for b in doc["bounds"]),
            initial=np.array(doc["initial"]),
            gamma=float(doc["gamma"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "TabularCMG":
        return cls.from_dict(json.loads(text))


def _finite_or_str(b):
    # JSON has no infinity; unbounded constraints are written as "inf"
    return [float(x) if np.isfinite(x) else str(float(x)) for x in b]


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Per-agent tables ``tables[i][s, a_i]``; the joint policy is their product."""

    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        tables = tuple(np.array(t, dtype=float) for t in self.tables)
        for i, t in enumerate(tables):
            if t.ndim != 2 or (t < 0).any() or np.abs(t.sum(1) - 1).max() > NORMALIZATION_TOL:
                raise InvalidInputError(f"policy table of agent {i} is not row-stochastic")
            t.setflags(write=False)
        object.__setattr__(self, "tables", tables)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.tables[i]

    def __len__(self) -> int:
        return len(self.tables)

    def replace(self, agent: int, table: np.ndarray) -> "TabularPolicy":
        tables = list(self.tables)
        tables[agent] = table
        return TabularPolicy(tuple(tables))

    def joint(self) -> np.ndarray:
        """Joint table ``[s, flattened joint action]``."""
        out = self.tables[0]
        for t in self.tables[1:]:
            out = (out[:, :, None] * t[:, None, :]).reshape(out.shape[0], -1)
        return out

    @classmethod
    def uniform(cls, game: TabularCMG) -> "TabularPolicy":
        return cls(tuple(np.full((game.n_states, a), 1.0 / a) for a in game.action_counts))

    @classmethod
    def random(cls, game: TabularCMG, rng: np.random.Generator, concentration: float = 1.0) -> "TabularPolicy":
        return cls(tuple(
            floor_rows(rng.dirichlet(np.full(a, concentration), size=game.n_states))
            for a in game.action_counts
        ))


def floor_rows(table: np.ndarray, floor: float | None = None) -> np.ndarray:
    """Floor every entry at ``floor`` and renormalise rows."""
    from .constants import POLICY_FLOOR

    floor = POLICY_FLOOR if floor is None else floor
    t = np.maximum(np.asarray(table, dtype=float), floor)
    return t / t.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class AgentPermutation:
    order: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise InvalidInputError(f"{self.order} is not a permutation")

    def __iter__(self):
        return iter(self.order)

    def __len__(self):
        return len(self.order)


def draw_permutation(n_agents: int, rng: np.random.Generator) -> AgentPermutation:
    if n_agents < 1:
        raise InvalidInputError("need at least one agent")
    return AgentPermutation(tuple(int(i) for i in rng.permutation(n_agents)))


def sample_step(game: TabularCMG, state: int, joint_action: Sequence[int], rng: np.random.Generator):
    """One environment transition.

    Returns ``(next_state, reward, costs)`` where ``costs[i]`` holds the
    ``m_i`` costs of agent ``i`` for its own action.
    """
    if not 0 <= int(state) < game.n_states:
        raise InvalidInputError(f"state {state} out of range")
    a = game.joint_index(joint_action)
    next_state = int(rng.choice(game.n_states, p=game.transition[state, a]))
    costs = [game.costs[i][:, state, joint_action[i]].copy() for i in range(game.n_agents)]
    return next_state, float(game.reward[state, a]), costs


def random_tabular_cmg(
    n_states: int,
    n_agents: int,
    actions_per_agent: int | Sequence[int],
    n_costs: int | Sequence[int] = 1,
    seed: int = 0,
    gamma: float = 0.9,
    bounds: float | None = None,
) -> TabularCMG:
    """Random game with uniform [0, 1] rewards and costs.

    Bounds default to ``+inf``; callers usually set them relative to a
    reference policy with :meth:`TabularCMG.with_bounds`.
    """
    if isinstance(actions_per_agent, int):
        actions_per_agent = [actions_per_agent] * n_agents
    if isinstance(n_costs, int):
        n_costs = [n_costs] * n_agents
    counts = tuple(int(a) for a in actions_per_agent)
    if n_states < 1 or n_agents < 1 or len(counts) != n_agents or min(counts) < 1 or min(n_costs) < 1:
        raise InvalidInputError("all counts must be >= 1")
    if int(np.prod(counts)) > MAX_JOINT_ACTIONS:
        raise CapacityError(f"{int(np.prod(counts))} joint actions exceed {MAX_JOINT_ACTIONS}")
    rng = np.random.default_rng(seed)
    n_joint = int(np.prod(counts))
    P = rng.random((n_states, n_joint, n_states)) + 1e-3
    P /= P.sum(-1, keepdims=True)
    R = rng.random((n_states, n_joint))
    C = tuple(rng.random((m, n_states, a)) for m, a in zip(n_costs, counts))
    rho0 = rng.random(n_states) + 1e-3
    rho0 /= rho0.sum()
    bound = np.inf if bounds is None else float(bounds)
    B = tuple(np.full(m, bound) for m in n_costs)
    return TabularCMG(counts, P, R, C, B, rho0, gamma)
