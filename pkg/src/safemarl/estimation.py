"""Rollout storage, GAE for reward and cost channels, and the M-factor.

Arrays are time-major: axis 0 is the step within the rollout, later axes
are parallel environments and channels. ``dones`` marks true terminations
(no bootstrap); ``truncated`` marks time-limit cuts, where the recursion is
cut but the critic's value of the final observation is used as bootstrap.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, PoisonedStateError


@dataclass
class RolloutBatch:
    """One batch of ``T`` steps from ``E`` parallel environments.

    Shapes: ``obs [T, E, n, d_obs]``, ``state [T, E, d_state]``,
    ``actions [T, E, n, d_act]`` (``[T, E, n]`` for discrete actions),
    ``logp [T, E, n]``, ``rewards [T, E]``, ``costs [T, E, n, m]``,
    ``dones`` and ``truncated [T, E]``. ``next_state`` / ``next_obs`` hold the
    true successor (before any reset) for bootstrapping.
    """

    obs: np.ndarray
    state: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    next_state: np.ndarray
    next_obs: np.ndarray
    episode_returns: list = field(default_factory=list)
    episode_costs: list = field(default_factory=list)  # [n, m] undiscounted per finished episode
    episode_discounted_costs: list = field(default_factory=list)

    def __post_init__(self):
        T, E = self.rewards.shape
        for name in ("obs", "state", "actions", "logp", "costs", "dones", "truncated", "next_state", "next_obs"):
            arr = getattr(self, name)
            if arr.shape[:2] != (T, E):
                raise InvalidInputError(f"{name} has leading shape {arr.shape[:2]}, expected {(T, E)}")
        if not np.all(np.isfinite(self.logp)):
            raise PoisonedStateError("non-finite log-probabilities in batch")

    @property
    def n_steps(self) -> int:
        return self.rewards.size

    @property
    def n_agents(self) -> int:
        return self.logp.shape[2]

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(self.n_steps, *arr.shape[2:])


def gae(values, next_values, rewards, dones, gamma: float, lam: float, truncated=None):
    """Generalised advantage estimates and critic targets.

    ``delta_t = r_t + gamma (1 - done_t) V(s_{t+1}) - V(s_t)`` and
    ``A_t = delta_t + gamma lam (1 - done_t)(1 - truncated_t) A_{t+1}``.
    Trailing axes are independent channels. Returns ``(advantages, returns)``
    with ``returns = advantages + values``.
    """
    values = np.asarray(values, dtype=float)
    next_values = np.asarray(next_values, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    if not 0.0 <= lam <= 1.0 or not 0.0 <= gamma <= 1.0:
        raise InvalidInputError("gamma and lam must lie in [0, 1]")
    if values.shape != rewards.shape or next_values.shape != rewards.shape:
        raise InvalidInputError(
            f"shape mismatch: values {values.shape}, next {next_values.shape}, rewards {rewards.shape}")
    dones = np.asarray(dones, dtype=float)
    truncated = np.zeros_like(dones) if truncated is None else np.asarray(truncated, dtype=float)
    if dones.shape != rewards.shape[:dones.ndim] or truncated.shape != dones.shape:
        raise InvalidInputError("dones/truncated must match the leading axes of rewards")
    extra = (1,) * (rewards.ndim - dones.ndim)
    alive = (1.0 - dones).reshape(dones.shape + extra)
    carry = alive * (1.0 - truncated.reshape(truncated.shape + extra))
    deltas = rewards + gamma * alive * next_values - values
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(len(rewards))):
        running = deltas[t] + gamma * lam * carry[t] * running
        adv[t] = running
    return adv, adv + values


def cost_gae(cost_values, next_cost_values, costs, dones, gamma: float, lam: float, truncated=None):
    """GAE on cost channels; identical recursion, any number of trailing channel axes."""
    return gae(cost_values, next_cost_values, costs, dones, gamma, lam, truncated)


def normalize(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def update_m_factor(M, ratio) -> np.ndarray:
    """``ratio * M`` elementwise, rejecting non-finite ratios."""
    ratio = np.asarray(ratio, dtype=float)
    if not np.all(np.isfinite(ratio)):
        raise PoisonedStateError("non-finite importance ratio in M-factor update")
    return np.asarray(M, dtype=float) * ratio


def constraint_violation(estimates, bound) -> float:
    """Mean estimated cost minus its bound; positive means violating."""
    return float(np.mean(estimates) - bound)


def discounted_return(rewards, gamma: float) -> float:
    out = 0.0
    for r in reversed(np.asarray(rewards, dtype=float)):
        out = r + gamma * out
    return out


def batch_to_csv(batch: RolloutBatch, path) -> None:
    """Columnar dump: ``t, env, reward, done, truncated`` then per-agent log-prob, actions and costs."""
    T, E = batch.rewards.shape
    n = batch.n_agents
    acts = batch.actions.reshape(T, E, n, -1)
    m = batch.costs.shape[-1]
    header = ["t", "env", "reward", "done", "truncated"]
    for i in range(n):
        header.append(f"logp_{i}")
        header += [f"action_{i}_{k}" for k in range(acts.shape[-1])]
        header += [f"cost_{i}_{j}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(T):
            for e in range(E):
                row = [t, e, repr(float(batch.rewards[t, e])), int(batch.dones[t, e]), int(batch.truncated[t, e])]
                for i in range(n):
                    row.append(repr(float(batch.logp[t, e, i])))
                    row += [repr(float(a)) for a in acts[t, e, i]]
                    row += [repr(float(c)) for c in batch.costs[t, e, i]]
                w.writerow(row)
