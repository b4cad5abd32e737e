"""Safe multi-agent policy iteration on tabular games.

Each iteration evaluates the current joint policy exactly, draws a random
agent order and lets every agent in turn improve a KL-penalised sequential
surrogate while staying inside a max-KL ball whose radius protects every
other agent's constraints.

Two certificates are available. ``"own"`` uses only the radius and the
own-action cost test. That test ignores the first-order effect of other
agents' moves on an agent's cost, so tiny violations can slip through.
``"joint"`` (the default) adds the running bound built from the joint cost
advantage, which decomposes over the sweep exactly like the reward
surrogate and always upper-bounds the true cost.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import oracle
from .cmg import TabularCMG, TabularPolicy, draw_permutation, floor_rows
from .constants import IMPROVEMENT_TOL
from .errors import InvalidInputError

_STEP_GRID = 2.0 ** -np.arange(0, 48, 1.0)
_BISECT_ITERS = 60


CERTIFICATES = ("joint", "own")


@dataclass(frozen=True)
class PenaltyCoefficients:
    nu: float
    nu_cost: tuple[np.ndarray, ...]
    nu_joint: tuple[np.ndarray, ...] = ()


def penalty_coefficients(game: TabularCMG, policy: TabularPolicy, values: oracle.ValueTables) -> PenaltyCoefficients:
    scale = oracle.penalty_scale(game.gamma)
    nu = scale * float(np.abs(values.A).max())
    nu_cost = tuple(scale * np.abs(values.cost_A(i)).reshape(game.n_costs(i), -1).max(1)
                    for i in range(game.n_agents))
    nu_joint = tuple(scale * np.abs(values.cost_A_joint(i)).reshape(game.n_costs(i), -1).max(1)
                     for i in range(game.n_agents))
    return PenaltyCoefficients(nu, nu_cost, nu_joint)


@dataclass
class SweepContext:
    """State shared by the agents of one sequential sweep."""

    game: TabularCMG
    policy: TabularPolicy
    values: oracle.ValueTables
    rho: np.ndarray
    coefficients: PenaltyCoefficients
    costs: list[np.ndarray]
    order: tuple[int, ...]
    certificate: str = "joint"
    updated: dict[int, np.ndarray] = field(default_factory=dict)
    kls: dict[int, float] = field(default_factory=dict)
    # sum of the sequential joint-cost surrogates of agents already updated
    joint_surrogate: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def build(cls, game, policy, order, certificate: str = "joint") -> "SweepContext":
        if certificate not in CERTIFICATES:
            raise InvalidInputError(f"certificate must be one of {CERTIFICATES}")
        values = oracle.exact_values(game, policy)
        return cls(game, policy, values, oracle.occupancy(game, policy),
                   penalty_coefficients(game, policy, values),
                   oracle.all_costs(game, policy, values), tuple(order), certificate,
                   joint_surrogate=[np.zeros(game.n_costs(i)) for i in range(game.n_agents)])

    def joint_cost_advantages(self, h: int) -> list[np.ndarray]:
        """Per agent ``[m, s, a]`` sequential joint-cost advantage of ``order[h]``."""
        prev = list(self.order[:h])
        tables = [self.updated[a] for a in prev]
        out = []
        for i in range(self.game.n_agents):
            out.append(np.stack([
                oracle.conditional_advantage(self.game, self.policy, q, self.order[h], prev, tables)
                for q in self.values.cost_Q_joint[i]
            ]))
        return out

    def joint_margins(self, h: int, candidate: np.ndarray, kl: float, advs) -> float:
        """Smallest slack of the running joint-cost bound if ``order[h]`` moves to ``candidate``."""
        worst = math.inf
        total_kl = self.prior_kl(h) + kl
        for i, adv in enumerate(advs):
            finite = np.isfinite(self.game.bounds[i])
            if not finite.any():
                continue
            seq = np.einsum("s,sa,jsa->j", self.rho, candidate, adv)
            bound = self.costs[i] + self.joint_surrogate[i] + seq + self.coefficients.nu_joint[i] * total_kl
            worst = min(worst, float((self.game.bounds[i] - bound)[finite].min()))
        return worst

    def surrogate_cost(self, agent: int, table: np.ndarray) -> np.ndarray:
        adv = self.values.cost_A(agent)
        return np.einsum("s,sa,jsa->j", self.rho, table, adv)

    def prior_kl(self, h: int) -> float:
        return sum(self.kls[a] for a in self.order[:h])

    def record(self, h: int, table: np.ndarray, advs=None) -> None:
        agent = self.order[h]
        advs = self.joint_cost_advantages(h) if advs is None else advs
        for i, adv in enumerate(advs):
            self.joint_surrogate[i] = self.joint_surrogate[i] + np.einsum("s,sa,jsa->j", self.rho, table, adv)
        self.updated[agent] = table
        self.kls[agent] = oracle.max_kl(self.policy[agent], table)


def _ratio(num: float, den: float) -> float:
    if den > 0:
        return num / den
    return math.inf if num >= 0 else -math.inf


def safe_radius(ctx: SweepContext, h: int) -> float:
    """Max-KL radius for agent ``order[h]`` (0-based ``h``).

    Already-updated agents keep their surrogate cost term; agents later in
    the order do not. May be negative when the sweep started infeasible.
    """
    game = ctx.game
    prior = ctx.prior_kl(h)
    radius = math.inf
    for pos, agent in enumerate(ctx.order):
        if pos == h:
            continue
        nu = ctx.coefficients.nu_cost[agent]
        slack = game.bounds[agent] - ctx.costs[agent] - nu * prior
        if pos < h:
            slack = slack - ctx.surrogate_cost(agent, ctx.updated[agent])
        for j in range(game.n_costs(agent)):
            radius = min(radius, _ratio(slack[j], nu[j]))
    return radius


def constraint_margins(ctx: SweepContext, h: int, candidate: np.ndarray, kl: float | None = None) -> np.ndarray:
    """Right-hand side minus left-hand side of the own-constraint surrogate test."""
    agent = ctx.order[h]
    kl = oracle.max_kl(ctx.policy[agent], candidate) if kl is None else kl
    nu = ctx.coefficients.nu_cost[agent]
    lhs = ctx.costs[agent] + ctx.surrogate_cost(agent, candidate) + nu * kl
    return ctx.game.bounds[agent] - nu * ctx.prior_kl(h) - lhs


def feasible_set_membership(ctx: SweepContext, h: int, candidate: np.ndarray, radius: float | None = None) -> bool:
    agent = ctx.order[h]
    radius = safe_radius(ctx, h) if radius is None else radius
    kl = oracle.max_kl(ctx.policy[agent], candidate)
    if kl > radius:
        return False
    return bool((constraint_margins(ctx, h, candidate, kl) >= 0).all())


def _conditional_advantage(ctx: SweepContext, h: int) -> np.ndarray:
    prev = list(ctx.order[:h])
    return oracle.conditional_advantage(ctx.game, ctx.policy, ctx.values, ctx.order[h],
                                        prev, [ctx.updated[a] for a in prev])


def penalised_objective(ctx: SweepContext, h: int, candidate: np.ndarray, adv: np.ndarray | None = None) -> float:
    agent = ctx.order[h]
    adv = _conditional_advantage(ctx, h) if adv is None else adv
    gain = float(ctx.rho @ (candidate * adv).sum(1))
    return gain - ctx.coefficients.nu * oracle.max_kl(ctx.policy[agent], candidate)


def _largest_mix(ok, hi: float = 1.0) -> float:
    """Largest ``alpha`` in ``[0, hi]`` with ``ok(alpha)``, given ``ok`` holds on an interval from 0."""
    if ok(hi):
        return hi
    lo = 0.0
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class InnerResult:
    table: np.ndarray
    objective: float
    incumbent_objective: float
    kl: float
    radius: float
    accepted: bool
    joint_advantages: list | None = None


def inner_maximize(ctx: SweepContext, h: int) -> InnerResult:
    """Improve agent ``order[h]`` inside its safe set.

    Exponentiated-gradient steps from the incumbent over a geometric grid of
    step sizes; each is pulled back toward the incumbent until it lies in the
    max-KL ball and satisfies the own-constraint test (both sets are convex
    in the mixing weight, so bisection is exact). The incumbent is always a
    candidate, so the returned objective never falls below it. With the
    joint certificate the running joint-cost bound (also convex in the
    mixing weight) must stay below every threshold too.
    """
    agent = ctx.order[h]
    base = ctx.policy[agent]
    radius = safe_radius(ctx, h)
    adv = _conditional_advantage(ctx, h)
    jadv = ctx.joint_cost_advantages(h)
    use_joint = ctx.certificate == "joint"
    incumbent_value = penalised_objective(ctx, h, base, adv)
    best = (incumbent_value, 0.0, base)

    def admissible(cand, kl=None):
        kl = oracle.max_kl(base, cand) if kl is None else kl
        if not (constraint_margins(ctx, h, cand, kl) >= 0).all():
            return False
        return not use_joint or ctx.joint_margins(h, cand, kl, jadv) >= 0

    def done(r):
        return InnerResult(base, incumbent_value, incumbent_value, 0.0, r, False, jadv)

    if radius <= 0 or not admissible(base, 0.0):
        return done(max(radius, 0.0))
    scale = np.abs(adv).max()
    if scale == 0:
        return done(radius)
    for eta in _STEP_GRID / scale:
        logits = np.log(base) + eta * adv
        proposal = np.exp(logits - logits.max(1, keepdims=True))
        proposal /= proposal.sum(1, keepdims=True)

        def mix(alpha, proposal=proposal):
            return floor_rows((1 - alpha) * base + alpha * proposal)

        alpha = _largest_mix(lambda a: oracle.max_kl(base, mix(a)) <= radius)
        alpha = _largest_mix(lambda a: admissible(mix(a)), alpha)
        cand = mix(alpha)
        if not feasible_set_membership(ctx, h, cand, radius) or not admissible(cand):
            continue
        value = penalised_objective(ctx, h, cand, adv)
        kl = oracle.max_kl(base, cand)
        if value > best[0] or (value == best[0] and kl < best[1]):
            best = (value, kl, cand)
    value, kl, table = best
    return InnerResult(table, value, incumbent_value, kl, radius, table is not base, jadv)


def _recovery_update(game: TabularCMG, policy: TabularPolicy, agent: int) -> np.ndarray:
    """Move ``agent`` toward lower constraint violation, scored on exact costs."""

    def violation(pol):
        costs = oracle.all_costs(game, pol)
        return sum(float(np.maximum(0.0, c - b).sum()) for c, b in zip(costs, game.bounds))

    values = oracle.exact_values(game, policy)
    costs = oracle.all_costs(game, policy, values)
    violated = costs[agent] > game.bounds[agent]
    best_table, best_v = policy[agent], violation(policy)
    if not violated.any():
        return best_table
    direction = -(values.cost_A(agent)[violated]).sum(0)
    scale = np.abs(direction).max()
    if scale == 0:
        return best_table
    for eta in 2.0 ** -np.arange(-6, 20, 1.0) / scale:
        logits = np.log(policy[agent]) + eta * direction
        cand = np.exp(logits - logits.max(1, keepdims=True))
        cand = floor_rows(cand / cand.sum(1, keepdims=True))
        v = violation(policy.replace(agent, cand))
        if v < best_v:
            best_table, best_v = cand, v
    return best_table


@dataclass
class IterationCertificate:
    iteration: int
    mode: str  # "safe" or "recovery"
    order: list[int]
    expected_return: float
    costs: list[list[float]]
    bounds: list[list[float]]
    feasible: bool
    kls: list[float] = field(default_factory=list)
    radii: list[float] = field(default_factory=list)
    accepted: list[bool] = field(default_factory=list)
    objective_gain: list[float] = field(default_factory=list)
    # worst (bound - surrogate cost upper bound) over all agents after each single update
    mid_sweep_margin: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), default=_json_default)


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    raise TypeError(type(x))


def _mid_sweep_margin(ctx: SweepContext, h: int) -> float:
    """Smallest slack of every constraint's surrogate upper bound after ``h+1`` updates."""
    game = ctx.game
    if ctx.certificate == "joint":
        worst = math.inf
        kl_total = ctx.prior_kl(h + 1)
        for i in range(game.n_agents):
            finite = np.isfinite(game.bounds[i])
            if finite.any():
                bound = ctx.costs[i] + ctx.joint_surrogate[i] + ctx.coefficients.nu_joint[i] * kl_total
                worst = min(worst, float((game.bounds[i] - bound)[finite].min()))
        return worst
    kl_total = ctx.prior_kl(h + 1)
    worst = math.inf
    for agent in range(game.n_agents):
        nu = ctx.coefficients.nu_cost[agent]
        bound = ctx.costs[agent] + nu * kl_total
        if agent in ctx.updated:
            bound = bound + ctx.surrogate_cost(agent, ctx.updated[agent])
        with np.errstate(invalid="ignore"):
            margin = np.where(np.isinf(game.bounds[agent]), math.inf, game.bounds[agent] - bound)
        worst = min(worst, float(margin.min()))
    return worst


def is_feasible(game: TabularCMG, costs, tol: float = 0.0) -> bool:
    return all(bool((c <= b + tol).all()) for c, b in zip(costs, game.bounds))


def safe_step(game: TabularCMG, policy: TabularPolicy, rng: np.random.Generator, iteration: int = 0,
              certificate: str = "joint"):
    """One iteration; returns ``(new_policy, certificate)`` describing the starting policy."""
    order = draw_permutation(game.n_agents, rng).order
    ctx = SweepContext.build(game, policy, order, certificate)
    feasible = is_feasible(game, ctx.costs, IMPROVEMENT_TOL)
    cert = IterationCertificate(
        iteration=iteration,
        mode="safe" if feasible else "recovery",
        order=list(order),
        expected_return=float(game.initial @ ctx.values.V),
        costs=[c.tolist() for c in ctx.costs],
        bounds=[b.tolist() for b in game.bounds],
        feasible=feasible,
    )
    if not feasible:
        current = policy
        for agent in order:
            table = _recovery_update(game, current, agent)
            cert.kls.append(oracle.max_kl(policy[agent], table))
            cert.accepted.append(table is not current[agent])
            current = current.replace(agent, table)
        return current, cert

    for h, agent in enumerate(order):
        result = inner_maximize(ctx, h)
        ctx.record(h, result.table, result.joint_advantages)
        cert.kls.append(result.kl)
        cert.radii.append(result.radius)
        cert.accepted.append(result.accepted)
        cert.objective_gain.append(result.objective - result.incumbent_objective)
        cert.mid_sweep_margin.append(_mid_sweep_margin(ctx, h))
        if result.objective < result.incumbent_objective:
            cert.flags.append(f"agent {agent}: objective below incumbent")
    new = TabularPolicy(tuple(ctx.updated.get(a, policy[a]) for a in range(game.n_agents)))
    return new, cert


def safe_iteration(game: TabularCMG, policy: TabularPolicy, iterations: int, rng: np.random.Generator,
                   certificate: str = "joint"):
    """Run ``iterations`` sweeps; returns the final policy and one certificate per sweep.

    A final certificate-free evaluation is left to the caller; every
    certificate describes the policy the sweep started from.
    """
    certificates = []
    for k in range(iterations):
        policy, cert = safe_step(game, policy, rng, k, certificate)
        certificates.append(cert)
    return policy, certificates
