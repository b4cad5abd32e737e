"""Property suites for the tabular theory and the numerical building blocks.

Each suite returns a :class:`SuiteReport` with pass/fail counts, the worst
residual seen and, on failure, the first failing instance in a form that
can be replayed (games are stored with :meth:`TabularCMG.to_dict`).
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import oracle
from .cmg import TabularCMG, TabularPolicy, random_tabular_cmg
from .errors import RecoveryRequired
from .estimation import gae
from .policy_nn import CategoricalPolicy, GaussianPolicy
from .safe_iteration import safe_step
from .trust_region import conjugate_gradient, primal_step, solve_lqclp_single

SUITES = ("decomposition", "cost_bound", "safe_improvement", "lqclp", "numerics", "gae")


@dataclass
class SuiteReport:
    name: str
    passed: int = 0
    failed: int = 0
    worst: dict = field(default_factory=dict)
    counterexample: dict | None = None
    seconds: float = 0.0
    notes: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def tally(self, ok: bool, instance=None) -> None:
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            if self.counterexample is None and instance is not None:
                self.counterexample = instance

    def track(self, key: str, value: float, mode: str = "max") -> None:
        old = self.worst.get(key)
        if old is None or (value > old if mode == "max" else value < old):
            self.worst[key] = float(value)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["ok"] = self.ok
        return doc


def _policy_doc(pi: TabularPolicy) -> list:
    return [t.tolist() for t in pi.tables]


def _random_small_game(rng, seed, max_agents=3, max_states=6, max_actions=3, n_costs=1):
    n = int(rng.integers(1, max_agents + 1))
    S = int(rng.integers(2, max_states + 1))
    A = [int(a) for a in rng.integers(2, max_actions + 1, size=n)]
    return random_tabular_cmg(S, n, A, n_costs, seed=seed, gamma=0.9)


# -- advantage decomposition ---------------------------------------------------------------------


def brute_marginal_q(game: TabularCMG, policy: TabularPolicy, Q: np.ndarray, subset, state, actions) -> float:
    """``Q^{subset}(s, a^subset)`` by explicit summation over the other agents' actions."""
    others = [k for k in range(game.n_agents) if k not in subset]
    total = 0.0
    for rest in itertools.product(*[range(game.action_counts[k]) for k in others]):
        joint = [0] * game.n_agents
        for k, a in zip(subset, actions):
            joint[k] = a
        p = 1.0
        for k, a in zip(others, rest):
            joint[k] = a
            p *= policy[k][state, a]
        total += p * Q[state, game.joint_index(joint)]
    return total


def decomposition_suite(games: int = 100, seed: int = 0, tol: float = 1e-10, fault: bool = False) -> SuiteReport:
    """``A^{i_1:h}(s, a) = sum_j A^{i_j}(s, a^{i_1:j-1}, a^{i_j})`` for every ordering, state and action.

    The left side is computed by brute-force summation; the right side
    through the oracle's marginal tables.
    """
    rep = SuiteReport("decomposition")
    t0 = time.perf_counter()
    for k in range(games):
        rng = np.random.default_rng([seed, k])
        game = _random_small_game(rng, seed * 100003 + k)
        pi = TabularPolicy.random(game, rng)
        values = oracle.exact_values(game, pi)
        worst = 0.0
        bad = None
        for size in range(1, game.n_agents + 1):
            for order in itertools.permutations(range(game.n_agents), size):
                order = list(order)
                for s in range(game.n_states):
                    for acts in itertools.product(*[range(game.action_counts[i]) for i in order]):
                        lhs = brute_marginal_q(game, pi, values.Q, order, s, acts) - values.V[s]
                        rhs = sum(
                            oracle.multi_agent_advantage(game, pi, values, order[:j], [order[j]], s, acts[:j],
                                                         [acts[j]])
                            for j in range(size))
                        if fault and k == 0 and s == 0 and size == game.n_agents:
                            rhs += 1e-6
                        res = abs(lhs - rhs)
                        if res > worst:
                            worst = res
                            if res >= tol:
                                bad = {"order": order, "state": s, "actions": list(acts), "residual": res}
        rep.track("residual", worst)
        rep.tally(worst < tol, None if bad is None else
                  {"game": game.to_dict(), "policy": _policy_doc(pi), **bad})
    rep.seconds = time.perf_counter() - t0
    return rep


# -- surrogate cost bound ------------------------------------------------------------------------


def cost_bound_suite(triples: int = 200, seed: int = 0, tol: float = 1e-8) -> SuiteReport:
    """Surrogate cost bound on independent random ``(game, pi, pibar)`` triples.

    Also checks the joint-advantage form of the bound, which holds for any
    pair of policies; both slacks are reported.
    """
    rep = SuiteReport("cost_bound")
    t0 = time.perf_counter()
    for k in range(triples):
        rng = np.random.default_rng([seed, 7, k])
        game = _random_small_game(rng, seed * 100003 + 50000 + k, n_costs=int(rng.integers(1, 3)))
        pi = TabularPolicy.random(game, rng)
        pibar = TabularPolicy.random(game, rng)
        values = oracle.exact_values(game, pi)
        rho = oracle.occupancy(game, pi)
        ok = True
        for i in range(game.n_agents):
            for j in range(game.n_costs(i)):
                J, rhs = oracle.own_cost_bound(game, pi, pibar, i, j, values, rho)
                Jj, rhs_j = oracle.joint_cost_bound(game, pi, pibar, i, j, values, rho)
                rep.track("max_violation", J - rhs)
                rep.track("min_slack", rhs - J, "min")
                rep.track("joint_max_violation", Jj - rhs_j)
                if J > rhs + tol or Jj > rhs_j + tol:
                    ok = False
        rep.tally(ok, {"game": game.to_dict(), "pi": _policy_doc(pi), "pibar": _policy_doc(pibar)})
    rep.seconds = time.perf_counter() - t0
    return rep


# -- monotone safe improvement -------------------------------------------------------------------


def safe_improvement_suite(games: int = 25, iterations: int = 20, seed: int = 0, tol: float = 1e-9,
                   certificate: str = "joint") -> SuiteReport:
    """Monotone return and constraint satisfaction of safe iteration from feasible starts.

    Bounds are set just above the costs of a random starting policy so
    the constraints bind.
    """
    rep = SuiteReport("safe_improvement")
    t0 = time.perf_counter()
    accepted = total = 0
    for k in range(games):
        rng = np.random.default_rng([seed, 11, k])
        n = int(rng.integers(1, 4))
        S = int(rng.integers(2, 7))
        A = int(rng.integers(2, 4))
        game = random_tabular_cmg(S, n, A, 1, seed=seed * 100003 + 90000 + k, gamma=0.9)
        pi = TabularPolicy.random(game, rng)
        costs = oracle.all_costs(game, pi)
        game = game.with_bounds([c + rng.uniform(0, 0.05, size=c.shape) * np.abs(c) for c in costs])
        start = pi
        J_prev = oracle.expected_return(game, pi)
        failures = []
        for it in range(iterations):
            pi, cert = safe_step(game, pi, rng, it, certificate)
            accepted += sum(cert.accepted)
            total += len(cert.accepted)
            J = oracle.expected_return(game, pi)
            rep.track("max_return_drop", J_prev - J)
            if J < J_prev - tol:
                failures.append({"iteration": it, "kind": "return", "drop": J_prev - J})
            J_prev = J
            for i, (c, b) in enumerate(zip(oracle.all_costs(game, pi), game.bounds)):
                rep.track("max_cost_excess", float((c - b).max()))
                if (c > b + tol).any():
                    failures.append({"iteration": it, "kind": "cost", "agent": i, "excess": float((c - b).max())})
        rep.tally(not failures, {"game": game.to_dict(), "start": _policy_doc(start), "failures": failures[:5]})
    rep.notes["accepted_updates"] = accepted
    rep.notes["attempted_updates"] = total
    rep.notes["certificate"] = certificate
    rep.seconds = time.perf_counter() - t0
    return rep


# -- LQCLP ---------------------------------------------------------------------------------------


def primal_oracle(H, g, b, c, delta, grid: int = 200_000):
    """Brute-force ``max g^T x`` s.t. ``b^T x + c <= 0``, ``x^T H x <= delta``.

    In whitened coordinates ``y = L^T x`` (``H = L L^T``) the optimum lies in
    the plane spanned by the whitened ``g`` and ``b`` and on the boundary of
    the feasible disc: a dense angular grid on the circle plus the two
    chord endpoints covers every candidate. Returns ``(value, x)`` or
    ``None`` when the feasible set is empty.
    """
    L = np.linalg.cholesky(H)
    gt = np.linalg.solve(L, g)
    bt = np.linalg.solve(L, b)
    basis, _ = np.linalg.qr(np.stack([gt, bt], 1))
    G, Bv = basis.T @ gt, basis.T @ bt
    rad = math.sqrt(delta)
    # offset so no grid point sits on the basis axes (which would make the search exact by accident)
    ang = np.linspace(0, 2 * np.pi, grid, endpoint=False) + 0.7071 * (2 * np.pi / grid)
    pts = rad * np.stack([np.cos(ang), np.sin(ang)], 1)
    cands = [pts[pts @ Bv + c <= 0]]
    nb = float(Bv @ Bv)
    if nb > 0:
        foot = -c * Bv / nb  # closest point of the line to the origin
        rem = delta - float(foot @ foot)
        if rem >= 0:
            tang = np.array([-Bv[1], Bv[0]]) / math.sqrt(nb)
            cands.append(np.stack([foot + math.sqrt(rem) * tang, foot - math.sqrt(rem) * tang]))
    elif c <= 0:
        cands.append(pts)
    allc = np.concatenate(cands) if cands else np.zeros((0, 2))
    if len(allc) == 0:
        return None
    vals = allc @ G
    best = allc[int(np.argmax(vals))]
    y = basis @ best
    x = np.linalg.solve(L.T, y)
    return float(g @ x), x


def lqclp_suite(instances: int = 200, seed: int = 0, obj_tol: float = 1e-4, step_tol: float = 1e-3,
                duality_tol: float = 1e-6) -> SuiteReport:
    rep = SuiteReport("lqclp")
    t0 = time.perf_counter()
    infeasible = 0
    for k in range(instances):
        rng = np.random.default_rng([seed, 13, k])
        d = int(rng.integers(3, 11))
        A = rng.standard_normal((d, d))
        H = A @ A.T + 0.1 * np.eye(d)
        g, b = rng.standard_normal(d), rng.standard_normal(d)
        delta = float(rng.uniform(0.01, 1.0))
        Hinv_g, Hinv_b = np.linalg.solve(H, g), np.linalg.solve(H, b)
        q, r, s = float(g @ Hinv_g), float(g @ Hinv_b), float(b @ Hinv_b)
        c = float(rng.uniform(-1.5, 1.5) * math.sqrt(delta * s))
        inst = {"H": H.tolist(), "g": g.tolist(), "b": b.tolist(), "c": c, "delta": delta}
        ref = primal_oracle(H, g, b, c, delta)
        try:
            dual = solve_lqclp_single(q, r, s, c, delta)
        except RecoveryRequired:
            infeasible += 1
            rep.tally(ref is None, {**inst, "issue": "solver infeasible, oracle feasible"})
            continue
        if ref is None:
            rep.tally(False, {**inst, "issue": "solver feasible, oracle infeasible"})
            continue
        x = primal_step(dual, Hinv_g, Hinv_b[:, None])
        obj_err = abs(float(g @ x) - ref[0])
        step_err = float(np.linalg.norm(x - ref[1]))
        gap = ref[0] - dual.bound()
        rep.track("objective_error", obj_err)
        rep.track("step_error", step_err)
        rep.track("weak_duality_residual", gap)
        rep.track("quad_form_ratio", float(x @ H @ x) / delta)
        ok = obj_err <= obj_tol and step_err <= step_tol and gap <= duality_tol
        rep.tally(ok, {**inst, "objective_error": obj_err, "step_error": step_err, "gap": gap})
    rep.notes["infeasible_instances"] = infeasible
    rep.seconds = time.perf_counter() - t0
    return rep


# -- numerics ------------------------------------------------------------------------------------


def _fd_grad(f, x, h=1e-6):
    out = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def fd_fisher_vector(policy, theta, obs, v, h=1e-3):
    """``F v`` from KL values only: ``w^T F w ~ (KL(+hw) + KL(-hw)) / h^2`` and polarisation."""
    def quad(w):
        return (policy.mean_kl(theta, theta + h * w, obs) + policy.mean_kl(theta, theta - h * w, obs)) / h ** 2

    out = np.empty_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = 1.0
        out[i] = (quad(e + v) - quad(e - v)) / 4
    return out


def smooth_observations(policy, theta, rng, n: int, dim: int, gap: float = 0.05) -> np.ndarray:
    """Observations whose hidden pre-activations all lie at least ``gap`` from zero.

    Finite differences that straddle a ReLU kink measure a mix of one-sided
    derivatives; ``gap`` exceeds the largest pre-activation shift of the
    perturbations used here, so the difference quotients stay on one side.
    """
    net = policy.net
    rows = []
    while len(rows) < n:
        x = rng.standard_normal((1, dim))
        _, (_, _, pres) = net.forward(theta[:net.n_params], x)
        if all(np.abs(p).min() > gap for p in pres):
            rows.append(x[0])
    return np.array(rows)


def numerics_suite(networks: int = 20, seed: int = 0) -> SuiteReport:
    rep = SuiteReport("numerics")
    t0 = time.perf_counter()
    # CG against dense LU on SPD systems
    for k in range(networks):
        rng = np.random.default_rng([seed, 17, k])
        Q, _ = np.linalg.qr(rng.standard_normal((50, 50)))
        H = Q @ np.diag(rng.uniform(1, 10, 50)) @ Q.T
        rhs = rng.standard_normal(50)
        x = conjugate_gradient(lambda v: H @ v, rhs, iters=200, tol=1e-14).x
        lu = np.linalg.solve(H, rhs)
        err = float(np.linalg.norm(x - lu) / np.linalg.norm(lu))
        rep.track("cg_relative_error", err)
        rep.tally(err < 1e-8, {"kind": "cg", "seed": [seed, 17, k]})
    # score gradients, KL Hessian-vector products, zero-mean score
    for k in range(networks):
        rng = np.random.default_rng([seed, 19, k])
        obs_dim = int(rng.integers(2, 5))
        if k % 2 == 0:
            pol = GaussianPolicy(obs_dim, int(rng.integers(1, 3)), hidden=(8,))
        else:
            pol = CategoricalPolicy(obs_dim, int(rng.integers(2, 5)), hidden=(8,))
        theta = pol.init(rng) + 0.3 * rng.standard_normal(pol.n_params)
        obs = smooth_observations(pol, theta, rng, 6, obs_dim)
        act = pol.sample(theta, obs, rng)
        g = pol.grad_log_prob(theta, obs, act)
        fd = _fd_grad(lambda t: float(pol.log_prob(t, obs, act).sum()), theta)
        g_err = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
        v = rng.standard_normal(pol.n_params)
        fv = pol.fisher_vector_product(theta, obs, v, damping=0.0)
        fv_fd = fd_fisher_vector(pol, theta, obs, v)
        h_err = float(np.linalg.norm(fv - fv_fd) / max(np.linalg.norm(fv_fd), 1e-12))
        # E_a[grad log pi(a|o)] = 0 along a random direction, within 3 standard errors
        o1 = np.repeat(obs[:1], 4000, axis=0)
        a1 = pol.sample(theta, o1, rng)
        u = rng.standard_normal(pol.n_params)
        proj = np.array([u @ pol.grad_log_prob(theta, o1[t:t + 1], a1[t:t + 1]) for t in range(len(o1))])
        z = float(abs(proj.mean()) / (proj.std() / math.sqrt(len(proj)) + 1e-300))
        rep.track("score_relative_error", g_err)
        rep.track("hvp_relative_error", h_err)
        rep.track("score_mean_z", z)
        ok = g_err < 1e-4 and h_err < 1e-3 and z < 3
        rep.tally(ok, {"kind": type(pol).__name__, "seed": [seed, 19, k], "grad": g_err, "hvp": h_err, "z": z})
    rep.seconds = time.perf_counter() - t0
    return rep


# -- GAE -----------------------------------------------------------------------------------------


def brute_gae(values, next_values, rewards, dones, truncated, gamma, lam):
    """``A_t = sum_l (gamma lam)^l delta_{t+l}``, the sum stopping after the first episode boundary."""
    T = len(rewards)
    deltas = rewards + gamma * (1 - dones) * next_values - values
    out = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for u in range(t, T):
            acc += w * deltas[u]
            if dones[u] or truncated[u]:
                break
            w *= gamma * lam
        out[t] = acc
    return out


def gae_suite(episodes: int = 100, seed: int = 0, tol: float = 1e-10) -> SuiteReport:
    rep = SuiteReport("gae")
    t0 = time.perf_counter()
    for k in range(episodes):
        rng = np.random.default_rng([seed, 23, k])
        T = int(rng.integers(1, 60))
        v, nv, r = rng.standard_normal(T), rng.standard_normal(T), rng.standard_normal(T)
        dones = (rng.random(T) < 0.1).astype(float)
        trunc = ((rng.random(T) < 0.05) & (dones == 0)).astype(float)
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0, 1))
        adv, ret = gae(v, nv, r, dones, gamma, lam, trunc)
        ref = brute_gae(v, nv, r, dones, trunc, gamma, lam)
        err = float(np.max(np.abs(adv - ref)))
        rep.track("residual", err)
        rep.tally(err < tol, {"seed": [seed, 23, k], "residual": err})
    rep.seconds = time.perf_counter() - t0
    return rep


def run_suites(names=SUITES, seed: int = 0, counts: dict | None = None, fault: str | None = None) -> dict:
    """Run the selected suites; ``counts`` overrides instance numbers per suite."""
    counts = dict(counts or {})
    runners = {
        "decomposition": lambda: decomposition_suite(counts.get("decomposition", 100), seed,
                                                     fault=fault == "decomposition"),
        "cost_bound": lambda: cost_bound_suite(counts.get("cost_bound", 200), seed),
        "safe_improvement": lambda: safe_improvement_suite(counts.get("safe_improvement", 25), seed=seed),
        "lqclp": lambda: lqclp_suite(counts.get("lqclp", 200), seed),
        "numerics": lambda: numerics_suite(counts.get("numerics", 20), seed),
        "gae": lambda: gae_suite(counts.get("gae", 100), seed),
    }
    reports = {name: runners[name]().to_dict() for name in names}
    return {"seed": seed, "ok": all(r["ok"] for r in reports.values()), "suites": reports}
