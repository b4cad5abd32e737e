"""MACPO, MAPPO-Lagrangian and unconstrained baselines on vectorised envs.

One :class:`Trainer` owns the environment, per-agent actors (never shared),
the centralised reward critic, per-agent cost critics and the Lagrange
multipliers. Randomness is split into named streams derived from the run
seed, so for example fitting an extra cost critic never shifts the action
noise: MACPO with infinite bounds and HATRPO, or MAPPO-Lagrangian with
frozen zero multipliers and HAPPO, then follow identical trajectories.

Algorithms:

``macpo``             sequential trust-region steps under linearised cost constraints
``mappo_lagrangian``  sequential clipped steps on the Lagrangian-modified advantage
``hatrpo``            MACPO machinery without constraints
``happo``             MAPPO-Lagrangian with the multipliers held at zero
``mappo``             simultaneous clipped steps, shared centralised critic, no M-factor
``ippo``              independent clipped steps with per-agent critics on local observations
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainingConfig
from .envs import TabularEnv, make_env
from .errors import (DegenerateDualError, InvalidInputError, PoisonedStateError, RecoveryRequired,
                     SafeMarlError)
from .estimation import RolloutBatch, gae, normalize, update_m_factor
from .policy_nn import Adam, CategoricalPolicy, Checkpoint, GaussianPolicy, ValueNet
from .trust_region import (TrustRegionStep, backtracking_line_search, conjugate_gradient, primal_step,
                           recovery_step, solve_lqclp_multi, solve_lqclp_single)

SEQUENTIAL = ("macpo", "mappo_lagrangian", "hatrpo", "happo")
TRUST_REGION = ("macpo", "hatrpo")
CONSTRAINED = ("macpo", "mappo_lagrangian")

# stream tags for the seed hierarchy
_ENV, _ACTION, _PERM, _ACTOR_INIT, _CRITIC_INIT, _CRITIC_SHUFFLE, _ACTOR_SHUFFLE, _EVAL = range(1, 9)


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for ``(seed, tags)``; order of creation is irrelevant."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, tags)])))


def clip_objective(ratio, adv, eps: float) -> np.ndarray:
    """Per-sample ``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``."""
    ratio, adv = np.asarray(ratio, dtype=float), np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def clip_gradient(policy, theta, obs, act, logp_old, adv, eps: float) -> np.ndarray:
    """Gradient of ``mean(clip_objective)`` with respect to ``theta``."""
    ratio = np.exp(policy.log_prob(theta, obs, act) - logp_old)
    active = np.where(adv >= 0, ratio <= 1 + eps, ratio >= 1 - eps)
    return policy.grad_log_prob(theta, obs, act, adv * ratio * active / len(adv))


def lagrangian_advantage(M, cost_adv, lambdas, offsets) -> np.ndarray:
    """``M - sum_j lambda_j (A_j + d_j)``; ``cost_adv`` is ``[N, m]``."""
    M = np.asarray(M, dtype=float)
    out = M.copy()
    for j, lam in enumerate(np.atleast_1d(lambdas)):
        if lam != 0.0:
            out = out - lam * (cost_adv[:, j] + offsets[j])
    return out


def lagrange_step(lambdas, violation, surrogate_change, gamma: float, lr: float) -> np.ndarray:
    """``lambda <- ReLU(lambda - lr * grad)`` with ``grad = -(d (1 - gamma) + mean(ratio * A_c))``.

    The descent direction on ``-grad`` makes multipliers grow while the
    constraint is violated and shrink (clamped at zero) while it is slack.
    """
    grad = -(np.asarray(violation) * (1 - gamma) + np.asarray(surrogate_change))
    return np.maximum(np.asarray(lambdas, dtype=float) - lr * grad, 0.0)


@dataclass
class EvalResult:
    reward: float
    costs: np.ndarray  # [n, m] mean undiscounted episode cost
    discounted_costs: np.ndarray
    episode_rewards: np.ndarray
    episode_costs: np.ndarray  # [episodes, n, m]


def _act(policy, theta, obs, rng=None):
    if rng is None:
        a = policy.mode(theta, obs)
    else:
        a = policy.sample(theta, obs, rng)
    return np.asarray(a).reshape(len(obs), -1) if not policy.discrete else np.asarray(a, dtype=int)


def evaluate(policies, thetas, env, rng, episode_length: int, gamma: float) -> EvalResult:
    """Deterministic evaluation: every env copy runs one episode with mean (or argmax) actions.

    The number of episodes is ``env.n_envs``; ``rng`` only drives resets
    and environment noise.
    """
    state = env.reset(rng)
    E, n = env.n_envs, env.n_agents
    m = max(env.n_costs)
    ep_r = np.zeros(E)
    ep_c = np.zeros((E, n, m))
    ep_dc = np.zeros((E, n, m))
    done = np.zeros(E, dtype=bool)
    for t in range(episode_length):
        obs = env.observe(state)
        acts = [_act(policies[i], thetas[i], obs[:, i]) for i in range(n)]
        actions = np.stack(acts, axis=1)
        state, r, c, term = env.step(state, actions, rng)
        live = ~done
        ep_r += live * r
        ep_c += live[:, None, None] * c
        ep_dc += live[:, None, None] * (gamma ** t) * c
        done |= term
        if done.all():
            break
    return EvalResult(float(ep_r.mean()), ep_c.mean(0), ep_dc.mean(0), ep_r, ep_c)


def _action_spaces(env):
    if getattr(env, "discrete", False):
        counts = getattr(env, "n_actions_per_agent", None) or (env.n_actions,) * env.n_agents
        return True, tuple(int(c) for c in counts)
    return False, tuple(env.act_dims)


@dataclass
class IterationRecord:
    """What happened to one agent during one sweep."""

    agent: int
    mode: str
    kl: float
    exponent: int = -1
    nu: float = float("nan")
    slack: float = float("nan")


class TrainingAborted(SafeMarlError):
    pass


class Trainer:
    """Holds the full training state and advances it one iteration at a time."""

    def __init__(self, config: TrainingConfig, env=None, eval_env=None):
        self.config = cfg = config.validate()
        self.env = env if env is not None else make_env(cfg.env_id, cfg.n_envs, cfg.env_params)
        if self.env.n_envs != cfg.n_envs:
            raise InvalidInputError(f"env has {self.env.n_envs} copies, config needs {cfg.n_envs}")
        if eval_env is None:
            if isinstance(self.env, TabularEnv):
                eval_env = TabularEnv(self.env.game, cfg.eval_episodes)
            else:
                eval_env = make_env(cfg.env_id, cfg.eval_episodes, cfg.env_params)
        self.eval_env = eval_env
        self.n = self.env.n_agents
        self.m = max(self.env.n_costs)
        self.discrete, spaces = _action_spaces(self.env)
        if not self.discrete and len(set(spaces)) != 1:
            raise InvalidInputError("agents must share one action dimension")
        self.policies = []
        for i in range(self.n):
            if self.discrete:
                pol = CategoricalPolicy(self.env.obs_dim, spaces[i], cfg.hidden_sizes, out_gain=cfg.gain)
            else:
                pol = GaussianPolicy(self.env.obs_dim, spaces[i], cfg.hidden_sizes, cfg.std_x_coef,
                                     cfg.std_y_coef, out_gain=cfg.gain)
            self.policies.append(pol)
        seed = cfg.seed
        self.thetas = [pol.init(stream(seed, _ACTOR_INIT, i)) for i, pol in enumerate(self.policies)]
        self.actor_opts = [Adam(pol.n_params, cfg.actor_lr, eps=cfg.optim_eps, max_grad_norm=cfg.max_grad_norm)
                           for pol in self.policies]

        self.local_critics = cfg.algorithm == "ippo"
        critic_in = self.env.obs_dim if self.local_critics else self.env.state_dim
        self.critic_net = ValueNet(critic_in, cfg.hidden_sizes)
        n_reward_critics = self.n if self.local_critics else 1
        self.critics = [self.critic_net.init(stream(seed, _CRITIC_INIT, 0, k)) for k in range(n_reward_critics)]
        self.critic_opts = [self._critic_opt() for _ in self.critics]
        self.critic_rngs = [stream(seed, _CRITIC_SHUFFLE, 0, k) for k in range(n_reward_critics)]

        self.uses_costs = cfg.algorithm in CONSTRAINED
        self.cost_net = ValueNet(self.env.state_dim, cfg.hidden_sizes)
        self.cost_critics, self.cost_opts, self.cost_rngs = [], [], []
        if self.uses_costs:
            for i in range(self.n):
                self.cost_critics.append([self.cost_net.init(stream(seed, _CRITIC_INIT, 1 + i, j))
                                          for j in range(self.m)])
                self.cost_opts.append([self._critic_opt() for _ in range(self.m)])
                self.cost_rngs.append([stream(seed, _CRITIC_SHUFFLE, 1 + i, j) for j in range(self.m)])

        init_lam = cfg.lagrangian_coef if cfg.algorithm == "mappo_lagrangian" else 0.0
        self.lambdas = np.full((self.n, self.m), float(init_lam))
        self.bounds = np.full((self.n, self.m), float(cfg.cost_bound))
        self.env_rng = stream(seed, _ENV)
        self.action_rng = stream(seed, _ACTION)
        self.perm_rng = stream(seed, _PERM)
        self.eval_rng = stream(seed, _EVAL)
        self.actor_rngs = [stream(seed, _ACTOR_SHUFFLE, i) for i in range(self.n)]
        self.iteration = 0
        self.last_eval: EvalResult | None = None

    def _critic_opt(self):
        cfg = self.config
        return Adam(self.critic_net.n_params, cfg.critic_lr, eps=cfg.optim_eps, max_grad_norm=cfg.max_grad_norm)

    # -- rollouts -----------------------------------------------------------------------------

    def collect(self) -> RolloutBatch:
        """One episode of ``episode_length`` steps in each env copy."""
        cfg, env = self.config, self.env
        T, E, n, m = cfg.episode_length, env.n_envs, self.n, self.m
        state = env.reset(self.env_rng)
        obs_l, st_l, act_l, lp_l, r_l, c_l, d_l, tr_l, ns_l, no_l = ([] for _ in range(10))
        ep_r = np.zeros(E)
        ep_c = np.zeros((E, n, m))
        ep_dc = np.zeros((E, n, m))
        ep_t = np.zeros(E, dtype=int)
        returns, costs, dcosts = [], [], []
        for t in range(T):
            obs = env.observe(state)
            acts, logps = [], []
            for i, pol in enumerate(self.policies):
                a = _act(pol, self.thetas[i], obs[:, i], self.action_rng)
                acts.append(a)
                logps.append(pol.log_prob(self.thetas[i], obs[:, i], a))
            actions = np.stack(acts, axis=1)
            nxt, r, c, term = env.step(state, actions, self.env_rng)
            c = np.asarray(c, dtype=float).reshape(E, n, -1)
            if c.shape[-1] < m:
                c = np.concatenate([c, np.zeros((E, n, m - c.shape[-1]))], axis=-1)
            trunc = np.full(E, t == T - 1) & ~term
            obs_l.append(obs)
            st_l.append(env.global_state(state))
            act_l.append(actions)
            lp_l.append(np.stack(logps, axis=1))
            r_l.append(r)
            c_l.append(c)
            d_l.append(term.astype(float))
            tr_l.append(trunc.astype(float))
            ns_l.append(env.global_state(nxt))
            no_l.append(env.observe(nxt))
            ep_r += r
            ep_c += c
            ep_dc += (cfg.gamma ** ep_t)[:, None, None] * c
            ep_t += 1
            ended = term | trunc
            for e in np.flatnonzero(ended):
                returns.append(float(ep_r[e]))
                costs.append(ep_c[e].copy())
                dcosts.append(ep_dc[e].copy())
            if term.any():
                fresh = env.reset(self.env_rng)
                nxt = np.where(term.reshape((-1,) + (1,) * (np.ndim(nxt) - 1)), fresh, nxt)
            ep_r[ended], ep_c[ended], ep_dc[ended], ep_t[ended] = 0.0, 0.0, 0.0, 0
            state = nxt
        return RolloutBatch(
            obs=np.array(obs_l), state=np.array(st_l), actions=np.array(act_l), logp=np.array(lp_l),
            rewards=np.array(r_l, dtype=float), costs=np.array(c_l), dones=np.array(d_l),
            truncated=np.array(tr_l), next_state=np.array(ns_l), next_obs=np.array(no_l),
            episode_returns=returns, episode_costs=costs, episode_discounted_costs=dcosts,
        )

    # -- advantages ---------------------------------------------------------------------------

    def reward_advantages(self, batch: RolloutBatch):
        """Returns ``(adv [N, k], targets [N, k], inputs [N, k, d])`` with ``k`` reward critics."""
        cfg = self.config
        T, E = batch.rewards.shape
        if self.local_critics:
            outs = []
            for i in range(self.n):
                x, nx = batch.obs[:, :, i], batch.next_obs[:, :, i]
                v = self.critic_net.predict(self.critics[i], x.reshape(T * E, -1)).reshape(T, E)
                nv = self.critic_net.predict(self.critics[i], nx.reshape(T * E, -1)).reshape(T, E)
                adv, ret = gae(v, nv, batch.rewards, batch.dones, cfg.gamma, cfg.gae_lambda, batch.truncated)
                outs.append((adv.reshape(-1), ret.reshape(-1), x.reshape(T * E, -1)))
        else:
            x = batch.state.reshape(T * E, -1)
            v = self.critic_net.predict(self.critics[0], x).reshape(T, E)
            nv = self.critic_net.predict(self.critics[0], batch.next_state.reshape(T * E, -1)).reshape(T, E)
            adv, ret = gae(v, nv, batch.rewards, batch.dones, cfg.gamma, cfg.gae_lambda, batch.truncated)
            outs = [(adv.reshape(-1), ret.reshape(-1), x)]
        return outs

    def cost_values(self, states) -> np.ndarray:
        """``[N, n, m]`` cost-critic predictions."""
        out = np.zeros((len(states), self.n, self.m))
        for i in range(self.n):
            for j in range(self.m):
                out[:, i, j] = self.cost_net.predict(self.cost_critics[i][j], states)
        return out

    def cost_advantages(self, batch: RolloutBatch):
        cfg = self.config
        T, E = batch.rewards.shape
        x = batch.state.reshape(T * E, -1)
        v = self.cost_values(x).reshape(T, E, self.n, self.m)
        nv = self.cost_values(batch.next_state.reshape(T * E, -1)).reshape(T, E, self.n, self.m)
        adv, ret = gae(v, nv, batch.costs, batch.dones, cfg.gamma, cfg.gae_lambda, batch.truncated)
        return adv.reshape(T * E, self.n, self.m), ret.reshape(T * E, self.n, self.m), v.reshape(T * E, self.n, self.m)

    # -- critic regression --------------------------------------------------------------------

    def _fit(self, net, theta, opt, rng, x, y):
        cfg = self.config
        N = len(y)
        for _ in range(cfg.ppo_epochs):
            for idx in np.array_split(rng.permutation(N), cfg.num_mini_batch):
                _, grad = net.loss_and_grad(theta, x[idx], y[idx])
                theta = opt.step(theta, grad)
        return theta

    def fit_critics(self, reward_parts, cost_targets=None, states=None):
        for k, (_, ret, x) in enumerate(reward_parts):
            self.critics[k] = self._fit(self.critic_net, self.critics[k], self.critic_opts[k], self.critic_rngs[k],
                                        x, ret)
        if cost_targets is not None:
            for i in range(self.n):
                for j in range(self.m):
                    self.cost_critics[i][j] = self._fit(self.cost_net, self.cost_critics[i][j], self.cost_opts[i][j],
                                                        self.cost_rngs[i][j], states, cost_targets[:, i, j])

    # -- per-agent updates --------------------------------------------------------------------

    def _agent_data(self, batch: RolloutBatch, i: int):
        N = batch.n_steps
        obs = batch.obs[:, :, i].reshape(N, -1)
        act = batch.actions[:, :, i].reshape(N) if self.discrete else batch.actions[:, :, i].reshape(N, -1)
        return obs, act, batch.logp[:, :, i].reshape(N)

    def trust_region_update(self, i, obs, act, logp_old, M, cost_adv=None, offsets=None):
        """One constrained (or, without ``cost_adv``, plain) natural-gradient step for agent ``i``."""
        cfg, pol = self.config, self.policies[i]
        theta = self.thetas[i]
        N = len(M)
        delta = cfg.kl_threshold

        def hvp(v):
            return pol.fisher_vector_product(theta, obs, v, cfg.damping)

        g = pol.grad_log_prob(theta, obs, act, M / N)
        hinv_g = conjugate_gradient(hvp, g, cfg.cg_iters).x
        q = float(g @ hinv_g)
        if not np.isfinite(q):
            raise PoisonedStateError("non-finite natural-gradient norm")
        if q <= 0:
            return theta.copy(), TrustRegionStep(np.zeros_like(theta), np.zeros_like(theta), -1, "reject")

        def surrogate(step):
            ratio = np.exp(pol.log_prob(theta + step, obs, act) - logp_old)
            return ratio

        finite = []
        if cost_adv is not None:
            finite = [j for j in range(cost_adv.shape[1]) if np.isfinite(offsets[j])]

        def evaluate(step):
            ratio = surrogate(step)
            gain = float(np.mean(ratio * M) - np.mean(M))
            kl = pol.mean_kl(theta, theta + step, obs)
            slacks = [max(-offsets[j], 0.0) - float(np.mean(ratio * cost_adv[:, j]) - np.mean(cost_adv[:, j]))
                      for j in finite]
            return gain, kl, np.array(slacks)

        if cost_adv is None:
            direction = math.sqrt(2 * delta / q) * hinv_g
            dual = None
        else:
            B = np.stack([pol.grad_log_prob(theta, obs, act, cost_adv[:, j] / N) for j in range(cost_adv.shape[1])], 1)
            hinv_B = np.stack([conjugate_gradient(hvp, B[:, j], cfg.cg_iters).x for j in range(B.shape[1])], 1)
            r = g @ hinv_B
            S = B.T @ hinv_B
            S = 0.5 * (S + S.T)
            try:
                if B.shape[1] == 1 and not cfg.multi_constraint_dual:
                    dual = solve_lqclp_single(q, r[0], S[0, 0], offsets[0], 2 * delta)
                else:
                    dual = solve_lqclp_multi(q, r, S, np.asarray(offsets), 2 * delta)
                direction = primal_step(dual, hinv_g, hinv_B)
            except RecoveryRequired:
                j = int(np.argmax(offsets))
                if not S[j, j] > 0:
                    return theta.copy(), TrustRegionStep(np.zeros_like(theta), np.zeros_like(theta), -1, "reject")

                def cost_change(step):
                    ratio = surrogate(step)
                    return float(np.mean(ratio * cost_adv[:, j]) - np.mean(cost_adv[:, j]))

                return recovery_step(theta, hinv_B[:, j], float(S[j, j]), delta, cost_change,
                                     cfg.line_search_steps, cfg.line_search_fraction,
                                     lambda step: pol.mean_kl(theta, theta + step, obs))
            except DegenerateDualError:
                return theta.copy(), TrustRegionStep(np.zeros_like(theta), np.zeros_like(theta), -1, "reject")
        # while violating, a step that lowers cost may cost reward; only the constraint checks apply
        violating = any(offsets[j] > 0 for j in finite)
        new, step = backtracking_line_search(theta, direction, evaluate, delta, cfg.line_search_steps,
                                             cfg.line_search_fraction, cfg.fraction_coef, dual,
                                             require_improvement=not violating)
        if step.accepted and finite:
            step.info["slack"] = float(np.min(evaluate(step.step)[2]))
        return new, step

    def clip_update(self, i, obs, act, logp_old, adv_fn, after_epoch=None):
        """``ppo_epochs`` passes of minibatch Adam ascent on the clipped objective.

        ``adv_fn()`` gives the (possibly multiplier-dependent) advantage used
        in the next epoch; ``after_epoch(theta)`` runs after each epoch.
        """
        cfg, pol = self.config, self.policies[i]
        theta = self.thetas[i]
        N = len(logp_old)
        for _ in range(cfg.ppo_epochs):
            adv = adv_fn()
            for idx in np.array_split(self.actor_rngs[i].permutation(N), cfg.num_mini_batch):
                grad = clip_gradient(pol, theta, obs[idx], act[idx], logp_old[idx], adv[idx], cfg.clip)
                theta = self.actor_opts[i].step(theta, -grad)
            if after_epoch is not None:
                after_epoch(theta)
        return theta

    # -- iterations ---------------------------------------------------------------------------

    def step(self) -> dict:
        """Run one iteration; on a non-finite value the state is rolled back and the row flagged."""
        snapshot = self._snapshot()
        t0 = time.perf_counter()
        try:
            batch, records = ITERATIONS[self.config.algorithm](self)
            aborted = False
        except (PoisonedStateError, FloatingPointError) as exc:
            self._restore(snapshot)
            batch, records, aborted = None, [], str(exc) or "non-finite value"
        self.iteration += 1
        row = self._row(batch, records, aborted)
        self.last_seconds = time.perf_counter() - t0
        return row

    def _snapshot(self):
        return ([t.copy() for t in self.thetas], [c.copy() for c in self.critics],
                [[c.copy() for c in cs] for cs in self.cost_critics], self.lambdas.copy())

    def _restore(self, snap):
        self.thetas, self.critics, self.cost_critics, self.lambdas = snap

    def evaluate(self) -> EvalResult:
        res = evaluate(self.policies, self.thetas, self.eval_env, self.eval_rng, self.config.episode_length,
                       self.config.gamma)
        self.last_eval = res
        return res

    def columns(self) -> list[str]:
        cols = ["iteration", "algorithm", "env_steps", "aborted", "episode_reward"]
        for i in range(self.n):
            for j in range(self.m):
                cols += [f"cost_{i}_{j}", f"dcost_{i}_{j}"]
        for i in range(self.n):
            cols += [f"kl_{i}", f"mode_{i}", f"ls_exp_{i}", f"slack_{i}"]
            cols += [f"lambda_{i}_{j}" for j in range(self.m)]
        cols += ["eval_reward"] + [f"eval_cost_{i}_{j}" for i in range(self.n) for j in range(self.m)]
        cols += [f"eval_dcost_{i}_{j}" for i in range(self.n) for j in range(self.m)]
        return cols

    def _row(self, batch, records, aborted) -> dict:
        cfg = self.config
        row = {c: "" for c in self.columns()}
        row.update(iteration=self.iteration, algorithm=cfg.algorithm, env_steps=self.iteration * cfg.batch_size,
                   aborted=aborted or 0)
        if batch is not None:
            row["episode_reward"] = float(np.mean(batch.episode_returns))
            ec = np.mean(batch.episode_costs, axis=0)
            edc = np.mean(batch.episode_discounted_costs, axis=0)
            for i in range(self.n):
                for j in range(self.m):
                    row[f"cost_{i}_{j}"] = float(ec[i, j])
                    row[f"dcost_{i}_{j}"] = float(edc[i, j])
        for rec in records:
            row[f"kl_{rec.agent}"] = rec.kl
            row[f"mode_{rec.agent}"] = rec.mode
            row[f"ls_exp_{rec.agent}"] = rec.exponent
            if not math.isnan(rec.slack):
                row[f"slack_{rec.agent}"] = rec.slack
        if cfg.algorithm == "mappo_lagrangian":
            for i in range(self.n):
                for j in range(self.m):
                    row[f"lambda_{i}_{j}"] = float(self.lambdas[i, j])
        last = self.iteration == cfg.iterations
        if (cfg.eval_interval and self.iteration % cfg.eval_interval == 0) or last:
            res = self.evaluate()
            row["eval_reward"] = res.reward
            for i in range(self.n):
                for j in range(self.m):
                    row[f"eval_cost_{i}_{j}"] = float(res.costs[i, j])
                    row[f"eval_dcost_{i}_{j}"] = float(res.discounted_costs[i, j])
        return row

    def checkpoint(self) -> Checkpoint:
        vectors = {f"actor_{i}": t for i, t in enumerate(self.thetas)}
        vectors.update({f"critic_{k}": c for k, c in enumerate(self.critics)})
        for i, cs in enumerate(self.cost_critics):
            vectors.update({f"cost_critic_{i}_{j}": c for j, c in enumerate(cs)})
        vectors["lambdas"] = self.lambdas
        return Checkpoint(vectors, {"iteration": self.iteration, "algorithm": self.config.algorithm})

    def load_checkpoint(self, ck: Checkpoint) -> None:
        self.thetas = [np.array(ck.vectors[f"actor_{i}"]) for i in range(self.n)]
        self.critics = [np.array(ck.vectors[f"critic_{k}"]) for k in range(len(self.critics))]
        for i in range(len(self.cost_critics)):
            self.cost_critics[i] = [np.array(ck.vectors[f"cost_critic_{i}_{j}"]) for j in range(self.m)]
        self.lambdas = np.array(ck.vectors["lambdas"]).reshape(self.n, self.m)
        self.iteration = int(ck.meta.get("iteration", 0))


def _tr_records(i, theta_old, theta_new, step, pol, obs):
    kl = pol.mean_kl(theta_old, theta_new, obs) if step.accepted else 0.0
    nu = float(step.dual.nu[0]) if step.dual is not None else float("nan")
    return IterationRecord(i, step.mode, kl, step.exponent, nu, step.info.get("slack", float("nan")))


def macpo_iteration(tr: Trainer, constrained: bool = True):
    """Collect, estimate, then update agents one by one in a random order under cost constraints."""
    cfg = tr.config
    batch = tr.collect()
    parts = tr.reward_advantages(batch)
    M = normalize(parts[0][0])
    cost_adv = cost_ret = states = None
    if constrained:
        cost_adv, cost_ret, _ = tr.cost_advantages(batch)
        states = batch.state.reshape(batch.n_steps, -1)
        J = np.mean(batch.episode_discounted_costs, axis=0)
        with np.errstate(invalid="ignore"):
            offsets = (1 - cfg.gamma) * (J - tr.bounds)
    records = []
    for i in tr.perm_rng.permutation(tr.n):
        i = int(i)
        obs, act, logp_old = tr._agent_data(batch, i)
        theta_old = tr.thetas[i]
        if constrained:
            new, step = tr.trust_region_update(i, obs, act, logp_old, M, cost_adv[:, i, :], offsets[i])
        else:
            new, step = tr.trust_region_update(i, obs, act, logp_old, M)
        tr.thetas[i] = new
        records.append(_tr_records(i, theta_old, new, step, tr.policies[i], obs))
        M = update_m_factor(M, np.exp(tr.policies[i].log_prob(new, obs, act) - logp_old))
    tr.fit_critics(parts, cost_ret, states)
    return batch, records


def hatrpo_iteration(tr: Trainer):
    return macpo_iteration(tr, constrained=False)


def mappo_lagrangian_iteration(tr: Trainer, constrained: bool = True):
    """Sequential clipped updates on ``M - sum_j lambda_j (A_j + d_j)`` with multiplier descent per epoch."""
    cfg = tr.config
    batch = tr.collect()
    parts = tr.reward_advantages(batch)
    M = normalize(parts[0][0])
    cost_adv = cost_ret = states = None
    if constrained:
        cost_adv, cost_ret, cost_v = tr.cost_advantages(batch)
        states = batch.state.reshape(batch.n_steps, -1)
        # d_j = mean critic cost value over the batch minus the bound, fixed for the iteration
        violation = cost_v.mean(0) - tr.bounds
    records = []
    for i in tr.perm_rng.permutation(tr.n):
        i = int(i)
        pol = tr.policies[i]
        obs, act, logp_old = tr._agent_data(batch, i)
        theta_old = tr.thetas[i]
        if constrained:
            A_c = cost_adv[:, i, :]
            offsets = (1 - cfg.gamma) * violation[i]

            def adv_fn(i=i, A_c=A_c, offsets=offsets):
                return lagrangian_advantage(M, A_c, tr.lambdas[i], offsets)

            def after_epoch(theta, i=i, A_c=A_c, obs=obs, act=act, logp_old=logp_old):
                ratio = np.exp(tr.policies[i].log_prob(theta, obs, act) - logp_old)
                change = (ratio[:, None] * A_c).mean(0)
                tr.lambdas[i] = lagrange_step(tr.lambdas[i], violation[i], change, cfg.gamma, cfg.lagrangian_lr)
        else:
            def adv_fn():
                return M
            after_epoch = None
        new = tr.clip_update(i, obs, act, logp_old, adv_fn, after_epoch)
        tr.thetas[i] = new
        records.append(IterationRecord(i, "clip", pol.mean_kl(theta_old, new, obs)))
        M = update_m_factor(M, np.exp(pol.log_prob(new, obs, act) - logp_old))
    tr.fit_critics(parts, cost_ret, states)
    return batch, records


def happo_iteration(tr: Trainer):
    return mappo_lagrangian_iteration(tr, constrained=False)


def simultaneous_iteration(tr: Trainer):
    """MAPPO (shared centralised critic) or IPPO (per-agent local critics): no permutation, no M-factor."""
    batch = tr.collect()
    parts = tr.reward_advantages(batch)
    advs = [normalize(p[0]) for p in parts]
    old = [t.copy() for t in tr.thetas]
    records = []
    for i in range(tr.n):
        pol = tr.policies[i]
        obs, act, logp_old = tr._agent_data(batch, i)
        adv = advs[i] if tr.local_critics else advs[0]
        tr.thetas[i] = tr.clip_update(i, obs, act, logp_old, lambda adv=adv: adv)
        records.append(IterationRecord(i, "clip", pol.mean_kl(old[i], tr.thetas[i], obs)))
    tr.fit_critics(parts)
    return batch, records


ITERATIONS = {
    "macpo": macpo_iteration,
    "hatrpo": hatrpo_iteration,
    "mappo_lagrangian": mappo_lagrangian_iteration,
    "happo": happo_iteration,
    "mappo": simultaneous_iteration,
    "ippo": simultaneous_iteration,
}


# -- run artifacts --------------------------------------------------------------------------------


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    from . import __version__

    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunManifest:
    config: TrainingConfig
    code_version: str
    started: str
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": "safemarl.manifest", "version": 1, "config": self.config.to_dict(),
                "seeds": {"run": self.config.seed, "streams": "SeedSequence([run, tag, ...])"},
                "code_version": self.code_version, "started": self.started, "outputs": self.outputs}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        if doc.get("schema") != "safemarl.manifest":
            raise InvalidInputError("not a run manifest")
        return cls(TrainingConfig.from_dict(doc["config"]), doc.get("code_version", ""), doc.get("started", ""),
                   doc.get("outputs", {}))


class TrainingLog:
    """Append-only CSV of iteration rows; wall-clock goes to a separate timing file."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = list(columns)
        self.rows: list[dict] = []
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.columns)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])


def run_training(config: TrainingConfig, out_dir, progress=None) -> tuple[Trainer, TrainingLog, dict]:
    """Write the manifest, train, and emit ``log.csv``, ``timing.csv``, checkpoints and ``status.json``.

    Returns the trainer, the log and the status document (``status["aborted"]``
    is true when an iteration hit a non-finite value; training stops there).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    outputs = {"log": "log.csv", "timing": "timing.csv", "checkpoints": "checkpoints", "status": "status.json"}
    manifest = RunManifest(config, code_version(), time.strftime("%Y-%m-%dT%H:%M:%S%z"), outputs)
    tmp = manifest_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    os.replace(tmp, manifest_path)
    tr = Trainer(config)
    log = TrainingLog(out / "log.csv", tr.columns())
    with open(out / "timing.csv", "w", newline="") as fh:
        csv.writer(fh).writerow(["iteration", "seconds"])
    status = {"aborted": False, "iterations": 0}
    for _ in range(config.iterations):
        row = tr.step()
        log.append(row)
        with open(out / "timing.csv", "a", newline="") as fh:
            csv.writer(fh).writerow([tr.iteration, f"{tr.last_seconds:.4f}"])
        if config.checkpoint_interval and tr.iteration % config.checkpoint_interval == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            (out / "checkpoints" / f"iter_{tr.iteration:05d}.json").write_text(tr.checkpoint().dumps())
        if progress is not None:
            progress(row)
        status["iterations"] = tr.iteration
        if row["aborted"]:
            status["aborted"] = True
            status["reason"] = row["aborted"]
            break
    status["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    (out / "status.json").write_text(json.dumps(status, indent=2))
    return tr, log, status
