"""Constrained trust-region updates: CG, the LQCLP dual, line search, recovery.

The linearised problem solved for one agent is

    max_x  g^T x   s.t.  b_j^T x + c_j <= 0  (j = 1..m),   x^T H x <= delta

with ``H`` positive definite and only reachable through products ``H v``.
``r = g^T H^-1 b`` and the primal solution is ``x = H^-1 (g - B nu) / lam``.
The trust-region radius here bounds ``x^T H x``; the policy KL constraint
``0.5 x^T H x <= delta_kl`` therefore maps to ``delta = 2 * delta_kl``
(see :func:`solve_trust_region`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .constants import LQCLP_BORDER_TOL
from .errors import DegenerateDualError, InvalidInputError, PoisonedStateError, RecoveryRequired


@dataclass
class CGResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool


def conjugate_gradient(hvp: Callable[[np.ndarray], np.ndarray], rhs, iters: int = 10,
                       tol: float = 1e-10) -> CGResult:
    """Solve ``H x = rhs`` for symmetric positive (semi)definite ``H``.

    Stops when ``||rhs - H x|| <= tol * ||rhs||``; ``converged`` is False if
    ``iters`` ran out first.
    """
    b = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(b)):
        raise PoisonedStateError("non-finite right-hand side")
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    target = tol * math.sqrt(rr)
    if math.sqrt(rr) <= target or rr == 0.0:
        return CGResult(x, 0.0, 0, True)
    for k in range(1, iters + 1):
        Ap = np.asarray(hvp(p), dtype=float)
        pAp = p @ Ap
        if not np.isfinite(pAp) or not np.all(np.isfinite(Ap)):
            raise PoisonedStateError("non-finite Hessian-vector product in CG")
        if pAp <= 0:
            # direction of zero curvature: the system is singular along p
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        if math.sqrt(rr_new) <= target:
            return CGResult(x, math.sqrt(rr_new), k, True)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x, math.sqrt(rr), k, False)


@dataclass
class DualSolution:
    """Optimal multipliers of the LQCLP and the scalars they were built from.

    ``nu`` always has one entry per constraint; ``r`` and ``S`` are the
    constraint-side products (scalars become length-1 arrays).
    """

    lam: float
    nu: np.ndarray
    q: float
    r: np.ndarray
    S: np.ndarray
    c: np.ndarray
    delta: float
    case: str
    converged: bool = True
    iterations: int = 0

    def bound(self) -> float:
        """Dual function value: an upper bound on ``max g^T x`` (weak duality)."""
        return dual_function(self.q, self.r, self.S, self.c, self.delta, self.lam, self.nu)


def dual_function(q, r, S, c, delta, lam, nu) -> float:
    r, c, nu = np.atleast_1d(r), np.atleast_1d(c), np.atleast_1d(nu)
    S = np.atleast_2d(S)
    if lam <= 0:
        return math.inf
    quad = q - 2 * r @ nu + nu @ S @ nu
    return float(quad / (2 * lam) - c @ nu + lam * delta / 2)


def _proj(x: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, x))


def _f_a(lam, q, r, s, c, delta):
    # minimisation form: r here is the minimisation-side product (-r of the API)
    return (r * r / s - q) / (2 * lam) + lam * (c * c / s - delta) / 2 - r * c / s


def _f_b(lam, q, delta):
    return -0.5 * (q / lam + lam * delta)


def solve_lqclp_single(q: float, r: float, s: float, c: float, delta: float) -> DualSolution:
    """Closed-form dual of the one-constraint problem.

    ``q = g^T H^-1 g``, ``r = g^T H^-1 b``, ``s = b^T H^-1 b``, ``c`` the
    constraint offset (positive means currently violating) and ``delta`` the
    radius on ``x^T H x``. Raises :class:`RecoveryRequired` when the
    constraint plane misses the trust region on the infeasible side.
    """
    q, r, s, c, delta = map(float, (q, r, s, c, delta))
    if c == -math.inf and all(map(math.isfinite, (q, r, s, delta))) and delta > 0 and q > 0:
        # unbounded constraint (c = +inf): never binding
        return DualSolution(math.sqrt(q / delta), np.zeros(1), q, np.array([r]), np.array([[s]]),
                            np.array([c]), delta, "inactive")
    if not all(map(math.isfinite, (q, r, s, c, delta))):
        raise PoisonedStateError("non-finite LQCLP coefficients")
    if delta <= 0 or q < 0 or s < 0:
        raise InvalidInputError("need delta > 0, q >= 0, s >= 0")
    if q == 0:
        raise DegenerateDualError("zero objective gradient")

    def pack(lam, nu, case):
        return DualSolution(lam, np.array([nu]), q, np.array([r]), np.array([[s]]), np.array([c]), delta, case)

    if s <= 1e-12 * max(q, 1.0):
        # b ~ 0: the constraint does not depend on x
        if c > 0:
            raise RecoveryRequired("constraint violated and insensitive to the step")
        return pack(math.sqrt(q / delta), 0.0, "inactive")

    gap = c * c / s - delta
    if gap > LQCLP_BORDER_TOL and c < 0:
        return pack(math.sqrt(q / delta), 0.0, "inactive")
    if gap > LQCLP_BORDER_TOL and c > 0:
        raise RecoveryRequired(f"constraint plane outside the trust region (c^2/s - delta = {gap:.3g})")

    rm = -r  # product used by the minimisation form of the problem
    inf = math.inf
    # Lambda_a = {lam >= 0 : lam c - rm > 0}, Lambda_b its complement in [0, inf)
    if c > 0:
        la, lb = (max(0.0, rm / c), inf), (0.0, rm / c) if rm >= 0 else None
    elif c < 0:
        la, lb = ((0.0, rm / c) if rm < 0 else None), (max(0.0, rm / c), inf)
    else:
        la, lb = ((0.0, inf), None) if rm < 0 else (None, (0.0, inf))

    candidates = []
    if la is not None:
        num = max(q - rm * rm / s, 0.0)
        den = max(delta - c * c / s, LQCLP_BORDER_TOL)
        lam_a = _proj(math.sqrt(num / den), *la)
        if lam_a > 0:
            candidates.append((_f_a(lam_a, q, rm, s, c, delta), 1, lam_a, "a"))
    if lb is not None:
        lam_b = _proj(math.sqrt(q / delta), *lb)
        if lam_b > 0:
            candidates.append((_f_b(lam_b, q, delta), 0, lam_b, "b"))
    if not candidates:
        raise DegenerateDualError("no positive multiplier candidate")
    # larger dual value wins; ties go to the a-branch
    _, _, lam, case = max(candidates)
    nu = max(0.0, (lam * c - rm) / s)
    return pack(lam, nu, case)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1
    k = np.nonzero(u - css / np.arange(1, len(v) + 1) > 0)[0][-1]
    return np.maximum(v - css[k] / (k + 1), 0.0)


def infeasibility_margin(S: np.ndarray, c: np.ndarray, delta: float, iters: int = 500) -> float:
    """``max_{w in simplex} c^T w - sqrt(delta w^T S w)``; positive iff no step satisfies every constraint."""
    m = len(c)
    w = np.full(m, 1.0 / m)
    best = -math.inf
    step = 1.0 / (np.abs(S).max() + np.abs(c).max() + 1e-12)
    for _ in range(iters):
        quad = max(w @ S @ w, 1e-300)
        val = c @ w - math.sqrt(delta * quad)
        best = max(best, val)
        grad = c - math.sqrt(delta / quad) * (S @ w)
        w = _project_simplex(w + step * grad)
    for j in range(m):
        best = max(best, c[j] - math.sqrt(delta * max(S[j, j], 0.0)))
    return float(best)


def solve_lqclp_multi(q: float, r, S, c, delta: float, iters: int = 20000, tol: float = 1e-6) -> DualSolution:
    """Dual of the ``m``-constraint problem by projected gradient on ``nu >= 0``.

    With ``lam`` eliminated analytically the dual becomes
    ``phi(nu) = sqrt(delta * Q(nu)) - c^T nu`` with
    ``Q(nu) = q - 2 r^T nu + nu^T S nu``, convex in ``nu``.
    """
    r, c = np.asarray(r, dtype=float).ravel(), np.asarray(c, dtype=float).ravel()
    S = np.atleast_2d(np.asarray(S, dtype=float))
    m = len(c)
    if S.shape != (m, m) or r.shape != (m,):
        raise InvalidInputError("r, S, c dimensions disagree")
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(r)) and np.all(np.isfinite(c)) and math.isfinite(q)):
        raise PoisonedStateError("non-finite LQCLP coefficients")
    if delta <= 0 or q <= 0:
        raise InvalidInputError("need delta > 0 and q > 0")
    margin = infeasibility_margin(S, c, delta)
    if margin > LQCLP_BORDER_TOL * max(1.0, np.abs(c).max()):
        raise RecoveryRequired(f"no step satisfies every constraint (margin {margin:.3g})")

    def Q(nu):
        return max(q - 2 * r @ nu + nu @ S @ nu, 0.0)

    def phi(nu):
        return math.sqrt(delta * Q(nu)) - c @ nu

    def grad(nu):
        qq = Q(nu)
        if qq <= 0:
            return -c
        return math.sqrt(delta / qq) * (S @ nu - r) - c

    nu = np.zeros(m)
    val = phi(nu)
    step = 1.0
    converged = False
    k = 0
    for k in range(1, iters + 1):
        gr = grad(nu)
        mapping = nu - np.maximum(nu - gr, 0.0)
        if np.linalg.norm(mapping) < tol:
            converged = True
            break
        while True:
            trial = np.maximum(nu - step * gr, 0.0)
            tv = phi(trial)
            if tv <= val - 0.5 * (gr @ (nu - trial)) or step < 1e-20:
                break
            step *= 0.5
        nu, val = trial, tv
        step *= 2.0
    lam = math.sqrt(Q(nu) / delta)
    polished = _polish_active_set(q, r, S, c, delta, nu > 1e-9 * max(1.0, nu.max(initial=0.0)))
    if polished is not None and phi(polished[1]) <= val + 1e-9 * max(1.0, abs(val)):
        lam, nu = polished
        converged = True
    if lam <= 0:
        raise DegenerateDualError("dual optimum at lam = 0")
    return DualSolution(lam, nu, float(q), r, S, c, float(delta), "multi", converged, k)


def _polish_active_set(q, r, S, c, delta, active):
    """Exact KKT point for a guessed active set, or None if it is not one.

    On the active set ``S_A nu_A = r_A + lam c_A`` and the trust region is
    tight, which gives ``lam^2 = (q - r_A^T S_A^-1 r_A) / (delta - c_A^T S_A^-1 c_A)``.
    """
    idx = np.flatnonzero(active)
    nu = np.zeros(len(c))
    if len(idx):
        SA = S[np.ix_(idx, idx)]
        try:
            sr, sc = np.linalg.solve(SA, r[idx]), np.linalg.solve(SA, c[idx])
        except np.linalg.LinAlgError:
            return None
        num, den = q - r[idx] @ sr, delta - c[idx] @ sc
    else:
        sr = sc = np.zeros(0)
        num, den = q, delta
    if num <= 0 or den <= 0:
        return None
    lam = math.sqrt(num / den)
    nu[idx] = sr + lam * sc
    if (nu < 0).any():
        return None
    # inactive constraints must hold at the primal point: b_j^T x + c_j <= 0
    slack = (r - S @ nu) / lam + c
    if (np.delete(slack, idx) > 1e-12 * max(1.0, np.abs(c).max())).any():
        return None
    return lam, nu


def primal_step(dual: DualSolution, hinv_g, hinv_B) -> np.ndarray:
    """``x = H^-1 (g - B nu) / lam`` from precomputed ``H^-1 g`` and ``H^-1 B`` (columns)."""
    if not dual.lam > 0:
        raise DegenerateDualError("lam must be positive to form the primal step")
    hinv_B = np.asarray(hinv_B, dtype=float).reshape(len(hinv_g), -1)
    return (np.asarray(hinv_g, dtype=float) - hinv_B @ dual.nu) / dual.lam


@dataclass
class TrustRegionStep:
    """Outcome of one constrained update.

    ``mode`` is ``"optimize"``, ``"recover"`` or ``"reject"``; ``step`` is
    the accepted parameter change (zero when rejected) and ``exponent`` the
    backtracking index ``j`` used (``-1`` if none).
    """

    direction: np.ndarray
    step: np.ndarray
    exponent: int
    mode: str
    dual: DualSolution | None = None
    kl: float = 0.0
    objective_change: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.mode != "reject"


def backtracking_line_search(
    theta,
    direction,
    evaluate: Callable[[np.ndarray], tuple[float, float, np.ndarray]],
    delta: float,
    max_backtracks: int = 10,
    coef: float = 0.5,
    initial_scale: float = 1.0,
    dual: DualSolution | None = None,
    require_improvement: bool = True,
) -> tuple[np.ndarray, TrustRegionStep]:
    """Try ``theta + initial_scale * coef**j * direction`` for ``j = 0..max_backtracks``.

    ``evaluate(step)`` returns ``(objective change, KL, constraint slacks)``
    for a candidate parameter change; slacks ``>= 0`` mean satisfied. The
    first step with positive objective change, KL within ``delta`` and all
    slacks nonnegative is accepted; otherwise ``theta`` is returned unchanged.
    ``require_improvement=False`` drops the objective test, for steps taken
    while a constraint is violated and reward must be traded for cost.
    """
    if max_backtracks < 0 or not 0 < coef < 1:
        raise InvalidInputError("max_backtracks >= 0 and 0 < coef < 1 required")
    theta = np.asarray(theta, dtype=float)
    direction = np.asarray(direction, dtype=float)
    for j in range(max_backtracks + 1):
        step = initial_scale * coef ** j * direction
        gain, kl, slacks = evaluate(step)
        slacks = np.atleast_1d(np.asarray(slacks, dtype=float))
        if not (np.isfinite(gain) and np.isfinite(kl) and np.all(np.isfinite(slacks))):
            continue
        if (gain > 0 or not require_improvement) and kl <= delta and np.all(slacks >= 0):
            return theta + step, TrustRegionStep(direction, step, j, "optimize", dual, float(kl), float(gain))
    return theta.copy(), TrustRegionStep(direction, np.zeros_like(direction), -1, "reject", dual)


def recovery_direction(hinv_b, s: float, delta: float) -> np.ndarray:
    """``-sqrt(2 delta / s) H^-1 b``: its quadratic form ``0.5 x^T H x`` equals ``delta``."""
    if not s > 0 or not math.isfinite(s):
        raise DegenerateDualError(f"b^T H^-1 b = {s} is not positive")
    return -math.sqrt(2 * delta / s) * np.asarray(hinv_b, dtype=float)


def recovery_step(
    theta,
    hinv_b,
    s: float,
    delta: float,
    evaluate_cost: Callable[[np.ndarray], float],
    max_backtracks: int = 10,
    coef: float = 0.5,
    evaluate_kl: Callable[[np.ndarray], float] | None = None,
) -> tuple[np.ndarray, TrustRegionStep]:
    """Natural-gradient descent on the cost surrogate, ``alpha = coef**j`` backtracked.

    ``evaluate_cost(step)`` returns the estimated cost change; the first
    step that strictly decreases it is taken. With ``evaluate_kl`` the step
    must also keep the sampled KL within ``delta``.
    """
    theta = np.asarray(theta, dtype=float)
    direction = recovery_direction(hinv_b, s, delta)
    for j in range(max_backtracks + 1):
        step = coef ** j * direction
        change = evaluate_cost(step)
        kl = coef ** (2 * j) * delta if evaluate_kl is None else evaluate_kl(step)
        if np.isfinite(change) and change < 0 and kl <= delta:
            return theta + step, TrustRegionStep(direction, step, j, "recover", None, float(kl),
                                                 info={"cost_change": float(change)})
    return theta.copy(), TrustRegionStep(direction, np.zeros_like(direction), -1, "reject")


def solve_trust_region(g, B, d, delta_kl: float, hvp: Callable[[np.ndarray], np.ndarray],
                       cg_iters: int = 10, multi: bool = False):
    """Solve the linearised update for one agent.

    ``B`` has one column per constraint and ``d`` the matching offsets
    ``J - c``. The KL constraint is ``0.5 x^T H x <= delta_kl``.
    Returns ``(direction, dual, hinv_B, s)``; raises :class:`RecoveryRequired`
    when the constraints cannot be met inside the trust region.
    """
    g = np.asarray(g, dtype=float)
    B = np.asarray(B, dtype=float).reshape(len(g), -1)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    hinv_g = conjugate_gradient(hvp, g, cg_iters).x
    q = float(g @ hinv_g)
    hinv_B = np.stack([conjugate_gradient(hvp, B[:, j], cg_iters).x for j in range(B.shape[1])], axis=1)
    r = g @ hinv_B
    S = B.T @ hinv_B
    S = 0.5 * (S + S.T)
    radius = 2.0 * delta_kl
    if B.shape[1] == 1 and not multi:
        dual = solve_lqclp_single(q, r[0], S[0, 0], d[0], radius)
    else:
        dual = solve_lqclp_multi(q, r, S, d, radius)
    return primal_step(dual, hinv_g, hinv_B), dual, hinv_B, S
