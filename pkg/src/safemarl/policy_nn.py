"""Small numpy networks for the practical trainers.

Parameters live in one flat float64 vector per network. The ordering is
``W_0, b_0, W_1, b_1, ...`` with each ``W_k`` of shape ``[fan_in, fan_out]``
flattened row-major, followed by head-specific parameters (the Gaussian
log-std vector). Gradients and Fisher-vector products use the same order.

Everything is differentiated by hand: a reverse pass (vector-Jacobian
product) for gradients and a forward pass (Jacobian-vector product) for the
Fisher form of the KL Hessian.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, PoisonedStateError

CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2 * math.pi)


def _check_finite(x, what: str):
    if not np.all(np.isfinite(x)):
        raise PoisonedStateError(f"non-finite {what}")


class Mlp:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, in_dim: int, out_dim: int, hidden=(64,), out_gain: float = 0.01):
        self.sizes = [int(in_dim), *map(int, hidden), int(out_dim)]
        self.out_gain = out_gain
        self.shapes = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes += [(a, b), (b,)]
        self.n_params = sum(int(np.prod(s)) for s in self.shapes)

    def unflatten(self, theta) -> list[np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        out, i = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(theta[i:i + n].reshape(s))
            i += n
        return out

    @staticmethod
    def flatten(arrays) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in arrays])

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Orthogonal weights (gain sqrt(2) on hidden layers, ``out_gain`` last), zero biases."""
        arrays = []
        n_layers = len(self.sizes) - 1
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = self.out_gain if k == n_layers - 1 else math.sqrt(2)
            m = rng.normal(size=(max(a, b), min(a, b)))
            qm, rm = np.linalg.qr(m)
            qm = qm * np.sign(np.diag(rm))
            W = qm if a >= b else qm.T
            arrays += [gain * W[:a, :b], np.zeros(b)]
        return self.flatten(arrays)

    def forward(self, theta, x):
        """Returns ``(output, cache)``; the cache feeds :meth:`vjp` and :meth:`jvp`."""
        params = self.unflatten(theta)
        h = np.asarray(x, dtype=float)
        acts, pres = [h], []
        n_layers = len(params) // 2
        for k in range(n_layers):
            z = h @ params[2 * k] + params[2 * k + 1]
            if k < n_layers - 1:
                pres.append(z)
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                h = z
        return h, (params, acts, pres)

    def vjp(self, cache, grad_out) -> np.ndarray:
        params, acts, pres = cache
        n_layers = len(params) // 2
        grads = [None] * len(params)
        g = np.asarray(grad_out, dtype=float)
        for k in reversed(range(n_layers)):
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(0)
            if k > 0:
                g = (g @ params[2 * k].T) * (pres[k - 1] > 0)
        return self.flatten(grads)

    def jvp(self, cache, v) -> np.ndarray:
        params, acts, pres = cache
        dparams = self.unflatten(v)
        n_layers = len(params) // 2
        dh = np.zeros_like(acts[0])
        for k in range(n_layers):
            dz = dh @ params[2 * k] + acts[k] @ dparams[2 * k] + dparams[2 * k + 1]
            if k < n_layers - 1:
                dh = dz * (pres[k] > 0)
            else:
                return dz
        raise AssertionError("unreachable")


class GaussianPolicy:
    """Diagonal Gaussian with a state-independent std.

    ``std = std_y_coef * sigmoid(w / std_x_coef)`` with the free vector ``w``
    initialised to ``std_x_coef``; the std therefore stays in
    ``(0, std_y_coef)`` and starts at ``std_y_coef * sigmoid(1)``.
    """

    discrete = False

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64,), std_x_coef: float = 1.0,
                 std_y_coef: float = 0.5, out_gain: float = 0.01):
        self.net = Mlp(obs_dim, act_dim, hidden, out_gain)
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.std_x_coef, self.std_y_coef = float(std_x_coef), float(std_y_coef)
        self.n_params = self.net.n_params + self.act_dim

    def init(self, rng) -> np.ndarray:
        return np.concatenate([self.net.init(rng), np.full(self.act_dim, self.std_x_coef)])

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise InvalidInputError(f"expected {self.n_params} parameters, got {theta.shape}")
        _check_finite(theta, "policy parameters")
        return theta[:self.net.n_params], theta[self.net.n_params:]

    def _std(self, w):
        return self.std_y_coef / (1.0 + np.exp(-w / self.std_x_coef))

    def _dlogstd(self, w):
        # d log std / d w
        return (1.0 - 1.0 / (1.0 + np.exp(-w / self.std_x_coef))) / self.std_x_coef

    def dist(self, theta, obs):
        body, w = self._split(theta)
        mean, _ = self.net.forward(body, np.atleast_2d(obs))
        return mean, np.broadcast_to(self._std(w), mean.shape)

    def log_prob(self, theta, obs, act) -> np.ndarray:
        mean, std = self.dist(theta, obs)
        return gaussian_log_prob(mean, std, np.atleast_2d(act))

    def sample(self, theta, obs, rng) -> np.ndarray:
        mean, std = self.dist(theta, obs)
        return mean + std * rng.standard_normal(mean.shape)

    def mode(self, theta, obs) -> np.ndarray:
        return self.dist(theta, obs)[0]

    def grad_log_prob(self, theta, obs, act, weights=None) -> np.ndarray:
        """Gradient of ``sum_t weights_t * log pi(a_t | o_t)``."""
        body, w = self._split(theta)
        mean, cache = self.net.forward(body, np.atleast_2d(obs))
        act = np.atleast_2d(act)
        weights = np.ones(len(mean)) if weights is None else np.asarray(weights, dtype=float)
        std = self._std(w)
        z = (act - mean) / std
        g_mean = weights[:, None] * z / std
        g_logstd = (weights[:, None] * (z * z - 1.0)).sum(0)
        return np.concatenate([self.net.vjp(cache, g_mean), g_logstd * self._dlogstd(w)])

    def kl(self, theta_old, theta_new, obs) -> np.ndarray:
        m1, s1 = self.dist(theta_old, obs)
        m2, s2 = self.dist(theta_new, obs)
        return gaussian_kl(m1, s1, m2, s2)

    def mean_kl(self, theta_old, theta_new, obs) -> float:
        return float(self.kl(theta_old, theta_new, obs).mean())

    def fisher_vector_product(self, theta, obs, v, damping: float = 1e-2) -> np.ndarray:
        """``(F + damping I) v`` where ``F`` is the Hessian of the mean KL at ``theta``."""
        body, w = self._split(theta)
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params,):
            raise InvalidInputError(f"vector has {v.shape} entries, expected {self.n_params}")
        obs = np.atleast_2d(obs)
        mean, cache = self.net.forward(body, obs)
        std = self._std(w)
        dmean = self.net.jvp(cache, v[:self.net.n_params])
        fv_body = self.net.vjp(cache, dmean / std ** 2) / len(obs)
        fv_w = 2.0 * self._dlogstd(w) ** 2 * v[self.net.n_params:]
        return np.concatenate([fv_body, fv_w]) + damping * v

    def entropy(self, theta) -> float:
        _, w = self._split(theta)
        return float(np.sum(np.log(self._std(w)) + 0.5 * (LOG_2PI + 1)))


class CategoricalPolicy:
    discrete = True

    def __init__(self, obs_dim: int, n_actions: int, hidden=(64,), out_gain: float = 0.01):
        self.net = Mlp(obs_dim, n_actions, hidden, out_gain)
        self.obs_dim, self.n_actions = int(obs_dim), int(n_actions)
        self.n_params = self.net.n_params

    def init(self, rng) -> np.ndarray:
        return self.net.init(rng)

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise InvalidInputError(f"expected {self.n_params} parameters, got {theta.shape}")
        _check_finite(theta, "policy parameters")
        return theta

    def probs(self, theta, obs):
        logits, cache = self.net.forward(self._check(theta), np.atleast_2d(obs))
        z = logits - logits.max(1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(1, keepdims=True), z - np.log(np.exp(z).sum(1, keepdims=True)), cache

    def log_prob(self, theta, obs, act) -> np.ndarray:
        _, logp, _ = self.probs(theta, obs)
        act = np.asarray(act, dtype=int).reshape(-1)
        return logp[np.arange(len(act)), act]

    def sample(self, theta, obs, rng) -> np.ndarray:
        p, _, _ = self.probs(theta, obs)
        u = rng.random((len(p), 1))
        return np.minimum((np.cumsum(p, 1) < u).sum(1), self.n_actions - 1)

    def mode(self, theta, obs) -> np.ndarray:
        return self.probs(theta, obs)[0].argmax(1)

    def grad_log_prob(self, theta, obs, act, weights=None) -> np.ndarray:
        p, _, cache = self.probs(theta, obs)
        act = np.asarray(act, dtype=int).reshape(-1)
        weights = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float)
        g = -p
        g[np.arange(len(act)), act] += 1.0
        return self.net.vjp(cache, weights[:, None] * g)

    def kl(self, theta_old, theta_new, obs) -> np.ndarray:
        p, lp, _ = self.probs(theta_old, obs)
        _, lq, _ = self.probs(theta_new, obs)
        return (p * (lp - lq)).sum(1)

    def mean_kl(self, theta_old, theta_new, obs) -> float:
        return float(self.kl(theta_old, theta_new, obs).mean())

    def fisher_vector_product(self, theta, obs, v, damping: float = 1e-2) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params,):
            raise InvalidInputError(f"vector has {v.shape} entries, expected {self.n_params}")
        p, _, cache = self.probs(theta, obs)
        dz = self.net.jvp(cache, v)
        u = p * dz - p * (p * dz).sum(1, keepdims=True)
        return self.net.vjp(cache, u) / len(p) + damping * v

    def entropy(self, theta, obs) -> float:
        p, lp, _ = self.probs(theta, obs)
        return float(-(p * lp).sum(1).mean())


def gaussian_log_prob(mean, std, act) -> np.ndarray:
    z = (act - mean) / std
    return -0.5 * (z * z).sum(-1) - np.log(std).sum(-1) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_kl(m1, s1, m2, s2) -> np.ndarray:
    """Per-row ``KL(N(m1, s1^2) || N(m2, s2^2))`` for diagonal Gaussians."""
    if np.any(np.asarray(s1) <= 0) or np.any(np.asarray(s2) <= 0):
        raise InvalidInputError("standard deviations must be positive")
    return (np.log(s2 / s1) + (s1 ** 2 + (m1 - m2) ** 2) / (2 * s2 ** 2) - 0.5).sum(-1)


class ValueNet:
    """Scalar critic ``V(o)``; output gain 1 so targets of any scale are reachable."""

    def __init__(self, obs_dim: int, hidden=(64,)):
        self.net = Mlp(obs_dim, 1, hidden, out_gain=1.0)
        self.n_params = self.net.n_params

    def init(self, rng) -> np.ndarray:
        return self.net.init(rng)

    def predict(self, theta, obs) -> np.ndarray:
        out, _ = self.net.forward(theta, np.atleast_2d(obs))
        return out[:, 0]

    def loss_and_grad(self, theta, obs, targets):
        """Mean squared error and its gradient."""
        out, cache = self.net.forward(theta, np.atleast_2d(obs))
        err = out[:, 0] - targets
        return float(np.mean(err ** 2)), self.net.vjp(cache, (2.0 / len(err)) * err[:, None])


class Adam:
    """Adam on a flat parameter vector, with optional global-norm clipping."""

    def __init__(self, n_params: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-5,
                 max_grad_norm: float | None = None):
        self.lr, self.betas, self.eps, self.max_grad_norm = lr, betas, eps, max_grad_norm
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta, grad) -> np.ndarray:
        """Returns updated parameters for a *descent* step on ``grad``."""
        _check_finite(grad, "gradient")
        if self.max_grad_norm is not None:
            norm = np.linalg.norm(grad)
            if norm > self.max_grad_norm:
                grad = grad * (self.max_grad_norm / norm)
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load_state_dict(self, doc: dict) -> None:
        self.m, self.v, self.t = np.array(doc["m"]), np.array(doc["v"]), int(doc["t"])


class RunningMeanStd:
    """Running mean/variance (parallel-merge update); frozen during evaluation."""

    def __init__(self, shape, clip: float = 10.0):
        self.mean = np.zeros(shape)
        self.var = np.ones(shape)
        self.count = 1e-4
        self.clip = clip
        self.frozen = False

    def update(self, batch) -> None:
        if self.frozen:
            return
        batch = np.asarray(batch, dtype=float).reshape(-1, *self.mean.shape)
        b_mean, b_var, n = batch.mean(0), batch.var(0), len(batch)
        delta = b_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x) -> np.ndarray:
        return np.clip((np.asarray(x) - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count}

    @classmethod
    def from_dict(cls, doc: dict, clip: float = 10.0) -> "RunningMeanStd":
        rms = cls(np.shape(doc["mean"]), clip)
        rms.mean, rms.var, rms.count = np.array(doc["mean"]), np.array(doc["var"]), float(doc["count"])
        return rms


@dataclass
class Checkpoint:
    """Named flat parameter vectors plus free-form metadata.

    Stored as JSON: floats are written with ``repr`` precision so the round
    trip is exact, and the byte order question does not arise.
    """

    vectors: dict
    meta: dict

    def dumps(self) -> str:
        return json.dumps({
            "schema": "safemarl.checkpoint",
            "version": CHECKPOINT_VERSION,
            "meta": self.meta,
            "vectors": {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()} for k, v in self.vectors.items()},
        })

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("schema") != "safemarl.checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError("not a version-1 checkpoint")
        vectors = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["vectors"].items()}
        return cls(vectors, doc.get("meta", {}))
