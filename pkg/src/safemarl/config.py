"""Training configuration with validation and JSON round-trip."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError

ALGORITHMS = ("macpo", "mappo_lagrangian", "happo", "hatrpo", "mappo", "ippo")
ENVIRONMENTS = ("corridor", "bridge")


@dataclass(frozen=True)
class TrainingConfig:
    """All hyperparameters of a run.

    Defaults are the published full-scale values (episode length 1000,
    batch 16000, KL threshold 0.0065, Lagrangian coefficient 0.78, ...).
    ``batch_size`` must be a multiple of ``episode_length``: every iteration
    runs ``batch_size // episode_length`` parallel environments for exactly
    one episode each.
    """

    algorithm: str = "macpo"
    env_id: str = "corridor"
    env_params: dict = field(default_factory=dict)
    seed: int = 0
    iterations: int = 100
    episode_length: int = 1000
    batch_size: int = 16000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    critic_lr: float = 5e-3
    actor_lr: float = 9e-5
    optim_eps: float = 1e-5
    max_grad_norm: float = 10.0
    ppo_epochs: int = 5
    clip: float = 0.2
    num_mini_batch: int = 40
    kl_threshold: float = 0.0065
    line_search_steps: int = 10
    line_search_fraction: float = 0.5
    fraction_coef: float = 0.27
    cg_iters: int = 10
    damping: float = 1e-2
    lagrangian_coef: float = 0.78
    lagrangian_lr: float = 1e-3
    cost_bound: float = 1.0
    hidden: int = 64
    hidden_layers: int = 1
    gain: float = 0.01
    std_x_coef: float = 1.0
    std_y_coef: float = 0.5
    eval_episodes: int = 32
    eval_interval: int = 0
    checkpoint_interval: int = 0
    multi_constraint_dual: bool = False

    @property
    def n_envs(self) -> int:
        return self.batch_size // self.episode_length

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return (self.hidden,) * self.hidden_layers

    def validate(self) -> "TrainingConfig":
        bad = []
        if self.algorithm not in ALGORITHMS:
            bad.append(f"algorithm: {self.algorithm!r} not in {ALGORITHMS}")
        if not self.env_id:
            bad.append("env_id: missing")
        elif self.env_id not in ENVIRONMENTS:
            bad.append(f"env_id: {self.env_id!r} not in {ENVIRONMENTS}")
        if not isinstance(self.env_params, dict):
            bad.append("env_params: must be an object")
        for name in ("iterations", "eval_interval", "checkpoint_interval", "line_search_steps"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                bad.append(f"{name}: must be a nonnegative integer")
        for name in ("episode_length", "batch_size", "ppo_epochs", "num_mini_batch", "cg_iters",
                     "hidden", "hidden_layers", "eval_episodes"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad.append(f"{name}: must be a positive integer")
        for name in ("critic_lr", "optim_eps", "max_grad_norm", "kl_threshold", "std_x_coef", "std_y_coef", "gain"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0 or not math.isfinite(v):
                bad.append(f"{name}: must be positive and finite")
        for name in ("actor_lr", "lagrangian_lr", "lagrangian_coef", "damping"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v < 0 or not math.isfinite(v):
                bad.append(f"{name}: must be nonnegative and finite")
        if not 0 <= self.gamma < 1:
            bad.append("gamma: must lie in [0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            bad.append("gae_lambda: must lie in [0, 1]")
        if not 0 < self.clip < 1:
            bad.append("clip: must lie in (0, 1)")
        if not 0 < self.line_search_fraction < 1:
            bad.append("line_search_fraction: must lie in (0, 1)")
        if not 0 < self.fraction_coef <= 1:
            bad.append("fraction_coef: must lie in (0, 1]")
        if not isinstance(self.cost_bound, (int, float)) or math.isnan(self.cost_bound):
            bad.append("cost_bound: must be a number (inf allowed)")
        if isinstance(self.batch_size, int) and isinstance(self.episode_length, int) and self.episode_length > 0:
            if self.batch_size % self.episode_length:
                bad.append("batch_size: must be a multiple of episode_length")
            elif isinstance(self.num_mini_batch, int) and self.num_mini_batch > self.batch_size:
                bad.append("num_mini_batch: exceeds batch_size")
        if not isinstance(self.seed, int) or self.seed < 0:
            bad.append("seed: must be a nonnegative integer")
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        doc = asdict(self)
        if math.isinf(self.cost_bound):
            doc["cost_bound"] = "inf"
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known - {"_comment"})
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        doc = {k: v for k, v in doc.items() if k in known}
        if "env_id" in doc and doc["env_id"] in (None, ""):
            raise ConfigError(["env_id: missing"])
        if isinstance(doc.get("cost_bound"), str):
            try:
                doc["cost_bound"] = float(doc["cost_bound"])
            except ValueError:
                raise ConfigError(["cost_bound: not a number"]) from None
        return cls(**doc).validate()

    @classmethod
    def loads(cls, text: str) -> "TrainingConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config: invalid JSON ({exc})"]) from None
        if not isinstance(doc, dict):
            raise ConfigError(["config: top level must be an object"])
        if "env_id" not in doc:
            raise ConfigError(["env_id: missing"])
        return cls.from_dict(doc)

    def with_(self, **changes) -> "TrainingConfig":
        return replace(self, **changes).validate()


def desk_corridor(algorithm: str = "macpo", seed: int = 0, iterations: int = 200) -> TrainingConfig:
    """Corridor settings that train in minutes on one CPU core.

    Episodes of 200 steps, 10 parallel environments (batch 2000), four
    minibatches, and larger actor / multiplier step sizes so that a few
    hundred iterations suffice; checkpoints every 50 iterations. Everything
    else keeps the published values.
    """
    return TrainingConfig(
        algorithm=algorithm,
        env_id="corridor",
        seed=seed,
        iterations=iterations,
        episode_length=200,
        batch_size=2000,
        num_mini_batch=4,
        actor_lr=5e-4,
        lagrangian_lr=0.05,
        cost_bound=1.0,
        checkpoint_interval=50,
    ).validate()
