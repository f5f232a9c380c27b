"""Environment variants and closed-loop per-user trajectory generation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .distributions import ModelClass, UserEnvModel
from .effects import ClassEffects, UserEffects, draw_user_effects, duration_under_action
from .features import build_features

REWARD_CAP = 180
STUDY_LENGTH = 140
ROBAS_LENGTH = 56

VARIANT_IDS = ("S_Pop", "NS_Pop", "S_Het", "NS_Het")


@dataclass(frozen=True)
class EnvVariant:
    id: str

    def __post_init__(self):
        if self.id not in VARIANT_IDS:
            raise ValueError(f"unknown environment variant {self.id!r}; expected one of {VARIANT_IDS}")

    @property
    def base(self) -> str:
        return self.id.split("_")[0]

    @property
    def heterogeneous(self) -> bool:
        return self.id.endswith("_Het")

    @property
    def advantage_dim(self) -> int:
        return 4 if self.base == "S" else 5


@dataclass
class Environment:
    """A pool of fitted base users plus the effect sizes that define one variant."""

    variant: EnvVariant
    models: list[UserEnvModel]
    class_effects: Mapping[ModelClass, ClassEffects]
    sign_mode: str = "beneficial"
    weekend_offset: int = 0
    day_mode: str = "generation"

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = EnvVariant(self.variant)
        if not self.models:
            raise ValueError("environment needs at least one base user model")
        for model in self.models:
            if model.variant != self.variant.base:
                raise ValueError(f"model {model.user_id!r} is {model.variant}, variant needs {self.variant.base}")


@dataclass
class SimUser:
    model: UserEnvModel
    effects: UserEffects
    base_index: int


@dataclass
class StateFeatures:
    g: np.ndarray
    h: np.ndarray
    f: np.ndarray
    m: np.ndarray


def sample_study_population(env: Environment, n_users: int, rng: np.random.Generator) -> list[SimUser]:
    """Draw ``n_users`` base users uniformly with replacement and attach effect sizes."""
    if n_users < 1:
        raise ValueError("need at least one user")
    dim = env.variant.advantage_dim
    picks = rng.integers(0, len(env.models), size=n_users)
    users = []
    for idx in picks:
        model = env.models[int(idx)]
        effects = env.class_effects[model.model_class]
        if env.variant.heterogeneous:
            delta_b, delta_n = draw_user_effects(effects, rng)
        else:
            delta_b, delta_n = effects.delta_b, effects.delta_n
        users.append(SimUser(model, UserEffects.constant(delta_b, delta_n, dim), int(idx)))
    return users


def advance(durations: Sequence[float], variant: str = "S", day_mode="generation", weekend_offset=0) -> StateFeatures:
    """State features for the decision time following the observed ``durations``."""
    t = len(durations) + 1
    kw = {"day_mode": day_mode, "weekend_offset": weekend_offset}
    g = build_features(durations, t, variant, "env_baseline", **kw)
    h = build_features(durations, t, variant, "env_advantage", **kw)
    f, m = build_features(durations, t, variant, "alg", **kw)
    return StateFeatures(g, h, f, m)


def reward_from_duration(duration):
    return np.minimum(duration, REWARD_CAP)


def step(env: Environment, user: SimUser, state: StateFeatures, action: int, rng: np.random.Generator):
    """Return ``(duration, reward)`` for ``action`` taken in ``state``."""
    if action not in (0, 1):
        raise ValueError("action must be 0 or 1")
    duration = duration_under_action(user.model, state.g, state.h, action, user.effects, rng, env.sign_mode)
    return duration, int(reward_from_duration(duration))


class UserProcess:
    """Incremental closed-loop state for one simulated user."""

    def __init__(self, env: Environment, user: SimUser, horizon: int = STUDY_LENGTH):
        self.env = env
        self.user = user
        self.horizon = horizon
        self.durations: list[int] = []
        self.rewards: list[int] = []

    @property
    def t(self) -> int:
        return len(self.durations) + 1

    @property
    def done(self) -> bool:
        return len(self.durations) >= self.horizon

    def state(self) -> StateFeatures:
        return advance(self.durations, self.env.variant.base, self.env.day_mode, self.env.weekend_offset)

    def act(self, state: StateFeatures, action: int, rng: np.random.Generator) -> int:
        duration, reward = step(self.env, self.user, state, action, rng)
        self.durations.append(int(duration))
        self.rewards.append(reward)
        return reward


@dataclass
class Trajectory:
    rows: list[dict] = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([row["reward"] for row in self.rows])

    @property
    def durations(self) -> np.ndarray:
        return np.array([row["duration"] for row in self.rows])

    def write_csv(self, path: str | Path) -> None:
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            writer.writerows(self.rows)


def simulate_user(
    env: Environment,
    user: SimUser,
    policy: Callable[[StateFeatures, int], float],
    rng: np.random.Generator,
    horizon: int = STUDY_LENGTH,
) -> Trajectory:
    """Run one user for ``horizon`` decision times with a fixed policy giving P(action = 1)."""
    proc = UserProcess(env, user, horizon)
    traj = Trajectory()
    while not proc.done:
        state = proc.state()
        t = proc.t
        prob = float(policy(state, t))
        action = int(rng.random() < prob)
        reward = proc.act(state, action, rng)
        row = {"t": t}
        row.update({f"g{j}": float(v) for j, v in enumerate(state.g)})
        row.update({"action": action, "prob": prob, "duration": proc.durations[-1], "reward": reward})
        traj.rows.append(row)
    return traj
