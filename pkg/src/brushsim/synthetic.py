"""Synthetic stand-ins for fitted users, for demos and tests without the real corpus."""
from __future__ import annotations

import numpy as np

from .distributions import ModelClass, UserEnvModel
from .effects import ClassEffects, class_effects
from .features import Corpus
from .simulator import Environment


def synthetic_models(n_users: int = 32, variant: str = "S", seed: int = 0) -> list[UserEnvModel]:
    """Draw plausible per-user models cycling through the three model classes.

    Intercepts put roughly 60% of windows above zero with non-zero durations
    near two minutes; slopes are small and user-specific.
    """
    rng = np.random.default_rng(seed)
    dim = 5 if variant == "S" else 6
    classes = (ModelClass.ZIP, ModelClass.HURDLE_SQRT, ModelClass.HURDLE_LOG)
    models = []
    for i in range(n_users):
        cls = classes[i % 3]
        w_b = np.concatenate([[rng.normal(-0.5, 0.8)], rng.normal(0.0, 0.3, dim - 1)])
        slopes = rng.normal(0.0, 0.1, dim - 1)
        if cls is ModelClass.ZIP:
            w_nz, sigma = np.concatenate([[rng.normal(4.8, 0.2)], slopes]), None
        elif cls is ModelClass.HURDLE_SQRT:
            w_nz, sigma = np.concatenate([[rng.normal(11.0, 1.0)], 2 * slopes]), abs(rng.normal(2.5, 0.5))
        else:
            w_nz, sigma = np.concatenate([[rng.normal(4.7, 0.2)], slopes]), abs(rng.normal(0.4, 0.1))
        models.append(UserEnvModel(cls, w_b, w_nz, sigma, variant=variant, user_id=f"synthetic-{i:02d}"))
    return models


def synthetic_environment(variant_id: str = "S_Pop", n_users: int = 32, seed: int = 0, **kwargs) -> Environment:
    base = variant_id.split("_")[0]
    stationary = synthetic_models(n_users, "S", seed)
    models = stationary if base == "S" else synthetic_models(n_users, "NS", seed)
    return Environment(variant_id, models, class_effects(stationary), **kwargs)


def constant_environment(variant_id: str = "S_Pop", seconds: float = 120.0) -> Environment:
    """An environment whose every brushing duration equals ``seconds``, regardless of action."""
    base = variant_id.split("_")[0]
    dim = 5 if base == "S" else 6
    w_b = np.zeros(dim)
    w_b[0] = -60.0  # clamped to -30: brushing probability 1 - 9e-14
    w_nz = np.zeros(dim)
    w_nz[0] = np.sqrt(seconds)
    model = UserEnvModel(ModelClass.HURDLE_SQRT, w_b, w_nz, 1e-9, variant=base, user_id="constant")
    return Environment(variant_id, [model], {ModelClass.HURDLE_SQRT: ClassEffects(0.0, 0.0)})


def synthetic_corpus(models: list[UserEnvModel], days: int = 28, seed: int = 0) -> Corpus:
    """Replay ``models`` with no intervention to produce an observed-looking corpus."""
    from .env_check import replay_user

    rng = np.random.default_rng(seed)
    return Corpus({m.user_id: replay_user(m, 2 * days, rng) for m in models})


def write_corpus_csv(path, corpus: Corpus) -> None:
    """Write ``corpus`` in the default session-level column layout."""
    with open(path, "w") as fh:
        fh.write("user_id,day,time_of_day,duration\n")
        for uid, d in corpus:
            for t, value in enumerate(d, start=1):
                fh.write(f"{uid},{(t + 1) // 2},{0 if t % 2 else 1},{int(value)}\n")
