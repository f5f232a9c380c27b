"""Diagnostics for how well fitted base models reproduce the observed brushing corpus."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .distributions import UserEnvModel, brush_probability, conditional_nonzero_moments, sample_duration
from .features import Corpus, build_features, feature_matrix

MOMENT_NAMES = (
    "Proportion of Missed Brushing Windows",
    "Average Non-Zero BDs",
    "Variance of Non-Zero BDs",
    "Variance of Average User BDs",
    "Average of Variances of Within User BDs",
)
MOMENT_KEYS = ("missed", "avg_nonzero", "var_nonzero", "var_user_avg", "avg_within_var")
DENOM_FLOOR = 1e-8


def moments(trajectories: Sequence[np.ndarray]) -> dict[str, float]:
    """The five corpus-level moment metrics for a set of per-user duration arrays.

    Variances are population variances (divide by the count).
    """
    trajs = [np.asarray(d, dtype=float) for d in trajectories]
    missed = np.mean([np.mean(d == 0) for d in trajs])
    nonzero_means = [d[d > 0].mean() for d in trajs if np.any(d > 0)]
    pooled = np.concatenate([d[d > 0] for d in trajs])
    return {
        "missed": float(missed),
        "avg_nonzero": float(np.mean(nonzero_means)) if nonzero_means else float("nan"),
        "var_nonzero": float(np.var(pooled)) if pooled.size else float("nan"),
        "var_user_avg": float(np.var([d.mean() for d in trajs])),
        "avg_within_var": float(np.mean([np.var(d) for d in trajs])),
    }


def replay_user(model: UserEnvModel, horizon: int, rng: np.random.Generator, day_mode="fitting", weekend_offset=0):
    """Closed-loop trajectory of ``horizon`` windows under no intervention."""
    durations: list[int] = []
    for t in range(1, horizon + 1):
        g = build_features(durations, t, model.variant, "env_baseline", day_mode=day_mode, weekend_offset=weekend_offset)
        durations.append(int(sample_duration(model, g, rng)))
    return np.array(durations, dtype=float)


@dataclass
class MomentReport:
    observed: dict[str, float]
    simulated: dict[str, float]
    simulated_sd: dict[str, float] = field(default_factory=dict)
    trials: int = 0

    def rows(self) -> list[dict]:
        return [
            {"metric": name, "observed": self.observed[key], "simulated": self.simulated[key]}
            for name, key in zip(MOMENT_NAMES, MOMENT_KEYS)
        ]


def moment_report(
    models: Mapping[str, UserEnvModel],
    corpus: Corpus,
    trials: int = 100,
    rng: np.random.Generator | int | None = None,
    weekend_offset: int = 0,
) -> MomentReport:
    """Observed moments of ``corpus`` next to moments of model replays averaged over ``trials``."""
    rng = np.random.default_rng(rng)
    missing = [uid for uid in corpus.user_ids if uid not in models]
    if missing:
        raise KeyError(f"no fitted model for users {missing}")
    observed = moments([d for _, d in corpus])
    per_trial = []
    for _ in range(trials):
        sims = [replay_user(models[uid], len(d), rng, weekend_offset=weekend_offset) for uid, d in corpus]
        per_trial.append(moments(sims))
    simulated = {k: float(np.mean([m[k] for m in per_trial])) for k in MOMENT_KEYS}
    spread = {k: float(np.std([m[k] for m in per_trial])) for k in MOMENT_KEYS}
    return MomentReport(observed, simulated, spread, trials)


@dataclass
class CaptureStat:
    u_bar: float
    sigma_u: float
    ci: tuple[float, float]
    per_user: dict[str, float]
    floored_terms: int = 0
    excluded_users: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "u_bar": self.u_bar,
            "sigma_u": self.sigma_u,
            "ci_low": self.ci[0],
            "ci_high": self.ci[1],
            "floored_terms": self.floored_terms,
            "excluded_users": list(self.excluded_users),
        }


def _summarize(per_user: dict[str, float], floored: int, excluded: list[str]) -> CaptureStat:
    values = np.array(list(per_user.values()), dtype=float)
    u_bar = float(values.mean())
    sigma = float(values.std())
    half = 1.96 * sigma / math.sqrt(values.size)
    return CaptureStat(u_bar, sigma, (u_bar - half, u_bar + half), per_user, floored, excluded)


def variance_capture(models: Mapping[str, UserEnvModel], corpus: Corpus, weekend_offset: int = 0):
    """Mean squared standardized residuals for the brush/no-brush indicator and non-zero durations.

    Each per-user statistic averages ``(x - E[x]) ** 2 / Var[x]`` over the
    relevant windows, so a calibrated model gives values near 1.  Returns
    ``(bernoulli_stat, nonzero_stat)``.
    """
    bern_u: dict[str, float] = {}
    nz_u: dict[str, float] = {}
    floored_b = floored_n = 0
    excluded = []
    for uid, d in corpus:
        model = models[uid]
        G = feature_matrix(d, model.variant, day_mode="fitting", weekend_offset=weekend_offset)
        brushed = (d > 0).astype(float)
        p = brush_probability(model.w_b, G)
        var = p * (1.0 - p)
        floored_b += int(np.sum(var < DENOM_FLOOR))
        bern_u[uid] = float(np.mean((brushed - p) ** 2 / np.maximum(var, DENOM_FLOOR)))

        nonzero = d > 0
        if not nonzero.any():
            warnings.warn(f"user {uid} has no non-zero sessions; excluded from the non-zero statistic")
            excluded.append(uid)
            continue
        mean, nz_var = conditional_nonzero_moments(model, G[nonzero])
        floored_n += int(np.sum(nz_var < DENOM_FLOOR))
        nz_u[uid] = float(np.mean((d[nonzero] - mean) ** 2 / np.maximum(nz_var, DENOM_FLOOR)))
    return _summarize(bern_u, floored_b, []), _summarize(nz_u, floored_n, excluded)
