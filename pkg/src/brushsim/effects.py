"""Imputed treatment effect sizes and brushing durations under an intervention."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .distributions import ModelClass, UserEnvModel, sample_duration

SIGN_MODES = ("beneficial", "literal")


@dataclass(frozen=True)
class ClassEffects:
    """Population effect sizes and heterogeneity scales for one model class."""

    delta_b: float
    delta_n: float
    sigma_b: float = 0.0
    sigma_n: float = 0.0

    def to_record(self) -> dict:
        return {"delta_b": self.delta_b, "delta_n": self.delta_n, "sigma_b": self.sigma_b, "sigma_n": self.sigma_n}


@dataclass(frozen=True)
class UserEffects:
    """Effect vectors paired with the advantage features ``h(S)``."""

    delta_b: np.ndarray
    delta_n: np.ndarray

    @classmethod
    def constant(cls, delta_b: float, delta_n: float, dim: int) -> "UserEffects":
        return cls(np.full(dim, float(delta_b)), np.full(dim, float(delta_n)))

    @classmethod
    def zero(cls, dim: int) -> "UserEffects":
        return cls.constant(0.0, 0.0, dim)


def _mean_abs_slopes(w) -> float:
    """Average |weight| over the four non-intercept stationary dimensions."""
    w = np.asarray(w, dtype=float)
    return float(np.mean(np.abs(w[1:5])))


def _group(models: Iterable[UserEnvModel]) -> dict[ModelClass, list[UserEnvModel]]:
    groups: dict[ModelClass, list[UserEnvModel]] = {}
    for model in models:
        groups.setdefault(model.model_class, []).append(model)
    return groups


def population_effect_sizes(models: Iterable[UserEnvModel]) -> dict[ModelClass, tuple[float, float]]:
    """Per-class (delta_B, delta_N): mean absolute non-intercept weight over users and dimensions."""
    out = {}
    for cls, group in _group(models).items():
        delta_b = float(np.mean([_mean_abs_slopes(m.w_b) for m in group]))
        delta_n = float(np.mean([_mean_abs_slopes(m.w_nz) for m in group]))
        out[cls] = (delta_b, delta_n)
    return out


def heterogeneity_scales(models: Iterable[UserEnvModel]) -> dict[ModelClass, tuple[float, float]]:
    """Per-class (sigma_B, sigma_N): sample standard deviation of per-user mean |weight|."""
    out = {}
    for cls, group in _group(models).items():
        if len(group) < 2:
            warnings.warn(f"class {cls.value} has fewer than 2 users; heterogeneity scale set to 0")
            out[cls] = (0.0, 0.0)
            continue
        mu_b = [_mean_abs_slopes(m.w_b) for m in group]
        mu_n = [_mean_abs_slopes(m.w_nz) for m in group]
        out[cls] = (float(np.std(mu_b, ddof=1)), float(np.std(mu_n, ddof=1)))
    return out


def class_effects(models: Iterable[UserEnvModel]) -> dict[ModelClass, ClassEffects]:
    models = list(models)
    pop = population_effect_sizes(models)
    scales = heterogeneity_scales(models)
    return {cls: ClassEffects(*pop[cls], *scales[cls]) for cls in pop}


def fill_missing_classes(
    effects: Mapping[ModelClass, ClassEffects], models: Iterable[UserEnvModel]
) -> dict[ModelClass, ClassEffects]:
    """Add effects for classes in ``models`` that ``effects`` lacks, derived from those models."""
    models = list(models)
    missing = {m.model_class for m in models} - set(effects)
    out = dict(effects)
    if missing:
        out.update(class_effects([m for m in models if m.model_class in missing]))
    return out


def draw_user_effects(effects: ClassEffects, rng: np.random.Generator, size=None):
    """Draw (delta_B_i, delta_N_i) from normals centered at the class effects."""
    delta_b = rng.normal(effects.delta_b, effects.sigma_b, size=size)
    delta_n = rng.normal(effects.delta_n, effects.sigma_n, size=size)
    return delta_b, delta_n


def action_shifts(h, action: int, effects: UserEffects, sign_mode: str = "beneficial"):
    """Linear-predictor shifts (Bernoulli, non-zero) contributed by taking ``action``."""
    if not action:
        return 0.0, 0.0
    h = np.asarray(h, dtype=float)
    bern = float(h @ effects.delta_b)
    nz = float(h @ effects.delta_n)
    if sign_mode == "beneficial":
        # a positive effect lowers sigmoid(.) and so raises the chance of brushing
        bern = -bern
    elif sign_mode != "literal":
        raise ValueError(f"unknown sign mode {sign_mode!r}")
    return bern, nz


def duration_under_action(
    model: UserEnvModel,
    g,
    h,
    action: int,
    effects: UserEffects,
    rng: np.random.Generator,
    sign_mode: str = "beneficial",
):
    """Brushing duration when ``action`` is taken in the state with features ``g``/``h``."""
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != effects.delta_b.shape[0]:
        raise ValueError("advantage feature dimension does not match the effect vectors")
    bern, nz = action_shifts(h, action, effects, sign_mode)
    return sample_duration(model, g, rng, bern_shift=bern, nz_shift=nz)


def effects_to_records(effects: Mapping[ModelClass, ClassEffects]) -> list[dict]:
    return [{"model_class": cls.value, **eff.to_record()} for cls, eff in effects.items()]


def effects_from_records(records: Iterable[Mapping]) -> dict[ModelClass, ClassEffects]:
    return {
        ModelClass(r["model_class"]): ClassEffects(
            float(r["delta_b"]), float(r["delta_n"]), float(r["sigma_b"]), float(r["sigma_n"])
        )
        for r in records
    }
