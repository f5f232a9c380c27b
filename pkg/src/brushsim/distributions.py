"""Base brushing-duration model classes for the simulation environment.

All three classes share a Bernoulli component with success probability
``1 - sigmoid(g @ w_b)`` (the user brushes).  The non-zero component is a
Poisson (ZIP), a squared normal (hurdle, square-root transform) or a
lognormal (hurdle, log transform).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.special import expit, gammaln

LINEAR_CLAMP = 30.0
# Finite stand-in for log(0) so multi-start searches stay comparable.
LOG_ZERO_PENALTY = -1e9


class ModelClass(str, enum.Enum):
    ZIP = "zip"
    HURDLE_SQRT = "hurdle_sqrt"
    HURDLE_LOG = "hurdle_log"

    @property
    def is_hurdle(self) -> bool:
        return self is not ModelClass.ZIP


# tie-break order for model selection
MODEL_CLASS_ORDER = (ModelClass.ZIP, ModelClass.HURDLE_SQRT, ModelClass.HURDLE_LOG)


def _clamp(x):
    return np.clip(x, -LINEAR_CLAMP, LINEAR_CLAMP)


@dataclass
class UserEnvModel:
    """A fitted per-user generative model of brushing duration under no intervention.

    ``w_nz`` holds the Poisson log-rate weights for ZIP and the normal mean
    weights for the hurdle classes.
    """

    model_class: ModelClass
    w_b: np.ndarray
    w_nz: np.ndarray
    sigma_u: float | None = None
    variant: str = "S"
    user_id: str = ""
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.model_class = ModelClass(self.model_class)
        self.w_b = np.asarray(self.w_b, dtype=float)
        self.w_nz = np.asarray(self.w_nz, dtype=float)
        expected = 5 if self.variant == "S" else 6
        if self.w_b.shape != (expected,) or self.w_nz.shape != (expected,):
            raise ValueError(
                f"weights for variant {self.variant} must have length {expected}, "
                f"got {self.w_b.shape} and {self.w_nz.shape}"
            )
        if self.model_class.is_hurdle:
            if self.sigma_u is None or not self.sigma_u > 0:
                raise ValueError("hurdle models need a positive sigma_u")
            self.sigma_u = float(self.sigma_u)

    @property
    def dim(self) -> int:
        return self.w_b.shape[0]

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "user_id": self.user_id,
            "variant": self.variant,
            "model_class": self.model_class.value,
            "sigma_u": self.sigma_u if self.sigma_u is not None else "",
        }
        for j, value in enumerate(self.w_b):
            record[f"w_b_{j}"] = float(value)
        for j, value in enumerate(self.w_nz):
            record[f"w_nz_{j}"] = float(value)
        if self.model_class is ModelClass.HURDLE_LOG:
            record["log_transform"] = self.meta.get("log_transform", "log")
        return record

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "UserEnvModel":
        variant = str(record["variant"])
        dim = 5 if variant == "S" else 6
        w_b = [float(record[f"w_b_{j}"]) for j in range(dim)]
        w_nz = [float(record[f"w_nz_{j}"]) for j in range(dim)]
        sigma = record.get("sigma_u", "")
        sigma_u = float(sigma) if sigma not in ("", None) and not _isnan(sigma) else None
        meta = {}
        if record.get("log_transform") not in (None, "") and not _isnan(record.get("log_transform")):
            meta["log_transform"] = str(record["log_transform"])
        return cls(
            model_class=ModelClass(str(record["model_class"])),
            w_b=w_b,
            w_nz=w_nz,
            sigma_u=sigma_u,
            variant=variant,
            user_id=str(record.get("user_id", "")),
            meta=meta,
        )


def _isnan(value) -> bool:
    return isinstance(value, float) and np.isnan(value)


def brush_probability(w_b, g, shift=0.0):
    """P(Z = 1) = 1 - sigmoid(g @ w_b + shift)."""
    return expit(-_clamp(np.asarray(g) @ w_b + shift))


def sample_duration(model: UserEnvModel, g, rng: np.random.Generator, bern_shift=0.0, nz_shift=0.0):
    """Draw brushing durations (integer seconds) for one state or a stack of states.

    ``bern_shift`` and ``nz_shift`` are added to the Bernoulli and non-zero
    linear predictors; they are how treatment effects enter.
    """
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != model.dim:
        raise ValueError(f"feature dimension {g.shape[-1]} does not match model dimension {model.dim}")
    p = brush_probability(model.w_b, g, bern_shift)
    z = rng.random(np.shape(p)) < p
    eta = g @ model.w_nz + nz_shift
    if model.model_class is ModelClass.ZIP:
        y = rng.poisson(np.exp(_clamp(eta)))
        duration = z * y
    elif model.model_class is ModelClass.HURDLE_SQRT:
        y = rng.normal(eta, model.sigma_u)
        duration = np.rint(z * y**2)
    else:
        y = rng.normal(_clamp(eta), model.sigma_u)
        duration = np.rint(z * np.exp(y))
    return np.asarray(duration, dtype=np.int64) if np.ndim(duration) else int(duration)


def marginal_mean(model: UserEnvModel, g, bern_shift=0.0, nz_shift=0.0):
    """E[D | S] for the model class (rounding of hurdle draws ignored)."""
    g = np.asarray(g, dtype=float)
    p = brush_probability(model.w_b, g, bern_shift)
    eta = g @ model.w_nz + nz_shift
    if model.model_class is ModelClass.ZIP:
        return p * np.exp(_clamp(eta))
    if model.model_class is ModelClass.HURDLE_SQRT:
        return p * (model.sigma_u**2 + eta**2)
    return p * np.exp(_clamp(eta) + model.sigma_u**2 / 2)


def conditional_nonzero_moments(model: UserEnvModel, g):
    """Mean and variance of the non-zero component at state(s) ``g``."""
    g = np.asarray(g, dtype=float)
    eta = g @ model.w_nz
    if model.model_class is ModelClass.ZIP:
        lam = np.exp(_clamp(eta))
        if np.any(lam == 0):
            raise ValueError("zero Poisson rate: zero-truncated mean undefined")
        # lam * e^lam / (e^lam - 1) == lam / (1 - e^-lam), written stably
        mean = lam / -np.expm1(-lam)
        var = mean * (1.0 + lam - mean)
        return mean, var
    s2 = model.sigma_u**2
    if model.model_class is ModelClass.HURDLE_SQRT:
        mean = s2 + eta**2
        fourth = eta**4 + 3 * s2**2 + 6 * s2 * eta**2
        return mean, fourth - mean**2
    eta = _clamp(eta)
    mean = np.exp(eta + s2 / 2)
    var = np.expm1(s2) * np.exp(2 * eta + s2)
    return mean, var


def zip_log_likelihood_terms(durations, p, lam):
    """Per-observation ZIP log likelihood with brush probability ``p`` and rate ``lam``."""
    d = np.asarray(durations, dtype=float)
    p = np.asarray(p, dtype=float)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        zero = np.log((1.0 - p) + p * np.exp(-lam))
        log_lam = np.where(lam > 0, np.log(np.where(lam > 0, lam, 1.0)), -np.inf)
        positive = np.log(p) - lam + d * log_lam - gammaln(d + 1)
    out = np.where(d == 0, zero, positive)
    return np.where(np.isfinite(out), out, LOG_ZERO_PENALTY)


def log_likelihood(model_class, params: Mapping[str, Any], g, durations) -> float:
    """Log likelihood of durations at states ``g``.

    ``params`` carries ``w_b``, ``w_nz`` and, for hurdle classes, ``sigma_u``.
    Hurdle likelihoods factor into the Bernoulli part and the normal density
    of the transformed non-zero durations.
    """
    model_class = ModelClass(model_class)
    d = np.asarray(durations, dtype=float)
    if d.size == 0:
        return 0.0
    g = np.atleast_2d(np.asarray(g, dtype=float))
    w_b = np.asarray(params["w_b"], dtype=float)
    w_nz = np.asarray(params["w_nz"], dtype=float)
    p = brush_probability(w_b, g)
    eta = g @ w_nz
    if model_class is ModelClass.ZIP:
        return float(zip_log_likelihood_terms(d, p, np.exp(_clamp(eta))).sum())

    nonzero = d > 0
    with np.errstate(divide="ignore"):
        bern = np.where(nonzero, np.log(p), np.log1p(-p))
    total = float(np.where(np.isfinite(bern), bern, LOG_ZERO_PENALTY).sum())
    if nonzero.any():
        sigma = float(params["sigma_u"])
        y = np.sqrt(d[nonzero]) if model_class is ModelClass.HURDLE_SQRT else np.log(d[nonzero])
        resid = y - eta[nonzero]
        total += float(np.sum(-0.5 * (resid / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)))
    return total
