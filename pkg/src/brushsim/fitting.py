"""Per-user MAP fitting of the environment base models and model-class selection."""
from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, gammaln, log_expit

from .distributions import (
    LINEAR_CLAMP,
    MODEL_CLASS_ORDER,
    ModelClass,
    UserEnvModel,
    log_likelihood,
    marginal_mean,
)
from .features import Corpus, feature_matrix

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
_LOG_2PI = np.log(2 * np.pi)


class FitError(RuntimeError):
    """All restarts of a fit failed to produce a finite log posterior."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class SelectionError(RuntimeError):
    pass


@dataclass
class FitConfig:
    restarts: int = 20
    max_iter: int = 500
    gtol: float = 1e-6
    prior_scale: float = 1.0
    weekend_offset: int = 0


@dataclass
class FitResult:
    model: UserEnvModel
    log_posterior: float
    rmse: float
    restarts_used: int
    converged: bool
    diagnostics: list = field(default_factory=list)


def _log_prior(w, scale):
    if np.isinf(scale):
        return 0.0
    return float(-0.5 * np.sum((w / scale) ** 2) - w.size * (np.log(scale) + 0.5 * _LOG_2PI))


def _prior_penalty(w, scale):
    """Negative log prior (up to constants) and its gradient."""
    if np.isinf(scale):
        return 0.0, np.zeros_like(w)
    inv = 1.0 / scale**2
    return 0.5 * inv * float(w @ w), inv * w


def _zip_objective(theta, G, d, scale):
    k = G.shape[1]
    w_b, w_p = theta[:k], theta[k:]
    a = G @ w_b
    b = np.clip(G @ w_p, -LINEAR_CLAMP, LINEAR_CLAMP)
    lam = np.exp(b)
    log_p = log_expit(-a)
    log_q = log_expit(a)
    p = np.exp(log_p)
    pos = d > 0

    log_l0 = np.logaddexp(log_q, log_p - lam)
    ll = np.where(pos, log_p - lam + d * b - gammaln(d + 1), log_l0)

    # zero branch: L0 = 1 - p + p e^-lam
    ratio = np.exp(log_p - lam - log_l0)  # p e^-lam / L0
    grad_a = np.where(pos, -(1.0 - p), (1.0 - p) * p * -np.expm1(-lam) / np.exp(log_l0))
    grad_b = np.where(pos, d - lam, -ratio * lam)

    pen_b, dpen_b = _prior_penalty(w_b, scale)
    pen_p, dpen_p = _prior_penalty(w_p, scale)
    value = -float(ll.sum()) + pen_b + pen_p
    grad = np.concatenate([-(G.T @ grad_a) + dpen_b, -(G.T @ grad_b) + dpen_p])
    return value, grad


def _bernoulli_objective(w, G, z, scale):
    a = G @ w
    ll = np.where(z, log_expit(-a), log_expit(a))
    p = expit(-a)
    pen, dpen = _prior_penalty(w, scale)
    return -float(ll.sum()) + pen, G.T @ (z - p) + dpen


def _normal_profile_objective(w, G, y, scale):
    """Negative log posterior with the noise scale profiled out at its MLE."""
    n = y.size
    resid = y - G @ w
    rss = max(float(resid @ resid), n * SIGMA_FLOOR**2)
    pen, dpen = _prior_penalty(w, scale)
    value = 0.5 * n * np.log(rss / n) + pen
    grad = -(n / rss) * (G.T @ resid) + dpen
    return value, grad


def _multistart(objective, dim, args, config: FitConfig, rng: np.random.Generator):
    best = None
    diagnostics = []
    n_ok = 0
    for restart in range(config.restarts):
        x0 = rng.normal(0.0, 1.0, size=dim)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            res = minimize(
                objective,
                x0,
                args=args,
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": config.max_iter, "gtol": config.gtol},
            )
        diagnostics.append({"restart": restart, "fun": float(res.fun), "success": bool(res.success), "nit": int(res.nit)})
        if not np.isfinite(res.fun) or not np.all(np.isfinite(res.x)):
            continue
        n_ok += 1
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise FitError("all restarts diverged", diagnostics)
    return best, n_ok, diagnostics


def _fit_zip(G, d, config, rng):
    k = G.shape[1]
    best, n_ok, diag = _multistart(_zip_objective, 2 * k, (G, d, config.prior_scale), config, rng)
    return best.x[:k], best.x[k:], None, bool(best.success), n_ok, diag


def _fit_hurdle(G, d, model_class, config, rng):
    k = G.shape[1]
    z = (d > 0).astype(float)
    best_b, ok_b, diag_b = _multistart(_bernoulli_objective, k, (G, z, config.prior_scale), config, rng)
    nonzero = d > 0
    converged = bool(best_b.success)
    if not nonzero.any():
        # no non-zero sessions: the non-zero component stays at the prior mode
        return best_b.x, np.zeros(k), 1.0, converged, ok_b, diag_b
    y = np.sqrt(d[nonzero]) if model_class is ModelClass.HURDLE_SQRT else np.log(d[nonzero])
    Gn = G[nonzero]
    best_mu, ok_mu, diag_mu = _multistart(_normal_profile_objective, k, (Gn, y, config.prior_scale), config, rng)
    resid = y - Gn @ best_mu.x
    sigma = max(float(np.sqrt(np.mean(resid**2))), SIGMA_FLOOR)
    return best_b.x, best_mu.x, sigma, converged and bool(best_mu.success), min(ok_b, ok_mu), diag_b + diag_mu


def log_posterior(model: UserEnvModel, G, d, prior_scale=1.0) -> float:
    params = {"w_b": model.w_b, "w_nz": model.w_nz, "sigma_u": model.sigma_u}
    return (
        log_likelihood(model.model_class, params, G, d)
        + _log_prior(model.w_b, prior_scale)
        + _log_prior(model.w_nz, prior_scale)
    )


def rmse(durations, model: UserEnvModel, G=None) -> float:
    """Root of the summed squared error between observed durations and the model mean."""
    d = np.asarray(durations, dtype=float)
    if G is None:
        G = feature_matrix(d, model.variant, day_mode="fitting")
    return float(np.sqrt(np.sum((d - marginal_mean(model, G)) ** 2)))


def fit_user_model(
    durations,
    model_class,
    variant: str = "S",
    config: FitConfig | None = None,
    rng: np.random.Generator | int | None = None,
    user_id: str = "",
    G=None,
) -> FitResult:
    """MAP fit of one model class to one user's duration trajectory.

    The log posterior is the class likelihood plus an isotropic normal prior
    with standard deviation ``config.prior_scale`` on every weight.  Each
    restart starts from standard-normal weights; the best is kept.
    """
    config = config or FitConfig()
    rng = np.random.default_rng(rng)
    model_class = ModelClass(model_class)
    d = np.asarray(durations, dtype=float)
    if d.size == 0:
        raise ValueError("cannot fit a model to an empty trajectory")
    if G is None:
        G = feature_matrix(d, variant, day_mode="fitting", weekend_offset=config.weekend_offset)

    if model_class is ModelClass.ZIP:
        w_b, w_nz, sigma, converged, n_ok, diag = _fit_zip(G, d, config, rng)
    else:
        w_b, w_nz, sigma, converged, n_ok, diag = _fit_hurdle(G, d, model_class, config, rng)

    meta = {"log_transform": "log"} if model_class is ModelClass.HURDLE_LOG else {}
    model = UserEnvModel(model_class, w_b, w_nz, sigma, variant=variant, user_id=user_id, meta=meta)
    lp = log_posterior(model, G, d, config.prior_scale)
    if not np.isfinite(lp):
        raise FitError(f"non-finite log posterior for user {user_id!r}", diag)
    return FitResult(model, lp, rmse(d, model, G), n_ok, converged, diag)


def choose_class(fits: dict[ModelClass, FitResult]) -> ModelClass:
    """Lowest RMSE wins; exact ties go to the earlier class in ZIP, sqrt, log order."""
    best = None
    for cls in MODEL_CLASS_ORDER:
        if cls in fits and (best is None or fits[cls].rmse < fits[best].rmse):
            best = cls
    if best is None:
        raise SelectionError("no model class could be fitted")
    return best


def select_model_class(durations, variant="S", config: FitConfig | None = None, seed=0, user_id=""):
    config = config or FitConfig()
    d = np.asarray(durations, dtype=float)
    G = feature_matrix(d, variant, day_mode="fitting", weekend_offset=config.weekend_offset)
    fits = {}
    errors = {}
    for i, cls in enumerate(MODEL_CLASS_ORDER):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        try:
            fits[cls] = fit_user_model(d, cls, variant, config, rng, user_id=user_id, G=G)
        except FitError as exc:
            log.warning("fit of %s failed for user %s: %s", cls.value, user_id, exc)
            errors[cls] = exc
    if not fits:
        raise SelectionError(f"all model classes failed for user {user_id!r}")
    return choose_class(fits), fits


def user_seed(master_seed: int, user_id: str, variant: str) -> list[int]:
    """Seed entropy keyed by user identity so results do not depend on processing order."""
    return [master_seed, zlib.crc32(user_id.encode()), zlib.crc32(variant.encode())]


def _select_one(args):
    user_id, durations, variant, config, master_seed = args
    seed = np.random.SeedSequence(user_seed(master_seed, user_id, variant)).generate_state(1)[0]
    chosen, fits = select_model_class(durations, variant, config, int(seed), user_id)
    return user_id, chosen, fits


def fit_corpus(corpus: Corpus, variant="S", config: FitConfig | None = None, seed=0, workers=1):
    """Select and fit one model per corpus user.

    Returns ``{user_id: (chosen_class, {class: FitResult})}``.
    """
    config = config or FitConfig()
    jobs = [(uid, d, variant, config, seed) for uid, d in corpus]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_select_one, jobs))
    else:
        results = [_select_one(job) for job in jobs]
    return {uid: (chosen, fits) for uid, chosen, fits in results}
