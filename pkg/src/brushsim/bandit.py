"""Thompson-sampling contextual bandits: action-centered BLR and Bayesian ZIP regression.

Both algorithms use advantage features ``f`` (3-dim) and baseline features
``m`` (4-dim).  Action probabilities are clipped to ``[pi_min, pi_max]``
before an action is drawn, and the clipped value is what gets logged.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

F_DIM = 3
M_DIM = 4
BLR_DIM = M_DIM + 2 * F_DIM
ZIP_DIM = 2 * (M_DIM + F_DIM)
PRIOR_SD = 5.0
PI_MIN = 0.35
PI_MAX = 0.75


class ConfigError(ValueError):
    pass


@dataclass
class History:
    """Stacked decision-time records for every user served by one algorithm instance."""

    f: np.ndarray
    m: np.ndarray
    action: np.ndarray
    prob: np.ndarray
    reward: np.ndarray

    @classmethod
    def empty(cls) -> "History":
        return cls(np.empty((0, F_DIM)), np.empty((0, M_DIM)), np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def from_rows(cls, rows) -> "History":
        """Build from an iterable of ``(f, m, action, prob, reward)`` tuples."""
        rows = list(rows)
        if not rows:
            return cls.empty()
        f, m, a, p, r = zip(*rows)
        return cls(np.array(f, float), np.array(m, float), np.array(a, float), np.array(p, float), np.array(r, float))

    def __len__(self) -> int:
        return self.reward.shape[0]


def clip_prob(prob, pi_min: float = PI_MIN, pi_max: float = PI_MAX):
    if pi_min > pi_max:
        raise ConfigError(f"pi_min {pi_min} exceeds pi_max {pi_max}")
    return np.minimum(pi_max, np.maximum(prob, pi_min))


def select_action(prob: float, rng: np.random.Generator) -> int:
    return int(rng.random() < prob)


# --------------------------------------------------------------------------
# Bayesian linear regression with action centering


@dataclass
class BlrPosterior:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def beta_mean(self) -> np.ndarray:
        return self.mean[-F_DIM:]

    @property
    def beta_cov(self) -> np.ndarray:
        return self.cov[-F_DIM:, -F_DIM:]


def blr_prior(prior_sd: float = PRIOR_SD) -> BlrPosterior:
    return BlrPosterior(np.zeros(BLR_DIM), np.eye(BLR_DIM) * prior_sd**2)


def blr_design(history: History) -> np.ndarray:
    """Rows ``[m, pi * f, (A - pi) * f]`` using the probability logged at decision time."""
    pi = history.prob[:, None]
    return np.hstack([history.m, pi * history.f, (history.action[:, None] - pi) * history.f])


def conjugate_update(Phi, R, prior_mean, prior_cov, eta2: float) -> BlrPosterior:
    """Normal posterior for ``R = Phi @ theta + N(0, eta2)`` under a normal prior."""
    try:
        prior_prec = np.linalg.inv(prior_cov)
        np.linalg.cholesky(prior_cov)
    except np.linalg.LinAlgError:
        raise ConfigError("prior covariance must be symmetric positive definite") from None
    precision = Phi.T @ Phi / eta2 + prior_prec
    precision = 0.5 * (precision + precision.T)
    # every eigenvalue is at least the prior's smallest precision; clipping only
    # undoes round-off when huge features swamp the prior
    vals, vecs = np.linalg.eigh(precision)
    vals = np.maximum(vals, np.linalg.eigvalsh(prior_prec).min())
    cov = (vecs / vals) @ vecs.T
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (Phi.T @ R / eta2 + prior_prec @ prior_mean)
    return BlrPosterior(mean, cov)


def blr_update(history: History, eta2: float, prior: BlrPosterior | None = None) -> BlrPosterior:
    prior = prior or blr_prior()
    if len(history) == 0:
        return BlrPosterior(prior.mean.copy(), prior.cov.copy())
    return conjugate_update(blr_design(history), history.reward, prior.mean, prior.cov, eta2)


def blr_action_prob(posterior: BlrPosterior, f) -> float:
    """Posterior probability that the advantage ``f @ beta`` is positive."""
    f = np.asarray(f, dtype=float)
    loc = float(f @ posterior.beta_mean)
    var = float(f @ posterior.beta_cov @ f)
    if var <= 0.0:
        return 1.0 if loc > 0 else (0.0 if loc < 0 else 0.5)
    return 0.5 * math.erfc(-loc / math.sqrt(2.0 * var))


# --------------------------------------------------------------------------
# Zero-inflated Poisson regression, posterior sampled by random-walk MH


@numba.njit(cache=True)
def zip_log_posterior(theta, Xb, Xp, R, log_fact, prior_var):
    kb = Xb.shape[1]
    total = 0.0
    for j in range(theta.shape[0]):
        total -= 0.5 * theta[j] * theta[j] / prior_var
    for i in range(R.shape[0]):
        a = 0.0
        for j in range(kb):
            a += Xb[i, j] * theta[j]
        b = 0.0
        for j in range(Xp.shape[1]):
            b += Xp[i, j] * theta[kb + j]
        if b > 30.0:
            b = 30.0
        elif b < -30.0:
            b = -30.0
        lam = math.exp(b)
        # log p with p = 1 - sigmoid(a) = sigmoid(-a)
        if a > 0:
            log_p = -a - math.log1p(math.exp(-a))
            log_q = -math.log1p(math.exp(-a))
        else:
            log_p = -math.log1p(math.exp(a))
            log_q = a - math.log1p(math.exp(a))
        if R[i] > 0:
            total += log_p - lam + R[i] * b - log_fact[i]
        else:
            x = log_p - lam
            hi = max(x, log_q)
            total += hi + math.log(math.exp(x - hi) + math.exp(log_q - hi))
    return total


@numba.njit(cache=True)
def _mh_chain(theta0, gamma, Xb, Xp, R, log_fact, prior_var, normals, uniforms, burn_in, thin, target, window):
    n_iter, dim = normals.shape
    n_keep = (n_iter - burn_in) // thin
    draws = np.empty((n_keep, dim))
    theta = theta0.copy()
    lp = zip_log_posterior(theta, Xb, Xp, R, log_fact, prior_var)
    log_gamma = math.log(gamma)
    accepted_window = 0
    accepted_after = 0
    kept = 0
    prop = np.empty(dim)
    for it in range(n_iter):
        step = math.exp(log_gamma)
        for j in range(dim):
            prop[j] = theta[j] + step * normals[it, j]
        lp_prop = zip_log_posterior(prop, Xb, Xp, R, log_fact, prior_var)
        log_alpha = min(0.0, lp_prop - lp)
        if math.log(uniforms[it]) < log_alpha:
            for j in range(dim):
                theta[j] = prop[j]
            lp = lp_prop
            if it < burn_in:
                accepted_window += 1
            else:
                accepted_after += 1
        if it < burn_in:
            if (it + 1) % window == 0:
                rate = accepted_window / window
                log_gamma += 2.0 * (rate - target)
                accepted_window = 0
        elif (it - burn_in + 1) % thin == 0 and kept < n_keep:
            for j in range(dim):
                draws[kept, j] = theta[j]
            kept += 1
    n_after = n_iter - burn_in
    rate = accepted_after / n_after if n_after > 0 else 0.0
    return draws, theta, math.exp(log_gamma), rate


@dataclass
class MHConfig:
    n_iter: int = 20000
    burn_in: int = 10000
    thin: int = 5
    gamma0: float = 0.1
    target_accept: float = 0.25
    adapt_window: int = 50
    prior_sd: float = PRIOR_SD
    # False keeps the weekly draw bank fixed; True resamples it at every decision
    refresh_draws: bool = False

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class ZipPosteriorDraws:
    draws: np.ndarray
    acceptance_rate: float | None
    gamma: float
    last_state: np.ndarray
    n_iter: int = 0
    burn_in: int = 0
    thin: int = 0
    warnings: list = field(default_factory=list)

    def split(self):
        """Return ``(alpha_b, beta_b, alpha_p, beta_p)`` arrays of shape (M, .)."""
        d = self.draws
        return d[:, :M_DIM], d[:, M_DIM:M_DIM + F_DIM], d[:, 7:7 + M_DIM], d[:, 7 + M_DIM:]


def run_mh(log_inputs, theta0, config: MHConfig, rng: np.random.Generator, gamma=None):
    """Random-walk MH on the ZIP log posterior defined by ``(Xb, Xp, R)``.

    The proposal is ``N(theta, gamma^2 I)``; ``gamma`` is adapted toward the
    target acceptance rate during burn-in and frozen afterwards.
    """
    Xb, Xp, R = (np.ascontiguousarray(x, dtype=float) for x in log_inputs)
    log_fact = np.array([math.lgamma(r + 1.0) for r in R])
    dim = Xb.shape[1] + Xp.shape[1]
    normals = rng.standard_normal((config.n_iter, dim))
    uniforms = rng.random(config.n_iter)
    gamma = config.gamma0 if gamma is None else gamma
    draws, last, gamma, rate = _mh_chain(
        np.asarray(theta0, dtype=float),
        float(gamma),
        Xb,
        Xp,
        R,
        log_fact,
        config.prior_sd**2,
        normals,
        uniforms,
        config.burn_in,
        config.thin,
        config.target_accept,
        config.adapt_window,
    )
    return draws, last, gamma, rate


def zip_design(history: History) -> np.ndarray:
    return np.hstack([history.m, history.action[:, None] * history.f])


def zip_prior_draws(n: int, rng: np.random.Generator, prior_sd: float = PRIOR_SD) -> ZipPosteriorDraws:
    draws = rng.normal(0.0, prior_sd, size=(n, ZIP_DIM))
    return ZipPosteriorDraws(draws, None, MHConfig.gamma0, np.zeros(ZIP_DIM))


def zip_mh_update(
    history: History,
    rng: np.random.Generator,
    config: MHConfig | None = None,
    previous: ZipPosteriorDraws | None = None,
) -> ZipPosteriorDraws:
    """Approximate posterior draws for the ZIP reward model given ``history``.

    With no data the posterior is the prior, which is sampled exactly.  The
    chain starts from the previous update's final state and step size.
    """
    config = config or MHConfig()
    if len(history) == 0:
        return zip_prior_draws(config.n_draws, rng, config.prior_sd)
    X = zip_design(history)
    theta0 = previous.last_state if previous is not None else np.zeros(ZIP_DIM)
    gamma = previous.gamma if previous is not None else None
    draws, last, gamma, rate = run_mh((X, X, history.reward), theta0, config, rng, gamma)
    notes = []
    if not 0.05 <= rate <= 0.7:
        notes.append(f"MH acceptance rate {rate:.3f} outside [0.05, 0.7]")
        log.warning(notes[-1])
    return ZipPosteriorDraws(draws, rate, gamma, last, config.n_iter, config.burn_in, config.thin, notes)


def zip_mean_reward(draws: ZipPosteriorDraws, m, f, action: int) -> np.ndarray:
    alpha_b, beta_b, alpha_p, beta_p = draws.split()
    m = np.asarray(m, dtype=float)
    f = np.asarray(f, dtype=float)
    brush = expit(-(alpha_b @ m + action * (beta_b @ f)))
    rate = np.exp(np.clip(alpha_p @ m + action * (beta_p @ f), -30, 30))
    return brush * rate


def zip_action_prob(draws: ZipPosteriorDraws, m, f) -> float:
    """Fraction of posterior draws whose mean reward is strictly higher under action 1."""
    return float(np.mean(zip_mean_reward(draws, m, f, 1) > zip_mean_reward(draws, m, f, 0)))


# --------------------------------------------------------------------------
# Algorithm instances used by the experiment harness


class BlrAlgorithm:
    name = "BLR"

    def __init__(self, eta2: float, prior_sd: float = PRIOR_SD, pi_min=PI_MIN, pi_max=PI_MAX):
        if eta2 <= 0:
            raise ConfigError("eta2 must be positive")
        self.eta2 = eta2
        self.prior = blr_prior(prior_sd)
        self.posterior = self.prior
        self.pi_min, self.pi_max = pi_min, pi_max
        clip_prob(0.5, pi_min, pi_max)

    def action_prob(self, f, m) -> float:
        return float(clip_prob(blr_action_prob(self.posterior, f), self.pi_min, self.pi_max))

    def update(self, history: History, rng: np.random.Generator) -> None:
        self.posterior = blr_update(history, self.eta2, self.prior)

    def snapshot(self) -> dict:
        return {"mean": self.posterior.mean.tolist(), "cov": self.posterior.cov.tolist()}


class ZipAlgorithm:
    name = "ZIP"

    def __init__(self, rng: np.random.Generator, config: MHConfig | None = None, pi_min=PI_MIN, pi_max=PI_MAX):
        self.config = config or MHConfig()
        self.pi_min, self.pi_max = pi_min, pi_max
        clip_prob(0.5, pi_min, pi_max)
        self.rng = rng
        self.posterior = zip_prior_draws(self.config.n_draws, rng, self.config.prior_sd)

    def action_prob(self, f, m) -> float:
        bank = self.posterior
        if self.config.refresh_draws:
            idx = self.rng.integers(0, len(bank.draws), size=len(bank.draws))
            bank = replace(bank, draws=bank.draws[idx])
        return float(clip_prob(zip_action_prob(bank, m, f), self.pi_min, self.pi_max))

    def update(self, history: History, rng: np.random.Generator) -> None:
        previous = self.posterior if self.posterior.acceptance_rate is not None else None
        self.posterior = zip_mh_update(history, rng, self.config, previous)

    def snapshot(self) -> dict:
        return {
            "acceptance_rate": self.posterior.acceptance_rate,
            "gamma": self.posterior.gamma,
            "draw_mean": self.posterior.draws.mean(axis=0).tolist(),
        }
