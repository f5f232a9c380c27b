"""Monte Carlo experiment harness: staggered recruitment, clustering, weekly updates, metrics."""
from __future__ import annotations

import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bandit import BlrAlgorithm, History, MHConfig, ZipAlgorithm
from .simulator import STUDY_LENGTH, Environment, UserProcess, sample_study_population

log = logging.getLogger(__name__)

CHECKPOINTS = (20, 40, 60, 80, 100, 120, 140)
ALGORITHMS = ("BLR", "ZIP")
CLUSTER_SIZES = (1, 4, "N")


@dataclass
class ExperimentConfig:
    variant: str = "S_Pop"
    algorithm: str = "BLR"
    cluster_size: int | str = 1
    n_users: int = 72
    recruit_per_week: int = 4
    horizon: int = STUDY_LENGTH
    update_every: int = 14
    checkpoints: Sequence[int] = CHECKPOINTS
    eta2: float = 1.0
    pi_min: float = 0.35
    pi_max: float = 0.75
    prior_sd: float = 5.0
    mh: MHConfig = field(default_factory=MHConfig)
    common_random_numbers: bool = True
    random_clusters: bool = False
    percentile_method: str = "linear"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.cluster_size not in (1, 4, "N", self.n_users):
            raise ValueError("cluster size must be 1, 4 or N")
        if self.n_users % self.recruit_per_week:
            raise ValueError("n_users must be a multiple of the weekly recruitment rate")

    @property
    def k(self) -> int:
        return self.n_users if self.cluster_size == "N" else int(self.cluster_size)

    @property
    def cell_label(self) -> str:
        k = "N" if self.k == self.n_users else str(self.k)
        return f"{self.algorithm} k={k}"


@dataclass
class TrialResult:
    rewards: np.ndarray  # (n_users, horizon), user-relative time
    probs: np.ndarray
    actions: np.ndarray
    base_indices: np.ndarray
    updates_per_cluster: list[int]
    seed: list[int]
    seconds: float
    warnings: list[str] = field(default_factory=list)


def _cell_key(config: ExperimentConfig) -> int:
    return zlib.crc32(f"{config.variant}|{config.algorithm}|{config.k}".encode())


def trial_streams(master_seed: int, trial: int, config: ExperimentConfig):
    """Independent generator streams for one trial.

    With common random numbers the population, environment noise and action
    draws are shared by every algorithm cell for the same trial index.
    """
    entropy = [master_seed, trial]
    if not config.common_random_numbers:
        entropy.append(_cell_key(config))
    root = np.random.SeedSequence(entropy)
    pop_ss, env_ss, act_ss, alg_ss, cluster_ss = root.spawn(5)
    n = config.n_users
    return {
        "seed": entropy,
        "population": np.random.default_rng(pop_ss),
        "env": [np.random.default_rng(s) for s in env_ss.spawn(n)],
        "action": [np.random.default_rng(s) for s in act_ss.spawn(n)],
        "algorithm": [np.random.default_rng(s) for s in alg_ss.spawn(n)],
        "clusters": np.random.default_rng(cluster_ss),
    }


def form_clusters(n_users: int, k: int, rng: np.random.Generator | None = None) -> list[list[int]]:
    """Consecutive groups of ``k`` users in entry order, or random groups when ``rng`` is given."""
    order = np.arange(n_users) if rng is None else rng.permutation(n_users)
    return [sorted(int(i) for i in order[s:s + k]) for s in range(0, n_users, k)]


def _make_algorithm(config: ExperimentConfig, rng):
    if config.algorithm == "BLR":
        return BlrAlgorithm(config.eta2, config.prior_sd, config.pi_min, config.pi_max)
    return ZipAlgorithm(rng, config.mh, config.pi_min, config.pi_max)


def run_trial(config: ExperimentConfig, env: Environment, master_seed: int = 0, trial: int = 0) -> TrialResult:
    """Simulate one study: weekly cohorts enter, each cluster runs its own algorithm.

    Updates happen at the end of every calendar week in which a cluster had
    active users, pooling the full history of all its members.  Clusters
    formed from a single cohort therefore update at cluster-relative
    ``t = 14, 28, ..., 140``.
    """
    started = time.perf_counter()
    streams = trial_streams(master_seed, trial, config)
    n, horizon = config.n_users, config.horizon
    users = sample_study_population(env, n, streams["population"])
    procs = [UserProcess(env, user, horizon) for user in users]
    entry = np.array([(i // config.recruit_per_week) * config.update_every for i in range(n)])

    cluster_rng = streams["clusters"] if config.random_clusters else None
    clusters = form_clusters(n, config.k, cluster_rng)
    # each cluster's algorithm randomness comes from its first member's stream
    algs = [_make_algorithm(config, streams["algorithm"][members[0]]) for members in clusters]
    histories: list[list[tuple]] = [[] for _ in clusters]
    n_updates = [0] * len(clusters)

    probs = np.zeros((n, horizon))
    actions = np.zeros((n, horizon), dtype=int)
    notes: list[str] = []
    total_slots = int(entry.max()) + horizon
    for slot in range(1, total_slots + 1):
        active_any = [False] * len(clusters)
        for c, members in enumerate(clusters):
            alg = algs[c]
            for i in members:
                if not entry[i] < slot <= entry[i] + horizon:
                    continue
                active_any[c] = True
                proc = procs[i]
                state = proc.state()
                t = proc.t
                prob = alg.action_prob(state.f, state.m)
                action = int(streams["action"][i].random() < prob)
                reward = proc.act(state, action, streams["env"][i])
                probs[i, t - 1] = prob
                actions[i, t - 1] = action
                histories[c].append((state.f, state.m, action, prob, reward))
        if slot % config.update_every == 0:
            for c, members in enumerate(clusters):
                if active_any[c] and histories[c]:
                    algs[c].update(History.from_rows(histories[c]), streams["algorithm"][members[0]])
                    n_updates[c] += 1
                    if config.algorithm == "ZIP":
                        notes.extend(algs[c].posterior.warnings)

    rewards = np.array([p.rewards for p in procs], dtype=float)
    return TrialResult(
        rewards=rewards,
        probs=probs,
        actions=actions,
        base_indices=np.array([u.base_index for u in users]),
        updates_per_cluster=n_updates,
        seed=streams["seed"],
        seconds=time.perf_counter() - started,
        warnings=notes,
    )


# --------------------------------------------------------------------------
# metrics


def trial_metrics(rewards: np.ndarray, checkpoints: Sequence[int] = CHECKPOINTS, percentile_method="linear") -> dict:
    """Average and 25th-percentile of users' time-averaged rewards, plus running averages."""
    rewards = np.asarray(rewards, dtype=float)
    user_avg = rewards.mean(axis=1)
    out = {
        "average": float(user_avg.mean()),
        "p25": float(np.percentile(user_avg, 25, method=percentile_method)),
    }
    for t0 in checkpoints:
        if t0 <= rewards.shape[1]:
            out[f"avg_t{t0}"] = float(rewards[:, :t0].mean(axis=1).mean())
    return out


def summarize(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and standard error of the mean; SEM is undefined for a single trial."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("no trials to summarize")
    sem = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else None
    return float(arr.mean()), sem


def metrics(results: Sequence[TrialResult], checkpoints: Sequence[int] = CHECKPOINTS, percentile_method="linear") -> dict:
    if not results:
        raise ValueError("metrics needs at least one trial")
    per_trial = [trial_metrics(r.rewards, checkpoints, percentile_method) for r in results]
    report = {"per_trial": per_trial, "n_trials": len(results)}
    for key in per_trial[0]:
        mean, sem = summarize([m[key] for m in per_trial])
        report[key] = {"mean": mean, "sem": sem}
    return report


# --------------------------------------------------------------------------
# experiment grid


@dataclass
class CellResult:
    config: ExperimentConfig
    report: dict | None
    error: str | None = None
    seconds: float = 0.0

    def row(self) -> dict:
        base = {"variant": self.config.variant, "algorithm": self.config.algorithm, "k": self.config.cell_label.split("=")[1]}
        if self.report is None:
            return {**base, "error": self.error}
        out = dict(base)
        for key, val in self.report.items():
            if isinstance(val, dict) and "mean" in val:
                out[f"{key}_mean"] = val["mean"]
                out[f"{key}_sem"] = val["sem"]
        out["n_trials"] = self.report["n_trials"]
        return out


def default_grid(variants=("S_Het", "NS_Het", "S_Pop", "NS_Pop"), **overrides) -> list[ExperimentConfig]:
    grid = []
    for variant in variants:
        for algorithm in ALGORITHMS:
            for k in CLUSTER_SIZES:
                grid.append(ExperimentConfig(variant=variant, algorithm=algorithm, cluster_size=k, **overrides))
    return grid


def _trial_job(args):
    config, env, master_seed, trial = args
    return run_trial(config, env, master_seed, trial)


def run_cell(config: ExperimentConfig, env: Environment, trials: int, master_seed: int = 0, workers: int = 1) -> CellResult:
    started = time.perf_counter()
    jobs = [(config, env, master_seed, trial) for trial in range(trials)]
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_trial_job, jobs))
        else:
            results = [_trial_job(job) for job in jobs]
    except Exception as exc:  # one failed trial aborts the cell
        log.exception("cell %s / %s failed", config.variant, config.cell_label)
        return CellResult(config, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - started)
    return CellResult(config, metrics(results, config.checkpoints, config.percentile_method), seconds=time.perf_counter() - started)


def run_experiment(
    grid: Sequence[ExperimentConfig],
    envs: Mapping[str, Environment],
    trials: int,
    master_seed: int = 0,
    workers: int = 1,
    progress=None,
) -> list[CellResult]:
    """Run every cell of ``grid`` for ``trials`` Monte Carlo trials."""
    cells = []
    for config in grid:
        cell = run_cell(config, envs[config.variant], trials, master_seed, workers)
        if progress is not None:
            progress(cell)
        cells.append(cell)
    return cells


def config_to_dict(config: ExperimentConfig) -> dict:
    out = asdict(config)
    out["checkpoints"] = list(config.checkpoints)
    return out
