import numpy as np
import pytest

from brushsim import harness
from brushsim.bandit import MHConfig
from brushsim.harness import (
    CellResult,
    ExperimentConfig,
    default_grid,
    form_clusters,
    metrics,
    run_cell,
    run_experiment,
    run_trial,
    trial_metrics,
)
from brushsim.simulator import sample_study_population
from brushsim.synthetic import constant_environment, synthetic_environment
from oracles import percentile_linear

TINY_MH = MHConfig(n_iter=600, burn_in=300, thin=3)


@pytest.fixture(scope="module")
def env():
    return synthetic_environment("NS_Het", 16, seed=1)


def small(**kw):
    kw.setdefault("n_users", 12)
    kw.setdefault("eta2", 3000.0)
    return ExperimentConfig(**kw)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(algorithm="UCB")
    with pytest.raises(ValueError):
        ExperimentConfig(cluster_size=3)
    with pytest.raises(ValueError):
        ExperimentConfig(n_users=10)
    assert ExperimentConfig(cluster_size="N").k == 72
    assert ExperimentConfig(cluster_size="N").cell_label == "BLR k=N"


def test_clusters_follow_entry_order():
    assert form_clusters(8, 4) == [[0, 1, 2, 3], [4, 5, 6, 7]]
    assert form_clusters(3, 1) == [[0], [1], [2]]
    shuffled = form_clusters(8, 4, np.random.default_rng(0))
    assert sorted(i for c in shuffled for i in c) == list(range(8))


@pytest.mark.parametrize("algorithm", ["BLR", "ZIP"])
@pytest.mark.parametrize("k", [1, "N"])
def test_constant_environment_gives_exact_metrics(algorithm, k):
    cfg = small(variant="S_Pop", algorithm=algorithm, cluster_size=k, mh=TINY_MH)
    result = run_trial(cfg, constant_environment("S_Pop", 120), 0, 0)
    assert np.all(result.rewards == 120)
    m = trial_metrics(result.rewards)
    assert m["average"] == 120 and m["p25"] == 120
    assert all(m[f"avg_t{t}"] == 120 for t in harness.CHECKPOINTS)


def test_p25_toy_and_average_identity():
    rewards = np.repeat(np.arange(1, 73, dtype=float)[:, None], 140, axis=1)
    m = trial_metrics(rewards)
    assert m["p25"] == 18.75 == percentile_linear(range(1, 73), 25)
    rng = np.random.default_rng(0)
    noisy = rng.integers(0, 181, size=(72, 140)).astype(float)
    assert trial_metrics(noisy)["average"] == pytest.approx(noisy.mean())
    assert trial_metrics(noisy, (20,))["avg_t20"] == pytest.approx(noisy[:, :20].mean())


def test_single_trial_sem_is_absent(env):
    report = metrics([run_trial(small(), env, 0, 0)])
    assert report["n_trials"] == 1 and report["average"]["sem"] is None
    row = CellResult(small(), report).row()
    assert row["average_sem"] is None and row["k"] == "1"


def test_update_schedule(env):
    for k, n_clusters in [(1, 72), (4, 18)]:
        result = run_trial(ExperimentConfig(variant="NS_Het", cluster_size=k, eta2=3000.0), env, 0, 0)
        assert len(result.updates_per_cluster) == n_clusters
        assert set(result.updates_per_cluster) == {10}
    full = run_trial(ExperimentConfig(variant="NS_Het", cluster_size="N", eta2=3000.0), env, 0, 0)
    # one instance, updated every calendar week while anyone is enrolled: 378 slots / 14
    assert full.updates_per_cluster == [27]


def test_probabilities_before_first_update_are_one_half(env):
    result = run_trial(small(variant="NS_Het"), env, 0, 0)
    assert np.all(result.probs[:, :14] == 0.5)
    assert np.all((result.probs >= 0.35) & (result.probs <= 0.75))
    zip_result = run_trial(small(variant="NS_Het", algorithm="ZIP", cluster_size=4, mh=TINY_MH), env, 0, 0)
    assert np.all((zip_result.probs >= 0.35) & (zip_result.probs <= 0.75))
    assert np.all((zip_result.rewards >= 0) & (zip_result.rewards <= 180))


def test_trials_are_deterministic(env):
    cfg = small(variant="NS_Het", cluster_size=4)
    a, b = run_trial(cfg, env, 7, 3), run_trial(cfg, env, 7, 3)
    np.testing.assert_array_equal(a.rewards, b.rewards)
    np.testing.assert_array_equal(a.probs, b.probs)
    c = run_trial(cfg, env, 7, 4)
    assert not np.array_equal(a.rewards, c.rewards)


def test_common_random_numbers_share_the_population(env):
    blr = run_trial(small(variant="NS_Het", cluster_size=1), env, 3, 0)
    zipped = run_trial(small(variant="NS_Het", algorithm="ZIP", cluster_size=1, mh=TINY_MH), env, 3, 0)
    np.testing.assert_array_equal(blr.base_indices, zipped.base_indices)
    independent = run_trial(small(variant="NS_Het", algorithm="ZIP", common_random_numbers=False, mh=TINY_MH), env, 3, 0)
    assert not np.array_equal(blr.base_indices, independent.base_indices)


def test_no_pooling_isolates_users(env, monkeypatch):
    cfg = small(variant="NS_Het", cluster_size=1)
    baseline = run_trial(cfg, env, 0, 0)
    real = harness.trial_streams

    def perturbed(master_seed, trial, config):
        streams = real(master_seed, trial, config)
        streams["env"][5] = np.random.default_rng(999)
        return streams

    monkeypatch.setattr(harness, "trial_streams", perturbed)
    changed = run_trial(cfg, env, 0, 0)
    others = [i for i in range(12) if i != 5]
    np.testing.assert_array_equal(baseline.rewards[others], changed.rewards[others])
    np.testing.assert_array_equal(baseline.probs[others], changed.probs[others])
    assert not np.array_equal(baseline.rewards[5], changed.rewards[5])
    # contrast: under full pooling the same perturbation reaches other users
    pooled_changed = run_trial(small(variant="NS_Het", cluster_size="N"), env, 0, 0)
    monkeypatch.setattr(harness, "trial_streams", real)
    pooled = run_trial(small(variant="NS_Het", cluster_size="N"), env, 0, 0)
    assert not np.array_equal(pooled.probs[others], pooled_changed.probs[others])


def test_base_users_drawn_uniformly(env):
    counts = np.zeros(len(env.models))
    rng = np.random.default_rng(0)
    for _ in range(400):
        for u in sample_study_population(env, 72, rng):
            counts[u.base_index] += 1
    expected = counts.sum() / len(counts)
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 37.7  # 99.9% point of chi-square with 15 degrees of freedom


def test_default_grid_shape():
    grid = default_grid()
    assert len(grid) == 24
    assert {(c.algorithm, c.cell_label.split("=")[1]) for c in grid} == {
        (a, k) for a in ("BLR", "ZIP") for k in ("1", "4", "N")
    }


def test_cell_failures_are_recorded(env):
    class Broken:
        variant = env.variant
        models = env.models

        def __getattr__(self, name):
            raise RuntimeError("broken environment")

    cell = run_cell(small(variant="NS_Het"), Broken(), trials=2)
    assert cell.report is None and "broken environment" in cell.error
    assert cell.row()["error"] == cell.error


def test_experiment_tables_are_reproducible(env):
    grid = [small(variant="NS_Het", cluster_size=k) for k in (1, 4)]
    seen = []
    a = run_experiment(grid, {"NS_Het": env}, trials=2, master_seed=11, progress=seen.append)
    b = run_experiment(grid, {"NS_Het": env}, trials=2, master_seed=11)
    assert len(seen) == 2
    assert [c.row() for c in a] == [c.row() for c in b]
    assert a[0].row()["average_sem"] is not None


def test_runaway_duration_feedback_does_not_break_blr():
    from brushsim.distributions import ModelClass, UserEnvModel
    from brushsim.effects import ClassEffects
    from brushsim.simulator import Environment

    # a large positive slope on the prior-day duration drives the rate to the clamp
    model = UserEnvModel(ModelClass.ZIP, np.array([-2.0, 0, 0, 0, 0]), np.array([9.0, 0, 3.0, 0, 0]), None)
    env = Environment("S_Pop", [model], {ModelClass.ZIP: ClassEffects(0.0, 0.7)})
    res = run_trial(small(n_users=4, cluster_size=1), env, 0, 0)
    assert np.all(np.isfinite(res.probs)) and np.all((res.rewards >= 0) & (res.rewards <= 180))
    assert res.rewards.max() == 180
