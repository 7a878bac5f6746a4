import numpy as np
import pytest

from adaptint.rmab import TwoStateMdp
from adaptint.simulator import (
    BanditEpisode,
    BanditScenario,
    LinearEnvSpec,
    OraclePolicy,
    RmabEnvSpec,
    RmabScenario,
    UniformRandomPolicy,
    make_policy,
    make_survival_cohort,
    replicate,
    run_bandit_episode,
    run_rmab_episode,
)
from oracles import passive_stationary_good

THETA = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, -0.5], [-0.5, 0.5, 1.0]])


def test_oracle_has_zero_regret():
    spec = LinearEnvSpec(THETA, horizon=300)
    res = run_bandit_episode(spec, OraclePolicy(THETA), seed=1)
    assert res.cumulative_regret[-1] == 0.0 and len(res.actions) == 300


def test_identical_arms_zero_regret_and_coupled_streams():
    theta = np.tile([0.3, -0.2], (3, 1))
    spec = LinearEnvSpec(theta, horizon=200)
    a = run_bandit_episode(spec, UniformRandomPolicy(3), seed=5)
    b = run_bandit_episode(spec, make_policy("linucb", spec), seed=5)
    assert a.cumulative_regret[-1] == 0.0 == b.cumulative_regret[-1]
    # policy randomness never shifts the environment stream
    assert a.rewards == b.rewards


def test_random_policy_closed_form_two_arms():
    spec = LinearEnvSpec([[1.0], [-1.0]], context="ones", horizon=1000)
    regrets = [run_bandit_episode(spec, UniformRandomPolicy(2), seed=s).cumulative_regret[-1] for s in range(20)]
    # gap 2, half the rounds pick the bad arm
    assert abs(np.mean(regrets) - 1000.0) <= 100.0


def test_cumulative_regret_non_decreasing():
    spec = LinearEnvSpec(THETA, horizon=400)
    for name in ("linucb", "thompson", "ekf", "random"):
        res = run_bandit_episode(spec, make_policy(name, spec), seed=3)
        assert np.all(np.diff(res.cumulative_regret) >= 0)
        assert len(res.regret) == 400


def test_dimension_mismatch():
    spec = LinearEnvSpec(THETA)
    with pytest.raises(ValueError):
        run_bandit_episode(spec, make_policy("linucb", LinearEnvSpec(np.zeros((3, 2)))))
    with pytest.raises(ValueError):
        LinearEnvSpec([[np.nan]])
    with pytest.raises(ValueError):
        LinearEnvSpec([[1.0]], noise_sd=-1)


def test_episode_resume_is_exact():
    spec = LinearEnvSpec(THETA, horizon=300)
    full = BanditEpisode(spec, make_policy("thompson", spec), 9).run()
    half = BanditEpisode(spec, make_policy("thompson", spec), 9)
    half.run(120)
    resumed = BanditEpisode.from_checkpoint(spec, half.checkpoint_state())
    assert resumed.run().actions == full.actions


# --- restless cohort -------------------------------------------------------------


def cohort_spec(n=10, budget=3, horizon=50, seed=0):
    mdp = TwoStateMdp.from_probs(passive=(0.1, 0.6), active=(0.5, 0.9))
    return RmabEnvSpec([mdp] * n, budget, horizon, [i % 2 for i in range(n)], seed=seed)


def test_full_budget_dominates_zero_budget():
    for seed in range(5):
        full = run_rmab_episode(cohort_spec(budget=10), "whittle", seed)
        none = run_rmab_episode(cohort_spec(budget=0), "whittle", seed)
        assert full.total_reward >= none.total_reward
        assert all(len(a) == 0 for a in none.actions)


def test_zero_budget_matches_passive_stationary_law():
    spec = cohort_spec(n=10, budget=0, horizon=60)
    burn = 20
    means = [np.mean(run_rmab_episode(spec, "random", s).rewards[burn:]) / 10 for s in range(200)]
    target = passive_stationary_good(0.1, 0.6)
    se = np.std(means, ddof=1) / np.sqrt(len(means))
    assert abs(np.mean(means) - target) <= 4 * se + 1e-3


def test_horizon_zero_and_allocations():
    res = run_rmab_episode(cohort_spec(horizon=0), "whittle", 0)
    assert res.rewards == [] and res.actions == []
    res = run_rmab_episode(cohort_spec(horizon=5), "equitable", 0, equity=0.3, keep_allocations=True)
    assert len(res.allocations) == 5 and all(len(a.acted) == 3 for a in res.allocations)
    with pytest.raises(ValueError):
        run_rmab_episode(cohort_spec(), "equitable", 0)
    with pytest.raises(ValueError):
        RmabEnvSpec(cohort_spec().mdps, 11, 5, [0] * 10)


def test_learned_allocator_updates_beliefs_deterministically():
    a = run_rmab_episode(cohort_spec(horizon=30), "whittle-learned", 4)
    b = run_rmab_episode(cohort_spec(horizon=30), "whittle-learned", 4)
    assert a.actions == b.actions and a.rewards == b.rewards


# --- replication ------------------------------------------------------------------


def test_replicate_single_and_deterministic():
    spec = LinearEnvSpec(THETA, horizon=100)
    scen = BanditScenario("s", spec, {"lin": {"type": "linucb"}, "rnd": {"type": "random"}}, record_every=10)
    one = replicate(scen, 1, 7)
    assert one.scalars("mean") == one.scalars(0)
    assert one.scalars("sd")["lin/cumulative_regret"] == 0.0
    assert replicate(scen, 3, 7).rows == replicate(scen, 3, 7).rows
    series = one.series(0, "lin/cumulative_regret")
    assert [r for r, _ in series] == list(range(10, 101, 10))


def test_replicate_random_band():
    spec = LinearEnvSpec([[1.0], [-1.0]], context="ones", horizon=1000)
    table = replicate(BanditScenario("r", spec, {"random": {}}), 20, 0)
    assert abs(table.scalars("mean")["random/cumulative_regret"] - 1000.0) <= 100.0


def test_rmab_scenario_metrics():
    scen = RmabScenario("c", cohort_spec(horizon=10), ["whittle", "random"], record_every=5)
    table = replicate(scen, 2, 0)
    keys = table.scalars("mean")
    assert {"whittle/total_reward", "random/total_reward", "whittle/group_mean_reward/all"} <= set(keys)
    with pytest.raises(ValueError):
        replicate(scen, 0, 0)


# --- survival cohorts ---------------------------------------------------------------


def test_survival_cohort_examples():
    recs = make_survival_cohort(300, [0.1], [8.0] * 4, censoring_rate=0.0, seed=0)
    assert all(r.c == 0 for r in recs)
    assert all(r.t == 1.0 for r in recs)
    mixed = make_survival_cohort(300, [0.1], [-1.0] * 4, censoring_rate=0.5, seed=0)
    assert any(r.c == 1 for r in mixed) and all(0 < r.t <= r.M for r in mixed)
    again = make_survival_cohort(300, [0.1], [-1.0] * 4, censoring_rate=0.5, seed=0)
    assert [(r.t, r.c) for r in mixed] == [(r.t, r.c) for r in again]
    with pytest.raises(ValueError):
        make_survival_cohort(10, [0.1], [0.0], censoring_rate=1.0)
