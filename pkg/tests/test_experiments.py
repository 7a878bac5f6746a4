import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptint.experiments import (
    AssignmentRecord,
    ExperimentDesign,
    adaptive_assign,
    assign,
    difference_in_means,
    estimate_effect,
    ipw_estimate,
    mrt_draw,
    mrt_randomize,
    read_log,
    write_log,
)
from adaptint.linear_bandits import LinearBanditState, PosteriorBelief


def rec(arm, p, unit="u", t=0):
    return AssignmentRecord(unit, None, t, arm, p)


# --- design -----------------------------------------------------------------


def test_design_validation():
    with pytest.raises(ValueError):
        ExperimentDesign(probabilities=(0.7, 0.7))
    with pytest.raises(ValueError):
        ExperimentDesign(mechanism="micro", treatment_prob=1.0)
    with pytest.raises(ValueError):
        ExperimentDesign(mechanism="micro", treatment_prob=[0.5, 0.0])
    with pytest.raises(ValueError):
        ExperimentDesign(mechanism="micro", arms=("a", "b", "c"), treatment_prob=0.5)
    with pytest.raises(ValueError):
        AssignmentRecord("u", None, 0, 0, 0.0)


# --- fixed assignment -----------------------------------------------------------


def test_degenerate_design():
    d = ExperimentDesign(probabilities=(1.0, 0.0))
    rng = np.random.default_rng(0)
    for i in range(50):
        r = assign(d, f"u{i}", None, rng)
        assert r.arm == 0 and r.propensity == 1.0


def test_cluster_members_share_arm():
    d = ExperimentDesign(unit="cluster")
    rng = np.random.default_rng(0)
    assert assign(d, "u1", "c1", rng).arm == assign(d, "u2", "c1", rng).arm
    with pytest.raises(ValueError):
        assign(d, "u3", None, rng)


def test_balanced_frequency():
    d = ExperimentDesign(probabilities=(0.5, 0.5))
    rng = np.random.default_rng(1)
    arms = [assign(d, str(i), None, rng).arm for i in range(10_000)]
    assert abs(np.mean(np.array(arms) == 0) - 0.5) <= 0.02


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_cluster_coherence_property(seed, n_clusters):
    d = ExperimentDesign(unit="cluster", probabilities=(0.3, 0.7))
    rng = np.random.default_rng(seed)
    seen = {}
    for u in range(200):
        c = f"c{rng.integers(n_clusters)}"
        r = assign(d, f"u{u}", c, rng)
        assert seen.setdefault(c, r.arm) == r.arm
        assert r.propensity == d.probabilities[r.arm]


def test_same_seed_same_sequence():
    def run():
        d = ExperimentDesign(probabilities=(0.2, 0.3, 0.5), arms=("a", "b", "c"))
        rng = np.random.default_rng(42)
        return [assign(d, str(i), None, rng).arm for i in range(100)]

    assert run() == run()


# --- adaptive -------------------------------------------------------------------


def test_adaptive_point_mass():
    b = PosteriorBelief(2, 2, precision=np.tile(1e14 * np.eye(2), (2, 1, 1)))
    b.eta = np.array([[1e14, 0.0], [0.0, 0.0]])
    for k in range(2):
        b._refresh(k)
    d = ExperimentDesign(mechanism="adaptive", arms=("a", "b"))
    r = adaptive_assign(d, b, [1.0, 0.0], np.random.default_rng(0), "u", 0, 10_000)
    assert r.arm == 0 and r.propensity >= 0.99


def test_adaptive_exchangeable_and_single():
    d = ExperimentDesign(mechanism="adaptive", arms=("a", "b", "c"))
    r = adaptive_assign(d, PosteriorBelief(3, 2), [1.0, 1.0], np.random.default_rng(0), n_samples=10_000)
    assert abs(r.propensity - 1 / 3) <= 0.02
    one = ExperimentDesign(mechanism="adaptive", arms=("a",))
    r = adaptive_assign(one, PosteriorBelief(1, 2), [1.0, 1.0], np.random.default_rng(0))
    assert r.arm == 0 and r.propensity == 1.0
    r = adaptive_assign(d, LinearBanditState(3, 2), [1.0, 1.0], np.random.default_rng(0))
    assert r.propensity == 1.0
    with pytest.raises(ValueError):
        adaptive_assign(d, PosteriorBelief(3, 2), [1.0], np.random.default_rng(0))
    with pytest.raises(ValueError):
        adaptive_assign(d, PosteriorBelief(2, 2), [1.0, 1.0], np.random.default_rng(0))


# --- micro-randomization ----------------------------------------------------------


def test_mrt_examples():
    d = ExperimentDesign(mechanism="micro", treatment_prob=0.5)
    rng = np.random.default_rng(0)
    recs = [mrt_randomize(d, "u", t, rng) for t in range(10_000)]
    assert abs(np.mean([r.arm for r in recs]) - 0.5) <= 0.02
    assert all(r.propensity == 0.5 for r in recs)
    near = ExperimentDesign(mechanism="micro", treatment_prob=0.999)
    recs = [mrt_randomize(near, "u", t, rng) for t in range(1000)]
    assert np.mean([r.arm for r in recs]) > 0.99
    assert all(r.propensity == pytest.approx(0.999) for r in recs if r.arm == 1)


def test_mrt_draw_matches_sequential():
    d = ExperimentDesign(mechanism="micro", treatment_prob=[0.2, 0.5, 0.7])
    A, P = mrt_draw(d, 40, 3, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    seq = np.array([[mrt_randomize(d, f"u{i}", t, rng).arm for t in range(3)] for i in range(40)])
    np.testing.assert_array_equal(A, seq)
    np.testing.assert_array_equal(P[0], [0.2, 0.5, 0.7])


# --- estimation -------------------------------------------------------------------


def test_identical_outcomes_give_zero():
    rows = [(rec(i % 2, 0.5), 3.0) for i in range(10)]
    assert estimate_effect(rows, "difference-in-means").estimate == 0.0
    assert estimate_effect(rows, "ipw").estimate == 0.0


def test_hand_ipw_example_is_exactly_zero():
    rows = [(rec(1, 0.5), 1.0), (rec(1, 0.5), 0.0), (rec(0, 0.5), 1.0), (rec(0, 0.5), 0.0)]
    est = estimate_effect(rows, "ipw")
    assert est.estimate == 0.0 and est.n == 4 and est.std_error >= 0


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=30))
def test_ipw_half_propensity_identity(pairs):
    treated = [1] * len(pairs) + [0] * len(pairs)
    rewards = [a for a, _ in pairs] + [b for _, b in pairs]
    n = len(rewards)
    est, _ = ipw_estimate(treated, rewards, np.full(n, 0.5))
    t_sum = sum(a for a, _ in pairs)
    c_sum = sum(b for _, b in pairs)
    assert est == pytest.approx(2 * (t_sum - c_sum) / n, abs=1e-9)
    dim, _ = difference_in_means(treated, rewards)
    assert est == pytest.approx(dim, abs=1e-9)


def test_estimator_errors():
    with pytest.raises(ValueError):
        estimate_effect([(rec(1, 0.5), 1.0)], "difference-in-means")
    with pytest.raises(ValueError):
        estimate_effect([(rec(1, 1.0), 1.0), (rec(0, 1.0), 0.0)], "ipw")
    with pytest.raises(ValueError):
        estimate_effect([(rec(0, 0.5), 1.0)], "bogus")


def test_pooled_standard_error():
    est, se = difference_in_means([1, 1, 0, 0], [1.0, 3.0, 0.0, 2.0])
    assert est == 1.0
    # pooled variance 2, se = sqrt(2 * (1/2 + 1/2))
    assert se == pytest.approx(np.sqrt(2.0))


def test_log_round_trip(tmp_path):
    rows = [(AssignmentRecord("u1", "c1", 0, 1, 0.25), 1.5), (AssignmentRecord("u2", None, 3, 0, 0.75), None)]
    write_log(tmp_path / "log.jsonl", rows)
    assert read_log(tmp_path / "log.jsonl") == rows
    (tmp_path / "bad.jsonl").write_text('{"unit": "u"}\n')
    with pytest.raises(ValueError, match="line 1"):
        read_log(tmp_path / "bad.jsonl")
