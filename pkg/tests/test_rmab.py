import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptint import rmab
from adaptint.rmab import (
    DynamicsBelief,
    RmabArm,
    TwoStateMdp,
    allocate,
    check_indexability,
    equitable_allocate,
    random_allocate,
    solve_subsidy_mdp,
    update_dynamics,
    value_iteration,
    whittle_index,
    whittle_indices,
)
from oracles import grid_scan_index, grid_vi

DERIVED = TwoStateMdp.from_probs(passive=(0.1, 0.5), active=(0.6, 0.9))
# passive index values from the step-1e-4 grid scan oracle, frozen
DERIVED_GRID = {0: 0.7032, 1: 0.4932}

prob = st.floats(0.01, 0.99)


def invariant_mdp(p01=0.3, p11=0.7):
    return TwoStateMdp.from_probs((p01, p11), (p01, p11))


# --- MDP and value iteration -------------------------------------------------


def test_mdp_validation():
    with pytest.raises(ValueError):
        TwoStateMdp(np.full((2, 2, 2), 0.6))
    with pytest.raises(ValueError):
        TwoStateMdp.from_probs((0.1, 0.2), (0.3, 0.4), discount=1.0)
    assert DERIVED == TwoStateMdp.from_probs((0.1, 0.5), (0.6, 0.9))
    assert hash(DERIVED) == hash(TwoStateMdp.from_probs((0.1, 0.5), (0.6, 0.9)))


def test_value_iteration_examples():
    _, flags = value_iteration(DERIVED, 1e6)
    assert flags.tolist() == [True, True]
    _, flags = value_iteration(DERIVED, -1e6)
    assert flags.tolist() == [False, False]
    V, flags = value_iteration(invariant_mdp(), 0.0)
    assert flags.tolist() == [True, True]


@settings(max_examples=40)
@given(prob, prob, prob, prob, st.floats(-15, 15), st.floats(0.5, 0.95))
def test_value_iteration_matches_exact_solver(a, b, c, d, lam, beta):
    mdp = TwoStateMdp.from_probs((a, b), (c, d), discount=beta)
    V, _ = value_iteration(mdp, lam, tolerance=1e-11)
    Q = solve_subsidy_mdp(mdp.P, mdp.rewards, beta, lam)
    np.testing.assert_allclose(V, Q.max(axis=-1), atol=1e-8)
    # Bellman residual
    V2, _ = value_iteration(mdp, lam + 0.5, tolerance=1e-11)
    assert np.all(V2 >= V - 1e-9)


def test_solver_against_grid_oracle():
    lams = np.linspace(-5, 5, 41)
    Q = solve_subsidy_mdp(DERIVED.P, DERIVED.rewards, 0.9, lams)
    np.testing.assert_allclose(Q, grid_vi(DERIVED.P, DERIVED.rewards, 0.9, lams), atol=1e-9)


# --- Whittle index -----------------------------------------------------------


def test_action_invariant_index_is_zero():
    for p in [(0.3, 0.7), (0.0, 1.0), (0.5, 0.5), (0.9, 0.1)]:
        mdp = invariant_mdp(*p)
        for s in (0, 1):
            assert abs(whittle_index(mdp, s)) <= 1e-6


def test_derived_index_matches_frozen_grid():
    for s in (0, 1):
        assert whittle_index(DERIVED, s) == pytest.approx(DERIVED_GRID[s], abs=1e-3)


@settings(max_examples=30)
@given(prob, prob, prob, prob, st.floats(0.5, 0.95))
def test_index_indifference(a, b, c, d, beta):
    mdp = TwoStateMdp.from_probs((a, b), (c, d), discount=beta)
    for s in (0, 1):
        lam = whittle_index(mdp, s)
        Q = solve_subsidy_mdp(mdp.P, mdp.rewards, beta, lam)
        assert abs(Q[s, 0] - Q[s, 1]) <= 1e-5


def test_index_monotone_in_active_recovery():
    sweep = np.linspace(0.15, 0.95, 17)
    idx = [whittle_index(TwoStateMdp.from_probs((0.1, 0.5), (p, 0.9)), 0) for p in sweep]
    assert np.all(np.diff(idx) >= -1e-9)


def test_vectorized_indices_match_scalar():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(12, 2, 2))
    P = np.stack([1 - p, p], axis=-1)
    states = rng.integers(0, 2, 12)
    vec = whittle_indices(P, states)
    for i in range(12):
        scalar = whittle_index(TwoStateMdp(P[i]), int(states[i]))
        assert vec[i] == pytest.approx(scalar, abs=1e-12)


def test_bracket_exhausted(monkeypatch):
    # a bracket narrower than the index leaves no sign change
    monkeypatch.setattr(rmab, "_bracket", lambda rewards, discount: np.full(np.shape(discount), 0.01))
    with pytest.raises(rmab.BracketError, match="bracket exhausted"):
        whittle_indices(DERIVED.P[None], [0])


@settings(max_examples=25, deadline=None)
@given(prob, prob, prob, prob, st.floats(0.3, 0.95), st.floats(-2, 2), st.floats(-2, 2))
def test_indexability_matches_dense_grid(a, b, c, d, beta, r0, r1):
    mdp = TwoStateMdp.from_probs((a, b), (c, d), rewards=(r0, r1), discount=beta)
    bound = 2 * max(abs(r1 - r0), 1.0) / (1 - beta)
    lams = np.arange(-bound, bound + 0.5e-2, 1e-2)
    Q = grid_vi(mdp.P, mdp.rewards, beta, lams, tol=1e-11)
    passive = Q[..., 0] - Q[..., 1] >= -1e-6
    dense = not (passive[:-1] & ~passive[1:]).any()
    assert check_indexability(mdp, resolution=1e-2) == dense


def test_indexability_examples():
    assert check_indexability(DERIVED)
    assert check_indexability(invariant_mdp())
    with pytest.raises(ValueError, match="resolution too coarse"):
        check_indexability(DERIVED, resolution=100.0)


# --- dynamics belief ---------------------------------------------------------


def test_update_dynamics_examples():
    b = DynamicsBelief()
    assert np.all(b.mean() == 0.5)
    update_dynamics(b, 1, 0, 1)
    assert b.alpha[1, 0] == 2 and b.beta[1, 0] == 1
    assert b.mean()[1, 0] == pytest.approx(2 / 3)
    rng = np.random.default_rng(0)
    c = DynamicsBelief()
    for _ in range(1000):
        update_dynamics(c, 0, 1, int(rng.random() < 0.7))
    assert abs(c.mean()[0, 1] - 0.7) <= 0.05
    assert c.alpha.sum() + c.beta.sum() == 8 + 1000
    with pytest.raises(ValueError):
        update_dynamics(c, 2, 0, 1)


# --- allocation --------------------------------------------------------------


def cohort(n, seed=0, groups=("A", "B")):
    rng = np.random.default_rng(seed)
    arms = []
    for i in range(n):
        pp = rng.uniform(0.05, 0.6, 2)
        pa = np.minimum(pp + rng.uniform(0.05, 0.4, 2), 0.99)
        arms.append(RmabArm(f"a{i:03d}", int(rng.integers(2)), TwoStateMdp.from_probs(pp, pa), groups[i % len(groups)]))
    return arms


def test_allocate_budget_edges():
    arms = cohort(5)
    assert len(allocate(arms, 10).acted) == 5
    assert allocate(arms, 0).acted == ()
    with pytest.raises(ValueError):
        allocate(arms, -1)


def test_allocate_picks_max_index_arm():
    mdps = [
        TwoStateMdp.from_probs((0.1, 0.5), (0.6, 0.9)),
        TwoStateMdp.from_probs((0.1, 0.5), (0.3, 0.6)),
        TwoStateMdp.from_probs((0.1, 0.5), (0.2, 0.55)),
    ]
    arms = [RmabArm(i, 0, m) for i, m in enumerate(mdps)]
    oracle = [grid_scan_index(m.P, step=1e-3)[0] for m in mdps]
    assert oracle[0] > oracle[1] > oracle[2]
    alloc = allocate(arms, 1)
    assert alloc.acted == (0,)
    assert alloc.indexable is True


def test_allocate_ties_by_id_and_determinism():
    mdp = TwoStateMdp.from_probs((0.1, 0.5), (0.6, 0.9))
    arms = [RmabArm(name, 0, mdp) for name in ["c", "a", "b"]]
    assert allocate(arms, 2).acted == ("a", "b")
    learn = [RmabArm(i, i % 2, DynamicsBelief()) for i in range(6)]
    a1 = allocate(learn, 3, np.random.default_rng(4))
    a2 = allocate(learn, 3, np.random.default_rng(4))
    assert a1 == a2 and a1.indexable is None
    with pytest.raises(ValueError):
        allocate(learn, 3)


def test_equitable_examples():
    arms = cohort(8)
    alloc = equitable_allocate(arms, 4, 0.25)
    assert all(c >= 1 for c in alloc.group_counts.values())
    for k in range(0, 9):
        assert equitable_allocate(arms, k, 0.0).acted == allocate(arms, k).acted
    with pytest.raises(ValueError, match="infeasible floors"):
        equitable_allocate(arms, 4, 0.75)
    with pytest.raises(ValueError, match="infeasible floors"):
        equitable_allocate(cohort(3), 4, {"A": 0.0, "B": 0.5})


@settings(max_examples=60)
@given(st.integers(1, 12), st.integers(0, 14), st.floats(0.0, 0.5), st.integers(0, 10_000))
def test_budget_feasibility(n, k, f, seed):
    arms = cohort(n, seed, groups=("A", "B", "C"))
    assert len(allocate(arms, k).acted) == min(k, n)
    try:
        alloc = equitable_allocate(arms, k, f)
    except ValueError as exc:
        assert "infeasible" in str(exc)
        return
    assert len(alloc.acted) == min(k, n)
    floor = int(np.floor(f * k + 1e-12))
    assert all(c >= floor for c in alloc.group_counts.values())
    assert len(set(alloc.acted)) == len(alloc.acted)


def test_random_allocate():
    arms = cohort(10)
    alloc = random_allocate(arms, 4, np.random.default_rng(0))
    assert len(alloc.acted) == 4
    assert all(np.isnan(v) for v in alloc.indices.values())
