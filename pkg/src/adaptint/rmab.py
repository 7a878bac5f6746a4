"""Restless bandits with two-state arms: Whittle indices and budgeted allocation.

Each arm is a two-state MDP with a passive (0) and an active (1) action. The
Whittle index of a state is the smallest subsidy for resting that makes the
passive action weakly optimal there; each round the ``k`` arms with the
largest indices at their current states are acted on.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "TwoStateMdp",
    "DynamicsBelief",
    "RmabArm",
    "Allocation",
    "BracketError",
    "value_iteration",
    "solve_subsidy_mdp",
    "whittle_index",
    "whittle_indices",
    "check_indexability",
    "allocate",
    "equitable_allocate",
    "random_allocate",
    "update_dynamics",
]

PASSIVE, ACTIVE = 0, 1
# passive counts as optimal when it trails active by no more than this
_WEAK_MARGIN = 1e-9


class BracketError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TwoStateMdp:
    """Transition law ``P[a, s, s']`` with state rewards and a discount factor."""

    P: np.ndarray
    rewards: tuple[float, float] = (0.0, 1.0)
    discount: float = 0.9

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.shape != (2, 2, 2):
            raise ValueError(f"transition array must have shape (2, 2, 2), got {P.shape}")
        if np.any(P < 0) or np.any(P > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-12):
            raise ValueError("transition rows must sum to 1")
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "rewards", (float(self.rewards[0]), float(self.rewards[1])))

    @classmethod
    def from_probs(cls, passive, active, rewards=(0.0, 1.0), discount: float = 0.9) -> "TwoStateMdp":
        """Build from ``P(s'=1 | s)`` pairs ``(p_from_0, p_from_1)`` for each action."""
        P = np.empty((2, 2, 2))
        for a, probs in enumerate((passive, active)):
            for s, p in enumerate(probs):
                P[a, s] = (1.0 - p, p)
        return cls(P, rewards, discount)

    @property
    def span(self) -> float:
        return abs(self.rewards[1] - self.rewards[0])

    def key(self) -> tuple:
        return (tuple(self.P.ravel().tolist()), self.rewards, self.discount)

    def __eq__(self, other):
        return isinstance(other, TwoStateMdp) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def to_dict(self) -> dict:
        return {"P": self.P.tolist(), "rewards": list(self.rewards), "discount": self.discount}


def _bellman_q(P, rewards, discount, subsidy, V):
    # Q[..., s, a]
    Q_passive = rewards + subsidy[..., None] + discount * np.einsum("...st,...t->...s", P[..., 0, :, :], V)
    Q_active = rewards + discount * np.einsum("...st,...t->...s", P[..., 1, :, :], V)
    return np.stack([Q_passive, Q_active], axis=-1)


def value_iteration(mdp: TwoStateMdp, subsidy: float, tolerance: float = 1e-9):
    """Iterate the Bellman operator of the subsidy MDP to a sup-norm residual below ``tolerance``.

    Returns the value per state and a flag per state that is true where the
    passive action is weakly optimal.
    """
    P = mdp.P
    r = np.asarray(mdp.rewards)
    lam = np.asarray(float(subsidy))
    V = np.zeros(2)
    while True:
        V_new = _bellman_q(P, r, mdp.discount, lam, V).max(axis=-1)
        if np.max(np.abs(V_new - V)) <= tolerance:
            V = V_new
            break
        V = V_new
    Q = _bellman_q(P, r, mdp.discount, lam, V)
    return V, Q[:, PASSIVE] - Q[:, ACTIVE] >= -_WEAK_MARGIN


def solve_subsidy_mdp(P, rewards, discount, subsidy):
    """Exact optimal Q-values of a batch of subsidy MDPs.

    The optimal value of a finite MDP is the pointwise maximum of the values of
    its deterministic stationary policies, and a two-state, two-action MDP has
    only four of them, each solved as a 2x2 linear system.

    Shapes: ``P (..., 2, 2, 2)``, ``rewards (..., 2)``, ``discount`` and
    ``subsidy`` broadcastable to ``(...)``. Returns ``Q (..., 2, 2)`` indexed by
    ``[state, action]``.
    """
    P = np.asarray(P, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    beta = np.asarray(discount, dtype=float)
    lam = np.asarray(subsidy, dtype=float)
    batch = np.broadcast_shapes(P.shape[:-3], rewards.shape[:-1], beta.shape, lam.shape)
    P = np.broadcast_to(P, batch + (2, 2, 2))
    rewards = np.broadcast_to(rewards, batch + (2,))
    beta = np.broadcast_to(beta, batch)
    lam = np.broadcast_to(lam, batch)

    V = _policy_values(P, rewards, beta, lam).max(axis=-2)
    return _bellman_q(P, rewards, beta[..., None], lam, V)


def _policy_values(P, rewards, beta, lam) -> np.ndarray:
    """Values of the four deterministic policies, shape ``(..., 4, 2)``."""
    r0 = rewards[..., 0]
    r1 = rewards[..., 1]
    out = []
    for a0 in (PASSIVE, ACTIVE):
        for a1 in (PASSIVE, ACTIVE):
            p0 = P[..., a0, 0, 1]  # P(1 | 0) under the action taken in state 0
            p1 = P[..., a1, 1, 1]
            R0 = r0 + lam if a0 == PASSIVE else r0
            R1 = r1 + lam if a1 == PASSIVE else r1
            # (I - beta P_pi) V = R
            m00 = 1.0 - beta * (1.0 - p0)
            m01 = -beta * p0
            m10 = -beta * (1.0 - p1)
            m11 = 1.0 - beta * p1
            det = m00 * m11 - m01 * m10
            out.append(np.stack(np.broadcast_arrays((m11 * R0 - m01 * R1) / det, (m00 * R1 - m10 * R0) / det), axis=-1))
    return np.stack(out, axis=-2)


def _bracket(rewards, discount):
    span = np.abs(rewards[..., 1] - rewards[..., 0])
    return 2.0 * np.maximum(span, 1.0) / (1.0 - discount)


def whittle_indices(P, states, rewards=(0.0, 1.0), discount=0.9, tol: float = 1e-10) -> np.ndarray:
    """Vectorized Whittle indices by bisection on the subsidy.

    ``P`` has shape ``(n, 2, 2, 2)``; ``states`` has shape ``(n,)``.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    states = np.asarray(states, dtype=np.int64).reshape(n)
    rewards = np.broadcast_to(np.asarray(rewards, dtype=float), (n, 2))
    beta = np.broadcast_to(np.asarray(discount, dtype=float), (n,))
    idx = np.arange(n)

    def passive_ok(lam):
        Q = solve_subsidy_mdp(P, rewards, beta, lam)[idx, states]
        return Q[:, PASSIVE] - Q[:, ACTIVE] >= -_WEAK_MARGIN

    hi = _bracket(rewards, beta)
    lo = -hi
    if np.any(passive_ok(lo)) or not np.all(passive_ok(hi)):
        raise BracketError("bracket exhausted")
    iters = int(math.ceil(math.log2(max(float(np.max(hi - lo)), tol) / tol)))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ok = passive_ok(mid)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return 0.5 * (lo + hi)


_INDEX_CACHE: dict = {}
_INDEX_CACHE_MAX = 16384


def _cached_indices(keys: Sequence[tuple], states: Sequence[int]) -> np.ndarray:
    """Indices for ``(mdp.key(), state)`` pairs; misses are solved in one batch."""
    wanted = [(k, int(s)) for k, s in zip(keys, states)]
    found = {w: _INDEX_CACHE[w] for w in wanted if w in _INDEX_CACHE}
    missing = [w for w in dict.fromkeys(wanted) if w not in found]
    if missing:
        P = np.array([k[0] for k, _ in missing]).reshape(-1, 2, 2, 2)
        rewards = np.array([k[1] for k, _ in missing])
        discount = np.array([k[2] for k, _ in missing])
        solved = dict(zip(missing, whittle_indices(P, [s for _, s in missing], rewards, discount).tolist()))
        if len(_INDEX_CACHE) + len(solved) > _INDEX_CACHE_MAX:
            _INDEX_CACHE.clear()
        _INDEX_CACHE.update(solved)
        found.update(solved)
    return np.array([found[w] for w in wanted])


def whittle_index(mdp: TwoStateMdp, state: int) -> float:
    """Smallest subsidy making the passive action weakly optimal at ``state``."""
    if state not in (0, 1):
        raise ValueError("state must be 0 or 1")
    return float(_cached_indices([mdp.key()], [state])[0])


def _gap(P, rewards, discount, lams) -> np.ndarray:
    Q = solve_subsidy_mdp(P, rewards, discount, lams)
    return Q[..., PASSIVE] - Q[..., ACTIVE]


def _change_points(P, rewards, discount, bound) -> np.ndarray:
    """Subsidies where the passive-optimal set can change.

    Each policy value is affine in the subsidy, so the optimal value is
    piecewise affine with kinks where two policy values cross. Between kinks
    the passive-minus-active gap is affine too; its crossings of the weak
    margin are the remaining change points.
    """
    base = _policy_values(P, rewards, discount, np.float64(0.0))
    slope = _policy_values(P, rewards, discount, np.float64(1.0)) - base
    kinks = []
    for i, j in itertools.combinations(range(4), 2):
        ds = slope[j] - slope[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            kinks.extend(((base[i] - base[j]) / ds)[ds != 0].tolist())
    edges = np.unique(np.clip([-bound, bound, *kinks], -bound, bound))
    gaps = _gap(P, rewards, discount, edges) + _WEAK_MARGIN  # (edge, state)
    points = [edges]
    lo, hi = gaps[:-1], gaps[1:]
    cross = (lo < 0) != (hi < 0)
    frac = np.where(cross, lo / np.where(lo == hi, 1.0, lo - hi), 0.0)
    width = (edges[1:] - edges[:-1])[:, None]
    points.append((edges[:-1, None] + frac * width)[cross])
    return np.concatenate(points)


@lru_cache(maxsize=4096)
def _cached_indexable(key: tuple, resolution: float) -> bool:
    P = np.asarray(key[0]).reshape(2, 2, 2)
    rewards = np.asarray(key[1])
    bound = float(_bracket(rewards, np.asarray(key[2])))
    if resolution >= 2 * bound:
        raise ValueError("resolution too coarse")
    # the passive set is constant between change points, so the grid only
    # needs sampling on either side of each one
    n_grid = len(np.arange(-bound, bound + 0.5 * resolution, resolution))
    nearest = np.floor((_change_points(P, rewards, key[2], bound) + bound) / resolution).astype(np.int64)
    picks = np.unique(np.clip((nearest[:, None] + np.arange(-2, 3)).ravel(), 0, n_grid - 1))
    grid = -bound + picks * resolution
    passive = _gap(P, rewards, key[2], grid) >= -_WEAK_MARGIN  # (grid, state)
    # a state that has joined the passive set must never leave it
    lost = passive[:-1] & ~passive[1:]
    return not bool(lost.any())


def check_indexability(mdp: TwoStateMdp, resolution: float = 1e-3) -> bool:
    """True iff the passive-optimal set only grows as the subsidy sweeps the bracket."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    return _cached_indexable(mdp.key(), float(resolution))


@dataclass
class DynamicsBelief:
    """Beta posteriors over ``P[a][s][1]`` for every action/state pair."""

    alpha: np.ndarray = field(default_factory=lambda: np.ones((2, 2)))
    beta: np.ndarray = field(default_factory=lambda: np.ones((2, 2)))
    rewards: tuple[float, float] = (0.0, 1.0)
    discount: float = 0.9

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=float)
        self.beta = np.array(self.beta, dtype=float)

    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def sample_probs(self, rng: np.random.Generator) -> np.ndarray:
        return rng.beta(self.alpha, self.beta)

    def sample(self, rng: np.random.Generator) -> TwoStateMdp:
        p = self.sample_probs(rng)
        return TwoStateMdp.from_probs(p[PASSIVE], p[ACTIVE], self.rewards, self.discount)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "rewards": list(self.rewards),
            "discount": self.discount,
        }


def update_dynamics(belief: DynamicsBelief, action: int, s: int, s_next: int) -> DynamicsBelief:
    if action not in (0, 1) or s not in (0, 1) or s_next not in (0, 1):
        raise ValueError("action and states must be binary")
    if s_next == 1:
        belief.alpha[action, s] += 1.0
    else:
        belief.beta[action, s] += 1.0
    return belief


@dataclass
class RmabArm:
    arm_id: object
    state: int
    dynamics: TwoStateMdp | DynamicsBelief
    group: str = "all"

    def __post_init__(self):
        if self.state not in (0, 1):
            raise ValueError("arm state must be 0 or 1")

    @property
    def known(self) -> bool:
        return isinstance(self.dynamics, TwoStateMdp)


@dataclass
class Allocation:
    round_index: int
    acted: tuple
    indices: dict
    group_counts: dict
    group_mean_index: dict = field(default_factory=dict)
    indexable: bool | None = True

    def to_record(self) -> dict:
        return {
            "round": self.round_index,
            "acted": list(self.acted),
            "indices": {str(k): v for k, v in self.indices.items()},
            "group_counts": self.group_counts,
            "group_mean_index": self.group_mean_index,
            "indexable": self.indexable,
        }


def _arm_indices(arms: Sequence[RmabArm], rng, verify: bool) -> tuple[np.ndarray, bool | None]:
    """Whittle index of every arm at its current state.

    Unknown dynamics are replaced by one posterior draw per arm. Sampled
    models are not checked for indexability, so the flag is ``None`` when any
    arm was sampled and indexability was not otherwise refuted.
    """
    out = np.empty(len(arms))
    indexable: bool | None = True
    known = [i for i, arm in enumerate(arms) if arm.known]
    sampled = [i for i, arm in enumerate(arms) if not arm.known]
    if known:
        out[known] = _cached_indices([arms[i].dynamics.key() for i in known], [arms[i].state for i in known])
        if verify and not all(check_indexability(arms[i].dynamics) for i in known):
            indexable = False
    if sampled:
        if rng is None:
            raise ValueError("a random generator is required for arms with unknown dynamics")
        beliefs = [arms[i].dynamics for i in sampled]
        p1 = rng.beta(np.stack([b.alpha for b in beliefs]), np.stack([b.beta for b in beliefs]))
        P = np.stack([1.0 - p1, p1], axis=-1)
        rewards = np.array([b.rewards for b in beliefs])
        discount = np.array([b.discount for b in beliefs])
        states = [arms[i].state for i in sampled]
        out[sampled] = whittle_indices(P, states, rewards, discount)
        if indexable:
            indexable = None
    return out, indexable


def _order(arms, scores, candidates) -> list[int]:
    return sorted(candidates, key=lambda i: (-scores[i], arms[i].arm_id))


def _summarize(arms, scores, chosen, round_index, indexable) -> Allocation:
    groups: dict = {}
    for arm in arms:
        groups.setdefault(arm.group, [])
    for i, arm in enumerate(arms):
        groups[arm.group].append(scores[i])
    counts = {g: 0 for g in groups}
    for i in chosen:
        counts[arms[i].group] += 1
    return Allocation(
        round_index=round_index,
        acted=tuple(arms[i].arm_id for i in chosen),
        indices={arm.arm_id: float(scores[i]) for i, arm in enumerate(arms)},
        group_counts=counts,
        group_mean_index={g: float(np.mean(v)) for g, v in groups.items()},
        indexable=indexable,
    )


def allocate(
    arms: Sequence[RmabArm],
    budget: int,
    rng: np.random.Generator | None = None,
    round_index: int = 0,
    verify_indexability: bool = True,
) -> Allocation:
    """Act on the ``min(budget, len(arms))`` arms with the largest Whittle indices."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    scores, indexable = _arm_indices(arms, rng, verify_indexability)
    chosen = _order(arms, scores, range(len(arms)))[: min(budget, len(arms))]
    return _summarize(arms, scores, chosen, round_index, indexable)


def equitable_allocate(
    arms: Sequence[RmabArm],
    budget: int,
    min_fraction: float | Mapping[str, float],
    rng: np.random.Generator | None = None,
    round_index: int = 0,
    verify_indexability: bool = True,
) -> Allocation:
    """Whittle allocation with a per-group floor of ``floor(f * budget)`` actions.

    Each group first receives its floor from its own highest-index arms; the
    remaining budget is filled by global index order.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    groups = sorted({arm.group for arm in arms}, key=str)
    if isinstance(min_fraction, Mapping):
        unknown = set(min_fraction) - set(groups)
        if unknown:
            raise ValueError(f"unknown groups in equity constraint: {sorted(unknown, key=str)}")
        fractions = {g: float(min_fraction.get(g, 0.0)) for g in groups}
    else:
        fractions = {g: float(min_fraction) for g in groups}
    if any(not 0 <= f <= 1 for f in fractions.values()):
        raise ValueError("group fractions must lie in [0, 1]")
    floors = {g: int(math.floor(f * budget + 1e-12)) for g, f in fractions.items()}
    sizes = {g: sum(1 for arm in arms if arm.group == g) for g in groups}
    if sum(floors.values()) > budget:
        raise ValueError("infeasible floors: group floors exceed the budget")
    short = [g for g in groups if floors[g] > sizes[g]]
    if short:
        raise ValueError(f"infeasible floors: groups {short} have fewer arms than their floor")

    scores, indexable = _arm_indices(arms, rng, verify_indexability)
    chosen: list[int] = []
    for g in groups:
        members = [i for i, arm in enumerate(arms) if arm.group == g]
        chosen.extend(_order(arms, scores, members)[: floors[g]])
    taken = set(chosen)
    remaining = min(budget, len(arms)) - len(chosen)
    rest = _order(arms, scores, [i for i in range(len(arms)) if i not in taken])
    chosen.extend(rest[:remaining])
    chosen = _order(arms, scores, chosen)
    return _summarize(arms, scores, chosen, round_index, indexable)


def random_allocate(
    arms: Sequence[RmabArm], budget: int, rng: np.random.Generator, round_index: int = 0
) -> Allocation:
    """Uniformly random subset of ``min(budget, len(arms))`` arms; indices reported as NaN."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    k = min(budget, len(arms))
    chosen = sorted(rng.choice(len(arms), size=k, replace=False).tolist())
    scores = np.full(len(arms), np.nan)
    return _summarize(arms, scores, chosen, round_index, None)
