"""Randomized, adaptive and micro-randomized assignment, and effect estimation.

Every assignment carries the propensity it was drawn with. Analysis reads those
logged propensities and never recomputes them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .linear_bandits import LinearBanditState, PosteriorBelief, action_propensity, linucb_select, ts_select

__all__ = [
    "ExperimentDesign",
    "AssignmentRecord",
    "EffectEstimate",
    "assign",
    "adaptive_assign",
    "mrt_randomize",
    "mrt_draw",
    "estimate_effect",
    "difference_in_means",
    "ipw_estimate",
    "write_log",
    "read_log",
]

UNITS = ("individual", "cluster")
MECHANISMS = ("fixed", "adaptive", "micro")


@dataclass
class ExperimentDesign:
    """Assignment design.

    ``probabilities`` applies to the fixed mechanism; ``treatment_prob`` is
    ``p_t`` for micro-randomized designs, either one value or one per decision
    point. The cluster cache holds the arm drawn for each cluster in the current
    run; call :meth:`reset` to start a new run.
    """

    unit: str = "individual"
    mechanism: str = "fixed"
    arms: tuple[str, ...] = ("control", "treatment")
    probabilities: tuple[float, ...] | None = None
    treatment_prob: float | Sequence[float] | None = None
    seed: int | None = None
    cluster_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        self.arms = tuple(self.arms)
        if self.mechanism == "fixed":
            if self.probabilities is None:
                self.probabilities = tuple([1.0 / len(self.arms)] * len(self.arms))
            probs = np.asarray(self.probabilities, dtype=float)
            if probs.shape != (len(self.arms),):
                raise ValueError("one probability per arm is required")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
                raise ValueError("arm probabilities must be non-negative and sum to 1")
            self.probabilities = tuple(probs.tolist())
        if self.mechanism == "micro":
            if len(self.arms) != 2:
                raise ValueError("micro-randomized designs have exactly two arms")
            if self.treatment_prob is None:
                raise ValueError("micro-randomized designs need treatment_prob")
            for p in np.atleast_1d(np.asarray(self.treatment_prob, dtype=float)):
                _check_open_unit(p)

    def p_at(self, t: int) -> float:
        p = self.treatment_prob
        if np.ndim(p) == 0:
            return float(p)
        return float(p[t])

    def reset(self) -> None:
        self.cluster_cache.clear()


def _check_open_unit(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ValueError(f"treatment probability {p} must lie strictly between 0 and 1")


@dataclass(frozen=True)
class AssignmentRecord:
    unit_id: str
    cluster_id: str | None
    decision_point: int
    arm: int
    propensity: float
    timestamp: str | None = None

    def __post_init__(self):
        if not 0.0 < self.propensity <= 1.0:
            raise ValueError("propensity must lie in (0, 1]")


@dataclass(frozen=True)
class EffectEstimate:
    estimate: float
    std_error: float
    estimator: str
    n: int


def assign(
    design: ExperimentDesign,
    unit_id: str,
    cluster_id: str | None,
    rng: np.random.Generator,
    decision_point: int = 0,
) -> AssignmentRecord:
    if design.mechanism != "fixed":
        raise ValueError("assign() needs a fixed-random design")
    probs = design.probabilities
    if design.unit == "cluster":
        if cluster_id is None:
            raise ValueError("cluster design requires a cluster id")
        if cluster_id not in design.cluster_cache:
            design.cluster_cache[cluster_id] = int(rng.choice(len(probs), p=probs))
        arm = design.cluster_cache[cluster_id]
    else:
        arm = int(rng.choice(len(probs), p=probs))
    return AssignmentRecord(str(unit_id), cluster_id, decision_point, arm, float(probs[arm]))


def adaptive_assign(
    design: ExperimentDesign,
    policy: PosteriorBelief | LinearBanditState,
    x,
    rng: np.random.Generator,
    unit_id: str = "",
    decision_point: int = 0,
    n_samples: int = 1000,
) -> AssignmentRecord:
    """Assign by the bandit policy and log its selection probability.

    For Thompson sampling the propensity counts the realized draw together with
    ``n_samples`` fresh draws, ``(hits + 1) / (n_samples + 1)``, which keeps it
    strictly positive. Deterministic LinUCB choices have propensity 1.
    """
    if design.mechanism != "adaptive":
        raise ValueError("adaptive_assign() needs an adaptive design")
    if isinstance(policy, PosteriorBelief):
        if policy.n_arms != len(design.arms):
            raise ValueError("policy arm count does not match the design")
        arm = ts_select(policy, x, rng)
        freq = action_propensity(policy, x, n_samples, rng)
        hits = int(round(freq[arm] * n_samples))
        propensity = (hits + 1) / (n_samples + 1)
    elif isinstance(policy, LinearBanditState):
        arm = linucb_select(policy, x)[0]
        propensity = 1.0
    else:
        raise TypeError(f"unsupported policy type {type(policy).__name__}")
    return AssignmentRecord(str(unit_id), None, decision_point, arm, propensity)


def mrt_randomize(design: ExperimentDesign, unit_id: str, t: int, rng: np.random.Generator) -> AssignmentRecord:
    """Bernoulli(p_t) treatment at decision point ``t``; arm 1 is treatment."""
    if design.mechanism != "micro":
        raise ValueError("mrt_randomize() needs a micro-randomized design")
    p = design.p_at(t)
    _check_open_unit(p)
    treated = bool(rng.random() < p)
    return AssignmentRecord(str(unit_id), None, t, int(treated), p if treated else 1.0 - p)


def mrt_draw(design: ExperimentDesign, n_units: int, n_points: int, rng: np.random.Generator):
    """Vectorized micro-randomization for ``n_units x n_points`` decision points.

    Consumes the generator exactly as row-major calls to :func:`mrt_randomize`
    would. Returns the treatment indicators and the per-point treatment
    probabilities.
    """
    p = np.array([design.p_at(t) for t in range(n_points)])
    for v in p:
        _check_open_unit(v)
    u = rng.random((n_units, n_points))
    return (u < p).astype(np.int8), np.broadcast_to(p, (n_units, n_points))


def difference_in_means(treated, rewards) -> tuple[float, float]:
    """Mean difference and pooled two-sample standard error."""
    treated = np.asarray(treated).astype(bool)
    rewards = np.asarray(rewards, dtype=float)
    r1, r0 = rewards[treated], rewards[~treated]
    n1, n0 = r1.size, r0.size
    if n1 == 0 or n0 == 0:
        raise ValueError("difference in means needs at least one observation per arm")
    est = r1.mean() - r0.mean()
    dof = n1 + n0 - 2
    if dof == 0:
        return float(est), math.inf
    pooled = (((r1 - r1.mean()) ** 2).sum() + ((r0 - r0.mean()) ** 2).sum()) / dof
    return float(est), float(math.sqrt(pooled * (1.0 / n1 + 1.0 / n0)))


def ipw_estimate(treated, rewards, p_treat, axis: int = -1):
    """Horvitz-Thompson effect estimate and its standard error along ``axis``.

    Per-record contributions are ``A r / p - (1 - A) r / (1 - p)``.
    """
    A = np.asarray(treated, dtype=float)
    r = np.asarray(rewards, dtype=float)
    p = np.asarray(p_treat, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("inverse probability weighting needs propensities strictly inside (0, 1)")
    contrib = A * r / p - (1.0 - A) * r / (1.0 - p)
    n = contrib.shape[axis]
    est = contrib.mean(axis=axis)
    se = contrib.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.full_like(est, np.inf)
    return est, se


def estimate_effect(
    records: Iterable[tuple[AssignmentRecord, float]],
    estimator: str = "difference-in-means",
    treatment_arm: int = 1,
    control_arm: int = 0,
) -> EffectEstimate:
    records = list(records)
    if estimator in ("difference-in-means", "dim"):
        used = [(rec, r) for rec, r in records if rec.arm in (treatment_arm, control_arm)]
        treated = [rec.arm == treatment_arm for rec, _ in used]
        est, se = difference_in_means(treated, [r for _, r in used])
        return EffectEstimate(est, se, "difference-in-means", len(used))
    if estimator == "ipw":
        if not records:
            raise ValueError("no records")
        treated, rewards, p_treat = [], [], []
        for rec, r in records:
            if rec.arm not in (treatment_arm, control_arm):
                raise ValueError("ipw analysis supports two-arm records only")
            if not 0.0 < rec.propensity < 1.0:
                raise ValueError("inverse probability weighting needs propensities strictly inside (0, 1)")
            is_t = rec.arm == treatment_arm
            treated.append(is_t)
            rewards.append(r)
            p_treat.append(rec.propensity if is_t else 1.0 - rec.propensity)
        est, se = ipw_estimate(treated, rewards, p_treat)
        return EffectEstimate(float(est), float(se), "ipw", len(records))
    raise ValueError(f"unknown estimator {estimator!r}")


def write_log(path, rows: Iterable[tuple[AssignmentRecord, float | None]]) -> None:
    """Line-delimited records: unit, cluster, decision_point, arm, propensity, reward."""
    with open(path, "w") as fh:
        for rec, reward in rows:
            fh.write(
                json.dumps(
                    {
                        "unit": rec.unit_id,
                        "cluster": rec.cluster_id,
                        "decision_point": rec.decision_point,
                        "arm": rec.arm,
                        "propensity": rec.propensity,
                        "reward": reward,
                    }
                )
                + "\n"
            )


def read_log(path) -> list[tuple[AssignmentRecord, float | None]]:
    out = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                d = json.loads(text)
                rec = AssignmentRecord(
                    str(d["unit"]), d.get("cluster"), int(d["decision_point"]), int(d["arm"]), float(d["propensity"])
                )
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"line {lineno}: bad experiment record ({exc})") from None
            reward = d.get("reward")
            out.append((rec, None if reward is None else float(reward)))
    return out
