"""Synthetic environments with known ground truth, episode runners and replication.

Each episode seed is split into two independent streams: one for the
environment (contexts, noise, transitions) and one for the policy. Policies
that differ only in their decisions therefore see the same contexts and noise,
which makes paired comparisons meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import rmab
from .deep_bandits import EkfBelief, NeuralLinearPolicy, NigHead, FeatureExtractor, TrainConfig, ReplayQueue
from .linear_bandits import LinearBanditState, PosteriorBelief
from .rmab import DynamicsBelief, RmabArm, TwoStateMdp, update_dynamics
from .survival import SurvivalRecord

__all__ = [
    "LinearEnvSpec",
    "RmabEnvSpec",
    "EpisodeResult",
    "UniformRandomPolicy",
    "OraclePolicy",
    "BanditEpisode",
    "make_policy",
    "policy_from_state",
    "policy_state",
    "run_bandit_episode",
    "run_rmab_episode",
    "make_survival_cohort",
    "MetricsTable",
    "replicate",
    "split_streams",
]


class Policy(Protocol):
    def select(self, x, rng) -> int: ...

    def update(self, x, a: int, r: float) -> None: ...


def split_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (environment, policy) generators derived from one seed."""
    env_ss, pol_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(pol_ss)


# ---------------------------------------------------------------------------
# linear contextual environment


@dataclass
class LinearEnvSpec:
    theta: np.ndarray
    noise_sd: float = 0.5
    context: str = "normal"
    horizon: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("true coefficients must be finite")
        if self.noise_sd < 0:
            raise ValueError("noise sd must be non-negative")
        if self.context not in ("normal", "uniform", "ones"):
            raise ValueError(f"unknown context distribution {self.context!r}")

    @property
    def n_arms(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def draw_context(self, rng: np.random.Generator) -> np.ndarray:
        if self.context == "normal":
            return rng.standard_normal(self.dim)
        if self.context == "uniform":
            return rng.uniform(-1.0, 1.0, self.dim)
        return np.ones(self.dim)


class UniformRandomPolicy:
    def __init__(self, n_arms: int):
        self.n_arms = n_arms

    def select(self, x, rng) -> int:
        return int(rng.integers(self.n_arms))

    def update(self, x, a, r) -> None:
        pass

    def to_dict(self) -> dict:
        return {"n_arms": self.n_arms}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_arms"])


class OraclePolicy:
    """Knows the true coefficients and always plays the best mean arm."""

    def __init__(self, theta):
        self.theta = np.atleast_2d(np.asarray(theta, dtype=float))

    def select(self, x, rng) -> int:
        return int(np.argmax(self.theta @ np.asarray(x, dtype=float)))

    def update(self, x, a, r) -> None:
        pass

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["theta"])


_POLICY_TYPES = {
    "linucb": LinearBanditState,
    "thompson": PosteriorBelief,
    "neural-linear": NeuralLinearPolicy,
    "ekf": EkfBelief,
    "random": UniformRandomPolicy,
    "oracle": OraclePolicy,
}


def make_policy(name: str, spec: LinearEnvSpec, params: Mapping | None = None, seed: int = 0):
    """Construct a fresh policy for an environment."""
    params = dict(params or {})
    K, d = spec.n_arms, spec.dim
    if name == "linucb":
        return LinearBanditState(K, d, alpha=params.get("alpha", 1.0), ridge=params.get("ridge", 1.0))
    if name == "thompson":
        return PosteriorBelief(K, d, noise_var=params.get("noise_var", 1.0), prior_scale=params.get("prior_scale", 1.0))
    if name == "ekf":
        return EkfBelief(
            K,
            d,
            process_var=params.get("process_var", 0.0),
            obs_var=params.get("obs_var", 1.0),
            prior_scale=params.get("prior_scale", 1.0),
            link=params.get("link", "identity"),
        )
    if name == "neural-linear":
        extractor = FeatureExtractor(d, K, hidden=params.get("hidden", (32, 32)), seed=seed)
        head = NigHead(
            K,
            extractor.feature_dim,
            prior_scale=params.get("prior_scale", 1.0),
            a0=params.get("a0", 1.0),
            b0=params.get("b0", 1.0),
        )
        return NeuralLinearPolicy(
            extractor,
            head,
            ReplayQueue(params.get("replay_capacity", 1000)),
            retrain_every=params.get("retrain_every", 100),
            train=TrainConfig(params.get("step_size", 0.05), params.get("epochs", 200)),
        )
    if name == "random":
        return UniformRandomPolicy(K)
    if name == "oracle":
        return OraclePolicy(spec.theta)
    raise ValueError(f"unknown policy {name!r}")


def policy_state(policy) -> dict:
    for tag, cls in _POLICY_TYPES.items():
        if type(policy) is cls:
            return {"type": tag, "state": policy.to_dict()}
    raise TypeError(f"policy type {type(policy).__name__} is not serializable")


def policy_from_state(d: Mapping):
    return _POLICY_TYPES[d["type"]].from_dict(d["state"])


@dataclass
class EpisodeResult:
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    regret: list = field(default_factory=list)
    cumulative_regret: list = field(default_factory=list)
    group_rewards: dict = field(default_factory=dict)
    allocations: list = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards)) if self.rewards else 0.0


class BanditEpisode:
    """Step-wise contextual bandit episode that can be checkpointed between rounds."""

    def __init__(self, spec: LinearEnvSpec, policy: Policy, seed: int):
        self.spec = spec
        self.policy = policy
        self.env_rng, self.policy_rng = split_streams(seed)
        self.result = EpisodeResult()
        self.t = 0

    @property
    def done(self) -> bool:
        return self.t >= self.spec.horizon

    def step(self) -> int:
        spec = self.spec
        x = spec.draw_context(self.env_rng)
        noise = spec.noise_sd * self.env_rng.standard_normal()
        a = self.policy.select(x, self.policy_rng)
        if not 0 <= a < spec.n_arms:
            raise ValueError(f"policy chose invalid arm {a}")
        means = spec.theta @ x
        r = float(means[a] + noise)
        self.policy.update(x, a, r)
        gap = float(means.max() - means[a])
        res = self.result
        res.actions.append(a)
        res.rewards.append(r)
        res.regret.append(gap)
        res.cumulative_regret.append((res.cumulative_regret[-1] if res.cumulative_regret else 0.0) + gap)
        self.t += 1
        return a

    def run(self, rounds: int | None = None) -> EpisodeResult:
        stop = self.spec.horizon if rounds is None else min(self.spec.horizon, self.t + rounds)
        while self.t < stop:
            self.step()
        return self.result

    def checkpoint_state(self) -> dict:
        return {
            "t": self.t,
            "seed_streams": {
                "env": self.env_rng.bit_generator.state,
                "policy": self.policy_rng.bit_generator.state,
            },
            "policy": policy_state(self.policy),
            "result": {
                "actions": list(self.result.actions),
                "rewards": list(self.result.rewards),
                "regret": list(self.result.regret),
                "cumulative_regret": list(self.result.cumulative_regret),
            },
        }

    @classmethod
    def from_checkpoint(cls, spec: LinearEnvSpec, state: Mapping) -> "BanditEpisode":
        ep = cls(spec, policy_from_state(state["policy"]), 0)
        ep.env_rng.bit_generator.state = state["seed_streams"]["env"]
        ep.policy_rng.bit_generator.state = state["seed_streams"]["policy"]
        ep.t = state["t"]
        ep.result = EpisodeResult(**{k: list(v) for k, v in state["result"].items()})
        return ep


def run_bandit_episode(spec: LinearEnvSpec, policy: Policy, seed: int | None = None) -> EpisodeResult:
    n_arms = getattr(policy, "n_arms", spec.n_arms)
    if n_arms != spec.n_arms:
        raise ValueError("policy arm count does not match the environment")
    dim = getattr(policy, "dim", spec.dim)
    if dim != spec.dim:
        raise ValueError("policy dimension does not match the environment")
    return BanditEpisode(spec, policy, spec.seed if seed is None else seed).run()


# ---------------------------------------------------------------------------
# restless bandit cohort


@dataclass
class RmabEnvSpec:
    mdps: Sequence[TwoStateMdp]
    budget: int
    horizon: int
    initial_states: Sequence[int]
    groups: Sequence[str] | None = None
    seed: int = 0

    def __post_init__(self):
        n = len(self.mdps)
        if self.groups is None:
            self.groups = ["all"] * n
        if len(self.groups) != n or len(self.initial_states) != n:
            raise ValueError("mdps, groups and initial_states must have equal length")
        if not 0 <= self.budget <= n:
            raise ValueError("budget must lie in [0, N]")
        if any(s not in (0, 1) for s in self.initial_states):
            raise ValueError("initial states must be binary")

    @property
    def n_arms(self) -> int:
        return len(self.mdps)


Allocator = Callable[..., rmab.Allocation]


def _resolve_allocator(allocator, equity=None):
    if callable(allocator):
        return allocator, False
    if allocator == "whittle":
        return rmab.allocate, False
    if allocator == "whittle-learned":
        return rmab.allocate, True
    if allocator == "equitable":
        if equity is None:
            raise ValueError("equitable allocation needs an equity fraction")

        def fn(arms, budget, rng, round_index=0):
            return rmab.equitable_allocate(arms, budget, equity, rng, round_index)

        return fn, False
    if allocator == "random":
        return rmab.random_allocate, False
    raise ValueError(f"unknown allocator {allocator!r}")


def run_rmab_episode(
    spec: RmabEnvSpec, allocator="whittle", seed: int | None = None, equity=None, keep_allocations: bool = False
) -> EpisodeResult:
    """Simulate a cohort under an allocator.

    ``allocator`` is one of ``whittle``, ``whittle-learned``, ``equitable``,
    ``random`` or a callable ``(arms, budget, rng, round_index) -> Allocation``.
    With ``whittle-learned`` the allocator only sees Beta beliefs that are
    updated from every observed transition.
    """
    fn, learn = _resolve_allocator(allocator, equity)
    env_rng, pol_rng = split_streams(spec.seed if seed is None else seed)
    n = spec.n_arms
    P1 = np.array([m.P[:, :, 1] for m in spec.mdps])  # (n, action, state)
    rewards = np.array([m.rewards for m in spec.mdps])
    arms = [
        RmabArm(
            i,
            int(spec.initial_states[i]),
            DynamicsBelief(rewards=spec.mdps[i].rewards, discount=spec.mdps[i].discount) if learn else spec.mdps[i],
            spec.groups[i],
        )
        for i in range(n)
    ]
    groups = list(dict.fromkeys(spec.groups))
    group_idx = {g: np.array([i for i in range(n) if spec.groups[i] == g]) for g in groups}
    states = np.array(spec.initial_states, dtype=np.int64)
    result = EpisodeResult(group_rewards={g: [] for g in groups})
    for t in range(spec.horizon):
        alloc = fn(arms, spec.budget, pol_rng, round_index=t)
        action = np.zeros(n, dtype=np.int64)
        action[list(alloc.acted)] = 1
        u = env_rng.random(n)
        nxt = (u < P1[np.arange(n), action, states]).astype(np.int64)
        r = rewards[np.arange(n), nxt]
        for i, arm in enumerate(arms):
            if learn:
                update_dynamics(arm.dynamics, int(action[i]), int(states[i]), int(nxt[i]))
            arm.state = int(nxt[i])
        states = nxt
        result.actions.append(tuple(alloc.acted))
        result.rewards.append(float(r.sum()))
        for g in groups:
            result.group_rewards[g].append(float(r[group_idx[g]].mean()))
        if keep_allocations:
            result.allocations.append(alloc)
    return result


# ---------------------------------------------------------------------------
# survival cohort


def make_survival_cohort(
    n: int,
    beta,
    gamma,
    censoring_rate: float = 0.0,
    seed: int = 0,
    period: float = 1.0,
) -> list[SurvivalRecord]:
    """Draw records from a logistic discrete-time hazard model.

    Features are standard normal. With probability ``censoring_rate`` a subject
    also gets a dropout period drawn uniformly from ``1..H`` and is censored
    there if the event has not happened yet. Subjects still event-free after
    ``H`` periods are censored at the end of follow-up.
    """
    if not 0.0 <= censoring_rate < 1.0:
        raise ValueError("censoring rate must lie in [0, 1)")
    beta = np.asarray(beta, dtype=float).reshape(-1)
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    H = gamma.shape[0]
    M = H * period
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, beta.shape[0]))
    logits = X @ beta
    hazards = 1.0 / (1.0 + np.exp(-(logits[:, None] + gamma[None, :])))
    u = rng.random((n, H))
    hit = u < hazards
    event_period = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, H + 1)
    dropout = rng.random(n) < censoring_rate
    dropout_period = rng.integers(1, H + 1, size=n)
    records = []
    for i in range(n):
        T = int(event_period[i])
        if dropout[i] and dropout_period[i] < T:
            t, c = int(dropout_period[i]), 1
        elif T <= H:
            t, c = T, 0
        else:
            t, c = H, 1
        records.append(SurvivalRecord(X[i], t * period, c, M, f"s{i:05d}"))
    return records


# ---------------------------------------------------------------------------
# replication


@dataclass
class MetricsTable:
    """Rows of ``(scenario, replication, round, metric, value)``.

    ``replication`` is an integer or ``"mean"``/``"sd"``; ``round`` is an
    integer for per-round series or ``"aggregate"`` for episode-level values.
    """

    rows: list = field(default_factory=list)

    def add(self, scenario, replication, round_, metric, value) -> None:
        self.rows.append((scenario, replication, round_, metric, float(value)))

    def scalars(self, replication) -> dict:
        return {m: v for _, rep, rnd, m, v in self.rows if rep == replication and rnd == "aggregate"}

    def series(self, replication, metric) -> list:
        return [(rnd, v) for _, rep, rnd, m, v in self.rows if rep == replication and m == metric and rnd != "aggregate"]


def replicate(scenario, n_reps: int, base_seed: int, name: str | None = None) -> MetricsTable:
    """Run ``scenario.run(seed)`` for seeds ``base_seed + i`` and aggregate.

    ``scenario.run`` returns ``(series, scalars)``: per-round sequences keyed
    by metric name, each a list of ``(round, value)``, and episode-level values.
    Mean and sample standard deviation of each scalar are appended.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    name = name or getattr(scenario, "name", "scenario")
    table = MetricsTable()
    collected: dict[str, list[float]] = {}
    for i in range(n_reps):
        series, scalars = scenario.run(base_seed + i)
        for metric in sorted(series):
            for rnd, value in series[metric]:
                table.add(name, i, rnd, metric, value)
        for metric in sorted(scalars):
            table.add(name, i, "aggregate", metric, scalars[metric])
            collected.setdefault(metric, []).append(float(scalars[metric]))
    for metric in sorted(collected):
        vals = np.array(collected[metric])
        table.add(name, "mean", "aggregate", metric, vals.mean())
        table.add(name, "sd", "aggregate", metric, vals.std(ddof=1) if vals.size > 1 else 0.0)
    return table


def _thin(values: Sequence[float], every: int) -> list[tuple[int, float]]:
    n = len(values)
    keep = list(range(every - 1, n, every)) if every > 1 else list(range(n))
    if n and keep[-1:] != [n - 1]:
        keep.append(n - 1)
    return [(i + 1, values[i]) for i in keep]


@dataclass
class BanditScenario:
    """Several policies run on the same environment; all share the episode seed."""

    name: str
    spec: LinearEnvSpec
    policies: Mapping[str, Mapping]
    record_every: int = 1

    def run(self, seed: int):
        series, scalars = {}, {}
        for label, params in self.policies.items():
            params = dict(params or {})
            kind = params.pop("type", label)
            policy = make_policy(kind, self.spec, params, seed=seed)
            res = run_bandit_episode(self.spec, policy, seed)
            series[f"{label}/cumulative_regret"] = _thin(res.cumulative_regret, self.record_every)
            scalars[f"{label}/cumulative_regret"] = res.cumulative_regret[-1] if res.cumulative_regret else 0.0
            scalars[f"{label}/total_reward"] = res.total_reward
        return series, scalars


@dataclass
class RmabScenario:
    name: str
    spec: RmabEnvSpec
    allocators: Sequence[str]
    equity: float | Mapping[str, float] | None = None
    record_every: int = 1

    def run(self, seed: int):
        series, scalars = {}, {}
        for label in self.allocators:
            res = run_rmab_episode(self.spec, label, seed, equity=self.equity)
            series[f"{label}/reward"] = _thin(res.rewards, self.record_every)
            scalars[f"{label}/total_reward"] = res.total_reward
            for g, vals in res.group_rewards.items():
                scalars[f"{label}/group_mean_reward/{g}"] = float(np.mean(vals)) if vals else 0.0
        return series, scalars
