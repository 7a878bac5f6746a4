"""Disjoint-arm linear contextual bandits: LinUCB and Gaussian Thompson sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LinearBanditState",
    "PosteriorBelief",
    "linucb_select",
    "linucb_update",
    "ts_update",
    "ts_select",
    "action_propensity",
]


def _as_context(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != dim:
        raise ValueError(f"context dimension mismatch: expected {dim}, got {x.shape[0]}")
    return x


def _check_update(x: np.ndarray, a: int, r: float, n_arms: int) -> None:
    if not 0 <= a < n_arms:
        raise ValueError(f"action {a} out of range for {n_arms} arms")
    if not np.all(np.isfinite(x)) or not np.isfinite(r):
        raise ValueError("non-finite context or reward")


@dataclass
class LinearBanditState:
    """Per-arm ridge statistics for LinUCB.

    ``A[k]`` starts at ``ridge * I`` and accumulates ``x x^T``; ``b[k]``
    accumulates ``r x``.
    """

    n_arms: int
    dim: int
    alpha: float = 1.0
    ridge: float = 1.0
    A: np.ndarray = None
    b: np.ndarray = None
    counts: np.ndarray = None
    _A_inv: np.ndarray = field(default=None, init=False, repr=False)
    _theta: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.ridge <= 0:
            raise ValueError("ridge must be positive")
        if self.A is None:
            self.A = np.tile(self.ridge * np.eye(self.dim), (self.n_arms, 1, 1))
        if self.b is None:
            self.b = np.zeros((self.n_arms, self.dim))
        if self.counts is None:
            self.counts = np.zeros(self.n_arms, dtype=np.int64)
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self._refresh()

    def _refresh(self, arm: int | None = None) -> None:
        if arm is None:
            self._A_inv = np.linalg.inv(self.A)
            self._theta = np.einsum("kij,kj->ki", self._A_inv, self.b)
        else:
            self._A_inv[arm] = np.linalg.inv(self.A[arm])
            self._theta[arm] = self._A_inv[arm] @ self.b[arm]

    @property
    def theta(self) -> np.ndarray:
        """Ridge estimates, one row per arm."""
        return self._theta.copy()

    def width(self, x) -> np.ndarray:
        """Confidence widths ``sqrt(x^T A_k^{-1} x)`` for every arm."""
        x = _as_context(x, self.dim)
        return np.sqrt(np.maximum(np.einsum("i,kij,j->k", x, self._A_inv, x), 0.0))

    # policy protocol
    def select(self, x, rng=None) -> int:
        return linucb_select(self, x)[0]

    def update(self, x, a: int, r: float) -> None:
        linucb_update(self, x, a, r)

    def to_dict(self) -> dict:
        return {
            "n_arms": self.n_arms,
            "dim": self.dim,
            "alpha": self.alpha,
            "ridge": self.ridge,
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearBanditState":
        return cls(**d)


def linucb_select(state: LinearBanditState, x) -> tuple[int, np.ndarray]:
    """Return the UCB-maximizing arm (lowest index on ties) and all arm scores."""
    x = _as_context(x, state.dim)
    scores = state._theta @ x + state.alpha * state.width(x)
    return int(np.argmax(scores)), scores


def linucb_update(state: LinearBanditState, x, a: int, r: float) -> LinearBanditState:
    x = _as_context(x, state.dim)
    _check_update(x, a, r, state.n_arms)
    state.A[a] += np.outer(x, x)
    state.b[a] += r * x
    state.counts[a] += 1
    state._refresh(a)
    return state


@dataclass
class PosteriorBelief:
    """Independent Gaussian beliefs ``N(m_k, Sigma_k)`` over each arm's coefficients.

    Stored in natural parameters (precision and precision-weighted mean) so that
    updates are exact sums and therefore order-independent.
    """

    n_arms: int
    dim: int
    noise_var: float = 1.0
    prior_scale: float = 1.0
    precision: np.ndarray = None
    eta: np.ndarray = None
    counts: np.ndarray = None
    _mean: np.ndarray = field(default=None, init=False, repr=False)
    _cov: np.ndarray = field(default=None, init=False, repr=False)
    _chol: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.noise_var <= 0 or self.prior_scale <= 0:
            raise ValueError("noise_var and prior_scale must be positive")
        if self.precision is None:
            self.precision = np.tile(np.eye(self.dim) / self.prior_scale, (self.n_arms, 1, 1))
        if self.eta is None:
            self.eta = np.zeros((self.n_arms, self.dim))
        if self.counts is None:
            self.counts = np.zeros(self.n_arms, dtype=np.int64)
        self.precision = np.asarray(self.precision, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self._mean = np.empty((self.n_arms, self.dim))
        self._cov = np.empty((self.n_arms, self.dim, self.dim))
        self._chol = np.empty((self.n_arms, self.dim, self.dim))
        for k in range(self.n_arms):
            self._refresh(k)

    def _refresh(self, arm: int) -> None:
        cov = np.linalg.inv(self.precision[arm])
        cov = 0.5 * (cov + cov.T)
        self._cov[arm] = cov
        self._mean[arm] = cov @ self.eta[arm]
        self._chol[arm] = np.linalg.cholesky(cov)

    @property
    def mean(self) -> np.ndarray:
        return self._mean.copy()

    @property
    def cov(self) -> np.ndarray:
        return self._cov.copy()

    def score_moments(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard deviation of ``x^T theta_k`` under each arm's belief."""
        x = _as_context(x, self.dim)
        mu = self._mean @ x
        sd = np.sqrt(np.maximum(np.einsum("i,kij,j->k", x, self._cov, x), 0.0))
        return mu, sd

    def select(self, x, rng) -> int:
        return ts_select(self, x, rng)

    def update(self, x, a: int, r: float) -> None:
        ts_update(self, x, a, r)

    def to_dict(self) -> dict:
        return {
            "n_arms": self.n_arms,
            "dim": self.dim,
            "noise_var": self.noise_var,
            "prior_scale": self.prior_scale,
            "precision": self.precision.tolist(),
            "eta": self.eta.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorBelief":
        return cls(**d)


def ts_update(belief: PosteriorBelief, x, a: int, r: float) -> PosteriorBelief:
    x = _as_context(x, belief.dim)
    _check_update(x, a, r, belief.n_arms)
    belief.precision[a] += np.outer(x, x) / belief.noise_var
    belief.eta[a] += r * x / belief.noise_var
    belief.counts[a] += 1
    belief._refresh(a)
    return belief


def ts_select(belief: PosteriorBelief, x, rng: np.random.Generator) -> int:
    """Draw one coefficient vector per arm from the posterior and act greedily on it."""
    x = _as_context(x, belief.dim)
    z = rng.standard_normal((belief.n_arms, belief.dim))
    theta = belief._mean + np.einsum("kij,kj->ki", belief._chol, z)
    return int(np.argmax(theta @ x))


def action_propensity(
    belief: PosteriorBelief, x, n_samples: int = 1000, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Monte Carlo estimate of the probability that Thompson sampling picks each arm.

    Scores ``x^T theta_k`` are independent Gaussians across arms, so they are
    sampled directly instead of drawing full coefficient vectors.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    mu, sd = belief.score_moments(x)
    scores = mu + sd * rng.standard_normal((n_samples, belief.n_arms))
    winners = np.argmax(scores, axis=1)
    return np.bincount(winners, minlength=belief.n_arms) / n_samples

