"""Nonlinear contextual bandits.

Two policies live here:

* neural-linear: a small tanh network maps contexts to features, and each arm
  keeps a Normal-inverse-Gamma (NIG) belief over a linear reward head on those
  features. The network is retrained from an experience replay queue and the
  head is refit from the replay after every retrain.
* EKF bandit: all arms' coefficients are stacked into one Gaussian state that
  is filtered with an extended Kalman filter. With the identity link and no
  process noise the filter is the exact Bayesian linear-regression posterior.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .linear_bandits import _as_context, _check_update

__all__ = [
    "ReplayQueue",
    "FeatureExtractor",
    "IdentityExtractor",
    "TrainConfig",
    "NigHead",
    "NeuralLinearPolicy",
    "EkfBelief",
    "replay_push",
    "train_feature_extractor",
    "neural_linear_update",
    "neural_linear_select",
    "ekf_update",
    "ekf_select",
]


# ---------------------------------------------------------------------------
# replay


class ReplayQueue:
    """Bounded FIFO of ``(context, action, reward)`` transitions."""

    def __init__(self, capacity: int, items=()):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)
        for item in items:
            self.push(item)

    def push(self, transition) -> None:
        if self.capacity == 0:
            return
        x, a, r = transition
        self._items.append((np.asarray(x, dtype=float).reshape(-1), int(a), float(r)))

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._items:
            raise ValueError("replay queue is empty")
        X = np.stack([t[0] for t in self._items])
        A = np.array([t[1] for t in self._items], dtype=np.int64)
        R = np.array([t[2] for t in self._items], dtype=float)
        return X, A, R

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "items": [[x.tolist(), a, r] for x, a, r in self._items],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplayQueue":
        return cls(d["capacity"], [tuple(it) for it in d["items"]])


def replay_push(queue: ReplayQueue, transition) -> ReplayQueue:
    queue.push(transition)
    return queue


# ---------------------------------------------------------------------------
# feature extractor


@dataclass
class TrainConfig:
    step_size: float = 0.05
    epochs: int = 200


class FeatureExtractor:
    """Fully connected tanh network ``d -> 32 -> 32`` whose last hidden layer is the feature map.

    A per-arm linear output head sits on top of the features and is used only
    to give the network a supervised target during training.
    """

    def __init__(self, dim: int, n_arms: int, hidden=(32, 32), seed: int = 0, params=None):
        self.dim = dim
        self.n_arms = n_arms
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = seed
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = [np.asarray(p, dtype=float) for p in params]

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    def _init_params(self, rng) -> list[np.ndarray]:
        params = []
        fan_in = self.dim
        for width in self.hidden:
            params.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, width)))
            params.append(np.zeros(width))
            fan_in = width
        params.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, self.n_arms)))
        params.append(np.zeros(self.n_arms))
        return params

    def _forward(self, X: np.ndarray, params=None) -> list[np.ndarray]:
        params = self.params if params is None else params
        acts = [X]
        h = X
        for i in range(len(self.hidden)):
            h = np.tanh(h @ params[2 * i] + params[2 * i + 1])
            acts.append(h)
        return acts

    def features(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"context dimension mismatch: expected {self.dim}, got {x.shape[-1]}")
        return self._forward(x)[-1]

    def loss(self, X, A, R, params=None) -> float:
        """Mean squared error of the training head on the logged actions."""
        params = self.params if params is None else params
        phi = self._forward(np.asarray(X, dtype=float), params)[-1]
        pred = np.einsum("np,pn->n", phi, params[-2][:, A]) + params[-1][A]
        return float(np.mean((pred - R) ** 2))

    def gradient(self, X, A, R, params=None) -> list[np.ndarray]:
        params = self.params if params is None else params
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        acts = self._forward(X, params)
        phi = acts[-1]
        W_out, c_out = params[-2], params[-1]
        resid = np.einsum("np,pn->n", phi, W_out[:, A]) + c_out[A] - R
        g_pred = 2.0 * resid / n

        onehot = np.zeros((n, self.n_arms))
        onehot[np.arange(n), A] = g_pred
        grads = [None] * len(params)
        grads[-2] = phi.T @ onehot
        grads[-1] = onehot.sum(axis=0)

        delta = g_pred[:, None] * W_out[:, A].T
        for i in reversed(range(len(self.hidden))):
            delta = delta * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ params[2 * i].T
        return grads

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def unflatten(self, flat: np.ndarray) -> list[np.ndarray]:
        out, i = [], 0
        for p in self.params:
            out.append(np.asarray(flat[i : i + p.size]).reshape(p.shape))
            i += p.size
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "dim": self.dim,
            "n_arms": self.n_arms,
            "hidden": list(self.hidden),
            "seed": self.seed,
            "params": [p.tolist() for p in self.params],
        }


class IdentityExtractor:
    """Pass-through feature map; turns the neural-linear policy into linear NIG Thompson sampling."""

    def __init__(self, dim: int, n_arms: int = 1):
        self.dim = dim
        self.n_arms = n_arms

    @property
    def feature_dim(self) -> int:
        return self.dim

    def features(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"context dimension mismatch: expected {self.dim}, got {x.shape[-1]}")
        return x

    def to_dict(self) -> dict:
        return {"kind": "identity", "dim": self.dim, "n_arms": self.n_arms}


def _extractor_from_dict(d: dict):
    if d["kind"] == "identity":
        return IdentityExtractor(d["dim"], d["n_arms"])
    return FeatureExtractor(d["dim"], d["n_arms"], d["hidden"], d["seed"], d["params"])


def train_feature_extractor(
    queue: ReplayQueue, extractor: FeatureExtractor, hyper: TrainConfig | None = None
) -> FeatureExtractor:
    """Full-batch gradient descent on the replay; returns the extractor with a ``loss_history``."""
    hyper = hyper or TrainConfig()
    X, A, R = queue.arrays()
    history = [extractor.loss(X, A, R)]
    for _ in range(hyper.epochs):
        grads = extractor.gradient(X, A, R)
        extractor.params = [p - hyper.step_size * g for p, g in zip(extractor.params, grads)]
        history.append(extractor.loss(X, A, R))
    extractor.loss_history = history
    return extractor


# ---------------------------------------------------------------------------
# Normal-inverse-Gamma head


class NigHead:
    """Per-arm NIG belief over ``(theta, sigma^2)``: ``theta | sigma^2 ~ N(m, sigma^2 V)``, ``sigma^2 ~ IG(a, b)``.

    Sufficient statistics are kept in natural form (``V^{-1}``, ``V^{-1} m``,
    sum of squared rewards) so sequential and batch updates coincide.
    """

    def __init__(self, n_arms: int, dim: int, prior_scale: float = 1.0, a0: float = 1.0, b0: float = 1.0):
        if prior_scale <= 0 or a0 <= 0 or b0 <= 0:
            raise ValueError("prior_scale, a0 and b0 must be positive")
        self.n_arms = n_arms
        self.dim = dim
        self.prior_scale = prior_scale
        self.a0 = a0
        self.b0 = b0
        self.reset()

    def reset(self) -> None:
        self.precision = np.tile(np.eye(self.dim) / self.prior_scale, (self.n_arms, 1, 1))
        self.eta = np.zeros((self.n_arms, self.dim))
        self.a = np.full(self.n_arms, float(self.a0))
        self.sum_r2 = np.zeros(self.n_arms)
        self._refresh_all()

    def _refresh_all(self) -> None:
        self._mean = np.empty((self.n_arms, self.dim))
        self._chol = np.empty((self.n_arms, self.dim, self.dim))
        self.b = np.empty(self.n_arms)
        for k in range(self.n_arms):
            self._refresh(k)

    def _refresh(self, k: int) -> None:
        cov = np.linalg.inv(self.precision[k])
        cov = 0.5 * (cov + cov.T)
        m = cov @ self.eta[k]
        self._mean[k] = m
        self._chol[k] = np.linalg.cholesky(cov)
        # prior mean is zero, so the prior quadratic term vanishes
        self.b[k] = self.b0 + 0.5 * (self.sum_r2[k] - self.eta[k] @ m)
        if not (self.b[k] > 0 and self.a[k] > 0):
            raise FloatingPointError(f"NIG parameters left the valid region on arm {k}")
        if self.a[k] > 1 and not np.isfinite(self.b[k] / (self.a[k] - 1)):
            raise FloatingPointError("posterior predictive variance is not finite")

    @property
    def mean(self) -> np.ndarray:
        return self._mean.copy()

    @property
    def cov_scale(self) -> np.ndarray:
        """``V`` per arm (covariance of theta divided by sigma^2)."""
        return np.linalg.inv(self.precision)

    def to_dict(self) -> dict:
        return {
            "n_arms": self.n_arms,
            "dim": self.dim,
            "prior_scale": self.prior_scale,
            "a0": self.a0,
            "b0": self.b0,
            "precision": self.precision.tolist(),
            "eta": self.eta.tolist(),
            "a": self.a.tolist(),
            "sum_r2": self.sum_r2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NigHead":
        head = cls(d["n_arms"], d["dim"], d["prior_scale"], d["a0"], d["b0"])
        head.precision = np.asarray(d["precision"], dtype=float)
        head.eta = np.asarray(d["eta"], dtype=float)
        head.a = np.asarray(d["a"], dtype=float)
        head.sum_r2 = np.asarray(d["sum_r2"], dtype=float)
        head._refresh_all()
        return head


def neural_linear_update(head: NigHead, features, a: int, r: float) -> NigHead:
    phi = _as_context(features, head.dim)
    _check_update(phi, a, r, head.n_arms)
    head.precision[a] += np.outer(phi, phi)
    head.eta[a] += r * phi
    head.a[a] += 0.5
    head.sum_r2[a] += r * r
    head._refresh(a)
    return head


def neural_linear_select(extractor, head: NigHead, x, rng: np.random.Generator) -> int:
    """Thompson sampling on the NIG head over extracted features."""
    phi = _as_context(extractor.features(np.asarray(x, dtype=float).reshape(-1)), head.dim)
    sigma2 = head.b / rng.gamma(head.a, 1.0)
    z = rng.standard_normal((head.n_arms, head.dim))
    theta = head._mean + np.sqrt(sigma2)[:, None] * np.einsum("kij,kj->ki", head._chol, z)
    return int(np.argmax(theta @ phi))


class NeuralLinearPolicy:
    """Neural-linear Thompson sampling with periodic retraining from replay."""

    def __init__(
        self,
        extractor,
        head: NigHead,
        replay: ReplayQueue | None = None,
        retrain_every: int = 100,
        train: TrainConfig | None = None,
        n_updates: int = 0,
    ):
        if head.dim != extractor.feature_dim:
            raise ValueError("head dimension must equal the extractor feature dimension")
        self.extractor = extractor
        self.head = head
        self.replay = replay if replay is not None else ReplayQueue(1000)
        self.retrain_every = retrain_every
        self.train = train or TrainConfig()
        self.n_updates = n_updates

    @classmethod
    def create(cls, n_arms: int, dim: int, seed: int = 0, **kw) -> "NeuralLinearPolicy":
        extractor = FeatureExtractor(dim, n_arms, seed=seed)
        head = NigHead(n_arms, extractor.feature_dim)
        return cls(extractor, head, **kw)

    def select(self, x, rng) -> int:
        return neural_linear_select(self.extractor, self.head, x, rng)

    def update(self, x, a: int, r: float) -> None:
        x = np.asarray(x, dtype=float).reshape(-1)
        self.replay.push((x, a, r))
        neural_linear_update(self.head, self.extractor.features(x), a, r)
        self.n_updates += 1
        if (
            self.retrain_every > 0
            and self.n_updates % self.retrain_every == 0
            and isinstance(self.extractor, FeatureExtractor)
            and len(self.replay) > 0
        ):
            self.retrain()

    def retrain(self) -> None:
        train_feature_extractor(self.replay, self.extractor, self.train)
        self.head.reset()
        X, A, R = self.replay.arrays()
        phi = self.extractor.features(X)
        # batch refit of the sufficient statistics
        for k in range(self.head.n_arms):
            mask = A == k
            if not mask.any():
                continue
            self.head.precision[k] += phi[mask].T @ phi[mask]
            self.head.eta[k] += phi[mask].T @ R[mask]
            self.head.a[k] += 0.5 * mask.sum()
            self.head.sum_r2[k] += R[mask] @ R[mask]
        self.head._refresh_all()

    def to_dict(self) -> dict:
        return {
            "extractor": self.extractor.to_dict(),
            "head": self.head.to_dict(),
            "replay": self.replay.to_dict(),
            "retrain_every": self.retrain_every,
            "train": {"step_size": self.train.step_size, "epochs": self.train.epochs},
            "n_updates": self.n_updates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeuralLinearPolicy":
        return cls(
            _extractor_from_dict(d["extractor"]),
            NigHead.from_dict(d["head"]),
            ReplayQueue.from_dict(d["replay"]),
            d["retrain_every"],
            TrainConfig(**d["train"]),
            d["n_updates"],
        )


# ---------------------------------------------------------------------------
# extended Kalman filter


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


_LINKS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "sigmoid": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))),
}


@dataclass
class EkfBelief:
    """Gaussian belief over the stacked coefficients of all arms.

    The observation for arm ``a`` is ``link(x^T theta_a) + noise`` with variance
    ``obs_var``; a random-walk drift with variance ``process_var`` per step is
    applied before each update.
    """

    n_arms: int
    dim: int
    process_var: float = 0.0
    obs_var: float = 1.0
    prior_scale: float = 1.0
    link: str = "identity"
    mean: np.ndarray = None
    cov: np.ndarray = None
    _chol: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.link not in _LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        if self.obs_var <= 0 or self.process_var < 0:
            raise ValueError("obs_var must be positive and process_var non-negative")
        n = self.n_arms * self.dim
        if self.mean is None:
            self.mean = np.zeros(n)
        if self.cov is None:
            self.cov = self.prior_scale * np.eye(n)
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        self._chol = None

    def block(self, a: int) -> slice:
        return slice(a * self.dim, (a + 1) * self.dim)

    def arm_mean(self, a: int) -> np.ndarray:
        return self.mean[self.block(a)].copy()

    def arm_cov(self, a: int) -> np.ndarray:
        s = self.block(a)
        return self.cov[s, s].copy()

    def _block_chols(self) -> np.ndarray:
        if self._chol is None:
            chols = np.empty((self.n_arms, self.dim, self.dim))
            for k in range(self.n_arms):
                s = self.block(k)
                try:
                    chols[k] = np.linalg.cholesky(self.cov[s, s])
                except np.linalg.LinAlgError:
                    chols[k] = _psd_sqrt(self.cov[s, s])
            self._chol = chols
        return self._chol

    def select(self, x, rng) -> int:
        return ekf_select(self, x, rng)

    def update(self, x, a: int, r: float) -> None:
        ekf_update(self, x, a, r)

    def to_dict(self) -> dict:
        return {
            "n_arms": self.n_arms,
            "dim": self.dim,
            "process_var": self.process_var,
            "obs_var": self.obs_var,
            "prior_scale": self.prior_scale,
            "link": self.link,
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EkfBelief":
        return cls(**d)


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(c)
    return v * np.sqrt(np.clip(w, 0.0, None))


def ekf_update(belief: EkfBelief, x, a: int, r: float) -> EkfBelief:
    """One predict/update cycle of the extended Kalman filter for a scalar reward."""
    x = _as_context(x, belief.dim)
    _check_update(x, a, r, belief.n_arms)
    n = belief.mean.shape[0]
    P = belief.cov + belief.process_var * np.eye(n)

    fn, dfn = _LINKS[belief.link]
    s = belief.block(a)
    z = float(x @ belief.mean[s])
    h = np.zeros(n)
    h[s] = dfn(np.array(z)) * x

    Ph = P @ h
    S = float(h @ Ph) + belief.obs_var
    gain = Ph / S
    belief.mean = belief.mean + gain * (r - float(fn(np.array(z))))
    # Joseph form keeps the covariance symmetric positive semidefinite
    I_KH = np.eye(n) - np.outer(gain, h)
    P = I_KH @ P @ I_KH.T + belief.obs_var * np.outer(gain, gain)
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(P)[0] < -1e-10 * max(1.0, float(np.abs(P).max())):
        raise FloatingPointError("EKF covariance lost positive semidefiniteness")
    belief.cov = P
    belief._chol = None
    return belief


def ekf_select(belief: EkfBelief, x, rng: np.random.Generator) -> int:
    """Thompson draw from each arm's marginal block of the filtered belief."""
    x = _as_context(x, belief.dim)
    chols = belief._block_chols()
    z = rng.standard_normal((belief.n_arms, belief.dim))
    theta = belief.mean.reshape(belief.n_arms, belief.dim) + np.einsum("kij,kj->ki", chols, z)
    return int(np.argmax(theta @ x))
