"""Time-to-event estimation on censored data.

Censoring convention: ``c == 1`` means the record is censored (follow-up ended
without the event) and ``c == 0`` means the event was observed at ``t``. CSV
input can declare the opposite polarity with ``censored_value``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SurvivalRecord",
    "SurvivalCurve",
    "HazardModel",
    "ConvergenceError",
    "fit_kaplan_meier",
    "person_period",
    "penalized_loss",
    "penalized_grad",
    "fit_discrete_hazard",
    "predict_survival",
    "risk_rank",
    "read_survival_csv",
]


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, last_loss: float):
        super().__init__(f"{message} (last loss {last_loss!r})")
        self.last_loss = last_loss


@dataclass(frozen=True)
class SurvivalRecord:
    x: np.ndarray
    t: float
    c: int
    M: float
    subject_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(-1))
        if not 0 < self.t <= self.M:
            raise ValueError(f"time {self.t} outside (0, {self.M}]")
        if self.c not in (0, 1):
            raise ValueError("censoring flag must be 0 or 1")


@dataclass
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step function; 1 before the first observed time."""
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[1.0], self.survival])
        return padded[pos]


def fit_kaplan_meier(records: Sequence[SurvivalRecord]) -> SurvivalCurve:
    """Product-limit estimator; at tied times events are counted before censorings."""
    if len(records) == 0:
        raise ValueError("no records")
    t = np.array([r.t for r in records], dtype=float)
    event = np.array([r.c == 0 for r in records])
    times = np.unique(t)
    at_risk = np.array([(t >= u).sum() for u in times])
    events = np.array([(event & (t == u)).sum() for u in times])
    survival = np.cumprod((at_risk - events) / at_risk)
    return SurvivalCurve(times, survival, at_risk, events)


@dataclass
class HazardModel:
    """Logistic discrete-time hazard: ``logit h_j(x) = x . beta + gamma_j``."""

    period: float
    n_periods: int
    coef: np.ndarray
    feature_dim: int
    l2: float = 1e-2
    iterations: int = 0
    final_loss: float = float("nan")
    grad_norm: float = float("nan")

    @property
    def beta(self) -> np.ndarray:
        return self.coef[: self.feature_dim]

    @property
    def gamma(self) -> np.ndarray:
        return self.coef[self.feature_dim :]

    def hazards(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.feature_dim:
            raise ValueError(f"context dimension mismatch: expected {self.feature_dim}, got {x.shape[0]}")
        return _sigmoid(x @ self.beta + self.gamma)

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "n_periods": self.n_periods,
            "coef": self.coef.tolist(),
            "feature_dim": self.feature_dim,
            "l2": self.l2,
            "iterations": self.iterations,
            "final_loss": self.final_loss,
            "grad_norm": self.grad_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HazardModel":
        d = dict(d)
        d["coef"] = np.asarray(d["coef"], dtype=float)
        return cls(**d)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def _period_of(t: float, period: float) -> int:
    # small slack so that t = h * period lands in period h despite rounding
    return max(1, int(math.ceil(t / period - 1e-9)))


def person_period(records: Sequence[SurvivalRecord], period: float, n_periods: int):
    """Expand records into rows ``(x, onehot(h))`` for every period the subject entered alive.

    The label is 1 only in the period of an observed event. A censored subject
    contributes rows up to and including its censoring period.
    """
    d = records[0].x.shape[0] if records else 0
    rows, labels = [], []
    for rec in records:
        last = min(_period_of(rec.t, period), n_periods)
        for h in range(1, last + 1):
            z = np.zeros(d + n_periods)
            z[:d] = rec.x
            z[d + h - 1] = 1.0
            rows.append(z)
            labels.append(1.0 if (h == last and rec.c == 0) else 0.0)
    Z = np.array(rows).reshape(-1, d + n_periods)
    return Z, np.array(labels)


def penalized_loss(w, Z, y, l2) -> float:
    """Negative log-likelihood of the logistic model plus ``l2/2 * ||w||^2``."""
    eta = Z @ w
    # log(1 + e^eta) - y * eta, computed stably
    nll = np.logaddexp(0.0, eta) - y * eta
    return float(nll.sum() + 0.5 * l2 * (w @ w))


def penalized_grad(w, Z, y, l2) -> np.ndarray:
    return Z.T @ (_sigmoid(Z @ w) - y) + l2 * w


def fit_discrete_hazard(
    records: Sequence[SurvivalRecord],
    period: float = 1.0,
    l2: float = 1e-2,
    max_iter: int = 100,
    tol: float = 1e-8,
    n_periods: int | None = None,
) -> HazardModel:
    """Penalized maximum likelihood by damped Newton steps until ``||grad|| <= tol``."""
    if not records:
        raise ValueError("no records")
    if l2 < 0:
        raise ValueError("l2 penalty must be non-negative")
    M = max(r.M for r in records)
    H = n_periods if n_periods is not None else int(math.ceil(M / period - 1e-9))
    d = records[0].x.shape[0]
    Z, y = person_period(records, period, H)
    w = np.zeros(d + H)
    loss = penalized_loss(w, Z, y, l2)
    for it in range(1, max_iter + 1):
        g = penalized_grad(w, Z, y, l2)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return HazardModel(period, H, w, d, l2, it - 1, loss, gnorm)
        p = _sigmoid(Z @ w)
        hess = (Z * (p * (1 - p))[:, None]).T @ Z + l2 * np.eye(w.shape[0])
        try:
            step = np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, g, rcond=None)[0]
        t = 1.0
        decrement = float(g @ step)
        w_new = w - step
        new_loss = penalized_loss(w_new, Z, y, l2)
        # below loss rounding the Armijo test is noise; keep the full step
        if decrement > 1e-12 * max(1.0, abs(loss)):
            while new_loss > loss - 1e-4 * t * decrement and t >= 1e-10:
                t *= 0.5
                w_new = w - t * step
                new_loss = penalized_loss(w_new, Z, y, l2)
        w, loss = w_new, new_loss
    g = penalized_grad(w, Z, y, l2)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return HazardModel(period, H, w, d, l2, max_iter, loss, gnorm)
    raise ConvergenceError(f"no convergence after {max_iter} iterations", loss)


def predict_survival(model: HazardModel, x, horizon: int) -> np.ndarray:
    """``S(h | x)`` for ``h = 1..horizon``."""
    if horizon > model.n_periods:
        raise ValueError(f"horizon {horizon} exceeds model periods {model.n_periods}")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    return np.cumprod(1.0 - model.hazards(x)[:horizon])


def risk_rank(model: HazardModel, cohort: Iterable[tuple[str, np.ndarray]], horizon: int) -> list:
    """Subject ids ordered from highest to lowest risk at ``horizon``; ties by id."""
    scored = []
    for subject_id, x in cohort:
        surv = predict_survival(model, x, horizon)
        scored.append((float(surv[-1]) if horizon > 0 else 1.0, subject_id))
    scored.sort()
    return [sid for _, sid in scored]


def read_survival_csv(path, max_followup: float | None = None, censored_value: int = 1) -> list[SurvivalRecord]:
    """Read ``subject_id, t, c, <features...>``; ``censored_value`` is the ``c`` code meaning censored."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["subject_id", "t", "c"]:
            raise ValueError("survival CSV must start with header subject_id,t,c")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t = float(row[1])
                c_raw = int(row[2])
                x = [float(v) for v in row[3:]]
            except (ValueError, IndexError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if c_raw not in (0, 1):
                raise ValueError(f"line {lineno}: censoring flag must be 0 or 1")
            rows.append((row[0], t, 1 if c_raw == censored_value else 0, x))
    M = max_followup if max_followup is not None else max(r[1] for r in rows)
    return [SurvivalRecord(np.array(x), t, c, M, sid) for sid, t, c, x in rows]
