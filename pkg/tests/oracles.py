"""Independent reference computations used by the tests.

Nothing here imports the package under test except where a test needs the
package's decision rule (noted per function); the numerics are recomputed
from scratch with different formulations.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import integrate


def batch_posterior(X, r, noise_var=1.0, prior_scale=1.0):
    """Gaussian linear-regression posterior in covariance form, prior N(0, prior_scale*I)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    r = np.asarray(r, dtype=float)
    d = X.shape[1]
    cov = np.linalg.inv(np.eye(d) / prior_scale + X.T @ X / noise_var)
    mean = cov @ (X.T @ r) / noise_var
    return mean, cov


def batch_nig(Phi, r, prior_scale=1.0, a0=1.0, b0=1.0):
    """Normal-inverse-Gamma posterior (m, V, a, b) with prior m0=0, V0=prior_scale*I."""
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    r = np.asarray(r, dtype=float)
    p = Phi.shape[1]
    V0_inv = np.eye(p) / prior_scale
    V = np.linalg.inv(V0_inv + Phi.T @ Phi)
    m = V @ (Phi.T @ r)
    a = a0 + 0.5 * len(r)
    b = b0 + 0.5 * (r @ r - m @ np.linalg.solve(V, m))
    return m, V, a, b


def central_gradient(f, w, h=1e-6):
    w = np.asarray(w, dtype=float)
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# random-policy regret


def expected_max_gaussian_scores(theta) -> float:
    """E[max_k x.theta_k] for x ~ N(0, I).

    The score vector is Gaussian with covariance theta theta^T. Writing it as
    L u with u ~ N(0, I_r) and max positively homogeneous, the expectation
    factors into E|u| (chi mean) times the sphere average of max(L w).
    """
    theta = np.asarray(theta, dtype=float)
    C = theta @ theta.T
    evals, evecs = np.linalg.eigh(C)
    keep = evals > 1e-12 * max(evals.max(), 1e-300)
    L = evecs[:, keep] * np.sqrt(evals[keep])
    r = L.shape[1]
    chi_mean = math.sqrt(2) * math.gamma((r + 1) / 2) / math.gamma(r / 2)
    if r == 1:
        sphere = 0.5 * (max(L[:, 0]) + max(-L[:, 0]))
    elif r == 2:
        val, _ = integrate.quad(lambda t: max(L @ np.array([math.cos(t), math.sin(t)])), 0, 2 * math.pi, limit=400)
        sphere = val / (2 * math.pi)
    elif r == 3:
        def f(phi, th):
            w = np.array([math.sin(th) * math.cos(phi), math.sin(th) * math.sin(phi), math.cos(th)])
            return max(L @ w) * math.sin(th)

        val, _ = integrate.dblquad(f, 0, math.pi, 0, 2 * math.pi, epsabs=1e-6)
        sphere = val / (4 * math.pi)
    else:
        raise NotImplementedError("rank > 3")
    return chi_mean * sphere


def random_policy_regret(theta, horizon: int) -> float:
    """Expected cumulative pseudo-regret of uniform play with N(0, I) contexts."""
    # E[x.theta_k] = 0 for every k, so only the max term survives
    return horizon * expected_max_gaussian_scores(theta)


# ---------------------------------------------------------------------------
# restless bandits


def grid_vi(P, rewards, discount, lams, tol=1e-12, max_iter=100000):
    """Vectorized value iteration over a grid of subsidies.

    Returns Q of shape (len(lams), 2 states, 2 actions).
    """
    P = np.asarray(P, dtype=float)
    r = np.asarray(rewards, dtype=float)
    lams = np.asarray(lams, dtype=float)
    V = np.zeros((lams.size, 2))
    for _ in range(max_iter):
        Qp = r + lams[:, None] + discount * V @ P[0].T
        Qa = r + discount * V @ P[1].T
        V_new = np.maximum(Qp, Qa)
        if np.max(np.abs(V_new - V)) <= tol:
            V = V_new
            break
        V = V_new
    Qp = r + lams[:, None] + discount * V @ P[0].T
    Qa = r + discount * V @ P[1].T
    return np.stack([Qp, Qa], axis=-1)


def grid_scan_index(P, rewards=(0.0, 1.0), discount=0.9, step=1e-4, margin=1e-9):
    """Smallest grid subsidy at which resting is weakly optimal, per state."""
    bound = 2.0 * max(abs(rewards[1] - rewards[0]), 1.0) / (1.0 - discount)
    lams = np.arange(-bound, bound + step / 2, step)
    Q = grid_vi(P, rewards, discount, lams)
    ok = Q[:, :, 0] - Q[:, :, 1] >= -margin
    if not ok.any(axis=0).all():
        raise ValueError("no subsidy on the grid makes resting optimal")
    return lams[np.argmax(ok, axis=0)]


def tiny_instance_values(mdps, horizon, index_fn, init_state):
    """Exact expected total reward of the optimal and the index policy.

    Joint chain over N arms with one action per round. Reward per round is the
    sum of next-state rewards. ``index_fn(arm, state)`` supplies the index used
    by the index policy; ties go to the lower arm.
    """
    n = len(mdps)
    states = list(itertools.product((0, 1), repeat=n))

    def step_dist(joint, acted):
        out = {}
        for nxt in states:
            p = 1.0
            for i in range(n):
                a = 1 if i == acted else 0
                p *= mdps[i].P[a, joint[i], nxt[i]]
            if p > 0:
                out[nxt] = out.get(nxt, 0.0) + p
        return out

    def reward(joint):
        return sum(mdps[i].rewards[joint[i]] for i in range(n))

    opt = {s: 0.0 for s in states}
    pol = {s: 0.0 for s in states}
    for _ in range(horizon):
        new_opt, new_pol = {}, {}
        for s in states:
            vals = []
            for acted in range(n):
                vals.append(sum(p * (reward(t) + opt[t]) for t, p in step_dist(s, acted).items()))
            new_opt[s] = max(vals)
            scores = [index_fn(i, s[i]) for i in range(n)]
            acted = max(range(n), key=lambda i: (scores[i], -i))
            new_pol[s] = sum(p * (reward(t) + pol[t]) for t, p in step_dist(s, acted).items())
        opt, pol = new_opt, new_pol
    return opt[tuple(init_state)], pol[tuple(init_state)]


def passive_stationary_good(p01: float, p11: float) -> float:
    """Stationary probability of the good state for a two-state chain."""
    p10 = 1.0 - p11
    return p01 / (p01 + p10)


# ---------------------------------------------------------------------------
# survival


def person_period_design(records, n_periods, period=1.0):
    """Rows (x, onehot(h)) and labels for the person-period expansion."""
    rows, y = [], []
    for rec in records:
        last = int(math.ceil(rec.t / period - 1e-12))
        for h in range(1, last + 1):
            onehot = np.zeros(n_periods)
            onehot[h - 1] = 1.0
            rows.append(np.concatenate([np.atleast_1d(rec.x), onehot]))
            y.append(1.0 if (h == last and rec.c == 0) else 0.0)
    return np.array(rows), np.array(y)


def glm_logistic_fit(Z, y):
    """Unpenalized logistic regression via statsmodels (no intercept; one-hots carry it)."""
    import statsmodels.api as sm

    return np.asarray(sm.GLM(y, Z, family=sm.families.Binomial()).fit(tol=1e-12, maxiter=200).params)


def empirical_hazards(records, n_periods, period=1.0):
    """Events divided by subjects at risk, per period."""
    at_risk = np.zeros(n_periods)
    events = np.zeros(n_periods)
    for rec in records:
        last = int(math.ceil(rec.t / period - 1e-12))
        at_risk[:last] += 1
        if rec.c == 0:
            events[last - 1] += 1
    return events / np.where(at_risk > 0, at_risk, 1)
