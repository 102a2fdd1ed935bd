"""Policies and Gaussian hyperpolicies.

Stochastic tabular policies expose exact action log-probabilities (used by
action-based importance weights); deterministic linear controllers carry no
action density and are only ever weighted through the hyperpolicy that
generated their parameter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class UnsupportedOperation(TypeError):
    """Raised when an operation is undefined for a policy class."""


def sigmoid_link(theta):
    """Numerically stable logistic map from R into (0, 1)."""
    t = np.asarray(theta, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Gaussian hyperpolicy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianHyperpolicy:
    """N(mean, diag(variances)) over policy parameters.

    Stored as tuples so instances hash and compare by value; the learning
    loops use them as dictionary keys when caching densities and audits.
    """

    mean: tuple
    variances: tuple
    box: tuple | None = None  # ((lo, hi), ...) per dimension

    def __post_init__(self):
        mean = tuple(float(m) for m in np.atleast_1d(self.mean))
        var = tuple(float(v) for v in np.atleast_1d(self.variances))
        if len(var) == 1 and len(mean) > 1:
            var = var * len(mean)
        if len(mean) != len(var):
            raise ValueError("mean and variances differ in dimension")
        if any(not (v > 0.0) or not math.isfinite(v) for v in var):
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variances", var)
        if self.box is not None:
            box = tuple((float(lo), float(hi)) for lo, hi in self.box)
            if len(box) != len(mean):
                raise ValueError("parameter box dimension mismatch")
            for m, (lo, hi) in zip(mean, box):
                if not lo - 1e-12 <= m <= hi + 1e-12:
                    raise ValueError(f"mean {m} outside parameter box [{lo}, {hi}]")
            object.__setattr__(self, "box", box)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def mu(self) -> np.ndarray:
        return np.asarray(self.mean)

    @property
    def var(self) -> np.ndarray:
        return np.asarray(self.variances)

    @property
    def cov(self) -> np.ndarray:
        return np.diag(self.variances)

    def with_mean(self, mean) -> "GaussianHyperpolicy":
        return GaussianHyperpolicy(tuple(np.atleast_1d(mean)), self.variances, self.box)


def hyper_logpdf(h: GaussianHyperpolicy, theta) -> float | np.ndarray:
    """Exact log-density of ``theta`` under ``h``.

    ``theta`` may be a single vector of length ``h.dim`` or an ``(n, dim)``
    batch, in which case an array of ``n`` log-densities is returned.
    """
    t = np.asarray(theta, dtype=float)
    single = t.ndim <= 1
    t = t.reshape(1, -1) if single else t
    if t.ndim != 2 or t.shape[-1] != h.dim:
        raise ValueError(f"theta has dimension {t.shape[-1]}, expected {h.dim}")
    var = h.var
    z = (t - h.mu) ** 2 / var
    out = -0.5 * (h.dim * LOG_2PI + np.log(var).sum() + z.sum(axis=-1))
    return float(out[0]) if single else out


def sample_theta(h: GaussianHyperpolicy, rng: np.random.Generator) -> np.ndarray:
    return h.mu + np.sqrt(h.var) * rng.standard_normal(h.dim)


# ---------------------------------------------------------------------------
# Concrete policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularIndexedPolicy:
    """Plays the reference action with probability ``p``.

    The remaining mass is spread evenly over the other ``n_actions - 1``
    actions so every row is a distribution.
    """

    reference_policy: tuple
    mixing_param: float
    n_actions: int

    def __post_init__(self):
        object.__setattr__(self, "reference_policy", tuple(int(a) for a in self.reference_policy))
        if not 0.0 <= self.mixing_param <= 1.0:
            raise ValueError("mixing_param must lie in [0, 1]")
        if self.n_actions < 2:
            raise ValueError("need at least two actions")

    def table(self) -> np.ndarray:
        n_states = len(self.reference_policy)
        other = (1.0 - self.mixing_param) / (self.n_actions - 1)
        t = np.full((n_states, self.n_actions), other)
        t[np.arange(n_states), self.reference_policy] = self.mixing_param
        return t

    def action_probs(self, s: int) -> np.ndarray:
        other = (1.0 - self.mixing_param) / (self.n_actions - 1)
        row = np.full(self.n_actions, other)
        row[self.reference_policy[s]] = self.mixing_param
        return row

    def act(self, s: int, rng: np.random.Generator) -> int:
        if rng.random() < self.mixing_param:
            return self.reference_policy[s]
        # uniform over the other actions
        a = int(rng.integers(self.n_actions - 1))
        return a + (a >= self.reference_policy[s])


@dataclass(frozen=True)
class LinearDeterministicPolicy:
    theta: tuple
    feature_map: Callable = field(compare=False)
    action_bounds: tuple = (-1.0, 1.0)

    def act(self, s, rng=None) -> float:
        a = float(np.dot(self.theta, self.feature_map(s)))
        lo, hi = self.action_bounds
        return min(max(a, lo), hi)


def action_log_prob(policy, s, a) -> float:
    if not hasattr(policy, "action_probs"):
        raise UnsupportedOperation(
            f"{type(policy).__name__} is deterministic; action densities are undefined"
        )
    probs = policy.action_probs(s)
    if not 0 <= a < len(probs):
        raise ValueError(f"action {a} out of range")
    return math.log(probs[a]) if probs[a] > 0 else -math.inf


def trajectory_log_density(policy, traj) -> float:
    """Sum of action log-probabilities along ``traj``.

    Transition terms are omitted: they cancel in any ratio of trajectory
    densities under two policies.
    """
    if hasattr(policy, "table") and len(traj.states):
        t = policy.table()
        with np.errstate(divide="ignore"):
            return float(np.log(t[np.asarray(traj.states), np.asarray(traj.actions)]).sum())
    return float(sum(action_log_prob(policy, s, a) for s, a in zip(traj.states, traj.actions)))


# ---------------------------------------------------------------------------
# Parameter -> policy families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexedFamily:
    """theta -> TabularIndexedPolicy with p = sigmoid(theta)."""

    reference_policy: tuple
    n_actions: int

    def __call__(self, theta) -> TabularIndexedPolicy:
        p = sigmoid_link(float(np.ravel(theta)[0]))
        return TabularIndexedPolicy(self.reference_policy, p, self.n_actions)

    def tables(self, thetas: Sequence[float]) -> np.ndarray:
        """Stacked (n, S, A) action tables for a batch of scalar parameters."""
        p = np.atleast_1d(sigmoid_link(np.asarray(thetas, dtype=float)))
        n_states = len(self.reference_policy)
        other = (1.0 - p) / (self.n_actions - 1)
        t = np.repeat(other[:, None, None], n_states, axis=1).repeat(self.n_actions, axis=2)
        t[:, np.arange(n_states), self.reference_policy] = p[:, None]
        return t


def mountaincar_features(state) -> np.ndarray:
    """(position, velocity) each rescaled to [0, 1]."""
    pos, vel = state
    return np.array([(pos + 1.2) / 1.8, (vel + 0.07) / 0.14])


@dataclass(frozen=True)
class LinearFamily:
    """theta -> clip(theta . phi(s)) with the MountainCar feature map."""

    action_bounds: tuple = (-1.0, 1.0)

    def __call__(self, theta) -> LinearDeterministicPolicy:
        return LinearDeterministicPolicy(
            tuple(float(t) for t in np.ravel(theta)), mountaincar_features, self.action_bounds
        )
