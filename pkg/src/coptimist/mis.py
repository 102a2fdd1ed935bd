"""Multiple importance sampling with the (robust) balance heuristic.

Samples are pooled from every behavior policy played so far; a target policy
is evaluated with weights

    w(z) = (k - 1) q(z | target) / sum_i N_i q(z | mu_i)

optionally truncated at a threshold, and a high-probability half-width is
derived from an upper bound on the exponentiated Renyi divergence between the
target and the behavior mixture. All density arithmetic is kept in log space.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .policies import GaussianHyperpolicy, hyper_logpdf, trajectory_log_density

BONUS_CONSTANT = math.sqrt(2.0) + 4.0 / 3.0

PARAMETER = "parameter"
ACTION = "action"


class NumericalDegenerate(ArithmeticError):
    """All behavior densities vanish at a sample."""


class Dataset:
    """Append-only pool of samples grouped by unique behavior policy.

    In parameter mode a sample is the drawn policy parameter and densities
    are hyperpolicy densities; in action mode a sample is a trajectory and
    densities are products of action probabilities.
    """

    def __init__(self, mode: str = PARAMETER):
        if mode not in (PARAMETER, ACTION):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.behaviors: list = []
        self.counts: list[int] = []
        self.samples: list = []
        self.returns: list[float] = []
        self.behavior_of: list[int] = []
        self._index: dict = {}
        self._logq: dict = {}
        self._mix: tuple[int, np.ndarray] | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def n_behaviors(self) -> int:
        return len(self.behaviors)

    def add(self, behavior, sample, ret: float) -> None:
        m = self._index.get(behavior)
        if m is None:
            m = self._index[behavior] = len(self.behaviors)
            self.behaviors.append(behavior)
            self.counts.append(0)
        self.counts[m] += 1
        if self.mode == PARAMETER:
            sample = np.atleast_1d(np.asarray(sample, dtype=float))
        self.samples.append(sample)
        self.returns.append(float(ret))
        self.behavior_of.append(m)

    def thetas(self) -> np.ndarray:
        if self.mode != PARAMETER:
            raise ValueError("thetas are only stored in parameter mode")
        return np.vstack(self.samples) if self.samples else np.empty((0, 0))

    def index_of(self, behavior) -> int | None:
        return self._index.get(behavior)

    def log_density(self, policy) -> np.ndarray:
        """log q(z_j | policy) for every stored sample (cached, incremental)."""
        cached = self._logq.get(policy)
        start = 0 if cached is None else len(cached)
        if start == len(self.samples):
            return cached
        new = np.array([_log_q(policy, z, self.mode) for z in self.samples[start:]]) \
            if self.mode == ACTION else \
            np.atleast_1d(hyper_logpdf(policy, np.vstack(self.samples[start:])))
        out = new if cached is None else np.concatenate([cached, new])
        self._logq[policy] = out
        return out

    def log_mixture(self) -> np.ndarray:
        """log sum_i N_i q(z_j | mu_i) for every stored sample."""
        if self._mix is not None and self._mix[0] == len(self.samples):
            return self._mix[1]
        if not self.samples:
            raise ValueError("empty dataset")
        L = np.vstack([self.log_density(b) for b in self.behaviors])
        out = logsumexp(L + np.log(self.counts)[:, None], axis=0)
        if not np.all(np.isfinite(out)):
            raise NumericalDegenerate("behavior mixture density underflows at some sample")
        self._mix = (len(self.samples), out)
        return out

    def write_csv(self, path) -> None:
        """Columnar snapshot: behavior index, parameter components, return."""
        d = self.thetas().shape[1] if self.samples and self.mode == PARAMETER else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["behavior"] + [f"theta_{i}" for i in range(d)] + ["return"])
            for m, z, f in zip(self.behavior_of, self.samples, self.returns):
                thetas = [repr(float(t)) for t in z] if d else []
                w.writerow([m] + thetas + [repr(f)])


def read_dataset_csv(path, behaviors: list) -> Dataset:
    """Rebuild a parameter-mode dataset from :meth:`Dataset.write_csv` output."""
    ds = Dataset(PARAMETER)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        ds.add(behaviors[int(row[0])], [float(x) for x in row[1:-1]], float(row[-1]))
    return ds


def _log_q(policy, sample, mode):
    if mode == PARAMETER:
        return hyper_logpdf(policy, sample)
    return trajectory_log_density(policy, sample)


# ---------------------------------------------------------------------------
# Balance-heuristic weights and the robust estimator
# ---------------------------------------------------------------------------


def bh_raw_weight(dataset: Dataset, target, sample) -> float:
    """Untruncated balance-heuristic weight of an arbitrary sample."""
    k1 = len(dataset)
    if k1 == 0:
        raise ValueError("empty dataset")
    log_den = logsumexp([math.log(n) + _log_q(b, sample, dataset.mode)
                         for b, n in zip(dataset.behaviors, dataset.counts)])
    if not math.isfinite(log_den):
        raise NumericalDegenerate("behavior mixture density underflows")
    return math.exp(math.log(k1) + _log_q(target, sample, dataset.mode) - log_den)


def bh_raw_weights(dataset: Dataset, target) -> np.ndarray:
    """Balance-heuristic weights of every stored sample under ``target``."""
    k1 = len(dataset)
    return np.exp(math.log(k1) + dataset.log_density(target) - dataset.log_mixture())


def rbh_estimate(dataset: Dataset, target, threshold: float, f_min: float = 0.0) -> float:
    """Robust balance-heuristic estimate with weights truncated at ``threshold``.

    Returns are shifted by ``f_min`` before weighting so the weighted
    quantity is nonnegative (the truncation bias then has a known sign);
    ``threshold=math.inf`` gives the unbiased balance heuristic.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    f = np.asarray(dataset.returns) - f_min
    if np.any(f < -1e-9):
        raise ValueError("returns fall below f_min")
    w = np.minimum(bh_raw_weights(dataset, target), threshold)
    return f_min + float(np.dot(w, f)) / len(dataset)


# ---------------------------------------------------------------------------
# Renyi divergences
# ---------------------------------------------------------------------------


def log_renyi_diag(mu_p, var_p, mu_q, var_q, epsilon: float) -> np.ndarray:
    """log d_{1+eps}(P || Q) for diagonal Gaussians, vectorised over rows of Q.

    ``mu_q``/``var_q`` may be ``(d,)`` or ``(M, d)``. Entries are ``inf``
    where (1+eps) var_q - eps var_p is not positive.
    """
    alpha = 1.0 + epsilon
    mu_p, var_p = np.asarray(mu_p, float), np.asarray(var_p, float)
    mu_q, var_q = np.atleast_2d(mu_q).astype(float), np.atleast_2d(var_q).astype(float)
    var_a = alpha * var_q - epsilon * var_p
    ok = np.all(var_a > 0, axis=-1)
    var_a = np.where(var_a > 0, var_a, 1.0)
    quad = (alpha / 2.0) * np.sum((mu_p - mu_q) ** 2 / var_a, axis=-1)
    logdet = np.sum(np.log(var_a) + epsilon * np.log(var_p) - alpha * np.log(var_q), axis=-1)
    out = quad - logdet / (2.0 * epsilon)
    return np.where(ok, out, np.inf)


def renyi_gaussian(P: GaussianHyperpolicy, Q: GaussianHyperpolicy, epsilon: float) -> float:
    """Closed-form exponentiated Renyi divergence d_{1+eps}(P || Q).

    Uses the exponent 1/eps, so the result is >= 1 and equals
    ``exp((1+eps)/2 * dmu' Sigma^-1 dmu)`` for equal covariances. Returns
    ``inf`` when the divergence is infinite.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must lie in (0, 1]")
    if P.dim != Q.dim:
        raise ValueError("dimension mismatch")
    return float(np.exp(log_renyi_diag(P.mu, P.var, Q.mu, Q.var, epsilon)[0]))


def _mixture_params(dataset: Dataset):
    if dataset.mode != PARAMETER or not all(isinstance(b, GaussianHyperpolicy)
                                            for b in dataset.behaviors):
        raise ValueError("mixture bound requires Gaussian hyperpolicy behaviors")
    mus = np.array([b.mean for b in dataset.behaviors])
    vars_ = np.array([b.variances for b in dataset.behaviors])
    log_w = np.log(np.asarray(dataset.counts, float)) - math.log(len(dataset))
    return mus, vars_, log_w


@functools.lru_cache(maxsize=16)
def _gh(n: int):
    x, w = np.polynomial.hermite.hermgauss(n)
    return math.sqrt(2.0) * x, np.log(w) - 0.5 * math.log(math.pi)


def _log_normal_1d(x, mu, var):
    # x: (n,), mu/var: (M,) -> (M, n)
    return -0.5 * (math.log(2 * math.pi) + np.log(var)[:, None]
                   + (x[None, :] - mu[:, None]) ** 2 / var[:, None])


def log_renyi_mixture_quadrature(target: GaussianHyperpolicy, mus, vars_, log_w,
                                 epsilon: float, nodes: int = 128) -> float:
    """log d_{1+eps}(P || Phi) by Gauss-Hermite quadrature under P (dim <= 2).

    Phi = sum_m exp(log_w[m]) N(mus[m], diag(vars_[m])).
    """
    d = target.dim
    x, lw = _gh(nodes)
    sd = np.sqrt(target.var)
    if d == 1:
        pts = target.mu[0] + sd[0] * x
        log_p = _log_normal_1d(pts, target.mu[:1], target.var[:1])[0]
        log_phi = logsumexp(_log_normal_1d(pts, mus[:, 0], vars_[:, 0]) + log_w[:, None], axis=0)
        log_terms = lw + epsilon * (log_p - log_phi)
    elif d == 2:
        p1 = target.mu[0] + sd[0] * x
        p2 = target.mu[1] + sd[1] * x
        lp = (_log_normal_1d(p1, target.mu[:1], target.var[:1])[0][:, None]
              + _log_normal_1d(p2, target.mu[1:], target.var[1:])[0][None, :])
        # the mixture factorises per component, so evaluate it on the tensor
        # grid as a scaled matrix product
        A = _log_normal_1d(p1, mus[:, 0], vars_[:, 0]) + log_w[:, None]
        B = _log_normal_1d(p2, mus[:, 1], vars_[:, 1])
        amax, bmax = A.max(0), B.max(0)
        S = np.exp(A - amax).T @ np.exp(B - bmax)
        with np.errstate(divide="ignore"):
            log_phi = amax[:, None] + bmax[None, :] + np.log(S)
        bad = ~(S > 1e-280)
        if bad.any():
            ia, ib = np.nonzero(bad)
            log_phi[ia, ib] = logsumexp(A[:, ia] + B[:, ib], axis=0)
        log_terms = lw[:, None] + lw[None, :] + epsilon * (lp - log_phi)
    else:
        raise ValueError("quadrature is only used for parameter dimension <= 2")
    return float(logsumexp(log_terms)) / epsilon


def log_renyi_mixture_bound(target: GaussianHyperpolicy, dataset: Dataset, epsilon: float,
                            nodes: int | None = 128) -> float:
    """log of :func:`renyi_mixture_bound`."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    mus, vars_, log_w = _mixture_params(dataset)
    # Phi >= (N_m / (k-1)) Q_m pointwise
    comp = np.min(log_renyi_diag(target.mu, target.var, mus, vars_, epsilon) - log_w)
    best = comp
    if nodes and target.dim <= 2 and comp > 0.0:
        best = min(comp, log_renyi_mixture_quadrature(target, mus, vars_, log_w, epsilon, nodes))
    return max(0.0, float(best))


def renyi_mixture_bound(target: GaussianHyperpolicy, dataset: Dataset, epsilon: float,
                        nodes: int | None = 128) -> float:
    """Upper bound on d_{1+eps}(target || behavior mixture), at least 1.

    The smaller of the component bound min_m ((k-1)/N_m) d(P || Q_m) and,
    for parameter dimension <= 2, a Gauss-Hermite evaluation of the mixture
    integral.
    """
    return math.exp(log_renyi_mixture_bound(target, dataset, epsilon, nodes))


# ---------------------------------------------------------------------------
# Threshold, bonus and full evaluation
# ---------------------------------------------------------------------------


def truncation_threshold(k: int, renyi: float, log_inv_delta: float, epsilon: float) -> float:
    """C_k = ((k-1) d^eps / log(1/delta))^(eps/(1+eps))."""
    if k < 2 or log_inv_delta <= 0:
        raise ValueError("need k >= 2 and log(1/delta) > 0")
    log_c = (epsilon / (1 + epsilon)) * (math.log(k - 1) + epsilon * math.log(renyi)
                                         - math.log(log_inv_delta))
    return math.exp(log_c)


def exploration_bonus(k: int, renyi: float, log_inv_delta: float, epsilon: float,
                      f_max: float, clip: float | None = None) -> float:
    """beta_k = |f|_inf (sqrt2 + 4/3) (d log(1/delta) / (k-1))^(eps/(1+eps))."""
    if k < 2 or f_max <= 0:
        raise ValueError("need k >= 2 and f_max > 0")
    log_b = (epsilon / (1 + epsilon)) * (math.log(renyi) + math.log(log_inv_delta)
                                         - math.log(k - 1))
    beta = f_max * BONUS_CONSTANT * math.exp(min(log_b, 700.0))
    if clip is not None and beta > clip:
        return float(clip)
    return beta


@dataclass(frozen=True)
class RbhEvaluation:
    estimate: float
    bonus: float
    threshold: float
    renyi_bound: float
    epsilon: float
    f_max: float
    f_min: float = 0.0

    @property
    def upper(self) -> float:
        """Optimistic value, never above the largest attainable return."""
        return min(self.estimate + self.bonus, self.f_min + self.f_max)

    @property
    def lower(self) -> float:
        """Pessimistic value, never below the smallest attainable return."""
        return max(self.estimate - self.bonus, self.f_min)


def evaluate(dataset: Dataset, target: GaussianHyperpolicy, log_inv_delta: float,
             epsilon: float = 1.0, f_range: tuple = (0.0, 1.0), clip: float | None = None,
             nodes: int | None = 128) -> RbhEvaluation:
    """Estimate, threshold and bonus for ``target`` at episode k = len(dataset) + 1.

    ``f_range`` is the (min, max) attainable return; the estimator and bonus
    act on returns shifted to start at zero.
    """
    k = len(dataset) + 1
    f_min, f_hi = f_range
    span = f_hi - f_min
    log_d = log_renyi_mixture_bound(target, dataset, epsilon, nodes)
    renyi = math.exp(min(log_d, 700.0))
    C = truncation_threshold(k, renyi, log_inv_delta, epsilon)
    est = rbh_estimate(dataset, target, C, f_min)
    beta = exploration_bonus(k, renyi, log_inv_delta, epsilon, span, clip)
    return RbhEvaluation(est, beta, C, renyi, epsilon, span, f_min)
