"""Optimistic policy search with an optional conservative gate.

Each episode the loop scores every grid hyperpolicy by ``estimate + bonus``,
keeps the best one as candidate and, in conservative mode, plays it only if
the pessimistic value of everything played so far (plus the candidate) stays
above ``(1 - alpha) * k * J(baseline)``; otherwise the baseline is played.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .mis import Dataset, RbhEvaluation, evaluate
from .policies import GaussianHyperpolicy, IndexedFamily, LinearFamily

DISCRETE = "discrete"
COMPACT = "compact"


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def confidence_schedule(k: int, delta: float, d: int = 1, mode: str = COMPACT,
                        grid_size: int = 1) -> float:
    """log(1/delta_k) for the per-episode confidence level.

    compact:  delta_k = 6 delta / (k^2 pi^2 (2 + d^d k^(2d)))
    discrete: delta_k = 3 delta / (k^2 pi^2 |Pi|)
    """
    if k < 1 or not 0.0 < delta < 1.0:
        raise ValueError("need k >= 1 and delta in (0, 1)")
    base = 2.0 * math.log(k) + 2.0 * math.log(math.pi) - math.log(delta)
    if mode == COMPACT:
        return base + np.logaddexp(math.log(2.0), d * math.log(d) + 2 * d * math.log(k)) \
            - math.log(6.0)
    if mode == DISCRETE:
        return base + math.log(grid_size) - math.log(3.0)
    raise ValueError(f"unknown mode {mode!r}")


def points_per_dim(k: int, kappa: float) -> int:
    """ceil(k^(1/kappa)), robust to floating error at exact powers."""
    n = math.ceil(k ** (1.0 / kappa))
    while n > 1 and (n - 1) ** kappa >= k * (1 - 1e-12):
        n -= 1
    return max(n, 1)


@dataclass(frozen=True)
class PolicyGrid:
    box: tuple  # ((lo, hi), ...)
    vertices: np.ndarray  # (n, d)
    resolution: int

    def __len__(self):
        return len(self.vertices)

    @classmethod
    def uniform(cls, box, resolution: int) -> "PolicyGrid":
        axes = [np.array([(lo + hi) / 2.0]) if resolution == 1 else np.linspace(lo, hi, resolution)
                for lo, hi in box]
        mesh = np.meshgrid(*axes, indexing="ij")
        verts = np.stack([m.ravel() for m in mesh], axis=-1)
        return cls(tuple(tuple(b) for b in box), verts, resolution)


def grid_schedule(k: int, kappa: float, box, d: int | None = None) -> PolicyGrid:
    if kappa <= 2:
        raise ValueError("kappa must exceed 2")
    if d is not None and d != len(box):
        raise ValueError("box dimension mismatch")
    return PolicyGrid.uniform(box, points_per_dim(k, kappa))


# ---------------------------------------------------------------------------
# Configuration and records
# ---------------------------------------------------------------------------


@dataclass
class AlgoConfig:
    alpha: float = 0.1
    delta: float = 0.2
    epsilon: float = 1.0
    episodes: int = 100
    variances: tuple = (1.0,)
    box: tuple = ((-5.0, 5.0),)
    grid_mode: str = DISCRETE  # DISCRETE: fixed grid; COMPACT: refining grid
    grid_points: int = 11  # per dimension, discrete mode
    kappa: float = 3.0
    clip: float | None = None
    conservative: bool = True
    known_baseline: bool = True
    baseline_value: float | None = None
    bound_to_range: bool = True
    bonus_override: float | None = None  # force beta to this value (e.g. inf)
    nodes: int | None = 128
    audit_rollouts: int = 200
    baseline_rollouts: int = 2000

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.grid_mode == COMPACT and self.kappa <= 2:
            raise ValueError("kappa must exceed 2")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        self.box = tuple(tuple(float(x) for x in b) for b in self.box)
        self.variances = tuple(float(v) for v in self.variances)
        if len(self.variances) == 1 and len(self.box) > 1:
            self.variances = self.variances * len(self.box)

    @property
    def dim(self) -> int:
        return len(self.box)

    def grid(self, k: int) -> PolicyGrid:
        if self.grid_mode == COMPACT:
            return grid_schedule(k, self.kappa, self.box)
        return PolicyGrid.uniform(self.box, self.grid_points)

    def log_inv_delta(self, k: int) -> float:
        if self.grid_mode == COMPACT:
            return confidence_schedule(k, self.delta, self.dim, COMPACT)
        return confidence_schedule(k, self.delta, self.dim, DISCRETE,
                                   self.grid_points ** self.dim)

    def hyper(self, mean) -> GaussianHyperpolicy:
        return GaussianHyperpolicy(tuple(np.atleast_1d(mean)), self.variances, self.box)


@dataclass
class EstimatorParams:
    """Everything needed to evaluate a target at the current episode."""

    log_inv_delta: float
    epsilon: float
    f_range: tuple
    clip: float | None = None
    bound_to_range: bool = True
    bonus_override: float | None = None
    nodes: int | None = 128
    cache: dict = field(default_factory=dict)

    def evaluate(self, dataset: Dataset, policy) -> RbhEvaluation:
        ev = self.cache.get(policy)
        if ev is None:
            ev = evaluate(dataset, policy, self.log_inv_delta, self.epsilon, self.f_range,
                          self.clip, self.nodes)
            if self.bonus_override is not None:
                ev = RbhEvaluation(ev.estimate, self.bonus_override, ev.threshold,
                                   ev.renyi_bound, ev.epsilon, ev.f_max, ev.f_min)
            self.cache[policy] = ev
        return ev

    def lower(self, ev: RbhEvaluation) -> float:
        return ev.lower if self.bound_to_range else ev.estimate - ev.bonus


@dataclass
class ConservativeLedger:
    alpha: float
    baseline_value: float
    optimistic: Counter = field(default_factory=Counter)  # policy -> plays
    n_optimistic: int = 0
    n_baseline: int = 0
    played: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.n_optimistic + self.n_baseline

    def record(self, policy, optimistic: bool) -> None:
        if optimistic:
            self.optimistic[policy] += 1
            self.n_optimistic += 1
        else:
            self.n_baseline += 1
        self.played.append("opt" if optimistic else "base")


@dataclass
class EpisodeRecord:
    episode: int
    played: str
    params: tuple
    realized_return: float
    true_J: float
    pessimistic_estimate: float
    bonus: float
    pessimistic_budget: float
    budget: float
    cum_regret: float


@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    baseline_value: float = 0.0
    optimal_value: float = 0.0
    alpha: float = 0.1
    dataset: Dataset | None = None
    grid: PolicyGrid | None = None
    trace: list = field(default_factory=list)  # per-episode {params: (est, bonus)}

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def violations(self) -> int:
        return int(np.sum(self.column("budget") < 0))

    @property
    def n_baseline(self) -> int:
        return sum(r.played == "base" for r in self.records)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def select_optimistic(dataset: Dataset, grid: PolicyGrid, k: int, params: EstimatorParams,
                      config: AlgoConfig):
    """argmax over grid vertices of estimate + bonus; ties go to the lowest index."""
    best, best_ev, best_score = None, None, -math.inf
    for v in grid.vertices:
        pol = config.hyper(v)
        ev = params.evaluate(dataset, pol)
        score = ev.estimate + ev.bonus
        if score > best_score:
            best, best_ev, best_score = pol, ev, score
    if best is None:  # every score is -inf or nan; fall back to vertex 0
        best = config.hyper(grid.vertices[0])
        best_ev = params.evaluate(dataset, best)
    return best, best_ev


def pessimistic_sum(dataset: Dataset, ledger: ConservativeLedger, candidate, params,
                    baseline=None, known_baseline: bool = True) -> float:
    total = sum(n * params.lower(params.evaluate(dataset, pol))
                for pol, n in ledger.optimistic.items())
    total += params.lower(params.evaluate(dataset, candidate))
    if known_baseline:
        total += ledger.n_baseline * ledger.baseline_value
    else:
        total += ledger.n_baseline * params.lower(params.evaluate(dataset, baseline))
    return total


def baseline_upper_bound(dataset: Dataset, baseline, k: int, params: EstimatorParams) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    ev = params.evaluate(dataset, baseline)
    return ev.estimate + ev.bonus


def conservative_threshold(dataset, ledger, k, params, baseline=None,
                           known_baseline: bool = True) -> float:
    ref = ledger.baseline_value if known_baseline else \
        baseline_upper_bound(dataset, baseline, k, params)
    return (1.0 - ledger.alpha) * k * ref


def conservative_check(dataset: Dataset, ledger: ConservativeLedger, candidate, k: int,
                       params: EstimatorParams, baseline=None,
                       known_baseline: bool = True) -> bool:
    """True iff the pessimistic cumulative value clears (1 - alpha) k J_b."""
    lhs = pessimistic_sum(dataset, ledger, candidate, params, baseline, known_baseline)
    return lhs >= conservative_threshold(dataset, ledger, k, params, baseline, known_baseline)


# ---------------------------------------------------------------------------
# Auditing and the episode loop
# ---------------------------------------------------------------------------


def default_family(env):
    if getattr(env, "tabular", False):
        return IndexedFamily(envs.optimal_policy(env), env.n_actions)
    return LinearFamily()


class Auditor:
    """Ground-truth J of hyperpolicies: exact DP when tabular, cached MC otherwise."""

    def __init__(self, env, family, rng: np.random.Generator, rollouts: int = 200):
        self.env, self.family, self.rng, self.rollouts = env, family, rng, rollouts
        self.cache: dict = {}

    def __call__(self, policy: GaussianHyperpolicy, n: int | None = None) -> float:
        val = self.cache.get(policy)
        if val is None:
            if getattr(self.env, "tabular", False):
                val = envs.exact_policy_eval(self.env, policy, family=self.family)
            else:
                val = envs.mc_policy_eval(self.env, policy, n or self.rollouts, self.rng,
                                          self.family)[0]
            self.cache[policy] = val
        return val


def _streams(rng):
    if isinstance(rng, np.random.Generator):
        seeds = rng.bit_generator.seed_seq.spawn(3)
    else:
        seeds = np.random.SeedSequence(rng).spawn(3)
    return [np.random.default_rng(s) for s in seeds]


def run_coptimist(env, baseline: GaussianHyperpolicy, config: AlgoConfig, rng,
                  family=None, track: bool = False) -> EpisodeLog:
    """Run ``config.episodes`` episodes and return the audited log.

    ``rng`` is a seed or Generator; it is split into independent streams for
    parameter sampling, environment noise and Monte-Carlo auditing.
    """
    family = family or default_family(env)
    rng_theta, rng_env, rng_audit = _streams(rng)
    audit = Auditor(env, family, rng_audit, config.audit_rollouts)

    if config.baseline_value is not None:
        j_base = float(config.baseline_value)
        audit.cache[baseline] = j_base
    else:
        j_base = audit(baseline, config.baseline_rollouts)
    final_grid = config.grid(config.episodes)
    j_star = max(audit(config.hyper(v)) for v in final_grid.vertices)

    f_range = env.return_bounds()
    dataset = Dataset()
    ledger = ConservativeLedger(config.alpha, j_base)
    log = EpisodeLog(baseline_value=j_base, optimal_value=j_star, alpha=config.alpha,
                     dataset=dataset, grid=final_grid)
    true_sum = 0.0
    cum_regret = 0.0

    for k in range(1, config.episodes + 1):
        pess_est = bonus = pess_budget = math.nan
        if k == 1:
            play, optimistic = baseline, False
        else:
            params = EstimatorParams(config.log_inv_delta(k), config.epsilon, f_range,
                                     config.clip, config.bound_to_range, config.bonus_override,
                                     config.nodes)
            grid = config.grid(k)
            cand, ev = select_optimistic(dataset, grid, k, params, config)
            pess_est, bonus = ev.estimate - ev.bonus, ev.bonus
            if config.conservative:
                lhs = pessimistic_sum(dataset, ledger, cand, params, baseline,
                                      config.known_baseline)
                thr = conservative_threshold(dataset, ledger, k, params, baseline,
                                             config.known_baseline)
                pess_budget = lhs - thr
                ok = lhs >= thr
            else:
                ok = True
            play, optimistic = (cand, True) if ok else (baseline, False)
            if track:
                pols = [config.hyper(v) for v in grid.vertices]
                log.trace.append({pol.mean: (params.cache[pol].estimate, params.cache[pol].bonus)
                                  for pol in pols})

        theta = play.mu + np.sqrt(play.var) * rng_theta.standard_normal(play.dim)
        traj = envs.rollout(env, family(theta), env.horizon, rng_env)
        dataset.add(play, theta, traj.total_return)
        ledger.record(play, optimistic)

        j_play = audit(play)
        true_sum += j_play
        cum_regret += j_star - j_play
        log.records.append(EpisodeRecord(
            k, "opt" if optimistic else "base", play.mean, traj.total_return, j_play,
            pess_est, bonus, pess_budget, true_sum - (1.0 - config.alpha) * k * j_base,
            cum_regret))
    return log


def run_optimist(env, config: AlgoConfig, rng, baseline: GaussianHyperpolicy | None = None,
                 family=None, track: bool = False) -> EpisodeLog:
    """Same loop without the conservative gate.

    ``baseline`` is only used to bootstrap the first episode and as the
    reference for the audited budget.
    """
    cfg = AlgoConfig(**{**config.__dict__, "conservative": False})
    if baseline is None:
        baseline = cfg.hyper(cfg.grid(1).vertices[0])
    return run_coptimist(env, baseline, cfg, rng, family, track)
