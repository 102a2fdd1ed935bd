"""Model-based conservative comparator for tabular MDPs.

Counts are stage independent. Optimism and pessimism come from scalar
Hoeffding bonuses folded into backward induction rather than from an explicit
search over a transition confidence set.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .algo import AlgoConfig, Auditor, EpisodeLog, EpisodeRecord, _streams, default_family
from .envs import TabularMDP, Trajectory, UnsupportedEnvironment
from .policies import GaussianHyperpolicy


@dataclass
class EmpiricalModel:
    n_states: int
    n_actions: int
    horizon: int
    reward_range: tuple = (0.0, 1.0)
    initial_state: int = 0
    n_sas: np.ndarray = field(default=None, repr=False)
    reward_sum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        S, A = self.n_states, self.n_actions
        if self.n_sas is None:
            self.n_sas = np.zeros((S, A, S))
        if self.reward_sum is None:
            self.reward_sum = np.zeros((S, A))
        lo, hi = self.reward_range
        if not lo <= hi:
            raise ValueError("reward_range must be (lo, hi) with lo <= hi")

    @classmethod
    def for_env(cls, mdp: TabularMDP) -> "EmpiricalModel":
        # the value range must cover 0 so unvisited tails stay admissible
        lo, hi = min(0.0, mdp.r_min), max(0.0, mdp.r_max)
        return cls(mdp.n_states, mdp.n_actions, mdp.horizon, (lo, hi), mdp.initial_state)

    @property
    def n_sa(self) -> np.ndarray:
        return self.n_sas.sum(-1)

    @property
    def p_hat(self) -> np.ndarray:
        n = self.n_sa
        uniform = np.full(self.n_sas.shape, 1.0 / self.n_states)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.n_sas / n[..., None]
        return np.where(n[..., None] > 0, p, uniform)

    @property
    def r_hat(self) -> np.ndarray:
        n = self.n_sa
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, self.reward_sum / n, 0.0)


def update_model(model: EmpiricalModel, traj: Trajectory) -> EmpiricalModel:
    """Add every observed transition of ``traj`` to the counts (in place)."""
    nxt = list(traj.states[1:]) + [traj.final_state]
    for s, a, r, s2 in zip(traj.states, traj.actions, traj.rewards, nxt):
        if s2 is None:
            raise ValueError("trajectory lacks its final next state")
        model.n_sas[s, a, s2] += 1
        model.reward_sum[s, a] += r
    return model


def hoeffding_bonus(model: EmpiricalModel, k: int, delta: float) -> np.ndarray:
    """b(s, a) = H * (r_max - r_min) * sqrt(log(S A H k / delta) / max(1, n(s, a)))."""
    S, A, H = model.n_states, model.n_actions, model.horizon
    span = model.reward_range[1] - model.reward_range[0]
    log_term = math.log(S * A * H * k / delta)
    return H * span * np.sqrt(log_term / np.maximum(1.0, model.n_sa))


def _expect(P: np.ndarray, V: np.ndarray) -> np.ndarray:
    """P @ V along the last axis, treating 0 * inf as 0."""
    if np.all(np.isfinite(V)):
        return P @ V
    with np.errstate(invalid="ignore"):
        return np.where(P > 0, P * V, 0.0).sum(-1)


def _stage_bounds(model: EmpiricalModel, remaining: int):
    lo, hi = model.reward_range
    return remaining * lo, remaining * hi


def optimistic_vi(model: EmpiricalModel, k: int, delta: float, bonus=None,
                  clip: bool = True):
    """Greedy policy for r_hat + b + p_hat V with values clipped per stage.

    Returns ``(policy, V)`` where ``policy[h, s]`` is the action at stage h
    and ``V`` has shape (H + 1, S) with ``V[H] = 0``. Ties go to the lowest
    action index.
    """
    b = hoeffding_bonus(model, k, delta) if bonus is None else np.broadcast_to(
        bonus, (model.n_states, model.n_actions))
    P, r = model.p_hat, model.r_hat
    H = model.horizon
    V = np.zeros((H + 1, model.n_states))
    pi = np.zeros((H, model.n_states), dtype=int)
    for h in reversed(range(H)):
        Q = r + b + _expect(P, V[h + 1])
        if clip:
            Q = np.clip(Q, *_stage_bounds(model, H - h))
        pi[h] = Q.argmax(-1)
        V[h] = Q.max(-1)
    return pi, V


def _as_tables(model: EmpiricalModel, policies) -> np.ndarray:
    """Stack of policies -> (n, H, S, A) stage-dependent probability tables."""
    H, S, A = model.horizon, model.n_states, model.n_actions
    p = np.asarray(policies)
    if p.dtype.kind in "iu":  # (n, H, S) actions
        if p.ndim != 3:
            raise ValueError("action policies must have shape (n, H, S)")
        p = np.eye(A)[p]
    else:
        p = p.astype(float)
        if p.ndim == 3:  # (n, S, A) stationary
            p = np.broadcast_to(p[:, None], (p.shape[0], H, S, A))
    if p.shape[1:] != (H, S, A):
        raise ValueError("policy does not match the model")
    return p


def pessimistic_eval_batch(model: EmpiricalModel, policies, k: int, delta: float,
                           bonus=None, clip: bool = True) -> np.ndarray:
    """Lower confidence values V_1(s_1) for a stack of policies.

    ``policies`` is an (n, H, S) integer action array, or an (n, S, A) or
    (n, H, S, A) probability table.
    """
    tables = _as_tables(model, policies)
    b = hoeffding_bonus(model, k, delta) if bonus is None else np.broadcast_to(
        bonus, (model.n_states, model.n_actions))
    P, r = model.p_hat, model.r_hat
    H = model.horizon
    V = np.zeros((tables.shape[0], model.n_states))
    for h in reversed(range(H)):
        Q = r[None] - b[None] + np.stack([_expect(P, v) for v in V])
        if clip:
            Q = np.clip(Q, *_stage_bounds(model, H - h))
        with np.errstate(invalid="ignore"):
            V = np.where(tables[:, h] > 0, tables[:, h] * Q, 0.0).sum(-1)
    return V[:, model.initial_state]


def pessimistic_eval(model: EmpiricalModel, policy, k: int, delta: float, bonus=None,
                     clip: bool = True) -> float:
    """Lower confidence value of one policy: an (H, S) action array or an
    (S, A) / (H, S, A) probability table."""
    return float(pessimistic_eval_batch(model, np.asarray(policy)[None], k, delta,
                                        bonus, clip)[0])


def _play_table(env: TabularMDP, pi: np.ndarray, rng: np.random.Generator) -> Trajectory:
    traj = Trajectory()
    s = env.initial_state
    for h in range(env.horizon):
        a = int(pi[h, s])
        s2, r, _ = env.step(s, a, rng)
        traj.states.append(s)
        traj.actions.append(a)
        traj.rewards.append(r)
        s = s2
    traj.final_state = s
    return traj


def run_cucbvi(env, baseline: GaussianHyperpolicy, config: AlgoConfig, rng,
               family=None) -> EpisodeLog:
    """Conservative model-based loop with the same log format as the IS loops.

    ``params`` in each record is ``(0,)`` for baseline plays and ``(i,)`` for
    the i-th distinct optimistic policy. Regret uses the same reference as the
    parameter-based runs: the best grid vertex of ``config`` under ``family``.
    ``config.bonus_override`` replaces the Hoeffding bonus and
    ``config.bound_to_range`` toggles the per-stage value clipping.
    """
    if not getattr(env, "tabular", False):
        raise UnsupportedEnvironment("the model-based comparator needs a tabular MDP")
    family = family or default_family(env)
    rng_theta, rng_env, rng_audit = _streams(rng)
    audit = Auditor(env, family, rng_audit, config.audit_rollouts)
    if config.baseline_value is not None:
        j_base = float(config.baseline_value)
    else:
        j_base = audit(baseline)
    j_star = max(audit(config.hyper(v)) for v in config.grid(config.episodes).vertices)

    model = EmpiricalModel.for_env(env)
    ids: dict = {}  # policy bytes -> id
    tables: list = []
    values: list = []
    plays: Counter = Counter()
    n_base = 0
    log = EpisodeLog(baseline_value=j_base, optimal_value=j_star, alpha=config.alpha)
    true_sum = cum_regret = 0.0
    clip = config.bound_to_range
    bonus = config.bonus_override

    for k in range(1, config.episodes + 1):
        pi, V = optimistic_vi(model, k, config.delta, bonus, clip)
        key = pi.tobytes()
        known = ids.get(key)
        played = sorted(plays)
        batch = np.stack([tables[i - 1] for i in played] + [pi])
        lower = pessimistic_eval_batch(model, batch, k, config.delta, bonus, clip)
        lhs = float(sum(plays[i] * lower[j] for j, i in enumerate(played)) + lower[-1]
                    + n_base * j_base)
        thr = (1.0 - config.alpha) * k * j_base
        ok = (lhs >= thr) if config.conservative else True

        if ok:
            if known is None:
                tables.append(pi)
                known = ids[key] = len(tables)
                values.append(envs.exact_policy_eval(env, np.eye(env.n_actions)[pi]))
            plays[known] += 1
            traj = _play_table(env, pi, rng_env)
            j_play, params = values[known - 1], (known,)
        else:
            n_base += 1
            theta = baseline.mu + np.sqrt(baseline.var) * rng_theta.standard_normal(baseline.dim)
            traj = envs.rollout(env, family(theta), env.horizon, rng_env)
            j_play, params = audit(baseline), (0,)
        update_model(model, traj)

        true_sum += j_play
        cum_regret += j_star - j_play
        upper = float(V[0, env.initial_state])
        log.records.append(EpisodeRecord(
            k, "opt" if ok else "base", params, traj.total_return, j_play,
            float(lower[-1]), 0.5 * (upper - float(lower[-1])), lhs - thr,
            true_sum - (1.0 - config.alpha) * k * j_base, cum_regret))
    return log
