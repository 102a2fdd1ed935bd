"""Finite-horizon benchmark environments and ground-truth evaluation.

Two environments are provided: a tabular grid-world (``TabularMDP``) and a
continuous mountain car (``MountainCar``). Both expose the same small
interface used by :func:`rollout`::

    env.initial_state, env.horizon, env.step(state, action, rng) -> (s', r, done)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .policies import GaussianHyperpolicy, LinearFamily, sample_theta

UP, RIGHT, DOWN, LEFT = range(4)
_MOVES = {UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0), LEFT: (0, -1)}


class UnsupportedEnvironment(TypeError):
    pass


# ---------------------------------------------------------------------------
# Tabular MDP
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A)
    horizon: int
    initial_state: int = 0
    width: int | None = None
    height: int | None = None
    start: int | None = None
    goal: int | None = None
    trap: int | None = None
    name: str = "tabular"

    tabular = True

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=float)
        r = np.asarray(self.rewards, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise ValueError("transitions must be (S, A, S) and rewards (S, A)")
        if np.any(p < 0) or not np.allclose(p.sum(-1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must be probability distributions")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= self.initial_state < p.shape[0]:
            raise ValueError("initial_state out of range")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def r_min(self) -> float:
        return float(self.rewards.min())

    @property
    def r_max(self) -> float:
        return float(self.rewards.max())

    def step(self, s, a, rng):
        s2, r = tabular_step(self, s, a, rng)
        return s2, r, False

    def return_bounds(self) -> tuple[float, float]:
        """Smallest and largest return any trajectory from s1 can realise.

        Computed over the support of the transition model, so it is a sure
        bound (not an expectation) and tighter than H * [r_min, r_max].
        """
        support = self.transitions > 0
        hi = np.zeros(self.n_states)
        lo = np.zeros(self.n_states)
        for _ in range(self.horizon):
            nxt_hi = np.where(support, hi[None, None, :], -np.inf).max(-1)
            nxt_lo = np.where(support, lo[None, None, :], np.inf).min(-1)
            hi = (self.rewards + nxt_hi).max(-1)
            lo = (self.rewards + nxt_lo).min(-1)
        return float(lo[self.initial_state]), float(hi[self.initial_state])


def tabular_step(mdp: TabularMDP, s: int, a: int, rng: np.random.Generator):
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise ValueError(f"invalid state/action ({s}, {a})")
    row = mdp.transitions[s, a]
    s2 = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
    return min(s2, mdp.n_states - 1), float(mdp.rewards[s, a])


def gridworld(
    height: int = 3,
    width: int = 4,
    start: tuple = (2, 0),
    goal: tuple = (0, 3),
    trap: tuple = (1, 3),
    goal_reward: float = 0.5,
    trap_reward: float = -1.0,
    horizon: int = 10,
    slip: float = 0.0,
) -> TabularMDP:
    """Grid-world with absorbing goal and trap cells.

    Cells are indexed row-major from the top-left. With probability ``slip``
    the chosen move is replaced by a uniformly random one; moves into a wall
    leave the agent in place.
    """
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must lie in [0, 1]")
    n = height * width
    idx = lambda rc: rc[0] * width + rc[1]  # noqa: E731
    s_goal, s_trap, s_start = idx(goal), idx(trap), idx(start)
    if len({s_goal, s_trap, s_start}) != 3:
        raise ValueError("start, goal and trap must be distinct cells")

    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    for s in range(n):
        if s in (s_goal, s_trap):
            P[s, :, s] = 1.0
            R[s, :] = goal_reward if s == s_goal else trap_reward
            continue
        r, c = divmod(s, width)
        dest = []
        for a in range(4):
            dr, dc = _MOVES[a]
            r2, c2 = r + dr, c + dc
            dest.append(idx((r2, c2)) if 0 <= r2 < height and 0 <= c2 < width else s)
        for a in range(4):
            P[s, a, dest[a]] += 1.0 - slip
            for d in dest:
                P[s, a, d] += slip / 4
    return TabularMDP(
        P, R, horizon, s_start, width, height, s_start, s_goal, s_trap, name="gridworld"
    )


def gridworld_reference_config(slip: float = 0.0) -> TabularMDP:
    """3x4 grid, H = 10, goal reward 0.5, trap reward -1."""
    return gridworld(slip=slip)


def optimal_policy(mdp: TabularMDP) -> tuple:
    """Deterministic stationary policy greedy w.r.t. the stage-1 optimal Q."""
    V = np.zeros(mdp.n_states)
    Q = mdp.rewards.copy()
    for _ in range(mdp.horizon):
        Q = mdp.rewards + mdp.transitions @ V
        V = Q.max(-1)
    # argmax keeps the lowest index among ties
    return tuple(int(a) for a in Q.argmax(-1))


def optimal_value(mdp: TabularMDP) -> float:
    V = np.zeros(mdp.n_states)
    for _ in range(mdp.horizon):
        V = (mdp.rewards + mdp.transitions @ V).max(-1)
    return float(V[mdp.initial_state])


# ---------------------------------------------------------------------------
# Continuous mountain car
# ---------------------------------------------------------------------------

POS_BOUNDS = (-1.2, 0.6)
VEL_BOUNDS = (-0.07, 0.07)
GOAL_POSITION = 0.45
GOAL_REWARD = 100.0
ACTION_COST = 0.1


class MountainCarState(NamedTuple):
    position: float
    velocity: float


def mountaincar_step(st: MountainCarState, a: float):
    """One step of the classic continuous mountain-car dynamics.

    Returns ``(next_state, reward)``. Once the goal is reached the state is
    absorbing and yields zero reward.
    """
    a = float(a)
    if not math.isfinite(a) or not all(map(math.isfinite, st)):
        raise ValueError("non-finite state or action")
    pos, vel = st
    if pos >= GOAL_POSITION:
        return MountainCarState(pos, vel), 0.0
    a = min(max(a, -1.0), 1.0)
    vel = min(max(vel + 0.0015 * a - 0.0025 * math.cos(3.0 * pos), VEL_BOUNDS[0]), VEL_BOUNDS[1])
    pos = min(max(pos + vel, POS_BOUNDS[0]), POS_BOUNDS[1])
    reward = -ACTION_COST * a * a
    if pos >= GOAL_POSITION:
        reward += GOAL_REWARD
    return MountainCarState(pos, vel), reward


@dataclass(frozen=True)
class MountainCar:
    horizon: int = 300
    initial_state: MountainCarState = MountainCarState(-0.5, 0.0)
    name: str = "mountaincar"

    tabular = False

    def step(self, s, a, rng=None):
        s2, r = mountaincar_step(s, a)
        return s2, r, s2.position >= GOAL_POSITION

    def return_bounds(self) -> tuple[float, float]:
        return -ACTION_COST * self.horizon, GOAL_REWARD

    def batch_returns(self, thetas, family: LinearFamily | None = None) -> np.ndarray:
        """Returns of linear controllers, one per row of ``thetas``, vectorised.

        Matches ``rollout`` with ``LinearFamily`` step for step.
        """
        lo, hi = (family or LinearFamily()).action_bounds
        th = np.atleast_2d(np.asarray(thetas, dtype=float))
        n = th.shape[0]
        pos = np.full(n, float(self.initial_state.position))
        vel = np.full(n, float(self.initial_state.velocity))
        ret = np.zeros(n)
        live = pos < GOAL_POSITION
        for _ in range(self.horizon):
            if not live.any():
                break
            feats0 = (pos + 1.2) / 1.8
            feats1 = (vel + 0.07) / 0.14
            a = np.clip(th[:, 0] * feats0 + th[:, 1] * feats1, lo, hi)
            a = np.clip(a, -1.0, 1.0)
            v2 = np.clip(vel + 0.0015 * a - 0.0025 * np.cos(3.0 * pos), *VEL_BOUNDS)
            p2 = np.clip(pos + v2, *POS_BOUNDS)
            r = -ACTION_COST * a * a + np.where(p2 >= GOAL_POSITION, GOAL_REWARD, 0.0)
            ret += np.where(live, r, 0.0)
            vel = np.where(live, v2, vel)
            pos = np.where(live, p2, pos)
            live = pos < GOAL_POSITION
        return ret


# ---------------------------------------------------------------------------
# Trajectories and evaluation
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    sampled_theta: np.ndarray | None = None
    final_state: object = None  # state reached after the last step

    @property
    def steps(self):
        return list(zip(self.states, self.actions, self.rewards))

    @property
    def total_return(self) -> float:
        return float(math.fsum(self.rewards))

    def __len__(self):
        return len(self.rewards)


def rollout(env, policy, horizon: int, rng: np.random.Generator, family=None) -> Trajectory:
    """Run one episode of at most ``horizon`` steps from ``env.initial_state``.

    If ``policy`` is a :class:`GaussianHyperpolicy`, a parameter is drawn
    first and ``family(theta)`` is played for the whole episode.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    traj = Trajectory()
    if isinstance(policy, GaussianHyperpolicy):
        if family is None:
            raise ValueError("a policy family is required to roll out a hyperpolicy")
        traj.sampled_theta = sample_theta(policy, rng)
        policy = family(traj.sampled_theta)
    s = env.initial_state
    for _ in range(horizon):
        a = policy.act(s, rng)
        s2, r, done = env.step(s, a, rng)
        traj.states.append(s)
        traj.actions.append(a)
        traj.rewards.append(r)
        s = s2
        if done:
            break
    traj.final_state = s
    return traj


def gauss_hermite_normal(n: int):
    """Nodes/weights such that sum(w * g(x)) ~= E[g(Z)], Z ~ N(0, 1)."""
    x, w = np.polynomial.hermite.hermgauss(n)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def _policy_tables(policy, n_states: int) -> np.ndarray:
    if hasattr(policy, "table"):
        t = policy.table()
    else:
        t = np.asarray(policy, dtype=float)
    if t.shape[-2] != n_states:
        raise ValueError("policy table does not match the MDP")
    return t


def _batch_values(mdp: TabularMDP, tables: np.ndarray, horizon: int) -> np.ndarray:
    # tables: (n, S, A) stationary or (n, H, S, A) stage-dependent
    n = tables.shape[0]
    V = np.zeros((n, mdp.n_states))
    for h in reversed(range(horizon)):
        pi = tables[:, h] if tables.ndim == 4 else tables
        Q = mdp.rewards[None] + np.einsum("sat,nt->nsa", mdp.transitions, V)
        V = (pi * Q).sum(-1)
    return V[:, mdp.initial_state]


def exact_policy_eval(mdp: TabularMDP, policy, horizon: int | None = None, family=None,
                      nodes: int = 64) -> float:
    """J(pi) = V_1(s_1) by backward dynamic programming.

    ``policy`` is an (S, A) or (H, S, A) table, an object with ``table()``, or
    a one-dimensional :class:`GaussianHyperpolicy` together with its
    ``family``; the latter is integrated over theta by Gauss-Hermite
    quadrature with ``nodes`` points.
    """
    H = mdp.horizon if horizon is None else horizon
    if isinstance(policy, GaussianHyperpolicy):
        if family is None or policy.dim != 1:
            raise ValueError("hyperpolicy evaluation needs a family and a 1-D parameter")
        x, w = gauss_hermite_normal(nodes)
        thetas = policy.mean[0] + math.sqrt(policy.variances[0]) * x
        return float(w @ _batch_values(mdp, family.tables(thetas), H))
    t = _policy_tables(policy, mdp.n_states)
    return float(_batch_values(mdp, t[None], H)[0])


def mc_policy_eval(env, policy, n: int, rng: np.random.Generator, family=None,
                   horizon: int | None = None) -> tuple[float, float]:
    """Monte-Carlo mean return and its standard error over ``n`` rollouts."""
    if n < 2:
        raise ValueError("need at least two rollouts")
    H = env.horizon if horizon is None else horizon
    if (isinstance(env, MountainCar) and isinstance(policy, GaussianHyperpolicy)
            and isinstance(family, LinearFamily) and H == env.horizon):
        thetas = policy.mu + np.sqrt(policy.var) * rng.standard_normal((n, policy.dim))
        returns = env.batch_returns(thetas, family)
    else:
        returns = np.array([rollout(env, policy, H, rng, family).total_return for _ in range(n)])
    return float(returns.mean()), float(returns.std(ddof=1) / math.sqrt(n))
