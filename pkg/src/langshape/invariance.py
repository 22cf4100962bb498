"""Exact check that count-based potential shaping keeps optimal policies.

The base MDP is lifted to states (s, g) where g counts how often each action
was taken.  A transition (s, g) -a-> (s', g') is possible only when
g' = g + e_a, with the base probability and reward.  States are enumerated
up to depth H (sum of g = H), and optimality is finite-horizon and
depth-indexed on both the base and the lifted MDP.

At depth H the shaped MDP uses the leaf value -phi(g_H).  This is the
finite-horizon form of "the final state has potential zero": the shaped
return then differs from the unshaped one only by -phi(g_0), so optimal
actions coincide exactly.  Without it the last bonus gamma^H * phi(g_H)
depends on the action path and the claim fails in general.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Callable

import numpy as np

from .env import N_ACTIONS
from .rl import TabularMDP, argmax_sets, value_iteration
from .shaping import frequencies

DEFAULT_TOL = 1e-9
DEFAULT_CAP = 200_000

CountPotential = Callable[[tuple], float]


class AugmentationSizeError(ValueError):
    pass


def count_vectors(n_actions: int, total: int) -> list[tuple[int, ...]]:
    """All non-negative integer vectors of length ``n_actions`` summing to ``total`` (stars and bars)."""
    out = []
    for bars in combinations(range(total + n_actions - 1), n_actions - 1):
        prev, g = -1, []
        for b in bars:
            g.append(b - prev - 1)
            prev = b
        g.append(total + n_actions - 1 - prev - 1)
        out.append(tuple(g))
    return out


def augmented_size(n_states: int, n_actions: int, H: int) -> int:
    """|S| * C(H + |A|, |A|): every (s, g) with sum(g) <= H."""
    return n_states * comb(H + n_actions, n_actions)


@dataclass
class AugmentedMDP:
    """States (s, g) with sum(g) <= H and their consistent successors.

    ``succ[i, a]`` is the index of (s', g + e_a) for each s', so the
    transition row of state i under action a is ``base.T[s_i, a]`` spread
    over ``succ[i, a]``.  Leaves (depth H) have ``succ = -1``.
    """

    base: TabularMDP
    H: int
    states: list[tuple[int, tuple[int, ...]]]
    index: dict
    depth: np.ndarray
    succ: np.ndarray                 # (N, A, S) successor indices
    R: np.ndarray                    # (N, A, S) rewards on consistent transitions
    potential: np.ndarray | None = None   # phi(g) per state once shaped
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.states)

    def base_state(self) -> np.ndarray:
        return np.array([s for s, _ in self.states])

    def transition(self, i: int, a: int, j: int) -> float:
        """T-hat((s, g), a, (s', g')): base probability if consistent, else 0."""
        if not self.consistent(i, a, j):
            return 0.0
        return float(self.base.T[self.states[i][0], a, self.states[j][0]])

    def consistent(self, i: int, a: int, j: int) -> bool:
        g, g2 = self.states[i][1], self.states[j][1]
        return bool(self.depth[i] < self.H) and tuple(x + (k == a) for k, x in enumerate(g)) == g2

    def reward(self, i: int, a: int, j: int) -> float:
        """R-hat((s, g), a, (s', g')), zero for inconsistent pairs."""
        return float(self.R[i, a, self.states[j][0]]) if self.consistent(i, a, j) else 0.0

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Full (N, A, N) transition and reward arrays; only for small instances."""
        N, A = self.n, self.base.n_actions
        T = np.zeros((N, A, N))
        R = np.zeros((N, A, N))
        for i in range(N):
            if self.depth[i] >= self.H:
                continue
            s = self.states[i][0]
            for a in range(A):
                T[i, a, self.succ[i, a]] += self.base.T[s, a]
                R[i, a, self.succ[i, a]] = self.R[i, a]
        return T, R


def augment(mdp: TabularMDP, H: int, cap: int = DEFAULT_CAP) -> AugmentedMDP:
    if H < 1:
        raise ValueError("horizon H must be >= 1")
    S, A = mdp.n_states, mdp.n_actions
    size = augmented_size(S, A, H)
    if size > cap:
        raise AugmentationSizeError(
            f"augmented MDP would have {size} states (|S| * C(H+|A|, |A|) = {S} * C({H + A}, {A})), above the cap {cap}")
    states, depth = [], []
    for d in range(H + 1):
        for g in count_vectors(A, d):
            for s in range(S):
                states.append((s, g))
                depth.append(d)
    index = {x: i for i, x in enumerate(states)}
    N = len(states)
    succ = np.full((N, A, S), -1, dtype=np.int64)
    R = np.zeros((N, A, S))
    for i, (s, g) in enumerate(states):
        if depth[i] >= H:
            continue
        for a in range(A):
            g2 = tuple(x + (k == a) for k, x in enumerate(g))
            succ[i, a] = [index[(s2, g2)] for s2 in range(S)]
            R[i, a] = mdp.R[s, a]
    return AugmentedMDP(mdp, H, states, index, np.array(depth), succ, R)


def shaped_rewards(aug: AugmentedMDP, phi: CountPotential, gamma: float | None = None) -> AugmentedMDP:
    """Copy of ``aug`` with gamma * phi(g + e_a) - phi(g) added to every consistent transition."""
    gamma = aug.base.gamma if gamma is None else gamma
    pot = np.array([float(phi(g)) for _, g in aug.states])
    R = aug.R.copy()
    live = aug.depth < aug.H
    R[live] += gamma * pot[aug.succ[live]] - pot[live][:, None, None]
    return AugmentedMDP(aug.base, aug.H, aug.states, aug.index, aug.depth, aug.succ, R, pot,
                        {**aug.meta, "shaped": True, "gamma": gamma})


def finite_horizon_q(aug: AugmentedMDP, gamma: float, leaf_value: np.ndarray | None = None) -> np.ndarray:
    """Optimal Q on the lifted MDP, one row per state, remaining steps = H - depth.

    Leaves get ``leaf_value`` (default 0) and their Q rows are left at that value.
    """
    N, A = aug.n, aug.base.n_actions
    s_of = aug.base_state()
    V = np.zeros(N) if leaf_value is None else np.asarray(leaf_value, dtype=np.float64).copy()
    Q = np.zeros((N, A))
    leaves = aug.depth == aug.H
    Q[leaves] = V[leaves, None]
    for d in range(aug.H - 1, -1, -1):
        rows = np.flatnonzero(aug.depth == d)
        P = aug.base.T[s_of[rows]]                       # (n, A, S)
        Q[rows] = np.sum(P * (aug.R[rows] + gamma * V[aug.succ[rows]]), axis=2)
        V[rows] = Q[rows].max(axis=1)
    return Q


def reachable(aug: AugmentedMDP, roots: list[int] | None = None) -> np.ndarray:
    """Boolean mask of lifted states reachable with positive probability from depth-0 states."""
    mask = np.zeros(aug.n, dtype=bool)
    frontier = np.flatnonzero(aug.depth == 0) if roots is None else np.asarray(roots)
    mask[frontier] = True
    s_of = aug.base_state()
    for _ in range(aug.H):
        nxt = []
        for i in frontier:
            if aug.depth[i] >= aug.H:
                continue
            pos = aug.base.T[s_of[i]] > 0                 # (A, S)
            nxt.append(aug.succ[i][pos])
        if not nxt:
            break
        frontier = np.unique(np.concatenate(nxt))
        frontier = frontier[~mask[frontier]]
        mask[frontier] = True
    return mask


@dataclass
class InvarianceReport:
    passed: bool
    n_checked: int
    counterexample: dict | None
    lifted_residual: float
    shaped_lifted_residual: float
    header: str = ("finite-horizon check: depth-indexed optimal Q on the base MDP and on the shaped lifted "
                   "MDP, leaf value -phi(g_H); pass iff every base argmax set is contained in the shaped one")


def verify_policy_invariance(mdp: TabularMDP, phi: CountPotential | None, H: int, gamma: float | None = None,
                             tol: float = DEFAULT_TOL, cap: int = DEFAULT_CAP,
                             shaping: Callable[[tuple, int, int], float] | None = None) -> InvarianceReport:
    """Compare base-MDP optimal actions with those of the shaped lifted MDP.

    ``phi`` is a count potential.  ``shaping`` optionally replaces the
    potential difference with an arbitrary bonus ``F(g, a, s)`` on every
    consistent transition out of base state s (with zero leaf value), which
    is how non-potential shaping is exercised.
    """
    gamma = mdp.gamma if gamma is None else gamma
    aug = augment(mdp, H, cap)
    Q_base, _ = value_iteration(mdp, gamma, horizon=H)
    if shaping is None:
        phi = phi or (lambda g: 0.0)
        shaped = shaped_rewards(aug, phi, gamma)
        leaf = np.where(aug.depth == H, -shaped.potential, 0.0)
    else:
        R = aug.R.copy()
        for i, (s, g) in enumerate(aug.states):
            if aug.depth[i] < H:
                for a in range(mdp.n_actions):
                    R[i, a] += shaping(g, a, s)
        shaped = AugmentedMDP(aug.base, H, aug.states, aug.index, aug.depth, aug.succ, R, None, {"shaped": True})
        leaf = np.zeros(aug.n)
    Q_shaped = finite_horizon_q(shaped, gamma, leaf)
    live = reachable(aug) & (aug.depth < H)
    counterexample = None
    checked = 0
    for i in np.flatnonzero(live):
        s, g = aug.states[i]
        remaining = H - aug.depth[i]
        base_set = argmax_sets(Q_base[remaining][s][None], tol)[0]
        shaped_set = argmax_sets(Q_shaped[i][None], tol)[0]
        checked += 1
        if not base_set <= shaped_set:
            counterexample = {"state": int(s), "counts": list(g), "depth": int(aug.depth[i]),
                              "base_argmax": sorted(base_set), "shaped_argmax": sorted(shaped_set),
                              "base_q": Q_base[remaining][s].tolist(), "shaped_q": Q_shaped[i].tolist()}
            break
    res_plain = lifted_bellman_residual(aug, Q_base, gamma)
    res_shaped = lifted_bellman_residual(shaped, Q_base, gamma, subtract_potential=shaping is None)
    return InvarianceReport(counterexample is None, checked, counterexample, res_plain, res_shaped)


def lifted_bellman_residual(aug: AugmentedMDP, Q_base: np.ndarray, gamma: float,
                            subtract_potential: bool = False) -> float:
    """Max Bellman-optimality residual of the lifted Q over non-leaf lifted states.

    The lifted Q is Q_base(s, a) at the matching remaining depth, which
    ignores g.  On the unshaped lifted MDP it must satisfy the optimality
    equation as is; on a shaped one, after subtracting phi(g).
    """
    s_of = aug.base_state()
    remaining = aug.H - aug.depth
    Qhat = Q_base[remaining, s_of]                        # (N, A)
    if subtract_potential and aug.potential is not None:
        Qhat = Qhat - aug.potential[:, None]
        Vleaf = -aug.potential
    else:
        Vleaf = np.zeros(aug.n)
    V = np.where(aug.depth == aug.H, Vleaf, Qhat.max(axis=1))
    rows = np.flatnonzero(aug.depth < aug.H)
    P = aug.base.T[s_of[rows]]
    backup = np.sum(P * (aug.R[rows] + gamma * V[aug.succ[rows]]), axis=2)
    return float(np.max(np.abs(backup - Qhat[rows]))) if len(rows) else 0.0


# -- potentials and instances -------------------------------------------------

def random_potential(n_actions: int, H: int, rng: np.random.Generator, scale: float = 1.0) -> CountPotential:
    """Tabulated potential with an independent uniform value for every count vector."""
    table = {g: float(rng.uniform(-scale, scale)) for d in range(H + 1) for g in count_vectors(n_actions, d)}
    return table.__getitem__


def learn_potential(model, instruction) -> CountPotential:
    """phi(g) = p_R - p_U at f = g / sum(g), with the all-zero f for the empty history.

    The |A| tabular actions occupy the first |A| frequency slots.
    """
    def phi(g):
        f = frequencies(np.asarray(g, dtype=np.float64))
        F = np.zeros((1, N_ACTIONS))
        F[0, : len(f)] = f
        return float(model.potential_batch(F, instruction)[0])
    return phi


def shift(phi: CountPotential, c: float) -> CountPotential:
    return lambda g: phi(g) + c


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float = 0.9,
               sparsity: float = 0.5) -> TabularMDP:
    """Random MDP with some zero-probability transitions and rewards in [-1, 1]."""
    T = rng.random((n_states, n_actions, n_states))
    T[rng.random(T.shape) < sparsity] = 0.0
    empty = T.sum(axis=2) == 0
    T[empty, rng.integers(n_states)] = 1.0
    T /= T.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, (n_states, n_actions, n_states))
    return TabularMDP(T, R, gamma)


def action_bonus_counterexample() -> tuple[TabularMDP, Callable, int]:
    """Two-state MDP where a +1 bonus for action 0 overturns the optimal choice.

    From state 0, action 1 reaches the absorbing state 1 for +1 and action 0
    stays put with nothing.  A bonus of +1 for action 0 in state 0, whatever
    the counts, makes waiting worth more than leaving once two or more steps
    remain.
    """
    T = np.zeros((2, 2, 2))
    T[0, 0, 0] = 1.0
    T[0, 1, 1] = 1.0
    T[1, :, 1] = 1.0
    R = np.zeros((2, 2, 2))
    R[0, 1, 1] = 1.0
    mdp = TabularMDP(T, R, gamma=0.9)

    def bonus(g, a, s):
        return 1.0 if a == 0 and s == 0 else 0.0

    return mdp, bonus, 3


def verification_table(n_instances: int = 20, n_potentials: int = 5, seed: int = 0, max_states: int = 6,
                       max_actions: int = 4, max_horizon: int = 8, tol: float = DEFAULT_TOL):
    """Verify random (MDP, potential) instances; returns (rows, counterexample dumps)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x1A7,)))
    rows, dumps = [], []
    for k in range(n_instances):
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(2, max_actions + 1))
        H = int(rng.integers(1, max_horizon + 1))
        gamma = float(rng.uniform(0.5, 0.99))
        mdp = random_mdp(rng, S, A, gamma)
        for j in range(n_potentials):
            phi = random_potential(A, H, rng)
            rep = verify_policy_invariance(mdp, phi, H, gamma, tol)
            rows.append({"instance": k, "potential": j, "states": S, "actions": A, "horizon": H,
                         "gamma": gamma, "checked_states": rep.n_checked, "passed": rep.passed,
                         "lifted_residual": rep.lifted_residual,
                         "shaped_lifted_residual": rep.shaped_lifted_residual})
            if not rep.passed:
                dumps.append({"instance": k, "potential": j, "counterexample": rep.counterexample})
    return rows, dumps
