"""Exhaustive backward induction over chain trajectories.

Two engines share one scheme. The full PathTree enumerates every state
history (N^k nodes at level k) and supports path-dependent terminal
functionals: the brute-force oracle. The per-state lattice exploits the
Markov property (N nodes per level) and scales to step counts where the
full tree is impossible; for Markovian data the two produce identical
values node for node.

Scheme at each node: Y_k = E[Y_{k+1} | F_k] + dt * f(t_k, X_k, Y_k, Z_k),
implicit in Y_k (fixed-point, contraction for dt * l1 < 1), with Z_k the raw
vector of next-state values: v_j - E[v] = Z_k'(e_j - E[X_{k+1}]) holds
exactly for every child, so Z_k is the one-step martingale-representation
coefficient. Conditional expectations use exact transition matrices; nothing
here is Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .chain import RateSchedule, transition_matrix
from .errors import (
    BudgetExceeded,
    ContractionFailure,
    DimensionMismatch,
)
from .markovian import MarkovianDriver

__all__ = [
    "PathTree",
    "TreeSolution",
    "LatticeSolution",
    "build_tree",
    "solve_tree",
    "solve_markovian_lattice",
    "one_step_z",
    "representation_residual",
    "tower_residual",
]

DEFAULT_BUDGET = 10**6
_FP_TOL = 1e-13
_FP_MAX_ITER = 100


@dataclass(frozen=True)
class PathTree:
    """Complete history tree with exact one-step transition probabilities.

    Node idx at level k encodes the state history in base N (most recent
    state = idx mod N); children of idx are idx*N + j for next state j.
    step_probs[k][j, i] = Prob(X_{t_{k+1}} = e_j | X_{t_k} = e_i).
    """

    schedule: RateSchedule
    x0: int
    times: np.ndarray          # (K+1,)
    step_probs: np.ndarray     # (K, N, N)

    def __post_init__(self):
        self.times.setflags(write=False)
        self.step_probs.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def n_states(self) -> int:
        return self.step_probs.shape[1]

    def level_size(self, level: int) -> int:
        return 1 if level == 0 else self.n_states**level

    def states_at(self, level: int) -> np.ndarray:
        """Current state of every node at a level, in node-index order."""
        if level == 0:
            return np.array([self.x0])
        return np.arange(self.level_size(level)) % self.n_states

    def histories_at(self, level: int) -> np.ndarray:
        """(nodes, level+1) state histories; only sensible for small trees."""
        size = self.level_size(level)
        hist = np.empty((size, level + 1), dtype=np.int16)
        idx = np.arange(size)
        for pos in range(level, 0, -1):
            hist[:, pos] = idx % self.n_states
            idx //= self.n_states
        hist[:, 0] = self.x0
        return hist

    def level_probabilities(self, level: int) -> np.ndarray:
        """Cumulative probability of every node at a level."""
        prob = np.array([1.0])
        for k in range(level):
            states = self.states_at(k)
            child = prob[:, None] * self.step_probs[k][:, states].T
            prob = child.reshape(-1)
        return prob


def build_tree(
    schedule: RateSchedule,
    x0: int,
    grid: Sequence[float] | int,
    budget: int = DEFAULT_BUDGET,
) -> PathTree:
    """Build the complete tree; refuses when total node count exceeds budget.

    grid may be a step count (uniform over [0, T]) or explicit times.
    """
    n = schedule.n_states
    if not 0 <= x0 < n:
        raise DimensionMismatch(f"x0={x0} out of range for N={n}")
    if isinstance(grid, (int, np.integer)):
        times = np.linspace(0.0, schedule.horizon, int(grid) + 1)
    else:
        times = np.asarray(grid, dtype=float)
        if times[0] != 0.0 or abs(times[-1] - schedule.horizon) > 1e-12:
            raise DimensionMismatch("tree grid must span [0, T]")
        if not np.all(np.diff(times) > 0):
            raise DimensionMismatch("tree grid must be strictly increasing")
    k_steps = len(times) - 1
    total = (n ** (k_steps + 1) - 1) // (n - 1) if n > 1 else k_steps + 1
    if total > budget:
        raise BudgetExceeded(
            f"tree needs {total} nodes for N={n}, K={k_steps}; budget is {budget}"
        )
    probs = np.stack(
        [transition_matrix(schedule, times[k], times[k + 1]) for k in range(k_steps)]
    )
    return PathTree(schedule=schedule, x0=x0, times=times, step_probs=probs)


def one_step_z(node_next_values: np.ndarray, one_step_probs: np.ndarray) -> np.ndarray:
    """Martingale-representation coefficient for one tree step.

    Returns z with v_j - p'v = z'(e_j - p) for every j. The canonical
    representative is v itself (the identity holds term by term); any
    z + c*1 works equally because 1'(e_j - p) = 0.
    """
    v = np.asarray(node_next_values, dtype=float)
    p = np.asarray(one_step_probs, dtype=float)
    if v.shape != p.shape or v.ndim != 1:
        raise DimensionMismatch(f"shapes {v.shape} and {p.shape} do not match")
    if abs(p.sum() - 1.0) > 1e-10:
        raise DimensionMismatch(f"probabilities sum to {p.sum()}, expected 1")
    return v.copy()


def representation_residual(v: np.ndarray, p: np.ndarray, z: np.ndarray) -> float:
    """Max over children of |v_j - p'v - z'(e_j - p)|."""
    mean = float(p @ v)
    return float(np.abs(v - mean - (z - float(z @ p))).max())


def _batch_driver(
    driver: MarkovianDriver,
    t: float,
    states: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    cell: int,
) -> np.ndarray:
    """Evaluate the driver per node, vectorized per state group when possible."""
    out = np.empty(len(y))
    for i in np.unique(states):
        rows = np.flatnonzero(states == i)
        try:
            vals = np.asarray(driver(t, int(i), y[rows], z[rows], cell=cell), dtype=float)
            if vals.shape != rows.shape:
                raise ValueError
        except Exception:
            vals = np.array(
                [driver(t, int(i), float(y[r]), z[r], cell=cell) for r in rows]
            )
        out[rows] = vals
    return out


@dataclass(frozen=True)
class TreeSolution:
    tree: PathTree
    y: list          # per level: (N^k,) node values
    z: list          # per level k < K: (N^k, N) next-value vectors

    @property
    def root(self) -> float:
        return float(self.y[0][0])


def solve_tree(
    tree: PathTree,
    driver: MarkovianDriver,
    terminal: np.ndarray | Callable[[np.ndarray], np.ndarray],
) -> TreeSolution:
    """Backward induction over the full tree.

    terminal is one of: a per-state vector (N,), a precomputed per-leaf value
    array (N^K,), or a callable receiving the (leaves, K+1) history matrix.
    """
    n = tree.n_states
    k_steps = tree.n_steps
    leaves = tree.level_size(k_steps)
    if callable(terminal):
        leaf_vals = np.asarray(terminal(tree.histories_at(k_steps)), dtype=float)
    else:
        term = np.asarray(terminal, dtype=float)
        if term.shape == (n,):
            leaf_vals = term[tree.states_at(k_steps)]
        elif term.shape == (leaves,):
            leaf_vals = term.astype(float)
        else:
            raise DimensionMismatch(
                f"terminal shape {term.shape} matches neither ({n},) nor ({leaves},)"
            )
    y_levels: list = [None] * (k_steps + 1)
    z_levels: list = [None] * k_steps
    y_levels[k_steps] = leaf_vals
    sched = tree.schedule
    for k in range(k_steps - 1, -1, -1):
        t_k = float(tree.times[k])
        dt = float(tree.times[k + 1] - tree.times[k])
        if driver.l1 * dt >= 1.0:
            raise ContractionFailure(
                f"dt*l1 = {driver.l1 * dt:.3g} >= 1 at step {k}; refine the grid"
            )
        cell = sched.cell_index(t_k)
        states = tree.states_at(k)
        v = y_levels[k + 1].reshape(-1, n)      # per parent: child values by next state
        expect = np.empty(len(v))
        for i in np.unique(states):
            rows = np.flatnonzero(states == i)
            expect[rows] = v[rows] @ tree.step_probs[k][:, i]
        y = expect.copy()
        for _ in range(_FP_MAX_ITER):
            y_new = expect + dt * _batch_driver(driver, t_k, states, y, v, cell)
            delta = float(np.abs(y_new - y).max())
            y = y_new
            if delta < _FP_TOL:
                break
        y_levels[k] = y
        z_levels[k] = v
    return TreeSolution(tree=tree, y=y_levels, z=z_levels)


def tower_residual(solution: TreeSolution, driver: MarkovianDriver) -> float:
    """Recompute max node defect of Y_k = E[Y_{k+1}] + dt f(t_k, ., Y_k, Z_k)."""
    tree = solution.tree
    n = tree.n_states
    worst = 0.0
    for k in range(tree.n_steps):
        t_k = float(tree.times[k])
        dt = float(tree.times[k + 1] - tree.times[k])
        cell = tree.schedule.cell_index(t_k)
        states = tree.states_at(k)
        v = solution.z[k]
        expect = np.empty(len(v))
        for i in np.unique(states):
            rows = np.flatnonzero(states == i)
            expect[rows] = v[rows] @ tree.step_probs[k][:, i]
        f_vals = _batch_driver(driver, t_k, states, solution.y[k], v, cell)
        worst = max(worst, float(np.abs(solution.y[k] - expect - dt * f_vals).max()))
    return worst


@dataclass(frozen=True)
class LatticeSolution:
    """Per-state values on the time lattice: the Markovian collapse of the tree."""

    schedule: RateSchedule
    times: np.ndarray      # (K+1,)
    values: np.ndarray     # (K+1, N)
    z: np.ndarray          # (K, N): Z at t_k is the next-level value vector

    def __post_init__(self):
        self.times.setflags(write=False)
        self.values.setflags(write=False)
        self.z.setflags(write=False)

    def root(self, x0: int) -> float:
        return float(self.values[0][x0])


def solve_markovian_lattice(
    schedule: RateSchedule,
    driver: MarkovianDriver,
    terminal: Sequence[float],
    n_steps: int,
) -> LatticeSolution:
    """Same scheme as solve_tree, collapsed to one node per state.

    Valid because both E[Y_{k+1} | X_k = e_i] and Z_k depend on the history
    only through the current state when the driver and terminal are
    Markovian; solve_tree on the same data reproduces these values exactly.
    """
    n = schedule.n_states
    phi = np.asarray(terminal, dtype=float)
    if phi.shape != (n,):
        raise DimensionMismatch(f"terminal must have length {n}")
    times = np.linspace(0.0, schedule.horizon, n_steps + 1)
    values = np.empty((n_steps + 1, n))
    z = np.empty((n_steps, n))
    values[-1] = phi
    for k in range(n_steps - 1, -1, -1):
        t_k = float(times[k])
        dt = float(times[k + 1] - times[k])
        if driver.l1 * dt >= 1.0:
            raise ContractionFailure(
                f"dt*l1 = {driver.l1 * dt:.3g} >= 1 at step {k}; refine the grid"
            )
        cell = schedule.cell_index(t_k)
        p = transition_matrix(schedule, times[k], times[k + 1])
        v = values[k + 1]
        expect = v @ p                      # expect[i] = sum_j P[j, i] v[j]
        y = expect.copy()
        for _ in range(_FP_MAX_ITER):
            y_new = expect + dt * np.array(
                [driver(t_k, i, float(y[i]), v, cell=cell) for i in range(n)]
            )
            delta = float(np.abs(y_new - y).max())
            y = y_new
            if delta < _FP_TOL:
                break
        values[k] = y
        z[k] = v
    return LatticeSolution(schedule=schedule, times=times, values=values, z=z)
