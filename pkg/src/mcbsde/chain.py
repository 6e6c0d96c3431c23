"""Finite-state Markov chain algebra and simulation.

States are the unit vectors e_0..e_{N-1} of R^N, represented by their integer
index. The chain follows X_t = X_0 + int_0^t A_s X_s ds + M_t with a
piecewise-constant generator A_t whose columns sum to zero, so M is the
martingale part. Everything downstream (BSDE solvers, pricing) is built on
the primitives here: the Psi matrix and its state seminorm, transition
matrices, exact path simulation, and the martingale decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    ColumnSumNonZero,
    DimensionMismatch,
    EmptyGrid,
    NegativeOffDiagonal,
    TimeOrderViolation,
    TimeOutOfRange,
)
from .linalg import expm, pseudoinverse

__all__ = [
    "RateSchedule",
    "ChainPath",
    "WellposednessReport",
    "validate_rate_schedule",
    "unit",
    "psi_from_generator",
    "psi_matrix",
    "seminorm_sq",
    "seminorm_sq_closed",
    "check_wellposedness",
    "transition_matrix",
    "path_stream",
    "simulate_chain",
    "simulate_paths",
    "martingale_part",
    "stochastic_integral",
    "quadratic_variation",
    "psi_time_integral",
]

_COLSUM_TOL = 1e-12
_OFFDIAG_TOL = -1e-14


def unit(i: int, n: int) -> np.ndarray:
    e = np.zeros(n)
    e[i] = 1.0
    return e


@dataclass(frozen=True)
class RateSchedule:
    """Piecewise-constant generator A_t on a time grid.

    grid holds P+1 breakpoints 0 = t_0 < ... < t_P = T; matrices holds one
    N x N generator per cell. m is the Frobenius-norm bound sup_k ||A_k||,
    the constant entering the seminorm bound and the well-posedness check.
    """

    grid: np.ndarray
    matrices: np.ndarray
    m: float

    def __post_init__(self):
        self.grid.setflags(write=False)
        self.matrices.setflags(write=False)

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def n_states(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_cells(self) -> int:
        return self.matrices.shape[0]

    def cell_index(self, t: float) -> int:
        """Cell k with t in [t_k, t_{k+1}); t = T maps to the last cell."""
        if t < self.grid[0] or t > self.horizon:
            raise TimeOutOfRange(f"t={t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        return min(max(k, 0), self.n_cells - 1)

    def cell_index_left(self, t: float) -> int:
        """Cell whose closure contains t from the left (predictable lookup)."""
        if t <= self.grid[0]:
            return 0
        if t > self.horizon:
            raise TimeOutOfRange(f"t={t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.grid, t, side="left")) - 1
        return min(max(k, 0), self.n_cells - 1)

    def generator_at(self, t: float) -> np.ndarray:
        return self.matrices[self.cell_index(t)]

    def breakpoints_between(self, t0: float, t1: float) -> np.ndarray:
        """Grid breakpoints strictly inside (t0, t1)."""
        g = self.grid
        return g[(g > t0 + 0.0) & (g < t1)]


def validate_rate_schedule(grid: Sequence[float], matrices: Sequence) -> RateSchedule:
    """Check generator structure and compute the norm bound m.

    Rejects grids that are empty or unordered, matrices of mismatched shape,
    columns that do not sum to zero, and negative off-diagonal rates.
    """
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2:
        raise EmptyGrid("grid needs at least two points (one cell)")
    if not np.all(np.diff(g) > 0):
        raise TimeOrderViolation("grid must be strictly increasing")
    if g[0] != 0.0:
        raise TimeOutOfRange("grid must start at t=0")
    mats = np.asarray(matrices, dtype=float)
    if mats.ndim != 3:
        raise DimensionMismatch(f"matrices must be a (cells, N, N) array, got shape {mats.shape}")
    if mats.shape[0] != g.size - 1:
        raise DimensionMismatch(
            f"{g.size - 1} grid cells but {mats.shape[0]} matrices"
        )
    if mats.shape[1] != mats.shape[2]:
        raise DimensionMismatch(f"generators must be square, got {mats.shape[1:]}")
    n = mats.shape[1]
    for k, a in enumerate(mats):
        off = a[~np.eye(n, dtype=bool)]
        if np.any(off < _OFFDIAG_TOL):
            j, i = next(
                (j, i) for j in range(n) for i in range(n) if j != i and a[j, i] < _OFFDIAG_TOL
            )
            raise NegativeOffDiagonal(f"matrices[{k}][{j},{i}] = {a[j, i]} < 0")
        sums = a.sum(axis=0)
        bad = np.flatnonzero(np.abs(sums) > _COLSUM_TOL)
        if bad.size:
            i = int(bad[0])
            raise ColumnSumNonZero(f"matrices[{k}] column {i} sums to {sums[i]}, expected 0")
    m = float(max(np.linalg.norm(a) for a in mats))
    return RateSchedule(grid=g, matrices=mats, m=m)


@dataclass(frozen=True)
class ChainPath:
    """One realized trajectory: initial state plus ordered jump events.

    times/states list the jumps; X is right-continuous, so X_t equals the
    last state whose jump time is <= t.
    """

    initial: int
    times: np.ndarray
    states: np.ndarray
    horizon: float
    n_states: int

    def __post_init__(self):
        self.times.setflags(write=False)
        self.states.setflags(write=False)
        # plain loops: paths are tiny and this runs once per simulated path
        if self.times.size:
            ts = self.times.tolist()
            prev_t = None
            for t in ts:
                if prev_t is not None and t <= prev_t:
                    raise TimeOrderViolation("jump times must be strictly increasing")
                prev_t = t
            if ts[0] <= 0 or ts[-1] > self.horizon:
                raise TimeOutOfRange("jump times must lie in (0, T]")
            ss = self.states.tolist()
            prev_s = self.initial
            for s in ss:
                if s == prev_s:
                    raise TimeOrderViolation("consecutive states must differ")
                prev_s = s
            for s in ss:
                if s < 0 or s >= self.n_states:
                    raise DimensionMismatch("state index out of range")

    @property
    def n_jumps(self) -> int:
        return int(self.times.size)

    def state_at(self, t: float) -> int:
        if t < 0 or t > self.horizon:
            raise TimeOutOfRange(f"t={t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.times, t, side="right"))
        return self.initial if k == 0 else int(self.states[k - 1])

    def vector_at(self, t: float) -> np.ndarray:
        return unit(self.state_at(t), self.n_states)

    def segments(self, t0: float = 0.0, t1: float | None = None) -> Iterator[tuple[float, float, int]]:
        """Constant-state pieces (a, b, state) covering [t0, t1]."""
        if t1 is None:
            t1 = self.horizon
        if t0 > t1:
            raise TimeOrderViolation(f"t0={t0} > t1={t1}")
        cuts = [t0] + [float(t) for t in self.times if t0 < t < t1] + [t1]
        for a, b in zip(cuts[:-1], cuts[1:]):
            yield a, b, self.state_at(a)

    def jumps_in(self, t0: float, t1: float) -> Iterator[tuple[float, int, int]]:
        """Jump events (time, old state, new state) with t0 < time <= t1."""
        prev = self.initial
        for t, s in zip(self.times, self.states):
            if t0 < t <= t1:
                yield float(t), prev, int(s)
            prev = int(s)


def psi_from_generator(a: np.ndarray, state: int) -> np.ndarray:
    """Psi = diag(A x) - diag(x) A' - A diag(x) at x = e_state.

    Symmetric and PSD with Psi 1 = 0; the quadratic form z' Psi z is the
    squared state seminorm of z.
    """
    n = a.shape[0]
    col = a[:, state]
    e = unit(state, n)
    psi = np.diag(col) - np.outer(e, col) - np.outer(col, e)
    return 0.5 * (psi + psi.T)


def psi_matrix(schedule: RateSchedule, t: float, state: int) -> np.ndarray:
    if not 0 <= state < schedule.n_states:
        raise DimensionMismatch(f"state {state} out of range")
    return psi_from_generator(schedule.matrices[schedule.cell_index(t)], state)


def seminorm_sq(c: np.ndarray, schedule: RateSchedule, t: float, state: int) -> float:
    """||c||^2 at (t, state): the quadratic form c' Psi c, clamped at 0."""
    c = np.asarray(c, dtype=float)
    if c.shape != (schedule.n_states,):
        raise DimensionMismatch(f"expected length-{schedule.n_states} vector, got {c.shape}")
    psi = psi_matrix(schedule, t, state)
    return max(float(c @ psi @ c), 0.0)


def seminorm_sq_closed(c: np.ndarray, a: np.ndarray, state: int) -> float:
    """Closed form sum_{j != state} A[j, state] (c_j - c_state)^2."""
    c = np.asarray(c, dtype=float)
    diffs = (c - c[state]) ** 2
    rates = a[:, state].copy()
    rates[state] = 0.0
    return float(rates @ diffs)


@dataclass(frozen=True)
class WellposednessReport:
    holds: bool
    worst_value: float          # max over cells/states of l2 ||Psi+||_F sqrt(6m)
    margin: float               # 1 - worst_value
    worst_time: float
    worst_state: int


def check_wellposedness(schedule: RateSchedule, l2: float) -> WellposednessReport:
    """Evaluate l2 ||Psi_t^+||_F sqrt(6m) <= 1 over every cell and state."""
    worst = -np.inf
    wt, ws = 0.0, 0
    factor = np.sqrt(6.0 * schedule.m)
    for k in range(schedule.n_cells):
        a = schedule.matrices[k]
        for i in range(schedule.n_states):
            pinv = pseudoinverse(psi_from_generator(a, i))
            val = l2 * float(np.linalg.norm(pinv)) * factor
            if val > worst:
                worst, wt, ws = val, float(schedule.grid[k]), i
    return WellposednessReport(
        holds=bool(worst <= 1.0),
        worst_value=float(worst),
        margin=float(1.0 - worst),
        worst_time=wt,
        worst_state=ws,
    )


def transition_matrix(schedule: RateSchedule, t0: float, t1: float) -> np.ndarray:
    """P with P[j, i] = Prob(X_{t1} = e_j | X_{t0} = e_i).

    Ordered product of cell exponentials; tiny negative entries from
    round-off are clamped to zero.
    """
    if t0 > t1:
        raise TimeOrderViolation(f"t0={t0} > t1={t1}")
    if t0 < 0 or t1 > schedule.horizon:
        raise TimeOutOfRange(f"[{t0}, {t1}] outside [0, {schedule.horizon}]")
    n = schedule.n_states
    p = np.eye(n)
    if t0 == t1:
        return p
    cuts = np.concatenate(([t0], schedule.breakpoints_between(t0, t1), [t1]))
    for a, b in zip(cuts[:-1], cuts[1:]):
        k = schedule.cell_index(a)
        p = expm(schedule.matrices[k] * (b - a)) @ p
    np.clip(p, 0.0, None, out=p)
    return p


def path_stream(seed: int, path_index: int = 0) -> np.random.Generator:
    """Counter-based RNG stream keyed by (seed, path index).

    Streams are independent and the draw sequence never depends on other
    paths, so ensembles are bit-identical under any scheduling order.
    """
    key = np.array([seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_chain(
    schedule: RateSchedule, x0: int, seed: int, path_index: int = 0
) -> ChainPath:
    """Exact jump simulation: exponential holding times, categorical jumps.

    Holding times that overrun a cell boundary are truncated and redrawn in
    the next cell, which is exact by memorylessness.
    """
    n = schedule.n_states
    if not 0 <= x0 < n:
        raise DimensionMismatch(f"x0={x0} out of range for N={n}")
    rng = path_stream(seed, path_index)
    state = x0
    times: list[float] = []
    states: list[int] = []
    for k in range(schedule.n_cells):
        t = float(schedule.grid[k])
        end = float(schedule.grid[k + 1])
        a = schedule.matrices[k]
        while True:
            rate = -a[state, state]
            if rate <= 0.0:
                break
            t = t + rng.exponential() / rate
            if t >= end:
                break
            u = rng.random() * rate
            acc = 0.0
            dest = n - 1
            for j in range(n):
                if j == state:
                    continue
                acc += a[j, state]
                if u < acc:
                    dest = j
                    break
            times.append(t)
            states.append(dest)
            state = dest
    return ChainPath(
        initial=x0,
        times=np.array(times, dtype=float),
        states=np.array(states, dtype=int),
        horizon=schedule.horizon,
        n_states=n,
    )


def simulate_paths(
    schedule: RateSchedule, x0: int, seed: int, n_paths: int
) -> list[ChainPath]:
    return [simulate_chain(schedule, x0, seed, i) for i in range(n_paths)]


def _drift_integral(path: ChainPath, schedule: RateSchedule, t0: float, t1: float) -> np.ndarray:
    """int_{t0}^{t1} A_s X_s ds, exact for piecewise-constant A and X."""
    out = np.zeros(path.n_states)
    for a, b, i in path.segments(t0, t1):
        cuts = np.concatenate(([a], schedule.breakpoints_between(a, b), [b]))
        for c, d in zip(cuts[:-1], cuts[1:]):
            out += schedule.matrices[schedule.cell_index(c)][:, i] * (d - c)
    return out


def martingale_part(path: ChainPath, schedule: RateSchedule, t: float) -> np.ndarray:
    """M_t = X_t - X_0 - int_0^t A_s X_s ds; components sum to zero."""
    if t < 0 or t > path.horizon:
        raise TimeOutOfRange(f"t={t} outside [0, {path.horizon}]")
    x = path.vector_at(t) - unit(path.initial, path.n_states)
    return x - _drift_integral(path, schedule, 0.0, t)


def stochastic_integral(
    path: ChainPath,
    schedule: RateSchedule,
    z: np.ndarray | Callable[[float], np.ndarray],
    t0: float = 0.0,
    t1: float | None = None,
    breakpoints: Sequence[float] = (),
) -> float:
    """int_{t0}^{t1} z_s' dM_s along the realized path.

    Jump part is exact; the compensator integral int z' A X ds is exact for
    constant z and uses per-piece Simpson otherwise (exact when z is
    piecewise cubic between the supplied breakpoints).
    """
    if t1 is None:
        t1 = path.horizon
    if callable(z):
        zf = z
    else:
        zc = np.asarray(z, dtype=float)
        if zc.shape != (path.n_states,):
            raise DimensionMismatch(f"z must have length {path.n_states}")
        zf = lambda s: zc  # noqa: E731
    total = 0.0
    for tau, old, new in path.jumps_in(t0, t1):
        zt = zf(tau)
        total += zt[new] - zt[old]
    extra = np.asarray(sorted(b for b in breakpoints if t0 < b < t1))
    for a, b, i in path.segments(t0, t1):
        inner = np.concatenate(
            ([a], schedule.breakpoints_between(a, b), extra[(extra > a) & (extra < b)], [b])
        )
        inner = np.unique(inner)
        for c, d in zip(inner[:-1], inner[1:]):
            col = schedule.matrices[schedule.cell_index(c)][:, i]
            fa = float(zf(c) @ col)
            fm = float(zf(0.5 * (c + d)) @ col)
            fb = float(zf(d) @ col)
            total -= (d - c) / 6.0 * (fa + 4.0 * fm + fb)
    return total


def quadratic_variation(path: ChainPath) -> np.ndarray:
    """[X, X]_T as the sum of outer jump products Delta X Delta X'."""
    n = path.n_states
    out = np.zeros((n, n))
    prev = path.initial
    for s in path.states:
        dx = unit(int(s), n) - unit(prev, n)
        out += np.outer(dx, dx)
        prev = int(s)
    return out


def psi_time_integral(
    path: ChainPath, schedule: RateSchedule, t0: float = 0.0, t1: float | None = None
) -> np.ndarray:
    """int Psi(s, X_s) ds, exact for piecewise-constant A and X."""
    if t1 is None:
        t1 = path.horizon
    n = path.n_states
    out = np.zeros((n, n))
    for a, b, i in path.segments(t0, t1):
        cuts = np.concatenate(([a], schedule.breakpoints_between(a, b), [b]))
        for c, d in zip(cuts[:-1], cuts[1:]):
            out += psi_from_generator(schedule.matrices[schedule.cell_index(c)], i) * (d - c)
    return out
