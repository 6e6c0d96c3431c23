"""Lipschitz BSDE solver via the Markovian backward ODE reduction.

For terminal conditions xi = Phi(X_T) and Markovian drivers, the solution has
the form Y_t = u(t) . X_t with Z_t = u(t), where u solves the N-dimensional
backward system

    du_i/dt = -(A_t' u)_i - f(t, e_i, u_i, u),   u(T) = Phi.

At a jump, Delta Y = u(tau) . Delta X = Z' Delta M holds exactly, and the
drift matching between jumps is what produces the A' term, so the
representation satisfies the BSDE pathwise; bsde_residual verifies this on
simulated trajectories. Z is only determined up to multiples of the all-ones
vector (the seminorm's null direction); u(t) is the fixed representative.
"""

from __future__ import annotations

import inspect
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chain import ChainPath, RateSchedule, check_wellposedness, seminorm_sq
from .errors import (
    DimensionMismatch,
    GridMismatch,
    NonFiniteValue,
    WellposednessViolated,
)

__all__ = [
    "MarkovianDriver",
    "BsdeSolution",
    "DriverAudit",
    "solve_lipschitz",
    "bsde_residual",
    "audit_driver",
    "apriori_bound_report",
    "AprioriBoundReport",
]

LIPSCHITZ = "lipschitz"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class MarkovianDriver:
    """Driver f(t, state, y, z) with declared constants.

    f must broadcast over a 1-D numpy array of y values (t, state, z fixed);
    scalar y in, scalar out. Drivers built from step-function coefficients
    may accept an extra ``cell`` keyword: the solver passes the schedule cell
    its current integration interval lies in, which pins down the coefficient
    value at cell boundaries where a time lookup alone is ambiguous.

    l1: Lipschitz constant in y. l2: Lipschitz constant in z with respect to
    the state seminorm. growth: the constant K with |f| <= K(1 + |y|).
    kind: "lipschitz" or "continuous" (continuous in y, not y-Lipschitz).
    """

    f: Callable
    l1: float
    l2: float
    growth: float
    kind: str = LIPSCHITZ
    wants_cell: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.kind not in (LIPSCHITZ, CONTINUOUS):
            raise ValueError(f"unknown driver kind {self.kind!r}")
        try:
            params = inspect.signature(self.f).parameters
            wants = "cell" in params
        except (TypeError, ValueError):
            wants = False
        object.__setattr__(self, "wants_cell", wants)

    def __call__(self, t: float, state: int, y, z: np.ndarray, cell: int | None = None):
        if self.wants_cell and cell is not None:
            return self.f(t, state, y, z, cell=cell)
        return self.f(t, state, y, z)


@dataclass(frozen=True)
class BsdeSolution:
    """Per-state value curve u with dense cubic output.

    Y_t = u(t) . X_t and Z_t = u(t). The fine arrays carry one RK4 interval
    per entry, split at schedule breakpoints, with one-sided derivatives at
    interval ends so interpolation never smooths across a coefficient jump.
    """

    schedule: RateSchedule
    grid: np.ndarray      # (steps+1,) uniform reporting grid
    u: np.ndarray         # (steps+1, N)
    ts: np.ndarray        # (F+1,) fine knots: grid plus schedule breakpoints
    u_fine: np.ndarray    # (F+1, N)
    du_a: np.ndarray      # (F, N) du/dt at the left end of fine interval j
    du_b: np.ndarray      # (F, N) du/dt at the right end of fine interval j

    def __post_init__(self):
        for arr in (self.grid, self.u, self.ts, self.u_fine, self.du_a, self.du_b):
            arr.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.u.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def _interval(self, t: float) -> int:
        j = int(np.searchsorted(self.ts, t, side="right")) - 1
        return min(max(j, 0), len(self.ts) - 2)

    def u_at(self, t: float) -> np.ndarray:
        """Cubic Hermite interpolant of u on the fine interval containing t."""
        j = self._interval(t)
        t0, t1 = self.ts[j], self.ts[j + 1]
        h = t1 - t0
        s = (t - t0) / h
        s2, s3 = s * s, s * s * s
        return (
            (2 * s3 - 3 * s2 + 1) * self.u_fine[j]
            + (s3 - 2 * s2 + s) * h * self.du_a[j]
            + (-2 * s3 + 3 * s2) * self.u_fine[j + 1]
            + (s3 - s2) * h * self.du_b[j]
        )

    def z_at(self, t: float) -> np.ndarray:
        return self.u_at(t)

    def value_at(self, t: float, state: int) -> float:
        return float(self.u_at(t)[state])


def _merge_knots(grid: np.ndarray, breaks: np.ndarray, horizon: float) -> np.ndarray:
    ts = np.unique(np.concatenate((grid, breaks)))
    # drop near-duplicates that would create degenerate intervals
    keep = np.concatenate(([True], np.diff(ts) > 1e-12 * max(horizon, 1.0)))
    return ts[keep]


def solve_lipschitz(
    driver: MarkovianDriver,
    terminal: Sequence[float],
    schedule: RateSchedule,
    steps: int = 200,
    strict: bool = False,
) -> BsdeSolution:
    """Backward RK4 integration of the reduction ODE on a uniform grid.

    Each uniform interval is split at schedule breakpoints so the right side
    stays smooth within every integration step; the driver is evaluated with
    the cell of the current sub-interval. strict=True refuses to run when the
    well-posedness condition fails; the default warns and proceeds (the
    condition backs the comparison theorem, not the integration itself).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = schedule.n_states
    phi = np.asarray(terminal, dtype=float)
    if phi.shape != (n,):
        raise DimensionMismatch(f"terminal must have length {n}, got {phi.shape}")
    rep = check_wellposedness(schedule, driver.l2)
    if not rep.holds:
        msg = (
            f"well-posedness violated: l2*||Psi+||*sqrt(6m) = {rep.worst_value:.6g} > 1 "
            f"at t={rep.worst_time}, state {rep.worst_state}"
        )
        if strict:
            raise WellposednessViolated(msg)
        warnings.warn(msg, stacklevel=2)

    t_final = schedule.horizon
    grid = np.linspace(0.0, t_final, steps + 1)
    ts = _merge_knots(grid, schedule.grid, t_final)
    f_count = len(ts) - 1
    u_fine = np.empty((f_count + 1, n))
    du_a = np.empty((f_count, n))
    du_b = np.empty((f_count, n))
    u_fine[-1] = phi

    def rhs(t: float, u: np.ndarray, cell: int) -> np.ndarray:
        a = schedule.matrices[cell]
        fv = np.array([driver(t, i, u[i], u, cell=cell) for i in range(n)], dtype=float)
        return -(a.T @ u) - fv

    for j in range(f_count - 1, -1, -1):
        a_t, b_t = float(ts[j]), float(ts[j + 1])
        cell = schedule.cell_index(a_t)
        ub = u_fine[j + 1]
        h = a_t - b_t
        k1 = rhs(b_t, ub, cell)
        k2 = rhs(b_t + 0.5 * h, ub + 0.5 * h * k1, cell)
        k3 = rhs(b_t + 0.5 * h, ub + 0.5 * h * k2, cell)
        k4 = rhs(a_t, ub + h * k3, cell)
        ua = ub + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(ua)):
            raise NonFiniteValue(f"solution blew up integrating [{a_t}, {b_t}]")
        u_fine[j] = ua
        du_b[j] = k1
        du_a[j] = rhs(a_t, ua, cell)

    grid_idx = np.searchsorted(ts, grid)
    u = u_fine[grid_idx].copy()
    u[-1] = phi
    return BsdeSolution(
        schedule=schedule, grid=grid, u=u, ts=ts, u_fine=u_fine, du_a=du_a, du_b=du_b
    )


def _simpson(f: Callable[[float], float], a: float, b: float) -> float:
    return (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))


def bsde_residual(
    solution: BsdeSolution,
    driver: MarkovianDriver,
    paths: Sequence[ChainPath],
) -> float:
    """Max over paths and grid times of |Y_t - (xi + int f ds - int Z' dM)|.

    Both integrals are accumulated backward over pieces on which the state,
    the schedule cell, and the interpolant are all smooth; Simpson per piece
    is exact for the compensator term (cubic integrand) and O(h^5) for the
    driver term.
    """
    sched = solution.schedule
    grid = solution.grid
    t_final = solution.horizon
    worst = 0.0
    for path in paths:
        if abs(path.horizon - t_final) > 1e-12 or path.n_states != solution.n_states:
            raise GridMismatch("path and solution do not share horizon/state count")
        cuts = np.unique(np.concatenate((solution.ts, path.times[path.times < t_final])))
        jumps = list(path.jumps_in(0.0, t_final))
        xi = float(solution.u[-1][path.state_at(t_final)])

        # cumulative integrals from each cut point to T, built backward
        int_f = np.zeros(len(cuts))
        int_z = np.zeros(len(cuts))
        jump_ptr = len(jumps) - 1
        for idx in range(len(cuts) - 2, -1, -1):
            c, d = float(cuts[idx]), float(cuts[idx + 1])
            i = path.state_at(c)
            cell = sched.cell_index(c)
            col = sched.matrices[cell][:, i]

            def f_piece(s: float) -> float:
                us = solution.u_at(s)
                return float(driver(s, i, us[i], us, cell=cell))

            def comp_piece(s: float) -> float:
                return float(solution.u_at(s) @ col)

            df = _simpson(f_piece, c, d)
            dz = -_simpson(comp_piece, c, d)
            while jump_ptr >= 0 and c < jumps[jump_ptr][0] <= d:
                tau, old, new = jumps[jump_ptr]
                zt = solution.u_at(tau)
                dz += float(zt[new] - zt[old])
                jump_ptr -= 1
            int_f[idx] = int_f[idx + 1] + df
            int_z[idx] = int_z[idx + 1] + dz

        pos = np.searchsorted(cuts, grid)
        for k, t in enumerate(grid):
            y = solution.value_at(float(t), path.state_at(float(t)))
            res = y - (xi + int_f[pos[k]] - int_z[pos[k]])
            worst = max(worst, abs(res))
    return worst


@dataclass(frozen=True)
class DriverAudit:
    growth_ok: bool
    l1_ok: bool
    l2_ok: bool
    worst_growth: float   # max |f| / (K (1 + |y|))
    worst_l1: float       # max |f(y) - f(y')| / (l1 |y - y'|)
    worst_l2: float       # max |f(z) - f(z')| / (l2 ||z - z'||_{X_t})


def audit_driver(
    driver: MarkovianDriver,
    schedule: RateSchedule,
    n_samples: int = 2000,
    seed: int = 0,
    rel_tol: float = 1e-9,
) -> DriverAudit:
    """Spot-check declared growth/Lipschitz constants on random points."""
    rng = np.random.default_rng(seed)
    n = schedule.n_states
    t_final = schedule.horizon
    wg = wl1 = wl2 = 0.0
    for _ in range(n_samples):
        t = float(rng.uniform(0.0, t_final))
        i = int(rng.integers(0, n))
        y = float(rng.normal() * 3.0)
        yp = float(rng.normal() * 3.0)
        z = rng.normal(size=n) * 2.0
        zp = rng.normal(size=n) * 2.0
        fy = float(driver(t, i, y, z))
        if driver.growth > 0:
            wg = max(wg, abs(fy) / (driver.growth * (1.0 + abs(y))))
        if driver.l1 > 0 and abs(y - yp) > 1e-12:
            fyp = float(driver(t, i, yp, z))
            wl1 = max(wl1, abs(fy - fyp) / (driver.l1 * abs(y - yp)))
        if driver.l2 > 0:
            dist = np.sqrt(seminorm_sq(z - zp, schedule, t, i))
            if dist > 1e-9:
                fzp = float(driver(t, i, y, zp))
                wl2 = max(wl2, abs(fy - fzp) / (driver.l2 * dist))
    tol = 1.0 + rel_tol
    return DriverAudit(
        growth_ok=wg <= tol, l1_ok=wl1 <= tol, l2_ok=wl2 <= tol,
        worst_growth=wg, worst_l1=wl1, worst_l2=wl2,
    )


@dataclass(frozen=True)
class AprioriBoundReport:
    lhs: np.ndarray       # per state: sum_t dt (u_i^2 + ||u||^2 at (t, e_i))
    bound: float          # e^{beta T} (|Phi|_max^2 + K^2 T), beta = 2K + 2
    ok: bool


def apriori_bound_report(solution: BsdeSolution, driver: MarkovianDriver) -> AprioriBoundReport:
    sched = solution.schedule
    grid = solution.grid
    n = solution.n_states
    dt = np.diff(grid)
    lhs = np.zeros(n)
    for i in range(n):
        vals = np.array(
            [
                solution.u[k, i] ** 2
                + seminorm_sq(solution.u[k], sched, float(grid[k]), i)
                for k in range(len(grid) - 1)
            ]
        )
        lhs[i] = float(vals @ dt)
    k_growth = driver.growth
    beta = 2.0 * k_growth + 2.0
    t_final = solution.horizon
    bound = float(
        np.exp(beta * t_final)
        * (np.abs(solution.u[-1]).max() ** 2 + k_growth**2 * t_final)
    )
    return AprioriBoundReport(lhs=lhs, bound=bound, ok=bool(lhs.max() <= bound))
