"""Shared helpers: random generator schedules and drivers used across suites."""

from __future__ import annotations

import numpy as np

from mcbsde.chain import RateSchedule, validate_rate_schedule


def random_generator(rng: np.random.Generator, n: int, lo: float = 0.1, hi: float = 1.2) -> np.ndarray:
    """Random valid generator: off-diagonal rates in [lo, hi], columns sum to 0."""
    a = rng.uniform(lo, hi, size=(n, n))
    np.fill_diagonal(a, 0.0)
    a[np.diag_indices(n)] = -a.sum(axis=0)
    return a


def random_schedule(
    rng: np.random.Generator,
    n_states: int = 2,
    n_cells: int = 1,
    horizon: float = 1.0,
    lo: float = 0.1,
    hi: float = 1.2,
) -> RateSchedule:
    if n_cells == 1:
        grid = np.array([0.0, horizon])
    else:
        interior = np.sort(rng.uniform(0.05, 0.95, size=n_cells - 1)) * horizon
        grid = np.concatenate(([0.0], interior, [horizon]))
    mats = [random_generator(rng, n_states, lo, hi) for _ in range(n_cells)]
    return validate_rate_schedule(grid, mats)


def symmetric_two_state(rate: float = 1.0, horizon: float = 1.0) -> RateSchedule:
    a = np.array([[-rate, rate], [rate, -rate]])
    return validate_rate_schedule([0.0, horizon], [a])
