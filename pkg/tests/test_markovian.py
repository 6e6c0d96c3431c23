"""Backward ODE reduction: closed forms, pathwise residuals, comparison."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import random_generator, random_schedule, symmetric_two_state
from mcbsde.chain import simulate_paths, stochastic_integral, validate_rate_schedule
from mcbsde.errors import GridMismatch, NonFiniteValue, WellposednessViolated
from mcbsde.linalg import expm
from mcbsde.markovian import (
    MarkovianDriver,
    apriori_bound_report,
    audit_driver,
    bsde_residual,
    solve_lipschitz,
)

ZERO = MarkovianDriver(f=lambda t, i, y, z: 0.0 * y, l1=0.0, l2=0.0, growth=0.0)


def discounting_driver(r=0.05):
    return MarkovianDriver(f=lambda t, i, y, z: -r * y, l1=r, l2=0.0, growth=r)


class TestClosedForms:
    def test_zero_driver_constant_terminal(self):
        s = symmetric_two_state()
        sol = solve_lipschitz(ZERO, [2.5, 2.5], s, steps=50)
        assert np.abs(sol.u - 2.5).max() < 1e-13

    def test_terminal_condition_exact(self):
        s = symmetric_two_state()
        sol = solve_lipschitz(discounting_driver(), [1.3, -0.2], s, steps=60)
        assert np.array_equal(sol.u[-1], np.array([1.3, -0.2]))

    def test_heat_kernel_value(self):
        s = symmetric_two_state()
        sol = solve_lipschitz(ZERO, [1.0, 0.0], s, steps=200)
        assert abs(sol.u[0, 0] - (1.0 + np.exp(-2.0)) / 2.0) < 1e-8

    def test_discounting_value(self):
        s = symmetric_two_state()
        sol = solve_lipschitz(discounting_driver(0.05), [1.0, 1.0], s, steps=200)
        assert np.abs(sol.u[:, 0] - np.exp(-0.05 * (1.0 - sol.grid))).max() < 1e-10

    def test_affine_driver_integrating_factor(self):
        # f = a y + b: u(t) = e^{a(T-t)} expm(A'(T-t)) Phi + (b/a)(e^{a(T-t)} - 1) 1
        rng = np.random.default_rng(404)
        a_coef, b_coef = -0.3, 0.7
        sched = random_schedule(rng, n_states=3)
        phi = np.array([0.9, -0.4, 0.1])
        drv = MarkovianDriver(
            f=lambda t, i, y, z: a_coef * y + b_coef, l1=abs(a_coef), l2=0.0, growth=1.0
        )
        sol = solve_lipschitz(drv, phi, sched, steps=200)
        a_mat = sched.matrices[0]
        for k in (0, 57, 133, 200):
            t = sol.grid[k]
            tau = sched.horizon - t
            want = np.exp(a_coef * tau) * (expm(a_mat.T * tau) @ phi) + (
                b_coef / a_coef
            ) * (np.exp(a_coef * tau) - 1.0)
            assert np.abs(sol.u[k] - want).max() < 1e-8


class TestResidual:
    def test_zero_driver_constant_terminal_residual(self):
        s = symmetric_two_state()
        sol = solve_lipschitz(ZERO, [1.0, 1.0], s, steps=50)
        paths = simulate_paths(s, 0, seed=21, n_paths=30)
        assert bsde_residual(sol, ZERO, paths) < 1e-13

    def test_discounting_residual(self):
        s = symmetric_two_state()
        drv = discounting_driver()
        sol = solve_lipschitz(drv, [1.0, 1.0], s, steps=200)
        paths = simulate_paths(s, 0, seed=22, n_paths=100)
        assert bsde_residual(sol, drv, paths) < 1e-6

    def test_residual_fourth_order_in_steps(self):
        rng = np.random.default_rng(11)
        sched = random_schedule(rng, n_states=2, n_cells=2)
        drv = MarkovianDriver(
            f=lambda t, i, y, z: 2.0 * np.cos(3.0 * y) + np.sin(5.0 * t) - 0.8 * y,
            l1=6.8,
            l2=0.0,
            growth=3.9,
        )
        phi = np.array([0.8, -0.3])
        paths = simulate_paths(sched, 0, seed=23, n_paths=40)
        r_coarse = bsde_residual(solve_lipschitz(drv, phi, sched, steps=200), drv, paths)
        r_fine = bsde_residual(solve_lipschitz(drv, phi, sched, steps=400), drv, paths)
        assert r_coarse / r_fine >= 8.0

    def test_grid_mismatch_rejected(self):
        s = symmetric_two_state()
        s2 = symmetric_two_state(horizon=2.0)
        sol = solve_lipschitz(ZERO, [1.0, 0.0], s, steps=20)
        paths = simulate_paths(s2, 0, seed=1, n_paths=2)
        with pytest.raises(GridMismatch):
            bsde_residual(sol, ZERO, paths)


class TestZConvention:
    def test_stochastic_integral_ignores_ones_shift(self):
        s = symmetric_two_state()
        drv = discounting_driver()
        sol = solve_lipschitz(drv, [1.4, 0.2], s, steps=100)
        shifted = lambda t: sol.u_at(t) + 11.0  # noqa: E731
        for i in range(15):
            p = simulate_paths(s, 0, seed=77, n_paths=15)[i]
            base = stochastic_integral(p, s, sol.u_at, breakpoints=sol.ts)
            moved = stochastic_integral(p, s, shifted, breakpoints=sol.ts)
            assert abs(base - moved) < 1e-12 * max(1.0, abs(base))


class TestComparison:
    def test_ordered_drivers_and_terminals_give_ordered_curves(self):
        rng = np.random.default_rng(606)
        for _ in range(25):
            n = int(rng.integers(2, 4))
            sched = random_schedule(rng, n_states=n)
            a1, b1 = rng.uniform(-0.8, 0.8), rng.uniform(-0.5, 0.5)
            bump_scale = rng.uniform(0.0, 1.0)
            f1 = MarkovianDriver(
                f=lambda t, i, y, z, a=a1, b=b1: a * np.tanh(y) + b,
                l1=abs(a1), l2=0.0, growth=abs(a1) + abs(b1),
            )
            f2 = MarkovianDriver(
                f=lambda t, i, y, z, a=a1, b=b1, c=bump_scale: a * np.tanh(y) + b + c * (1.0 + np.cos(t)),
                l1=abs(a1), l2=0.0, growth=abs(a1) + abs(b1) + 2 * bump_scale,
            )
            phi1 = rng.normal(size=n)
            phi2 = phi1 + rng.uniform(0.0, 1.0, size=n)
            u1 = solve_lipschitz(f1, phi1, sched, steps=80).u
            u2 = solve_lipschitz(f2, phi2, sched, steps=80).u
            assert (u1 <= u2 + 1e-8).all()


class TestAprioriBound:
    def test_bound_holds_on_randomized_instances(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            n = int(rng.integers(2, 4))
            sched = random_schedule(rng, n_states=n)
            amp = rng.uniform(0.2, 1.0)
            drv = MarkovianDriver(
                f=lambda t, i, y, z, a=amp: a * np.sin(y + t),
                l1=amp, l2=0.0, growth=amp,
            )
            phi = rng.uniform(-1.0, 1.0, size=n)
            sol = solve_lipschitz(drv, phi, sched, steps=100)
            rep = apriori_bound_report(sol, drv)
            assert rep.ok, f"lhs {rep.lhs.max()} vs bound {rep.bound}"


class TestGuards:
    def test_strict_mode_raises_on_wellposedness(self):
        s = symmetric_two_state()
        drv = MarkovianDriver(f=lambda t, i, y, z: 0.1 * z[0], l1=0.0, l2=0.7, growth=1.0)
        with pytest.raises(WellposednessViolated):
            solve_lipschitz(drv, [1.0, 0.0], s, steps=10, strict=True)

    def test_lenient_mode_warns(self):
        s = symmetric_two_state()
        drv = MarkovianDriver(f=lambda t, i, y, z: 0.1 * z[0], l1=0.0, l2=0.7, growth=1.0)
        with pytest.warns(UserWarning, match="well-posedness"):
            solve_lipschitz(drv, [1.0, 0.0], s, steps=10)

    def test_blowup_raises_nonfinite(self):
        s = symmetric_two_state()
        drv = MarkovianDriver(f=lambda t, i, y, z: np.exp(4.0 * y), l1=1.0, l2=0.0, growth=1.0)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NonFiniteValue):
            solve_lipschitz(drv, [2.0, 2.0], s, steps=400)

    def test_bad_steps_rejected(self):
        with pytest.raises(ValueError):
            solve_lipschitz(ZERO, [1.0, 0.0], symmetric_two_state(), steps=0)


class TestAudit:
    def test_honest_declaration_passes(self):
        s = symmetric_two_state()
        drv = MarkovianDriver(
            f=lambda t, i, y, z: 0.5 * np.sin(y) + 0.1 * (z[0] - z[1]),
            l1=0.5,
            # |z0 - z1| = sqrt(2)|z_centered| and ||z||_X = sqrt(2a)|z0-z1|/sqrt(2)
            l2=0.1 * np.sqrt(2.0) / np.sqrt(2.0),
            growth=0.8,
        )
        rep = audit_driver(drv, s, n_samples=800, seed=4)
        assert rep.growth_ok and rep.l1_ok and rep.l2_ok

    def test_dishonest_growth_flagged(self):
        s = symmetric_two_state()
        drv = MarkovianDriver(f=lambda t, i, y, z: 3.0 + 0.0 * y, l1=0.0, l2=0.0, growth=1.0)
        rep = audit_driver(drv, s, n_samples=200, seed=5)
        assert not rep.growth_ok
