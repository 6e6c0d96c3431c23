"""Market coefficients, asset paths, option pricing, hedging."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import symmetric_two_state
from mcbsde.chain import ChainPath, simulate_paths, validate_rate_schedule
from mcbsde.errors import (
    DimensionMismatch,
    GridMismatch,
    NonpositiveJumpFactor,
    SingularVolatility,
    ThetaBoundViolated,
    ValidationFailure,
)
from mcbsde.market import (
    MarketSpec,
    audit_k3,
    build_tree_assets,
    implied_theta,
    portfolio_from_z,
    price_european,
    replicating_portfolio,
    self_financing_residual,
    simulate_assets,
)
from mcbsde.tree import build_tree

A_SYM = np.array([[-1.0, 1.0], [1.0, -1.0]])
H_TRI = np.array([[[0.2, 0.05], [0.0, 0.3]]])


def base_spec(sched, **kw):
    args = dict(
        schedule=sched,
        r=np.array([0.02]),
        g=np.array([[0.05, 0.08]]),
        h=H_TRI,
        c=np.array([0.0]),
        s0=np.array([1.0, 1.0]),
        bond0=1.0,
        k0=0.3,
        k1=0.1,
        k2=0.1,
    )
    args.update(kw)
    return MarketSpec(**args)


def replication_spec(sched, c=0.0):
    # sum(theta) = 0 keeps the market arbitrage-free (a risk-neutral
    # generator needs column sums -sum(theta)); jump factors all positive.
    theta = np.array([0.15, -0.15])
    h = np.array([[0.2, 0.05], [0.04, 0.25]])
    r = 0.05
    g = r + h @ theta
    return MarketSpec(
        schedule=sched,
        r=np.array([r]),
        g=g[None, :],
        h=h[None, :, :],
        c=np.array([c]),
        s0=np.array([1.0, 1.0]),
        bond0=1.0,
        k0=0.25,
        k1=0.1,
        k2=0.1,
        k3_prime=0.25,
    )


def no_jump_path(horizon=1.0, start=0):
    return ChainPath(
        initial=start,
        times=np.array([]),
        states=np.array([], dtype=int),
        horizon=horizon,
        n_states=2,
    )


def one_jump_path(when=0.4, horizon=1.0):
    return ChainPath(
        initial=0,
        times=np.array([when]),
        states=np.array([1]),
        horizon=horizon,
        n_states=2,
    )


class TestMarketSpec:
    def test_theta_back_substitution(self):
        spec = base_spec(symmetric_two_state())
        # 0.3 th2 = 0.06; 0.2 th1 + 0.05*0.2 = 0.03
        assert np.abs(implied_theta(spec, 0.3) - [0.1, 0.2]).max() < 1e-12
        assert np.abs(spec.h[0] @ spec.theta[0] - (spec.g[0] - 0.02)).max() < 1e-10

    def test_no_risk_premium(self):
        spec = base_spec(symmetric_two_state(), g=np.full((1, 2), 0.02))
        assert np.abs(spec.theta).max() == 0.0

    def test_identity_volatility_passthrough(self):
        spec = base_spec(
            symmetric_two_state(),
            h=np.eye(2)[None, :, :],
            g=np.array([[0.12, -0.03]]),
            k0=0.2,
        )
        assert np.abs(spec.theta[0] - [0.1, -0.05]).max() < 1e-14

    def test_theta_bound_enforced(self):
        with pytest.raises(ThetaBoundViolated):
            base_spec(symmetric_two_state(), k0=0.2)

    def test_singular_h_needs_consistent_returns(self):
        sched = symmetric_two_state()
        spec = base_spec(sched, h=np.zeros((1, 2, 2)), g=np.full((1, 2), 0.02))
        assert np.abs(spec.theta).max() == 0.0
        with pytest.raises(SingularVolatility):
            base_spec(sched, h=np.zeros((1, 2, 2)))

    def test_coefficient_validation(self):
        sched = symmetric_two_state()
        with pytest.raises(ValidationFailure):
            base_spec(sched, r=np.array([-0.01]))
        with pytest.raises(ValidationFailure):
            base_spec(sched, r=np.array([0.5]))  # above k2
        with pytest.raises(ValidationFailure):
            base_spec(sched, c=np.array([0.1]))  # c must stay below k1
        with pytest.raises(DimensionMismatch):
            base_spec(sched, g=np.array([[0.05, 0.08, 0.1]]))

    def test_state_dependent_consumption_shape(self):
        spec = base_spec(symmetric_two_state(), c=np.array([[0.03, 0.06]]))
        assert spec.consumption(0, 1) == 0.06

    def test_k3_formula(self):
        spec = base_spec(symmetric_two_state())
        assert spec.k3 == pytest.approx(max(0.1, 0.3 * np.sqrt(6.0)))
        assert base_spec(symmetric_two_state(), k3_prime=0.4).z_lipschitz == 0.4

    def test_bond_closed_form(self):
        grid = [0.0, 0.5, 1.0]
        sched = validate_rate_schedule(grid, [A_SYM, 2.0 * A_SYM])
        spec = base_spec(sched, r=np.array([0.02, 0.06]), g=np.full((2, 2), 0.05),
                         h=np.tile(H_TRI, (2, 1, 1)), c=np.zeros(2))
        assert spec.bond_at(0.75) == pytest.approx(np.exp(0.02 * 0.5 + 0.06 * 0.25))


class TestSimulateAssets:
    def test_jump_free_closed_form(self):
        spec = replication_spec(symmetric_two_state())
        ap = simulate_assets(spec, no_jump_path())
        want = spec.s0 * np.exp(spec.g[0] - spec.h[0] @ A_SYM[:, 0])
        assert np.abs(ap.terminal_stocks - want).max() < 1e-14

    def test_zero_volatility_ignores_jumps(self):
        spec = base_spec(
            symmetric_two_state(), h=np.zeros((1, 2, 2)), g=np.full((1, 2), 0.02),
            s0=np.array([1.0, 2.0]),
        )
        ap = simulate_assets(spec, one_jump_path())
        assert np.abs(ap.terminal_stocks - spec.s0 * np.exp(0.02)).max() < 1e-14

    def test_jump_factor_applied(self):
        spec = replication_spec(symmetric_two_state())
        tau = 0.4
        ap = simulate_assets(spec, one_jump_path(when=tau))
        drift0 = spec.g[0] - spec.h[0] @ A_SYM[:, 0]
        drift1 = spec.g[0] - spec.h[0] @ A_SYM[:, 1]
        fac = 1.0 + spec.h[0][:, 1] - spec.h[0][:, 0]
        want = np.exp(drift0 * tau) * fac * np.exp(drift1 * (1.0 - tau))
        assert np.abs(ap.terminal_stocks - want).max() < 1e-13

    def test_nonpositive_jump_factor_rejected(self):
        spec = base_spec(
            symmetric_two_state(),
            h=np.array([[[0.2, -0.9], [0.05, 0.3]]]),
            g=np.full((1, 2), 0.02),
            k0=0.01,
        )
        with pytest.raises(NonpositiveJumpFactor, match="stock 0"):
            simulate_assets(spec, one_jump_path())
        with pytest.raises(NonpositiveJumpFactor):
            build_tree_assets(spec, build_tree(spec.schedule, 0, 4))

    def test_horizon_mismatch(self):
        spec = replication_spec(symmetric_two_state())
        with pytest.raises(GridMismatch):
            simulate_assets(spec, no_jump_path(horizon=2.0))

    def test_stocks_at_interpolates(self):
        spec = replication_spec(symmetric_two_state())
        ap = simulate_assets(spec, one_jump_path(when=0.4))
        drift0 = spec.g[0] - spec.h[0] @ A_SYM[:, 0]
        assert np.abs(ap.stocks_at(0.2) - np.exp(drift0 * 0.2)).max() < 1e-14

    def test_discounted_bond_constant(self):
        sched = validate_rate_schedule([0.0, 0.3, 1.0], [A_SYM, 2.0 * A_SYM])
        spec = base_spec(sched, r=np.array([0.02, 0.07]), g=np.full((2, 2), 0.05),
                         h=np.tile(H_TRI, (2, 1, 1)), c=np.zeros(2), bond0=3.0)
        ap = simulate_assets(spec, one_jump_path())
        disc = np.array([spec.discount(float(t)) for t in ap.times])
        assert np.abs(ap.bond * disc - 3.0).max() < 1e-10

    def test_discounted_stock_martingale_iff_no_premium(self):
        sched = symmetric_two_state()
        h = np.array([[0.2, 0.05], [0.04, 0.25]])
        flat = base_spec(sched, h=h[None, :, :], g=np.full((1, 2), 0.05),
                         r=np.array([0.05]), k0=0.01)
        tilted = replication_spec(sched)
        paths = simulate_paths(sched, x0=0, n_paths=4000, seed=7)

        def spread(spec):
            vals = np.array([simulate_assets(spec, p).discounted_stocks_at(1.0) for p in paths])
            mean = vals.mean(axis=0)
            se = vals.std(axis=0, ddof=1) / np.sqrt(len(vals))
            return (mean - spec.s0) / (3.0 * se)

        assert np.abs(spread(flat)).max() < 1.0
        assert np.abs(spread(tilted)).max() > 1.0


class TestPricing:
    def test_deterministic_payoff_discounts(self):
        spec = base_spec(symmetric_two_state(), k3_prime=0.3)
        res = price_european(spec, np.array([5.0, 5.0]), steps=200)
        assert abs(res.price0 - 5.0 * np.exp(-0.02)) < 1e-6
        assert abs(res.value(0.4, 1) - 5.0 * np.exp(-0.02 * 0.6)) < 1e-6

    def test_consumption_annuity(self):
        # xi = 0, c constant, r = 0: P_t = c (T - t) whatever theta is
        spec = base_spec(symmetric_two_state(), r=np.array([0.0]), c=np.array([0.04]),
                         k0=0.35, k3_prime=0.35)
        res = price_european(spec, np.zeros(2), steps=200)
        assert abs(res.price0 - 0.04) < 1e-8
        assert abs(res.value(0.75, 1) - 0.01) < 1e-8

    def test_state_consumption_closed_form(self):
        # r = theta = 0: u_1(0) = mean(c) T + (c1 - c2)(1 - e^{-2T})/4
        spec = base_spec(
            symmetric_two_state(), r=np.array([0.0]), g=np.zeros((1, 2)),
            c=np.array([[0.03, 0.06]]), k3_prime=0.1,
        )
        res = price_european(spec, np.zeros(2), steps=200)
        want = 0.045 - 0.03 * (1.0 - np.exp(-2.0)) / 4.0
        assert abs(res.price0 - want) < 1e-8

    def test_price_linear_in_payoff(self):
        spec = replication_spec(symmetric_two_state())
        p1 = price_european(spec, np.array([1.0, 0.0]), steps=100).price0
        p2 = price_european(spec, np.array([0.0, 1.0]), steps=100).price0
        p12 = price_european(spec, np.array([2.0, -3.0]), steps=100).price0
        assert abs(p12 - (2.0 * p1 - 3.0 * p2)) < 1e-8

    def test_consumption_monotonicity(self):
        sched = symmetric_two_state()
        lo = replication_spec(sched, c=0.02)
        hi = replication_spec(sched, c=0.05)
        phi = np.array([1.0, 0.5])
        assert (
            price_european(hi, phi, steps=100).price0
            >= price_european(lo, phi, steps=100).price0 - 1e-9
        )

    def test_tree_matches_markovian_for_state_payoff(self):
        spec = replication_spec(symmetric_two_state(), c=0.03)
        phi = np.array([1.0, 0.4])
        mk = price_european(spec, phi, steps=200)
        tr = price_european(spec, phi, steps=12, mode="tree")
        assert abs(tr.price0 - mk.price0) < 5e-3

    def test_self_replication_price(self):
        spec = replication_spec(symmetric_two_state())
        errs = {}
        for steps in (10, 20):
            res = price_european(
                spec, lambda a: a.terminal_stocks[:, 0], steps=steps,
                mode="tree", budget=4 * 10**6,
            )
            errs[steps] = abs(res.price0 - spec.s0[0])
        assert errs[10] < 0.02 * spec.s0[0]
        assert errs[20] < 0.6 * errs[10]


class TestPortfolios:
    def test_self_replication_hedge(self):
        spec = replication_spec(symmetric_two_state())
        worst = {}
        for steps in (10, 20):
            res = price_european(
                spec, lambda a: a.terminal_stocks[:, 0], steps=steps,
                mode="tree", budget=4 * 10**6,
            )
            port = replicating_portfolio(res, terminal_delta=np.array([1.0, 0.0]))
            assert port.identity_residual() < 1e-10
            worst[steps] = max(
                max(np.abs(port.pi[k][:, 0] - 1.0).max(), np.abs(port.pi[k][:, 1]).max())
                for k in range(steps)
            )
            if steps == 10:
                assert abs(port.pi[0][0, 0] - 1.0) < 0.05
                assert abs(port.pi[0][0, 1]) < 0.05
                assert abs(port.pi0[0][0]) < 0.05
        assert worst[10] < 0.05
        assert worst[20] < 0.6 * worst[10]

    def test_tree_budget_identity_with_consumption(self):
        spec = replication_spec(symmetric_two_state(), c=0.04)
        res = price_european(spec, np.array([1.0, 0.6]), steps=8, mode="tree")
        port = replicating_portfolio(res)
        assert port.identity_residual() < 1e-10
        assert port.match_residual < 5e-3

    def test_all_bond_when_z_vanishes(self):
        spec = replication_spec(symmetric_two_state())
        res = price_european(spec, np.array([5.0, 5.0]), steps=100)
        port = replicating_portfolio(res)
        assert np.abs(port.stock_dollars).max() < 1e-9
        assert port.identity_residual() < 1e-12
        ap = simulate_assets(spec, no_jump_path())
        pi0, pi = port.counts_at(0.5, 0, ap)
        assert np.abs(pi).max() < 1e-9
        assert pi0 == pytest.approx(res.value(0.5, 0) / spec.bond_at(0.5))

    def test_formula_trivial_cases(self):
        spec = replication_spec(symmetric_two_state())
        pi0, pi = portfolio_from_z(
            spec, 0.0, 0, np.array([0.3, 0.3]), np.array([1.0, 1.0]), 0.7
        )
        assert np.abs(pi).max() == 0.0
        assert pi0 == pytest.approx(0.7)
        ident = base_spec(
            symmetric_two_state(), h=np.eye(2)[None, :, :],
            g=np.array([[0.02, 0.02]]), s0=np.array([2.0, 4.0]),
        )
        pi0, pi = portfolio_from_z(
            ident, 0.2, 0, np.array([0.0, 0.3]), np.array([2.0, 4.0]), 1.0
        )
        assert np.abs(pi - [0.0, 0.075]).max() < 1e-14

    def test_singular_h_refused(self):
        spec = base_spec(
            symmetric_two_state(), h=np.zeros((1, 2, 2)), g=np.full((1, 2), 0.02),
            k3_prime=0.25,
        )
        res = price_european(spec, np.array([1.0, 1.0]), steps=20, strict=False)
        with pytest.raises(SingularVolatility):
            replicating_portfolio(res)
        with pytest.raises(SingularVolatility):
            portfolio_from_z(spec, 0.0, 0, np.zeros(2), np.ones(2), 1.0)


class TestSelfFinancing:
    def test_constant_payoff_pathwise(self):
        spec = replication_spec(symmetric_two_state())
        res = price_european(spec, np.array([5.0, 5.0]), steps=200)
        paths = simulate_paths(spec.schedule, x0=0, n_paths=40, seed=3)
        assert self_financing_residual(res, paths=paths) < 1e-8

    def test_consumption_only_exact(self):
        spec = base_spec(symmetric_two_state(), r=np.array([0.0]), c=np.array([0.04]),
                         k0=0.35, k3_prime=0.35)
        res = price_european(spec, np.zeros(2), steps=200)
        paths = simulate_paths(spec.schedule, x0=1, n_paths=40, seed=4)
        assert self_financing_residual(res, paths=paths) < 1e-10

    def test_tree_residual_shrinks(self):
        spec = replication_spec(symmetric_two_state())
        res10 = price_european(spec, lambda a: a.terminal_stocks[:, 0], steps=10,
                               mode="tree", budget=4 * 10**6)
        res20 = price_european(spec, lambda a: a.terminal_stocks[:, 0], steps=20,
                               mode="tree", budget=4 * 10**6)
        r10 = self_financing_residual(res10)
        r20 = self_financing_residual(res20)
        assert r20 < 0.6 * r10

    def test_markovian_needs_paths(self):
        spec = replication_spec(symmetric_two_state())
        res = price_european(spec, np.array([1.0, 0.0]), steps=50)
        with pytest.raises(ValueError):
            self_financing_residual(res)
        bad = simulate_paths(symmetric_two_state(horizon=2.0), x0=0, n_paths=2, seed=0)
        with pytest.raises(GridMismatch):
            self_financing_residual(res, paths=bad)


class TestDriverConstants:
    def test_k3_bound_on_samples(self):
        worst = audit_k3(replication_spec(symmetric_two_state()), n_samples=10**4)
        assert worst <= 1.0 + 1e-9

    def test_k3_bound_other_market(self):
        spec = base_spec(symmetric_two_state(), c=np.array([0.05]))
        assert audit_k3(spec, n_samples=10**4, seed=1) <= 1.0 + 1e-9
