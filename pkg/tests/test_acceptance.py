"""Whole-surface checks at fixed tolerances, one test per guarantee.

Covers the chain law and its martingale calculus at Monte Carlo scale, the
algebraic bounds (seminorm, pseudoinverse), solver convergence rates against
independent references, the regularization limit and its monotonicity, the
comparison property, market pricing with replication, and CLI determinism.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from conftest import random_generator, symmetric_two_state
from test_envelope import bent_driver, sqrt_conv_exact, sqrt_driver

from mcbsde.chain import (
    check_wellposedness,
    psi_from_generator,
    psi_time_integral,
    quadratic_variation,
    seminorm_sq_closed,
    simulate_paths,
    stochastic_integral,
    transition_matrix,
    validate_rate_schedule,
)
from mcbsde.cli import main
from mcbsde.envelope import approximate_driver, solve_minimal
from mcbsde.linalg import pseudoinverse
from mcbsde.market import (
    MarketSpec,
    price_european,
    replicating_portfolio,
    self_financing_residual,
)
from mcbsde.markovian import (
    BsdeSolution,
    MarkovianDriver,
    bsde_residual,
    solve_lipschitz,
)
from mcbsde.scenario import parse_scenario, serialize_scenario
from mcbsde.tree import solve_markovian_lattice

N_PATHS = 10**5
Z2 = np.zeros(2)


@pytest.fixture(scope="module")
def big_ensemble():
    """10^5 paths of the symmetric rate-1 two-state chain on [0, 1]."""
    sched = symmetric_two_state()
    t0 = time.perf_counter()
    paths = simulate_paths(sched, x0=0, seed=11, n_paths=N_PATHS)
    return sched, paths, time.perf_counter() - t0


def test_occupancy_matches_matrix_exponential(big_ensemble):
    sched, paths, sim_time = big_ensemble
    t0 = time.perf_counter()
    ends = np.array([p.state_at(1.0) for p in paths])
    p_hat = np.array([np.mean(ends == 0), np.mean(ends == 1)])
    p = transition_matrix(sched, 0.0, 1.0)[:, 0]
    se = np.sqrt(p * (1.0 - p) / len(paths))
    assert np.all(np.abs(p_hat - p) <= 3.0 * se)
    assert sim_time + (time.perf_counter() - t0) < 10.0


def test_stochastic_integral_isometry(big_ensemble):
    sched, paths, _ = big_ensemble
    z = np.array([1.0, 0.0])
    sq = np.array([stochastic_integral(p, sched, z) ** 2 for p in paths])
    se = sq.std(ddof=1) / np.sqrt(len(sq))
    assert abs(sq.mean() - 1.0) <= 3.0 * se


def test_quadratic_variation_is_compensated(big_ensemble):
    sched, paths, _ = big_ensemble
    diffs = np.array(
        [quadratic_variation(p) - psi_time_integral(p, sched) for p in paths]
    )
    mean = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(len(diffs))
    assert np.all(np.abs(mean) <= 3.0 * se)


def test_state_seminorm_bounded_by_euclidean_norm():
    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(10**4):
        m = int(rng.integers(2, 6))
        a = random_generator(rng, m, lo=0.05, hi=3.0)
        state = int(rng.integers(m))
        c = rng.standard_normal(m) * rng.uniform(0.1, 10.0)
        if seminorm_sq_closed(c, a, state) > 3.0 * m * (c @ c) * (1.0 + 1e-12):
            violations += 1
    assert violations == 0


def test_pseudoinverse_penrose_identities():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10**3):
        m = int(rng.integers(2, 6))
        psi = psi_from_generator(random_generator(rng, m, lo=0.05, hi=3.0),
                                 int(rng.integers(m)))
        dag = pseudoinverse(psi)
        pd = psi @ dag
        dp = dag @ psi
        worst = max(
            worst,
            np.abs(pd @ psi - psi).max(),
            np.abs(dp @ dag - dag).max(),
            np.abs(pd - pd.T).max(),
            np.abs(dp - dp.T).max(),
        )
    assert worst <= 1e-10
    fixed = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert np.abs(pseudoinverse(fixed) - fixed / 4.0).max() <= 1e-12


def test_lattice_tracks_ode_reference_at_first_order():
    t_start = time.perf_counter()
    rng = np.random.default_rng(21)
    errs, ratios = [], []
    for trial in range(20):
        m = 2 + trial % 2
        sched = validate_rate_schedule(
            [0.0, 1.0], [random_generator(rng, m, lo=0.2, hi=2.0)]
        )
        a, b, c = rng.uniform(-0.5, 0.5, size=3)
        om = rng.uniform(0.5, 3.0)
        w = rng.standard_normal(m)
        w *= rng.uniform(0.05, 0.25) / np.linalg.norm(w)
        wp = check_wellposedness(sched, float(np.linalg.norm(w)))
        if not wp.holds:
            w *= 0.9 / wp.worst_value

        def f(t, i, y, z, a=a, b=b, c=c, om=om, w=w):
            return a + b * np.sin(om * t) + c * y + w @ (z - z[i])

        drv = MarkovianDriver(f=f, l1=abs(c), l2=float(np.linalg.norm(w)), growth=1.0)
        phi = rng.uniform(-1.0, 1.0, size=m)
        ref = solve_lipschitz(drv, phi, sched, steps=400).u[0]
        e64 = np.abs(solve_markovian_lattice(sched, drv, phi, 64).values[0] - ref).max()
        e128 = np.abs(solve_markovian_lattice(sched, drv, phi, 128).values[0] - ref).max()
        errs.append(e64)
        ratios.append(e64 / max(e128, 1e-16))
    assert max(errs) < 5e-3
    assert all(1.7 <= r <= 2.3 for r in ratios)
    assert time.perf_counter() - t_start < 60.0


def test_scenario_closed_forms():
    disc = parse_scenario(json.dumps({
        "chain": {"grid": [0.0, 1.0], "matrices": [[[-1.0, 1.0], [1.0, -1.0]]]},
        "driver": {"preset": "discounting", "constants": {"r": 0.05}},
        "terminal": [1.0, 1.0],
    }))
    sol = solve_lipschitz(disc.driver.build(), disc.terminal, disc.schedule, steps=200)
    assert abs(sol.value_at(0.0, 0) - np.exp(-0.05)) < 1e-6

    heat = parse_scenario(json.dumps({
        "chain": {"grid": [0.0, 1.0], "matrices": [[[-1.0, 1.0], [1.0, -1.0]]]},
        "terminal": [1.0, 0.0],
    }))
    sol = solve_lipschitz(heat.driver.build(), heat.terminal, heat.schedule, steps=200)
    assert abs(sol.value_at(0.0, 0) - (1.0 + np.exp(-2.0)) / 2.0) < 1e-8


def test_regularization_properties_and_uniform_rate():
    rng = np.random.default_rng(8)
    checked = 0
    for block in range(20):
        drv = bent_driver(rng) if block % 2 else sqrt_driver()
        t = float(rng.uniform(0.0, 1.0))
        state = int(rng.integers(2))
        n = float(2 ** rng.integers(2, 6))
        ys = np.sort(rng.uniform(-2.0, 2.0, size=500))
        fn = approximate_driver(drv, n)
        fm = approximate_driver(drv, 2.0 * n)
        vn = np.array([fn(t, state, y, Z2) for y in ys])
        vm = np.array([fm(t, state, y, Z2) for y in ys])
        vf = np.array([drv(t, state, y, Z2) for y in ys])
        assert np.all(np.abs(vn) <= drv.growth * (1.0 + np.abs(ys)) + 1e-9)
        assert np.all(vn <= vf + 1e-9)
        assert np.all(vn <= vm + 1e-9)
        assert np.all(np.abs(np.diff(vn)) <= n * np.diff(ys) + 1e-9)
        checked += len(ys)
    assert checked == 10**4

    # uniform distance for 2 sqrt(y+) is exactly 1/n: 9.77e-4 at n = 2^10
    n = 2**10
    fn = approximate_driver(sqrt_driver(), n)
    ys = np.concatenate((np.linspace(-0.5, 4.0, 451), [1.0 / n**2, 4.0 / n**2]))
    got = np.array([fn(0.0, 0, float(y), Z2) for y in ys])
    exact = np.array([sqrt_conv_exact(n, float(y)) for y in ys])
    assert np.abs(got - exact).max() <= 1e-9
    sup = float(np.max(2.0 * np.sqrt(np.maximum(ys, 0.0)) - got))
    assert sup < 1e-3


def test_minimal_solution_vanishes_while_quadratic_also_solves():
    sched = symmetric_two_state()
    base = sqrt_driver()
    report = solve_minimal(base, [0.0, 0.0], sched, steps=60, tol=1e-6)
    assert report.converged
    assert float(np.abs(report.final.u).max()) < 1e-6

    # y(t) = (T-t)^2 solves the same zero-terminal equation; its Hermite
    # data is exact, so the pathwise residual is pure quadrature noise
    ts = report.final.ts
    u = ((1.0 - ts) ** 2)[:, None] * np.ones(2)
    du = (-2.0 * (1.0 - ts))[:, None] * np.ones(2)
    alt = BsdeSolution(
        schedule=sched,
        grid=ts.copy(),
        u=u.copy(),
        ts=ts.copy(),
        u_fine=u.copy(),
        du_a=du[:-1].copy(),
        du_b=du[1:].copy(),
    )
    paths = simulate_paths(sched, x0=0, seed=9, n_paths=20)
    assert bsde_residual(alt, base, paths) < 1e-6


def test_regularized_curves_rise_across_whole_schedule():
    rng = np.random.default_rng(10)
    sched = symmetric_two_state()
    for _ in range(10):
        drv = bent_driver(rng)
        phi = rng.uniform(0.0, 1.0, size=2)
        report = solve_minimal(drv, phi, sched, steps=40, tol=0.0)
        assert not report.converged  # tol 0 forces the full schedule
        assert len(report.sup_diffs) == len(report.n_sequence) - 1
        assert report.monotonicity_worst <= 1e-9


def test_ordered_data_give_ordered_solutions():
    rng = np.random.default_rng(11)
    violations = 0
    for trial in range(100):
        m = 2 + trial % 2
        sched = validate_rate_schedule(
            [0.0, 1.0], [random_generator(rng, m, lo=0.2, hi=2.0)]
        )
        a, b, c = rng.uniform(-0.5, 0.5, size=3)
        w = rng.standard_normal(m)
        w *= rng.uniform(0.0, 0.1) / np.linalg.norm(w)
        wp = check_wellposedness(sched, float(np.linalg.norm(w)))
        if not wp.holds:
            w *= 0.9 / wp.worst_value

        def f(t, i, y, z, a=a, b=b, c=c, w=w):
            return a + b * np.sin(t) + c * y + w @ (z - z[i])

        bump = float(rng.uniform(0.0, 0.5))

        def g(t, i, y, z, f=f, bump=bump):
            return f(t, i, y, z) + bump

        l2 = float(np.linalg.norm(w))
        f_drv = MarkovianDriver(f=f, l1=abs(c), l2=l2, growth=1.0)
        g_drv = MarkovianDriver(f=g, l1=abs(c), l2=l2, growth=1.0)
        phi1 = rng.uniform(-1.0, 1.0, size=m)
        phi2 = phi1 + rng.uniform(0.0, 1.0, size=m)
        u_f = solve_lipschitz(f_drv, phi1, sched, steps=120).u
        u_g = solve_lipschitz(g_drv, phi2, sched, steps=120).u
        if float((u_f - u_g).max()) > 1e-8:
            violations += 1
    assert violations == 0


def _replication_market(c: float = 0.0) -> MarketSpec:
    # sum(theta) = 0 keeps the chain-measure change consistent
    theta = np.array([0.15, -0.15])
    h = np.array([[0.2, 0.05], [0.04, 0.25]])
    r = 0.05
    return MarketSpec(
        schedule=symmetric_two_state(),
        r=np.array([r]),
        g=(r + h @ theta)[None, :],
        h=h[None, :, :],
        c=np.array([c]),
        s0=np.array([1.0, 1.0]),
        bond0=1.0,
        k0=0.25,
        k1=0.1,
        k2=0.1,
        k3_prime=0.25,
    )


def test_pricing_replication_and_self_financing():
    spec = _replication_market()

    # constant payoff discounts at the short rate
    res = price_european(spec, np.array([5.0, 5.0]), steps=200)
    for t in (0.0, 0.3, 0.7, 1.0):
        for state in (0, 1):
            want = 5.0 * np.exp(-0.05 * (1.0 - t))
            assert abs(res.value(t, state) - want) < 1e-6

    # consumption with zero rate and payoff accrues linearly
    flat = MarketSpec(
        schedule=symmetric_two_state(),
        r=np.array([0.0]),
        g=np.array([[0.05, 0.08]]),
        h=np.array([[[0.2, 0.05], [0.0, 0.3]]]),
        c=np.array([0.04]),
        s0=np.array([1.0, 1.0]),
        bond0=1.0,
        k0=0.35,
        k1=0.1,
        k2=0.1,
        k3_prime=0.35,
    )
    res = price_european(flat, np.zeros(2), steps=200)
    for t in (0.0, 0.25, 0.6, 1.0):
        assert abs(res.value(t, 0) - 0.04 * (1.0 - t)) < 1e-8

    # replicating stock 0 recovers its spot price, error halving in steps,
    # with the exact hedge identity at every node and a self-financing
    # defect that also halves
    errs, resid = {}, {}
    for steps in (10, 20):
        tree = price_european(
            spec, lambda a: a.terminal_stocks[:, 0],
            steps=steps, mode="tree", budget=4 * 10**6,
        )
        errs[steps] = abs(tree.price0 - spec.s0[0])
        port = replicating_portfolio(tree, terminal_delta=np.array([1.0, 0.0]))
        assert port.identity_residual() < 1e-10
        resid[steps] = self_financing_residual(tree)
    assert errs[10] < 0.02 * spec.s0[0]
    assert errs[20] < 0.6 * errs[10]
    assert resid[20] < 0.6 * resid[10]


def test_cli_byte_stable_and_verify_quick(tmp_path):
    doc = {
        "chain": {"grid": [0.0, 1.0], "matrices": [[[-1.0, 1.0], [1.0, -1.0]]]},
        "driver": {"preset": "discounting", "constants": {"r": 0.05}},
        "terminal": [1.0, 1.0],
    }
    scen = tmp_path / "scenario.json"
    scen.write_text(json.dumps(doc))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--scenario", str(scen), "--out", str(a)]) == 0
    assert main(["solve", "--scenario", str(scen), "--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "curves.csv").read_bytes() == (b / "curves.csv").read_bytes()

    first = serialize_scenario(parse_scenario(scen.read_bytes()))
    assert serialize_scenario(parse_scenario(first)) == first

    out = tmp_path / "verify"
    t0 = time.perf_counter()
    assert main(["verify", "--out", str(out)]) == 0
    elapsed = time.perf_counter() - t0
    rep = json.loads((out / "report.json").read_text())["verify"]
    assert rep["failed"] == 0
    assert rep["total"] == rep["passed"]
    assert elapsed < 300.0
