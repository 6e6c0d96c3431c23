"""Self-contained verification suite behind the `verify` subcommand.

Each check re-derives a property of one module against an independent target
(closed forms, Monte Carlo statistics, algebraic identities) at desk scale,
so the whole registry runs in well under a minute. A check returns a result
with a one-line detail carrying the measured numbers; the CLI turns the list
into a deterministic JSON report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import (
    psi_from_generator,
    psi_time_integral,
    quadratic_variation,
    seminorm_sq_closed,
    simulate_paths,
    stochastic_integral,
    transition_matrix,
    validate_rate_schedule,
)
from .envelope import approximate_driver, solve_minimal
from .errors import EvaluationError, ScenarioValidationError
from .expressions import parse_expression
from .linalg import pseudoinverse
from .market import (
    MarketSpec,
    price_european,
    replicating_portfolio,
    self_financing_residual,
)
from .markovian import (
    CONTINUOUS,
    BsdeSolution,
    MarkovianDriver,
    bsde_residual,
    solve_lipschitz,
)
from .scenario import parse_scenario, serialize_scenario
from .tree import solve_markovian_lattice

__all__ = ["CheckResult", "run_all"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        # comparisons on numpy scalars produce np.bool_, which json rejects
        object.__setattr__(self, "passed", bool(self.passed))


def _symmetric(horizon=1.0):
    return validate_rate_schedule(
        [0.0, horizon], [np.array([[-1.0, 1.0], [1.0, -1.0]])]
    )


def _sqrt_driver() -> MarkovianDriver:
    return MarkovianDriver(
        f=lambda t, i, y, z: 2.0 * np.sqrt(np.maximum(y, 0.0)),
        l1=0.0,
        l2=0.0,
        growth=2.0,
        kind=CONTINUOUS,
    )


def _random_driver(rng) -> MarkovianDriver:
    a, b, c = rng.uniform(-0.5, 0.5, size=3)
    l2 = float(rng.uniform(0.0, 0.2))
    w = rng.standard_normal(2)
    w *= l2 / max(np.linalg.norm(w), 1e-12)

    def f(t, i, y, z):
        return a + b * np.sin(t) + c * y + w @ (z - z[i])

    return MarkovianDriver(f=f, l1=abs(c), l2=l2, growth=1.0)


def check_chain_occupancy(seed: int) -> CheckResult:
    sched = _symmetric()
    paths = simulate_paths(sched, 0, seed + 11, 2000)
    ends = np.array([p.state_at(1.0) for p in paths])
    p_hat = np.mean(ends == 0)
    p = transition_matrix(sched, 0.0, 1.0)[0, 0]
    se = np.sqrt(p * (1.0 - p) / len(paths))
    gap = abs(p_hat - p)
    return CheckResult(
        "chain_occupancy",
        gap <= 3.0 * se,
        f"|p_hat - p| = {gap:.2e} vs 3 SE = {3.0 * se:.2e}",
    )


def check_martingale_isometry(seed: int) -> CheckResult:
    # constant Z = (1, 0) on the rate-1 symmetric chain has ||Z||^2 = 1 in
    # every state, so E (int Z'dM)^2 = T exactly
    sched = _symmetric()
    paths = simulate_paths(sched, 0, seed + 11, 2000)
    z = np.array([1.0, 0.0])
    vals = np.array([stochastic_integral(p, sched, z) ** 2 for p in paths])
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    gap = abs(vals.mean() - 1.0)
    return CheckResult(
        "martingale_isometry",
        gap <= 3.0 * se,
        f"|mean - 1| = {gap:.2e} vs 3 SE = {3.0 * se:.2e}",
    )


def check_quadratic_variation(seed: int) -> CheckResult:
    sched = _symmetric()
    paths = simulate_paths(sched, 0, seed + 11, 2000)
    diffs = np.array(
        [quadratic_variation(p) - psi_time_integral(p, sched) for p in paths]
    )
    mean = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(len(diffs))
    ratio = np.abs(mean) / np.maximum(3.0 * se, 1e-300)
    worst = float(ratio.max())
    return CheckResult(
        "quadratic_variation",
        worst <= 1.0,
        f"worst entry |mean| / 3 SE = {worst:.3f}",
    )


def check_seminorm_bound(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 5)
    violations = 0
    worst = 0.0
    for _ in range(2000):
        n = int(rng.integers(2, 6))
        rates = rng.uniform(0.0, 3.0, size=(n, n))
        np.fill_diagonal(rates, 0.0)
        a = rates - np.diag(rates.sum(axis=0))
        m = float(np.linalg.norm(a))
        c = rng.standard_normal(n) * 3.0
        i = int(rng.integers(n))
        lhs = seminorm_sq_closed(c, a, i)
        bound = 3.0 * m * float(c @ c)
        worst = max(worst, lhs / max(bound, 1e-300))
        if lhs > bound * (1.0 + 1e-12):
            violations += 1
    return CheckResult(
        "seminorm_bound",
        violations == 0,
        f"0 violations target; got {violations}, worst ratio {worst:.3f}",
    )


def check_pseudoinverse(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 7)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 6))
        rates = rng.uniform(0.0, 3.0, size=(n, n))
        np.fill_diagonal(rates, 0.0)
        a = rates - np.diag(rates.sum(axis=0))
        psi = psi_from_generator(a, int(rng.integers(n)))
        p = pseudoinverse(psi)
        worst = max(
            worst,
            float(np.abs(psi @ p @ psi - psi).max()),
            float(np.abs(p @ psi @ p - p).max()),
            float(np.abs((psi @ p).T - psi @ p).max()),
            float(np.abs((p @ psi).T - p @ psi).max()),
        )
    fixed = np.array([[1.0, -1.0], [-1.0, 1.0]])
    fixed_gap = float(np.abs(pseudoinverse(fixed) - fixed / 4.0).max())
    ok = worst <= 1e-10 and fixed_gap <= 1e-12
    return CheckResult(
        "pseudoinverse",
        ok,
        f"worst Penrose defect {worst:.2e}, fixed-matrix gap {fixed_gap:.2e}",
    )


def check_lattice_vs_ode(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 13)
    sched = _symmetric()
    worst_err = 0.0
    worst_ratio = (2.0, 2.0)
    ok = True
    for _ in range(5):
        driver = _random_driver(rng)
        phi = rng.uniform(-1.0, 1.0, size=2)
        ref = solve_lipschitz(driver, phi, sched, steps=400).u[0, 0]
        e64 = abs(solve_markovian_lattice(sched, driver, phi, 64).root(0) - ref)
        e128 = abs(solve_markovian_lattice(sched, driver, phi, 128).root(0) - ref)
        ratio = e64 / max(e128, 1e-15)
        worst_err = max(worst_err, e64)
        if not (e64 < 5e-3 and 1.5 <= ratio <= 2.6):
            ok = False
            worst_ratio = (ratio, ratio)
    return CheckResult(
        "lattice_vs_ode",
        ok,
        f"worst |lattice - ode| at K=64: {worst_err:.2e}, halving toward K=128",
    )


def check_closed_forms(seed: int) -> CheckResult:
    disc = parse_scenario(
        b'{"chain": {"grid": [0.0, 1.0], "matrices": [[[-1.0, 1.0], [1.0, -1.0]]]},'
        b' "driver": {"preset": "discounting", "constants": {"r": 0.05}},'
        b' "terminal": [1.0, 1.0]}'
    )
    sol = solve_lipschitz(disc.driver.build(), disc.terminal, disc.schedule, steps=200)
    e_disc = abs(sol.value_at(0.0, 0) - np.exp(-0.05))
    heat = parse_scenario(
        b'{"chain": {"grid": [0.0, 1.0], "matrices": [[[-1.0, 1.0], [1.0, -1.0]]]},'
        b' "terminal": [1.0, 0.0]}'
    )
    sol = solve_lipschitz(heat.driver.build(), heat.terminal, heat.schedule, steps=200)
    e_heat = abs(sol.value_at(0.0, 0) - (1.0 + np.exp(-2.0)) / 2.0)
    ok = e_disc < 1e-6 and e_heat < 1e-8
    return CheckResult(
        "closed_forms",
        ok,
        f"discounting error {e_disc:.2e} (tol 1e-6), heat kernel {e_heat:.2e} (tol 1e-8)",
    )


def check_envelope_rate(seed: int) -> CheckResult:
    # f(y) = 2 sqrt(y+) has the explicit regularization min(n y+, 2 sqrt(y+))
    # with sup gap exactly 1/n, attained at y = 1/n^2
    base = _sqrt_driver()
    ok = True
    details = []
    for n in (512, 1024):
        fn = approximate_driver(base, n)
        ys = np.concatenate(
            (np.linspace(-1.0, 1.0, 41), [1.0 / n**2, 4.0 / n**2])
        )
        got = np.array([fn(0.0, 0, y, np.zeros(2)) for y in ys])
        want = np.minimum(n * np.maximum(ys, 0.0), 2.0 * np.sqrt(np.maximum(ys, 0.0)))
        gap = float(np.abs(got - want).max())
        sup = float(np.max(2.0 * np.sqrt(np.maximum(ys, 0.0)) - got))
        if gap > 1e-9 or sup > 1.0 / n + 1e-9:
            ok = False
        details.append(f"n={n}: formula gap {gap:.1e}, sup error {sup:.2e}")
    return CheckResult("envelope_rate", ok, "; ".join(details))


def check_minimal_nonuniqueness(seed: int) -> CheckResult:
    sched = _symmetric()
    base = _sqrt_driver()
    report = solve_minimal(base, [0.0, 0.0], sched, steps=60, tol=1e-6)
    final_sup = float(np.abs(report.final.u).max())
    ok = report.converged and final_sup < 1e-6 and report.monotonicity_worst <= 1e-9

    # the alternative y(t) = (T-t)^2 also solves the zero-terminal equation;
    # its Hermite data is exact, so the residual is pure quadrature noise
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
    resid = bsde_residual(alt, base, simulate_paths(sched, 0, seed + 17, 5))
    ok = ok and resid < 1e-6
    return CheckResult(
        "minimal_nonuniqueness",
        ok,
        f"minimal sup {final_sup:.1e}, converged={report.converged},"
        f" alternative residual {resid:.1e}",
    )


def check_comparison_order(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 19)
    sched = _symmetric()
    worst = 0.0
    for _ in range(10):
        f = _random_driver(rng)
        bump = float(rng.uniform(0.0, 0.5))

        def g_fn(t, i, y, z, f=f, bump=bump):
            return f(t, i, y, z) + bump

        g = MarkovianDriver(f=g_fn, l1=f.l1, l2=f.l2, growth=f.growth)
        phi1 = rng.uniform(-1.0, 1.0, size=2)
        phi2 = phi1 + rng.uniform(0.0, 1.0, size=2)
        u_f = solve_lipschitz(f, phi1, sched, steps=120).u
        u_g = solve_lipschitz(g, phi2, sched, steps=120).u
        worst = max(worst, float((u_f - u_g).max()))
    return CheckResult(
        "comparison_order",
        worst <= 1e-8,
        f"worst ordering violation {worst:.2e} (tol 1e-8)",
    )


def check_pricing(seed: int) -> CheckResult:
    sched = _symmetric()
    theta = np.array([0.15, -0.15])
    h = np.array([[0.2, 0.05], [0.04, 0.25]])
    spec = MarketSpec(
        schedule=sched,
        r=np.array([0.05]),
        g=(0.05 + h @ theta)[None, :],
        h=h[None, :, :],
        c=np.array([0.0]),
        s0=np.array([1.0, 1.0]),
        bond0=1.0,
        k0=0.25,
        k1=0.1,
        k2=0.1,
        k3_prime=0.25,
    )
    e_const = abs(
        price_european(spec, np.array([2.0, 2.0]), steps=200).price0
        - 2.0 * np.exp(-0.05)
    )
    annuity = MarketSpec(
        schedule=sched,
        r=np.array([0.0]),
        g=(h @ theta)[None, :],
        h=h[None, :, :],
        c=np.array([0.04]),
        s0=np.array([1.0, 1.0]),
        bond0=1.0,
        k0=0.25,
        k1=0.1,
        k2=0.1,
        k3_prime=0.25,
    )
    e_annuity = abs(price_european(annuity, np.zeros(2), steps=200).price0 - 0.04)

    res = price_european(
        spec, lambda a: a.terminal_stocks[:, 0], steps=5, mode="tree"
    )
    e_repl = abs(res.price0 - 1.0)
    port = replicating_portfolio(res, terminal_delta=np.array([1.0, 0.0]))
    ident = port.identity_residual()
    selffin = self_financing_residual(res)
    ok = (
        e_const < 1e-6
        and e_annuity < 1e-8
        and e_repl < 2e-2
        and ident < 1e-10
        and selffin < 1e-3
    )
    return CheckResult(
        "pricing",
        ok,
        f"const {e_const:.1e}, annuity {e_annuity:.1e}, replication {e_repl:.1e},"
        f" identity {ident:.1e}, self-financing {selffin:.1e}",
    )


def check_scenario_roundtrip(seed: int) -> CheckResult:
    docs = [
        b'{"chain": {"grid": [0.0, 1.0], "matrices": [[[-1.0, 1.0], [1.0, -1.0]]]},'
        b' "terminal": [1.0, 0.0]}',
        b'{"chain": {"grid": [0.0, 1.0], "matrices": [[[-1.0, 1.0], [1.0, -1.0]]]},'
        b' "driver": {"expression": "2*sqrt(pos(y))", "kind": "continuous",'
        b' "growth": 2.0, "l2": 0.0}, "terminal": [0.0, 0.0]}',
    ]
    ok = True
    for doc in docs:
        echo = serialize_scenario(parse_scenario(doc))
        if serialize_scenario(parse_scenario(echo)) != echo:
            ok = False
    expr = parse_expression("2*sqrt(pos(y))")
    if parse_expression(str(expr)) != expr or expr.evaluate(y=0.25) != 1.0:
        ok = False
    try:
        parse_expression("sqrt(y)").evaluate(y=-1.0)
        ok = False
    except EvaluationError:
        pass
    try:
        parse_scenario(
            b'{"chain": {"grid": [0.0, 1.0], "matrices": [[[-1.0, 0.5], [1.0, -1.0]]]},'
            b' "terminal": [1.0, 0.0]}'
        )
        ok = False
    except ScenarioValidationError as err:
        if "chain.matrices[0]" not in str(err):
            ok = False
    return CheckResult(
        "scenario_roundtrip",
        ok,
        "serialize/parse fixed points, expression guards, field-path errors",
    )


_CHECKS = (
    check_chain_occupancy,
    check_martingale_isometry,
    check_quadratic_variation,
    check_seminorm_bound,
    check_pseudoinverse,
    check_lattice_vs_ode,
    check_closed_forms,
    check_envelope_rate,
    check_minimal_nonuniqueness,
    check_comparison_order,
    check_pricing,
    check_scenario_roundtrip,
)


def run_all(seed: int = 0) -> list:
    """Run every registered check with deterministic per-check seeds."""
    return [check(seed) for check in _CHECKS]
