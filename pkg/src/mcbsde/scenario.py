"""Scenario files: JSON in, validated solver inputs out, deterministic echo.

A scenario is a UTF-8 JSON object with these keys:

    chain     {"grid": [0.0, ..., T], "matrices": [[[...]]], "x0": 0}
    driver    {"expression": "...", "constants": {...}, "kind": "lipschitz",
               "l1": ..., "l2": ..., "growth": ...}
              or {"preset": "zero" | "discounting" | "sqrt_pos",
                  "constants": {...}}
    terminal  per-state values [v_0, ..., v_{N-1}] or
              {"expression": "...", "constants": {...}} over the state s
    market    optional; {"r": [...], "g": [[...]], "h": [[[...]]], "c": [...],
               "s0": [...], "bond0": ..., "k0": ..., "k1": ..., "k2": ...,
               "k3_prime": ...}
    compare   optional; {"driver": {...}, "terminal": [...]} giving the upper
              pair for the comparison subcommand
    solver    {"mode": "markovian" | "tree", "steps": 200, "tol": 1e-6,
               "budget": 1000000, "strict": false, "n_schedule": [...]}
    seed      nonnegative integer

The horizon is the last grid point, not a separate field. "l2" may be spelled
"c2"; the normal form uses "l2". "growth" is the constant K in the bound
|f| <= K(1+|y|): required for continuous drivers, defaulted to l1 for
Lipschitz ones where no solver reads it. Missing solver keys are filled with
the defaults above, so the serialized form always echoes the values a run
actually used. Serialization is canonical (sorted keys, two-space indent,
trailing newline): parse, serialize, parse again is the identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .chain import RateSchedule, validate_rate_schedule
from .envelope import default_n_schedule
from .errors import (
    McbsdeError,
    ScenarioParseError,
    SchemaError,
    ScenarioValidationError,
    ValidationFailure,
)
from .expressions import Expression, parse_expression
from .market import MarketSpec
from .markovian import CONTINUOUS, LIPSCHITZ, MarkovianDriver
from .tree import DEFAULT_BUDGET

__all__ = [
    "DriverSpec",
    "Scenario",
    "parse_scenario",
    "serialize_scenario",
]

DEFAULT_STEPS = 200
DEFAULT_TOL = 1e-6

_MODES = ("markovian", "tree")


def _preset_zero(consts):
    return {"expression": "0", "kind": LIPSCHITZ, "l1": 0.0, "l2": 0.0}


def _preset_discounting(consts):
    if "r" not in consts:
        raise ScenarioValidationError(
            "driver: preset 'discounting' needs the constant r"
        )
    return {
        "expression": "-r * y",
        "kind": LIPSCHITZ,
        "l1": abs(float(consts["r"])),
        "l2": 0.0,
    }


def _preset_sqrt_pos(consts):
    return {
        "expression": "2*sqrt(pos(y))",
        "kind": CONTINUOUS,
        "l2": 0.0,
        "growth": 2.0,
    }


_PRESETS = {
    "zero": _preset_zero,
    "discounting": _preset_discounting,
    "sqrt_pos": _preset_sqrt_pos,
}


# schema walking; every reader carries the dotted path for error messages


def _obj(value, path, keys) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(f"{path}: expected an object, got {type(value).__name__}")
    unknown = sorted(set(value) - set(keys))
    if unknown:
        raise SchemaError(f"{path}: unknown key {unknown[0]!r}")
    return value


def _num(value, path) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{path}: expected a number, got {type(value).__name__}")
    out = float(value)
    if not np.isfinite(out):
        raise SchemaError(f"{path}: must be finite")
    return out


def _int(value, path) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{path}: expected an integer, got {type(value).__name__}")
    return value


def _str(value, path, choices=None) -> str:
    if not isinstance(value, str):
        raise SchemaError(f"{path}: expected a string, got {type(value).__name__}")
    if choices is not None and value not in choices:
        raise SchemaError(f"{path}: expected one of {sorted(choices)}, got {value!r}")
    return value


def _array(value, path) -> np.ndarray:
    if not isinstance(value, list):
        raise SchemaError(f"{path}: expected an array, got {type(value).__name__}")
    try:
        out = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"{path}: expected numbers") from None
    if not np.all(np.isfinite(out)):
        raise SchemaError(f"{path}: all numbers must be finite")
    return out


def _constants(value, path) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise SchemaError(f"{path}: expected an object, got {type(value).__name__}")
    return {k: _num(v, f"{path}.{k}") for k, v in value.items()}


def _parse_expr(text, path, allowed, constants) -> Expression:
    expr_text = _str(text, path)
    try:
        expr = parse_expression(expr_text)
    except McbsdeError as err:
        raise ScenarioValidationError(f"{path}: {err}") from None
    loose = expr.variables - set(allowed)
    if loose:
        raise ScenarioValidationError(
            f"{path}: variable {sorted(loose)[0]!r} is not available here"
        )
    unbound = expr.constants - set(constants)
    if unbound:
        raise ScenarioValidationError(
            f"{path}: expression uses undeclared constant {sorted(unbound)[0]!r}"
        )
    return expr


@dataclass(frozen=True, eq=False)
class DriverSpec:
    """A driver as declared in a scenario, ready to instantiate."""

    expression: Expression
    constants: dict
    kind: str
    l1: float
    l2: float
    growth: float

    def build(self) -> MarkovianDriver:
        expr, consts = self.expression, dict(self.constants)

        def f(t, state, y, z):
            return expr.evaluate(t=t, y=y, z=z, s=state, constants=consts)

        return MarkovianDriver(
            f=f, l1=self.l1, l2=self.l2, growth=self.growth, kind=self.kind
        )

    def normal_form(self) -> dict:
        out = {
            "expression": self.expression.text,
            "constants": {k: float(v) for k, v in sorted(self.constants.items())},
            "kind": self.kind,
            "l2": self.l2,
            "growth": self.growth,
        }
        if self.kind == LIPSCHITZ:
            out["l1"] = self.l1
        return out


def _parse_driver(value, path, n_states) -> DriverSpec:
    raw = _obj(
        value, path,
        ("preset", "expression", "constants", "kind", "l1", "l2", "c2", "growth"),
    )
    constants = _constants(raw.get("constants"), f"{path}.constants")
    if "preset" in raw:
        name = _str(raw["preset"], f"{path}.preset")
        if name not in _PRESETS:
            raise ScenarioValidationError(
                f"{path}.preset: unknown preset {name!r};"
                f" have {sorted(_PRESETS)}"
            )
        filled = _PRESETS[name](constants)
        raw = {**filled, **{k: v for k, v in raw.items() if k != "preset"}}
    if "c2" in raw:
        if "l2" in raw:
            raise SchemaError(f"{path}: give l2 or c2, not both")
        raw["l2"] = raw.pop("c2")
    if "expression" not in raw:
        raise SchemaError(f"{path}: missing 'expression' (or a 'preset')")
    expr = _parse_expr(
        raw["expression"], f"{path}.expression", ("t", "y", "z", "s"), constants
    )
    if expr.max_z_index > n_states:
        raise ScenarioValidationError(
            f"{path}.expression: z{expr.max_z_index} exceeds N={n_states} states"
        )
    kind = _str(raw.get("kind", LIPSCHITZ), f"{path}.kind", (LIPSCHITZ, CONTINUOUS))
    if "l2" not in raw:
        raise SchemaError(f"{path}: missing 'l2'")
    l2 = _num(raw["l2"], f"{path}.l2")
    if l2 < 0:
        raise ScenarioValidationError(f"{path}.l2: must be >= 0")
    if kind == LIPSCHITZ:
        if "l1" not in raw:
            raise SchemaError(f"{path}: missing 'l1'")
        l1 = _num(raw["l1"], f"{path}.l1")
        if l1 < 0:
            raise ScenarioValidationError(f"{path}.l1: must be >= 0")
        growth = _num(raw["growth"], f"{path}.growth") if "growth" in raw else l1
    else:
        if "growth" not in raw:
            raise SchemaError(f"{path}: continuous drivers must declare 'growth'")
        if "l1" in raw:
            raise ScenarioValidationError(
                f"{path}.l1: continuous drivers have no Lipschitz constant in y"
            )
        growth = _num(raw["growth"], f"{path}.growth")
        if growth <= 0:
            raise ScenarioValidationError(f"{path}.growth: must be > 0")
        l1 = growth
    return DriverSpec(
        expression=expr, constants=constants, kind=kind, l1=l1, l2=l2, growth=growth
    )


def _parse_terminal(value, path, n_states):
    """Returns (values (N,), normal form)."""
    if isinstance(value, dict):
        raw = _obj(value, path, ("expression", "constants"))
        constants = _constants(raw.get("constants"), f"{path}.constants")
        expr = _parse_expr(
            raw.get("expression"), f"{path}.expression", ("s",), constants
        )
        vals = np.asarray(
            expr.evaluate(s=np.arange(n_states), constants=constants), dtype=float
        )
        vals = np.broadcast_to(vals, (n_states,)).copy()
        norm = {
            "expression": expr.text,
            "constants": {k: float(v) for k, v in sorted(constants.items())},
        }
        return vals, norm
    vals = _array(value, path)
    if vals.shape != (n_states,):
        raise ScenarioValidationError(
            f"{path}: expected {n_states} per-state values, got shape {vals.shape}"
        )
    return vals, [float(v) for v in vals]


def _parse_market(value, path, schedule) -> MarketSpec:
    raw = _obj(
        value, path,
        ("r", "g", "h", "c", "s0", "bond0", "k0", "k1", "k2", "k3_prime"),
    )
    for key in ("r", "g", "h", "c", "s0", "k0", "k1", "k2"):
        if key not in raw:
            raise SchemaError(f"{path}: missing {key!r}")
    try:
        return MarketSpec(
            schedule=schedule,
            r=_array(raw["r"], f"{path}.r"),
            g=_array(raw["g"], f"{path}.g"),
            h=_array(raw["h"], f"{path}.h"),
            c=_array(raw["c"], f"{path}.c"),
            s0=_array(raw["s0"], f"{path}.s0"),
            bond0=_num(raw.get("bond0", 1.0), f"{path}.bond0"),
            k0=_num(raw["k0"], f"{path}.k0"),
            k1=_num(raw["k1"], f"{path}.k1"),
            k2=_num(raw["k2"], f"{path}.k2"),
            k3_prime=(
                _num(raw["k3_prime"], f"{path}.k3_prime")
                if raw.get("k3_prime") is not None
                else None
            ),
        )
    except ValidationFailure as err:
        raise ScenarioValidationError(f"{path}: {err}") from None


def _market_normal_form(spec: MarketSpec) -> dict:
    out = {
        "r": [float(v) for v in spec.r],
        "g": [[float(v) for v in row] for row in spec.g],
        "h": [[[float(v) for v in row] for row in cell] for cell in spec.h],
        "c": (
            [[float(v) for v in row] for row in spec.c]
            if spec.c.ndim == 2
            else [float(v) for v in spec.c]
        ),
        "s0": [float(v) for v in spec.s0],
        "bond0": float(spec.bond0),
        "k0": float(spec.k0),
        "k1": float(spec.k1),
        "k2": float(spec.k2),
    }
    if spec.k3_prime is not None:
        out["k3_prime"] = float(spec.k3_prime)
    return out


@dataclass(frozen=True, eq=False)
class Scenario:
    """Fully validated run description with defaults filled in.

    ``normalized`` is the canonical echo dict; two scenarios describe the
    same run exactly when their serializations agree byte for byte.
    """

    schedule: RateSchedule
    x0: int
    driver: DriverSpec
    terminal: np.ndarray
    market: MarketSpec | None
    compare_driver: DriverSpec | None
    compare_terminal: np.ndarray | None
    mode: str
    steps: int
    tol: float
    budget: int
    strict: bool
    n_schedule: tuple
    seed: int
    normalized: dict

    @property
    def n_states(self) -> int:
        return self.schedule.n_states

    @property
    def horizon(self) -> float:
        return self.schedule.horizon


def parse_scenario(data: bytes | str) -> Scenario:
    """Parse and validate a scenario document.

    Raises ScenarioParseError (with line and column) on malformed JSON,
    SchemaError (with the dotted field path) on structural problems, and
    ScenarioValidationError when a module validator rejects the content.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as err:
            raise ScenarioParseError(
                f"invalid UTF-8 at byte {err.start}"
            ) from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as err:
        raise ScenarioParseError(
            f"line {err.lineno}, column {err.colno}: {err.msg}"
        ) from None

    top = _obj(
        doc, "scenario",
        ("chain", "driver", "terminal", "market", "compare", "solver", "seed"),
    )
    for key in ("chain", "terminal"):
        if key not in top:
            raise SchemaError(f"scenario: missing {key!r}")

    chain = _obj(top["chain"], "chain", ("grid", "matrices", "x0"))
    if "grid" not in chain or "matrices" not in chain:
        raise SchemaError("chain: missing 'grid' or 'matrices'")
    try:
        schedule = validate_rate_schedule(
            _array(chain["grid"], "chain.grid"), chain["matrices"]
        )
    except ValidationFailure as err:
        raise ScenarioValidationError(f"chain.{err}") from None
    n = schedule.n_states
    x0 = _int(chain.get("x0", 0), "chain.x0")
    if not 0 <= x0 < n:
        raise ScenarioValidationError(f"chain.x0: {x0} out of range for N={n}")

    driver = _parse_driver(top.get("driver", {"preset": "zero"}), "driver", n)
    terminal, terminal_norm = _parse_terminal(top["terminal"], "terminal", n)

    market = None
    if top.get("market") is not None:
        market = _parse_market(top["market"], "market", schedule)

    compare_driver = None
    compare_terminal = None
    compare_norm = None
    if top.get("compare") is not None:
        comp = _obj(top["compare"], "compare", ("driver", "terminal"))
        if "driver" not in comp or "terminal" not in comp:
            raise SchemaError("compare: missing 'driver' or 'terminal'")
        compare_driver = _parse_driver(comp["driver"], "compare.driver", n)
        compare_terminal, compare_terminal_norm = _parse_terminal(
            comp["terminal"], "compare.terminal", n
        )
        compare_norm = {
            "driver": compare_driver.normal_form(),
            "terminal": compare_terminal_norm,
        }

    solver = _obj(
        top.get("solver", {}), "solver",
        ("mode", "steps", "tol", "budget", "strict", "n_schedule"),
    )
    mode = _str(solver.get("mode", "markovian"), "solver.mode", _MODES)
    steps = _int(solver.get("steps", DEFAULT_STEPS), "solver.steps")
    if steps < 1:
        raise ScenarioValidationError("solver.steps: must be >= 1")
    tol = _num(solver.get("tol", DEFAULT_TOL), "solver.tol")
    if tol <= 0:
        raise ScenarioValidationError("solver.tol: must be > 0")
    budget = _int(solver.get("budget", DEFAULT_BUDGET), "solver.budget")
    if budget < 1:
        raise ScenarioValidationError("solver.budget: must be >= 1")
    strict = solver.get("strict", False)
    if not isinstance(strict, bool):
        raise SchemaError("solver.strict: expected true or false")

    continuous = driver.kind == CONTINUOUS or (
        compare_driver is not None and compare_driver.kind == CONTINUOUS
    )
    if solver.get("n_schedule") is not None:
        sched_raw = solver["n_schedule"]
        if not isinstance(sched_raw, list) or not sched_raw:
            raise SchemaError("solver.n_schedule: expected a nonempty array")
        n_schedule = tuple(
            _int(v, f"solver.n_schedule[{k}]") for k, v in enumerate(sched_raw)
        )
        if any(b <= a for a, b in zip(n_schedule, n_schedule[1:])):
            raise ScenarioValidationError(
                "solver.n_schedule: must be strictly increasing"
            )
    elif continuous:
        n_schedule = tuple(default_n_schedule(driver.growth))
    else:
        n_schedule = ()

    seed = _int(top.get("seed", 0), "seed")
    if seed < 0:
        raise ScenarioValidationError("seed: must be >= 0")

    normalized = {
        "chain": {
            "grid": [float(t) for t in schedule.grid],
            "matrices": [
                [[float(v) for v in row] for row in a] for a in schedule.matrices
            ],
            "x0": x0,
        },
        "driver": driver.normal_form(),
        "terminal": terminal_norm,
        "solver": {
            "mode": mode,
            "steps": steps,
            "tol": tol,
            "budget": budget,
            "strict": strict,
        },
        "seed": seed,
    }
    if n_schedule:
        normalized["solver"]["n_schedule"] = list(n_schedule)
    if market is not None:
        normalized["market"] = _market_normal_form(market)
    if compare_norm is not None:
        normalized["compare"] = compare_norm

    return Scenario(
        schedule=schedule,
        x0=x0,
        driver=driver,
        terminal=terminal,
        market=market,
        compare_driver=compare_driver,
        compare_terminal=compare_terminal,
        mode=mode,
        steps=steps,
        tol=tol,
        budget=budget,
        strict=strict,
        n_schedule=n_schedule,
        seed=seed,
        normalized=normalized,
    )


def serialize_scenario(scenario: Scenario) -> bytes:
    """Canonical byte form: sorted keys, two-space indent, trailing newline."""
    text = json.dumps(scenario.normalized, indent=2, sort_keys=True)
    return (text + "\n").encode("utf-8")
