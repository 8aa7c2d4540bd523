"""Fixed-step integration of a model over its time span.

Each run compiles the model twice:

* closures over a flat state list, performing the same float operations in
  the same order as ``sdkit.core.eval_expression``;
* one generated Python function computing every flow rate and stock
  derivative in a single call.

The generated function is the hot path. When it hits any evaluation problem
it defers to the closures, which raise the error with the offending flow or
output attached. Both paths, and the tree-walking evaluator, agree bit for bit.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

from .core import (
    TIME,
    BinOp,
    Call,
    DivisionByZero,
    Expr,
    ExpressionError,
    LookupTable,
    Model,
    Neg,
    NonFiniteResult,
    Num,
    Ref,
    SimulationResult,
    TimeSpec,
    UnboundIdentifier,
    interpolate_lookup,
    validate_model,
)

DEFAULT_STEP = 0.05
MAX_GRID_POINTS = 50_000_000


class IntegratorKind(str, Enum):
    EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True)
class RunConfig:
    integrator: IntegratorKind = IntegratorKind.RK4
    step_override: float | None = None
    parameter_overrides: Mapping[str, float] = field(default_factory=dict)


class ModelError(ValueError):
    """The model (or run configuration) cannot be simulated as given."""

    def __init__(self, message: str, diagnostics: list | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class SimulationError(RuntimeError):
    def __init__(self, message: str, time: float, element: str | None = None):
        super().__init__(message)
        self.time = time
        self.element = element


class EvaluationError(SimulationError):
    pass


class NonFiniteState(SimulationError):
    pass


class UnknownSeries(KeyError):
    pass


class OutOfRange(ValueError):
    pass


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------

Compiled = Callable[[list, float], float]


def _compile(expr: Expr, params: Mapping[str, float], stock_index: Mapping[str, int],
             lookups: Mapping[str, Callable[[float], float]]) -> Compiled:
    if isinstance(expr, Num):
        v = expr.value
        return lambda x, t: v
    if isinstance(expr, Ref):
        name = expr.name
        if name == TIME:
            return lambda x, t: t
        if name in stock_index:
            i = stock_index[name]
            return lambda x, t: x[i]
        if name in params:
            v = params[name]
            return lambda x, t: v
        raise UnboundIdentifier(name)
    if isinstance(expr, Neg):
        inner = _compile(expr.operand, params, stock_index, lookups)
        return lambda x, t: -inner(x, t)
    if isinstance(expr, BinOp):
        a = _compile(expr.left, params, stock_index, lookups)
        b = _compile(expr.right, params, stock_index, lookups)
        if expr.op == "+":
            return lambda x, t: a(x, t) + b(x, t)
        if expr.op == "-":
            return lambda x, t: a(x, t) - b(x, t)
        if expr.op == "*":
            return lambda x, t: a(x, t) * b(x, t)
        if expr.op == "/":
            def div(x: list, t: float) -> float:
                num = a(x, t)
                den = b(x, t)
                if den == 0:
                    raise DivisionByZero()
                return num / den
            return div
        raise ValueError(f"unknown operator {expr.op!r}")
    if isinstance(expr, Call):
        args = [_compile(arg, params, stock_index, lookups) for arg in expr.args]
        if expr.func == "exp":
            (arg,) = args

            def exp(x: list, t: float) -> float:
                try:
                    return math.exp(arg(x, t))
                except OverflowError:
                    raise NonFiniteResult(math.inf) from None
            return exp
        if expr.func in ("min", "max"):
            a, b = args
            fn = min if expr.func == "min" else max
            return lambda x, t: fn(a(x, t), b(x, t))
        if expr.func not in lookups:
            raise UnboundIdentifier(expr.func)
        table = lookups[expr.func]
        (arg,) = args
        return lambda x, t: table(arg(x, t))
    raise TypeError(f"not an expression node: {expr!r}")


def _source(expr: Expr, params: Mapping[str, float], stock_index: Mapping[str, int],
            lookup_index: Mapping[str, int]) -> str:
    if isinstance(expr, Num):
        return repr(expr.value)
    if isinstance(expr, Ref):
        if expr.name == TIME:
            return "t"
        if expr.name in stock_index:
            return f"x{stock_index[expr.name]}"
        if expr.name in params:
            return f"({params[expr.name]!r})"
        raise UnboundIdentifier(expr.name)
    if isinstance(expr, Neg):
        return f"(-{_source(expr.operand, params, stock_index, lookup_index)})"
    if isinstance(expr, BinOp):
        a = _source(expr.left, params, stock_index, lookup_index)
        b = _source(expr.right, params, stock_index, lookup_index)
        if expr.op == "/":
            return f"_div({a}, {b})"
        return f"({a} {expr.op} {b})"
    if isinstance(expr, Call):
        args = ", ".join(_source(a, params, stock_index, lookup_index) for a in expr.args)
        if expr.func in ("exp", "min", "max"):
            return f"_{expr.func}({args})"
        if expr.func not in lookup_index:
            raise UnboundIdentifier(expr.func)
        return f"_lk{lookup_index[expr.func]}({args})"
    raise TypeError(f"not an expression node: {expr!r}")


class _Defer(Exception):
    pass


def _gen_div(a: float, b: float) -> float:
    if b == 0:
        raise _Defer()
    return a / b


def _gen_exp(a: float) -> float:
    try:
        return math.exp(a)
    except OverflowError:
        raise _Defer() from None


def _generate(model: Model, index: Mapping[str, int], lookups: Mapping[str, Callable[[float], float]]):
    """Build ``f(x, t) -> list | None``; None means some rate was not finite."""
    lookup_index = {name: i for i, name in enumerate(lookups)}
    n = len(index)
    body = ["def derivatives(x, t):"]
    if n:
        body.append(f"    {', '.join(f'x{i}' for i in range(n))}{',' if n == 1 else ''} = x")
    for k, f in enumerate(model.flows):
        body.append(f"    r{k} = {_source(f.rate, model.parameters, index, lookup_index)}")
    if model.flows:
        # a finite sum implies finite terms; an overflowing sum merely defers
        total = " + ".join(f"r{k}" for k in range(len(model.flows)))
        body.append(f"    if not _isfinite({total}):")
        body.append("        return None")
    for i in range(n):
        body.append(f"    d{i} = 0.0")
    for k, f in enumerate(model.flows):
        if f.sink is not None:
            body.append(f"    d{index[f.sink]} += r{k}")
        if f.source is not None:
            body.append(f"    d{index[f.source]} -= r{k}")
    body.append(f"    return [{', '.join(f'd{i}' for i in range(n))}]")
    namespace: dict = {
        "_div": _gen_div, "_exp": _gen_exp, "_min": min, "_max": max, "_isfinite": math.isfinite,
        **{f"_lk{i}": fn for i, fn in enumerate(lookups.values())},
    }
    exec(compile("\n".join(body), f"<sdkit model {model.name}>", "exec"), namespace)
    return namespace["derivatives"]


class CompiledModel:
    """A model bound to concrete parameter values, ready to integrate.

    Holds per-run mutable state (the set of lookups that were evaluated
    outside their data range), so build one per run.
    """

    def __init__(self, model: Model):
        self.model = model
        self.stock_names = model.stock_names
        index = {name: i for i, name in enumerate(self.stock_names)}
        self.extrapolated: set[str] = set()
        lookups = {name: self._tracked(name, table) for name, table in model.lookups.items()}
        self.flows = [
            (f.name, _compile(f.rate, model.parameters, index, lookups),
             index[f.source] if f.source is not None else None,
             index[f.sink] if f.sink is not None else None)
            for f in model.flows
        ]
        self.outputs = [(name, _compile(e, model.parameters, index, lookups)) for name, e in model.outputs.items()]
        self._fast = _generate(model, index, lookups)

    def _tracked(self, name: str, table: LookupTable) -> Callable[[float], float]:
        # same arithmetic as core.interpolate_lookup, plus range tracking
        ts, vs = table._ts, table._vs
        lo, hi = ts[0], ts[-1]
        v_lo, v_hi = vs[0], vs[-1]
        seen = self.extrapolated
        bisect_right = bisect.bisect_right

        def lookup(arg: float) -> float:
            if arg <= lo:
                if arg < lo:
                    seen.add(name)
                return v_lo
            if arg >= hi:
                if arg > hi:
                    seen.add(name)
                return v_hi
            if arg != arg:
                seen.add(name)
                return interpolate_lookup(table, arg)
            i = bisect_right(ts, arg)
            t0 = ts[i - 1]
            v0 = vs[i - 1]
            if arg == t0:
                return v0
            return v0 + (vs[i] - v0) * ((arg - t0) / (ts[i] - t0))
        return lookup

    def derivatives(self, x: list, t: float) -> list:
        try:
            d = self._fast(x, t)
        except (_Defer, ExpressionError, ValueError):
            d = None
        return d if d is not None else self.reference_derivatives(x, t)

    def reference_derivatives(self, x: list, t: float) -> list:
        d = [0.0] * len(x)
        for name, rate_fn, src, snk in self.flows:
            try:
                rate = rate_fn(x, t)
            except ExpressionError as exc:
                raise _runtime_error(exc, t, f"flow {name}") from exc
            if not math.isfinite(rate):
                raise NonFiniteState(f"flow {name} rate is {rate!r} at t={t!r}", t, name)
            if snk is not None:
                d[snk] += rate
            if src is not None:
                d[src] -= rate
        return d

    def evaluate_outputs(self, x: list, t: float) -> list:
        out = []
        for name, fn in self.outputs:
            try:
                v = fn(x, t)
            except ExpressionError as exc:
                raise _runtime_error(exc, t, f"output {name}") from exc
            if not math.isfinite(v):
                raise NonFiniteState(f"output {name} is {v!r} at t={t!r}", t, name)
            out.append(v)
        return out


def _runtime_error(exc: ExpressionError, t: float, where: str) -> SimulationError:
    element = where.split(" ", 1)[1]
    if isinstance(exc, NonFiniteResult):
        return NonFiniteState(f"{where}: {exc} at t={t!r}", t, element)
    return EvaluationError(f"{where}: {exc} at t={t!r}", t, element)


def compile_model(model: Model) -> CompiledModel:
    return CompiledModel(model)


# ---------------------------------------------------------------------------
# Steppers
# ---------------------------------------------------------------------------


def _euler(sys: CompiledModel, x: list, t: float, h: float) -> list:
    k = sys.derivatives(x, t)
    return [xi + h * ki for xi, ki in zip(x, k)]


def _rk4(sys: CompiledModel, x: list, t: float, h: float) -> list:
    half = 0.5 * h
    k1 = sys.derivatives(x, t)
    k2 = sys.derivatives([xi + half * ki for xi, ki in zip(x, k1)], t + half)
    k3 = sys.derivatives([xi + half * ki for xi, ki in zip(x, k2)], t + half)
    k4 = sys.derivatives([xi + h * ki for xi, ki in zip(x, k3)], t + h)
    sixth = h / 6.0
    return [xi + sixth * (a + 2.0 * b + 2.0 * c + d) for xi, a, b, c, d in zip(x, k1, k2, k3, k4)]


_STEPPERS = {IntegratorKind.EULER: _euler, IntegratorKind.RK4: _rk4}


def _as_system(model: Model | CompiledModel) -> CompiledModel:
    return model if isinstance(model, CompiledModel) else CompiledModel(model)


def euler_step(state: Mapping[str, float], t: float, h: float, model: Model | CompiledModel) -> dict[str, float]:
    """One explicit Euler step: state + h * f(state, t)."""
    if not h > 0:
        raise ValueError("step must be positive")
    sys = _as_system(model)
    x = _euler(sys, [float(state[s]) for s in sys.stock_names], t, h)
    return dict(zip(sys.stock_names, x))


def rk4_step(state: Mapping[str, float], t: float, h: float, model: Model | CompiledModel) -> dict[str, float]:
    """One classical Runge-Kutta step; lookups are sampled at the stage times."""
    if not h > 0:
        raise ValueError("step must be positive")
    sys = _as_system(model)
    x = _rk4(sys, [float(state[s]) for s in sys.stock_names], t, h)
    return dict(zip(sys.stock_names, x))


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def grid_steps(start: float, end: float, h: float) -> int:
    """Number of steps: ceil((end - start) / h), forgiving float noise at exact multiples."""
    ratio = (end - start) / h
    n = round(ratio)
    if abs(ratio - n) > 1e-9 * max(1.0, ratio):
        n = math.ceil(ratio)
    return max(int(n), 1)


def time_grid(start: float, end: float, h: float) -> list[float]:
    n = grid_steps(start, end, h)
    if n + 1 > MAX_GRID_POINTS:
        raise ModelError(f"time grid of {n + 1} points is too large")
    return [start + i * h for i in range(n)] + [end]


def effective_time_spec(model: Model, config: RunConfig) -> TimeSpec:
    ts = model.time_spec
    if config.step_override is None:
        return ts
    return TimeSpec(ts.start, ts.end, float(config.step_override))


def prepare(model: Model, config: RunConfig = RunConfig()) -> tuple[Model, TimeSpec]:
    """Validate and apply overrides; raises ModelError."""
    diags = validate_model(model)
    if diags:
        raise ModelError("; ".join(str(d) for d in diags), diags)
    unloaded = [n for n, t in model.lookups.items() if not t.loaded]
    if unloaded:
        raise ModelError(f"lookup(s) not loaded: {', '.join(unloaded)}")
    try:
        model = model.with_parameters(config.parameter_overrides)
    except KeyError as exc:
        raise ModelError(str(exc.args[0])) from None
    bad = [k for k, v in model.parameters.items() if not math.isfinite(v)]
    if bad:
        raise ModelError(f"non-finite parameter override: {', '.join(bad)}")
    ts = effective_time_spec(model, config)
    if not (ts.step > 0 and ts.step <= ts.end - ts.start):
        raise ModelError(f"step {ts.step!r} must be positive and no larger than the simulated interval")
    return model, ts


def run(model: Model, config: RunConfig = RunConfig()) -> SimulationResult:
    """Integrate ``model`` from start to end and record every stock and output.

    The grid is uniform with the configured step, except the final interval,
    which is shortened so the last grid time equals ``end`` exactly. Outputs
    are evaluated from the state at each grid time, including the initial one.
    """
    model, ts = prepare(model, config)
    stepper = _STEPPERS[IntegratorKind(config.integrator)]
    times = time_grid(ts.start, ts.end, ts.step)
    sys = CompiledModel(model)
    x = [s.initial_value for s in model.stocks]
    rows = [x + sys.evaluate_outputs(x, times[0])]
    last = len(times) - 1
    for i in range(1, len(times)):
        t0 = times[i - 1]
        h = ts.step if i < last else times[i] - t0
        x = stepper(sys, x, t0, h)
        if not math.isfinite(sum(x)):
            for name, v in zip(sys.stock_names, x):
                if not math.isfinite(v):
                    raise NonFiniteState(f"stock {name} became {v!r} at t={times[i]!r}", times[i], name)
        rows.append(x + sys.evaluate_outputs(x, times[i]))
    names = model.series_names
    columns = list(zip(*rows))
    series = {name: tuple(col) for name, col in zip(names, columns)}
    extrapolated = tuple(n for n in model.lookups if n in sys.extrapolated)
    return SimulationResult(tuple(times), series, extrapolated)


def sample_result(result: SimulationResult, series: str, t: float) -> float:
    """Linear interpolation of one recorded series at time ``t``."""
    if series not in result.series:
        raise UnknownSeries(series)
    times = result.times
    if not times[0] <= t <= times[-1]:
        raise OutOfRange(f"t={t!r} outside [{times[0]!r}, {times[-1]!r}]")
    values = result.series[series]
    i = bisect.bisect_left(times, t)
    if times[i] == t:
        return values[i]
    t0, t1 = times[i - 1], times[i]
    v0 = values[i - 1]
    return v0 + (values[i] - v0) * ((t - t0) / (t1 - t0))
