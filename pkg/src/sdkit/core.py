"""Stock-and-flow domain types and their evaluation semantics.

A model is a set of stocks (integrated quantities), flows (rates moving
quantity into, out of, or between stocks), scalar parameters, time-indexed
lookup tables, and derived outputs. The ODE right-hand side is never written
by hand: ``net_derivatives`` assembles it from the flow declarations.

Nothing here parses text, integrates, or touches the filesystem.
"""

from __future__ import annotations

import bisect
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Union

TIME = "time"
BUILTINS = ("exp", "min", "max")
# Statement keywords of the model language are reserved along with the
# builtins so that no declaration can shadow grammar.
KEYWORDS = ("model", "param", "lookup", "stock", "flow", "output", "rate", "step", "from", "inline")
RESERVED = frozenset((TIME, *BUILTINS, *KEYWORDS))

_IDENT_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")


def is_identifier(name: str) -> bool:
    return bool(_IDENT_RE.match(name)) and name not in RESERVED


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

# Spans are (line, column, length) tuples attached by the parser. They never
# take part in equality, so parsed and hand-built trees compare structurally.


@dataclass(frozen=True)
class Num:
    value: float
    span: tuple[int, int, int] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not math.isfinite(self.value) or math.copysign(1.0, self.value) < 0:
            # negative literals are spelled Neg(Num(x)) so text round-trips
            raise ValueError(f"numeric literal must be finite and non-negative, got {self.value!r}")


@dataclass(frozen=True)
class Ref:
    name: str
    span: tuple[int, int, int] | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Neg:
    operand: Expr
    span: tuple[int, int, int] | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: Expr
    right: Expr
    span: tuple[int, int, int] | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    """Builtin call (``exp``, ``min``, ``max``) or lookup application."""

    func: str
    args: tuple[Expr, ...]
    span: tuple[int, int, int] | None = field(default=None, compare=False, repr=False)


Expr = Union[Num, Ref, Neg, BinOp, Call]

_BUILTIN_ARITY = {"exp": 1, "min": 2, "max": 2}


def referenced_names(expr: Expr) -> list[Ref | Call]:
    """All identifier references and calls in ``expr``, in source order."""
    out: list[Ref | Call] = []
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Ref):
            out.append(node)
        elif isinstance(node, Call):
            out.append(node)
            stack.extend(reversed(node.args))
        elif isinstance(node, Neg):
            stack.append(node.operand)
        elif isinstance(node, BinOp):
            stack.append(node.right)
            stack.append(node.left)
    return out


class ExpressionError(ArithmeticError):
    pass


class UnboundIdentifier(ExpressionError):
    def __init__(self, name: str):
        super().__init__(f"unbound identifier {name!r}")
        self.name = name


class DivisionByZero(ExpressionError):
    def __init__(self) -> None:
        super().__init__("division by zero")


class NonFiniteResult(ExpressionError):
    def __init__(self, value: float):
        super().__init__(f"non-finite result {value!r}")
        self.value = value


# ---------------------------------------------------------------------------
# Lookups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LookupTable:
    """Empirical series evaluated by linear interpolation, held flat outside.

    ``source`` records the CSV path of a file-backed table. A table parsed
    from text but not yet loaded has ``source`` set and no points.
    """

    points: tuple[tuple[float, float], ...]
    source: str | None = None
    _ts: tuple[float, ...] = field(init=False, repr=False, compare=False)
    _vs: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        pts = tuple((float(t), float(v)) for t, v in self.points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_ts", tuple(t for t, _ in pts))
        object.__setattr__(self, "_vs", tuple(v for _, v in pts))

    @property
    def loaded(self) -> bool:
        return bool(self.points)

    @property
    def domain(self) -> tuple[float, float]:
        return self._ts[0], self._ts[-1]

    def __call__(self, t: float) -> float:
        return interpolate_lookup(self, t)


def interpolate_lookup(table: LookupTable, t: float) -> float:
    ts, vs = table._ts, table._vs
    if not ts:
        raise ValueError("lookup table has no points (file-backed table not loaded?)")
    if t <= ts[0]:
        return vs[0]
    if t >= ts[-1]:
        return vs[-1]
    i = bisect.bisect_right(ts, t)
    t0, t1 = ts[i - 1], ts[i]
    v0 = vs[i - 1]
    if t == t0:
        return v0
    return v0 + (vs[i] - v0) * ((t - t0) / (t1 - t0))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeSpec:
    start: float
    end: float
    step: float


@dataclass(frozen=True)
class Stock:
    name: str
    initial_value: float


@dataclass(frozen=True)
class Flow:
    name: str
    source: str | None
    sink: str | None
    rate: Expr


@dataclass(frozen=True, eq=False)
class Model:
    """A complete stock-and-flow system.

    Mappings keep declaration order, and equality is order-sensitive.
    Instances are treated as immutable; use ``with_parameters`` for overrides.
    """

    name: str
    time_spec: TimeSpec
    parameters: Mapping[str, float] = field(default_factory=dict)
    stocks: tuple[Stock, ...] = ()
    flows: tuple[Flow, ...] = ()
    lookups: Mapping[str, LookupTable] = field(default_factory=dict)
    outputs: Mapping[str, Expr] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "parameters", dict(self.parameters))
        object.__setattr__(self, "stocks", tuple(self.stocks))
        object.__setattr__(self, "flows", tuple(self.flows))
        object.__setattr__(self, "lookups", dict(self.lookups))
        object.__setattr__(self, "outputs", dict(self.outputs))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.name == other.name
            and self.time_spec == other.time_spec
            and list(self.parameters.items()) == list(other.parameters.items())
            and self.stocks == other.stocks
            and self.flows == other.flows
            and list(self.lookups.items()) == list(other.lookups.items())
            and list(self.outputs.items()) == list(other.outputs.items())
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def stock_names(self) -> list[str]:
        return [s.name for s in self.stocks]

    @property
    def series_names(self) -> list[str]:
        """Every series a run records: stocks first, then outputs."""
        return self.stock_names + list(self.outputs)

    def with_parameters(self, overrides: Mapping[str, float]) -> Model:
        unknown = [k for k in overrides if k not in self.parameters]
        if unknown:
            raise KeyError(f"unknown parameter(s): {', '.join(unknown)}")
        params = dict(self.parameters)
        params.update({k: float(v) for k, v in overrides.items()})
        return Model(self.name, self.time_spec, params, self.stocks, self.flows, self.lookups, self.outputs)

    def with_lookups(self, lookups: Mapping[str, LookupTable]) -> Model:
        merged = dict(self.lookups)
        for k, v in lookups.items():
            if k not in merged:
                raise KeyError(f"unknown lookup {k!r}")
            merged[k] = v
        return Model(self.name, self.time_spec, self.parameters, self.stocks, self.flows, merged, self.outputs)

    def with_time_spec(self, time_spec: TimeSpec) -> Model:
        return Model(self.name, time_spec, self.parameters, self.stocks, self.flows, self.lookups, self.outputs)


@dataclass(frozen=True)
class SimulationResult:
    times: tuple[float, ...]
    series: Mapping[str, tuple[float, ...]]
    # lookups evaluated outside their data range at least once during the run
    extrapolated_lookups: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class Severity(str, Enum):
    ERROR = "ERROR"
    WARNING = "WARNING"


@dataclass(frozen=True)
class Diagnostic:
    code: str
    identifier: str
    message: str
    severity: Severity = Severity.ERROR

    def __str__(self) -> str:
        return f"{self.severity.value} {self.code} [{self.identifier}]: {self.message}"


def _check_time_spec(ts: TimeSpec) -> str | None:
    if not all(math.isfinite(x) for x in (ts.start, ts.end, ts.step)):
        return "time bounds and step must be finite"
    if not ts.start < ts.end:
        return f"start ({ts.start!r}) must be before end ({ts.end!r})"
    if not ts.step > 0:
        return f"step must be positive, got {ts.step!r}"
    if ts.step > ts.end - ts.start:
        return f"step {ts.step!r} exceeds the simulated interval"
    return None


def validate_model(model: Model) -> list[Diagnostic]:
    """Check every structural invariant; an empty list means the model is valid."""
    diags: list[Diagnostic] = []

    def add(code: str, ident: str, msg: str) -> None:
        diags.append(Diagnostic(code, ident, msg))

    if not is_identifier(model.name):
        add("INVALID_IDENTIFIER", model.name, "model name is not a valid identifier")
    problem = _check_time_spec(model.time_spec)
    if problem:
        add("BAD_TIME_SPEC", model.name, problem)

    kinds: dict[str, str] = {}
    declared: list[tuple[str, str]] = (
        [(n, "parameter") for n in model.parameters]
        + [(s.name, "stock") for s in model.stocks]
        + [(n, "lookup") for n in model.lookups]
        + [(n, "output") for n in model.outputs]
        + [(f.name, "flow") for f in model.flows]
    )
    for name, kind in declared:
        if name in RESERVED:
            add("RESERVED_IDENTIFIER", name, f"{kind} name {name!r} is reserved")
        elif not is_identifier(name):
            add("INVALID_IDENTIFIER", name, f"{kind} name {name!r} is not a valid identifier")
        if name in kinds:
            add("DUPLICATE_IDENTIFIER", name, f"{kind} {name!r} already declared as {kinds[name]}")
        else:
            kinds[name] = kind

    for name, value in model.parameters.items():
        if not math.isfinite(value):
            add("NON_FINITE_VALUE", name, f"parameter value {value!r} is not finite")
    for stock in model.stocks:
        if not math.isfinite(stock.initial_value):
            add("NON_FINITE_VALUE", stock.name, f"initial value {stock.initial_value!r} is not finite")

    for name, table in model.lookups.items():
        if not table.points:
            if table.source is None:
                add("BAD_LOOKUP", name, "lookup has neither points nor a source file")
            continue
        ts = [t for t, _ in table.points]
        if any(not math.isfinite(t) or not math.isfinite(v) for t, v in table.points):
            add("BAD_LOOKUP", name, "lookup points must be finite")
        elif any(b <= a for a, b in zip(ts, ts[1:])):
            add("BAD_LOOKUP", name, "lookup times must be strictly increasing")
        if table.source is not None and ('"' in table.source or "\n" in table.source):
            add("BAD_LOOKUP", name, "lookup source path may not contain quotes or newlines")

    stock_names = set(model.stock_names)
    for flow in model.flows:
        if flow.source is None and flow.sink is None:
            add("FLOW_NO_ENDPOINT", flow.name, "flow needs a source or a sink stock")
        if flow.source is not None and flow.source == flow.sink:
            add("FLOW_SELF_LOOP", flow.name, "flow source and sink are the same stock")
        for end in (flow.source, flow.sink):
            if end is not None and end not in stock_names:
                add("UNRESOLVED_REFERENCE", end, f"flow {flow.name!r} refers to undeclared stock {end!r}")
        diags.extend(check_expression(flow.rate, kinds))
    for name, expr in model.outputs.items():
        diags.extend(check_expression(expr, kinds))
    return diags


def check_expression(expr: Expr, kinds: Mapping[str, str]) -> list[Diagnostic]:
    """Name-resolution diagnostics for one expression.

    ``kinds`` maps declared names to their kind (parameter, stock, lookup, ...).
    """
    diags = []
    for node in referenced_names(expr):
        if isinstance(node, Ref):
            kind = kinds.get(node.name)
            if node.name == TIME or kind in ("parameter", "stock"):
                continue
            if kind == "lookup":
                diags.append(Diagnostic("LOOKUP_MISUSE", node.name, f"lookup {node.name!r} must be applied to an argument"))
            else:
                diags.append(Diagnostic("UNRESOLVED_REFERENCE", node.name, f"undeclared identifier {node.name!r}"))
        else:
            if node.func in _BUILTIN_ARITY:
                if len(node.args) != _BUILTIN_ARITY[node.func]:
                    diags.append(Diagnostic("BAD_ARITY", node.func, f"{node.func} takes {_BUILTIN_ARITY[node.func]} argument(s)"))
                continue
            kind = kinds.get(node.func)
            if kind is None:
                diags.append(Diagnostic("UNRESOLVED_REFERENCE", node.func, f"undeclared lookup {node.func!r}"))
            elif kind != "lookup":
                diags.append(Diagnostic("LOOKUP_MISUSE", node.func, f"{kind} {node.func!r} cannot be applied like a lookup"))
            elif len(node.args) != 1:
                diags.append(Diagnostic("BAD_ARITY", node.func, "lookups take exactly one argument"))
    return diags


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _finite(value: float) -> float:
    if not math.isfinite(value):
        raise NonFiniteResult(value)
    return value


def _eval(expr: Expr, env: Mapping[str, float], lookups: Mapping[str, LookupTable]) -> float:
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Ref):
        try:
            return env[expr.name]
        except KeyError:
            raise UnboundIdentifier(expr.name) from None
    if isinstance(expr, Neg):
        return -_eval(expr.operand, env, lookups)
    if isinstance(expr, BinOp):
        a = _eval(expr.left, env, lookups)
        b = _eval(expr.right, env, lookups)
        if expr.op == "+":
            return a + b
        if expr.op == "-":
            return a - b
        if expr.op == "*":
            return a * b
        if expr.op == "/":
            if b == 0:
                raise DivisionByZero()
            return a / b
        raise ValueError(f"unknown operator {expr.op!r}")
    if isinstance(expr, Call):
        args = [_eval(a, env, lookups) for a in expr.args]
        if expr.func == "exp":
            try:
                return math.exp(args[0])
            except OverflowError:
                raise NonFiniteResult(math.inf) from None
        if expr.func == "min":
            return min(args)
        if expr.func == "max":
            return max(args)
        try:
            table = lookups[expr.func]
        except KeyError:
            raise UnboundIdentifier(expr.func) from None
        return interpolate_lookup(table, args[0])
    raise TypeError(f"not an expression node: {expr!r}")


def eval_expression(expr: Expr, env: Mapping[str, float], lookups: Mapping[str, LookupTable] = {}) -> float:
    """Evaluate ``expr``; ``env`` binds identifiers and ``time`` to reals.

    Raises UnboundIdentifier, DivisionByZero, or NonFiniteResult.
    """
    return _finite(_eval(expr, env, lookups))


def net_derivatives(model: Model, stock_values: Mapping[str, float], t: float) -> dict[str, float]:
    """Sum of inflow rates minus sum of outflow rates, per stock.

    Each flow rate is evaluated once and the same value is added to the sink
    and subtracted from the source, so internal transfers cancel exactly.
    """
    missing = [s for s in model.stock_names if s not in stock_values]
    if missing:
        raise UnboundIdentifier(missing[0])
    env = {**model.parameters, **{s: float(stock_values[s]) for s in model.stock_names}, TIME: t}
    deriv = {s: 0.0 for s in model.stock_names}
    for flow in model.flows:
        try:
            rate = eval_expression(flow.rate, env, model.lookups)
        except ExpressionError as exc:
            raise _with_context(exc, f"flow {flow.name!r}")
        if flow.sink is not None:
            deriv[flow.sink] += rate
        if flow.source is not None:
            deriv[flow.source] -= rate
    return deriv


def _with_context(exc: ExpressionError, where: str) -> ExpressionError:
    exc.args = (f"{where}: {exc.args[0]}",) + exc.args[1:]
    exc.where = where  # type: ignore[attr-defined]
    return exc


def check_result(model: Model, result: SimulationResult) -> list[Diagnostic]:
    """Post-run warnings, currently negative stock values."""
    diags = []
    for stock in model.stock_names:
        values = result.series.get(stock, ())
        for t, v in zip(result.times, values):
            if v < 0:
                diags.append(
                    Diagnostic("NEGATIVE_STOCK", stock, f"stock went negative ({v!r}) at t={t!r}", Severity.WARNING)
                )
                break
    return diags

