"""Text format for stock-and-flow models (``.sdl``).

::

    model <ident>
    time <real> .. <real> step <real>
    param <ident> = <real>
    lookup <ident> from "<relative csv path>"
    lookup <ident> inline { (<t>, <v>), ... }
    stock <ident> = <real>
    flow <ident>: [<ident>] -> [<ident>] rate <expr>
    output <ident> = <expr>

Parsing never raises. It returns either a valid ``Model`` or a non-empty list
of ``ParseError``; name resolution runs after the syntactic pass so one bad
line does not hide errors on later lines. File-backed lookups are left
unloaded; see ``sdkit.experiment.load_model``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import (
    BUILTINS,
    RESERVED,
    TIME,
    BinOp,
    Call,
    Expr,
    Flow,
    LookupTable,
    Model,
    Neg,
    Num,
    Ref,
    Stock,
    TimeSpec,
    referenced_names,
    validate_model,
)
from .syntax import (
    Cursor,
    ErrorCode,
    ParseError,
    SourceSpan,
    StatementError,
    Token,
    format_real,
    iter_statements,
    split_lines,
)

MAX_EXPR_DEPTH = 200

_ARITY = {"exp": 1, "min": 2, "max": 2}


class ExpressionParser:
    """Precedence climbing: unary minus binds tighter than * and /, then + and -."""

    def __init__(self, cur: Cursor):
        self.cur = cur

    def parse(self) -> Expr:
        expr, _ = self._sum(0)
        return expr

    def _check_depth(self, depth: int, tok: Token) -> None:
        if depth > MAX_EXPR_DEPTH:
            raise self.cur.fail("expression nested too deeply", tok)

    def _sum(self, depth: int) -> tuple[Expr, int]:
        left, d = self._product(depth)
        while self.cur.tok.is_op("+") or self.cur.tok.is_op("-"):
            op = self.cur.advance()
            right, rd = self._product(depth)
            d = max(d, rd) + 1
            self._check_depth(d, op)
            left = BinOp(op.text, left, right, span=_span_of(op))
        return left, d

    def _product(self, depth: int) -> tuple[Expr, int]:
        left, d = self._unary(depth)
        while self.cur.tok.is_op("*") or self.cur.tok.is_op("/"):
            op = self.cur.advance()
            right, rd = self._unary(depth)
            d = max(d, rd) + 1
            self._check_depth(d, op)
            left = BinOp(op.text, left, right, span=_span_of(op))
        return left, d

    def _unary(self, depth: int) -> tuple[Expr, int]:
        tok = self.cur.tok
        self._check_depth(depth, tok)
        if tok.is_op("-"):
            self.cur.advance()
            operand, d = self._unary(depth + 1)
            self._check_depth(d + 1, tok)
            return Neg(operand, span=_span_of(tok)), d + 1
        return self._primary(depth)

    def _primary(self, depth: int) -> tuple[Expr, int]:
        cur = self.cur
        tok = cur.tok
        if tok.kind == "NUMBER":
            cur.advance()
            return Num(float(tok.value), span=_span_of(tok)), 1  # type: ignore[arg-type]
        if tok.is_op("("):
            cur.advance()
            inner, d = self._sum(depth + 1)
            cur.expect_op(")")
            return inner, d
        if tok.kind == "IDENT":
            cur.advance()
            if cur.tok.is_op("("):
                if tok.text in RESERVED and tok.text not in BUILTINS:
                    raise cur.fail(f"{tok.text!r} cannot be called", tok)
                cur.advance()
                args: list[Expr] = []
                d = 0
                if not cur.tok.is_op(")"):
                    while True:
                        arg, ad = self._sum(depth + 1)
                        args.append(arg)
                        d = max(d, ad)
                        if not cur.accept_op(","):
                            break
                cur.expect_op(")")
                if tok.text in _ARITY and len(args) != _ARITY[tok.text]:
                    raise cur.fail(f"{tok.text} takes {_ARITY[tok.text]} argument(s), got {len(args)}", tok)
                if tok.text not in _ARITY and len(args) != 1:
                    raise cur.fail(f"lookup {tok.text!r} takes exactly one argument, got {len(args)}", tok)
                self._check_depth(d + 1, tok)
                return Call(tok.text, tuple(args), span=_span_of(tok)), d + 1
            if tok.text in BUILTINS:
                raise cur.fail(f"builtin {tok.text!r} must be called with arguments", tok)
            if tok.text in RESERVED and tok.text != TIME:
                raise cur.fail(f"reserved word {tok.text!r} cannot appear in an expression", tok)
            return Ref(tok.text, span=_span_of(tok)), 1
        raise cur.fail("expected an expression")


def _span_of(tok: Token) -> tuple[int, int, int]:
    return (tok.line, tok.column, max(1, len(tok.text)))


def parse_expression(cur: Cursor) -> Expr:
    return ExpressionParser(cur).parse()


@dataclass
class _Decl:
    kind: str  # parameter stock lookup flow output
    name: str
    span: SourceSpan
    payload: object = None
    complete: bool = True
    extra: dict = field(default_factory=dict)


def _check_time_values(start: float, end: float, step: float) -> str | None:
    if not start < end:
        return f"start {format_real(start)} must be before end {format_real(end)}"
    if not step > 0:
        return f"step must be positive, got {format_real(step)}"
    if step > end - start:
        return f"step {format_real(step)} exceeds the interval {format_real(start)} .. {format_real(end)}"
    return None


def parse_model(text: str) -> Model | list[ParseError]:
    """Parse SDL source. Returns a valid Model, or a non-empty error list."""
    try:
        return _parse_model(text)
    except RecursionError:
        return [ParseError(SourceSpan(1, 1, 1), ErrorCode.SYNTAX, "input too deeply nested")]


def _parse_model(text: str) -> Model | list[ParseError]:
    errors: list[ParseError] = []
    model_name: tuple[str, SourceSpan] | None = None
    time_spec: TimeSpec | None = None
    time_seen = False
    # Heads of statements that were present but malformed; they suppress the
    # "missing statement" errors, which would only repeat the real problem.
    attempted: set[str] = set()
    decls: list[_Decl] = []
    lines = split_lines(text)

    for lineno, item in iter_statements(text):
        if isinstance(item, ParseError):
            errors.append(item)
            words = lines[lineno - 1].split(None, 1)
            if words:
                attempted.add(words[0])
            continue
        cur = Cursor(item)
        head = cur.tok
        attempted.add(head.text)
        try:
            if head.is_word("model"):
                cur.advance()
                name = cur.expect_ident("model name", RESERVED)
                cur.expect_end()
                if model_name is not None:
                    raise cur.fail("duplicate 'model' statement", head)
                model_name = (name.text, name.span)
            elif head.is_word(TIME):
                cur.advance()
                start, _ = cur.expect_real("start time")
                cur.expect_op("..")
                end, _ = cur.expect_real("end time")
                cur.expect_word("step")
                step, _ = cur.expect_real("time step")
                cur.expect_end()
                if time_seen:
                    raise cur.fail("duplicate 'time' statement", head)
                time_seen = True
                problem = _check_time_values(start, end, step)
                if problem:
                    span = SourceSpan(lineno, head.column, item[-1].column - head.column)
                    errors.append(ParseError(span, ErrorCode.BAD_TIME_SPEC, problem))
                else:
                    time_spec = TimeSpec(start, end, step)
            elif head.kind == "IDENT" and head.text in ("param", "stock", "lookup", "flow", "output"):
                cur.advance()
                kind = {"param": "parameter"}.get(head.text, head.text)
                name = cur.expect_ident(f"{kind} name", RESERVED)
                partial = _Decl(kind, name.text, name.span, complete=False)
                try:
                    _parse_declaration(cur, partial)
                finally:
                    decls.append(partial)
                partial.complete = True
            else:
                raise cur.fail("expected a statement keyword (model, time, param, lookup, stock, flow, output)", head)
        except StatementError as exc:
            errors.append(exc.error)

    errors.extend(_resolve(decls))
    if model_name is None and "model" not in attempted:
        errors.append(ParseError(SourceSpan(1, 1, 1), ErrorCode.SYNTAX, "missing 'model <name>' statement"))
    if not time_seen and TIME not in attempted:
        errors.append(ParseError(SourceSpan(1, 1, 1), ErrorCode.BAD_TIME_SPEC, "missing 'time <start> .. <end> step <h>' statement"))
    if errors:
        errors.sort(key=lambda e: (e.span.line, e.span.column))
        return errors

    assert model_name is not None and time_spec is not None
    model = Model(
        name=model_name[0],
        time_spec=time_spec,
        parameters={d.name: d.payload for d in decls if d.kind == "parameter"},  # type: ignore[misc]
        stocks=tuple(Stock(d.name, d.payload) for d in decls if d.kind == "stock"),  # type: ignore[arg-type]
        flows=tuple(d.payload for d in decls if d.kind == "flow"),  # type: ignore[misc]
        lookups={d.name: d.payload for d in decls if d.kind == "lookup"},  # type: ignore[misc]
        outputs={d.name: d.payload for d in decls if d.kind == "output"},  # type: ignore[misc]
    )
    leftovers = validate_model(model)
    if leftovers:
        return [ParseError(SourceSpan(1, 1, 1), ErrorCode.SYNTAX, str(d)) for d in leftovers]
    return model


def _parse_declaration(cur: Cursor, decl: _Decl) -> None:
    if decl.kind in ("parameter", "stock"):
        cur.expect_op("=")
        decl.payload, _ = cur.expect_real("value")
        cur.expect_end()
    elif decl.kind == "output":
        cur.expect_op("=")
        decl.payload = parse_expression(cur)
        cur.expect_end()
    elif decl.kind == "lookup":
        if cur.accept_word("from"):
            path = cur.expect_string("CSV path")
            cur.expect_end()
            decl.payload = LookupTable((), source=path.value)  # type: ignore[arg-type]
        elif cur.accept_word("inline"):
            cur.expect_op("{")
            points: list[tuple[float, float]] = []
            while True:
                lp = cur.expect_op("(")
                t, _ = cur.expect_real("lookup time")
                cur.expect_op(",")
                v, _ = cur.expect_real("lookup value")
                cur.expect_op(")")
                if points and t <= points[-1][0]:
                    raise cur.fail("lookup times must be strictly increasing", lp)
                points.append((t, v))
                if not cur.accept_op(","):
                    break
            cur.expect_op("}")
            cur.expect_end()
            decl.payload = LookupTable(tuple(points))
        else:
            raise cur.fail("expected 'from \"file.csv\"' or 'inline { ... }'")
    elif decl.kind == "flow":
        cur.expect_op(":")
        source = sink = None
        if cur.tok.kind == "IDENT":
            source = cur.expect_ident("source stock", RESERVED)
        arrow = cur.expect_op("->")
        if cur.tok.kind == "IDENT" and not cur.tok.is_word("rate"):
            sink = cur.expect_ident("sink stock", RESERVED)
        cur.expect_word("rate")
        rate = parse_expression(cur)
        cur.expect_end()
        if source is None and sink is None:
            raise cur.fail("flow needs a source or a sink stock", arrow)
        if source is not None and sink is not None and source.text == sink.text:
            raise StatementError(ParseError(sink.span, ErrorCode.SYNTAX, "flow source and sink are the same stock"))
        decl.extra = {"source": source, "sink": sink}
        decl.payload = Flow(decl.name, source.text if source else None, sink.text if sink else None, rate)


def _resolve(decls: list[_Decl]) -> list[ParseError]:
    errors: list[ParseError] = []
    kinds: dict[str, str] = {}
    for d in decls:
        if d.name in kinds:
            errors.append(
                ParseError(d.span, ErrorCode.DUPLICATE_IDENTIFIER, f"{d.name!r} already declared as {kinds[d.name]}")
            )
        else:
            kinds[d.name] = d.kind

    def unresolved(span: tuple[int, int, int] | SourceSpan, msg: str) -> None:
        if not isinstance(span, SourceSpan):
            span = SourceSpan(*span)
        errors.append(ParseError(span, ErrorCode.UNRESOLVED_REFERENCE, msg))

    for d in decls:
        if not d.complete:
            continue
        exprs: list[Expr] = []
        if d.kind == "flow":
            for role in ("source", "sink"):
                tok = d.extra.get(role)
                if tok is None:
                    continue
                kind = kinds.get(tok.text)
                if kind is None:
                    unresolved(tok.span, f"undeclared stock {tok.text!r}")
                elif kind != "stock":
                    unresolved(tok.span, f"{tok.text!r} is a {kind}, not a stock")
            exprs.append(d.payload.rate)  # type: ignore[union-attr]
        elif d.kind == "output":
            exprs.append(d.payload)  # type: ignore[arg-type]
        for expr in exprs:
            for node in referenced_names(expr):
                span = node.span or (d.span.line, d.span.column, d.span.length)
                if isinstance(node, Ref):
                    if node.name == TIME:
                        continue
                    kind = kinds.get(node.name)
                    if kind is None:
                        unresolved(span, f"undeclared identifier {node.name!r}")
                    elif kind == "lookup":
                        unresolved(span, f"lookup {node.name!r} must be applied to an argument, e.g. {node.name}(time)")
                    elif kind not in ("parameter", "stock"):
                        unresolved(span, f"{kind} {node.name!r} cannot be referenced in an expression")
                elif node.func not in BUILTINS:
                    kind = kinds.get(node.func)
                    if kind is None:
                        unresolved(span, f"undeclared lookup {node.func!r}")
                    elif kind != "lookup":
                        unresolved(span, f"{kind} {node.func!r} is not a lookup and cannot be applied")
    return errors


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(expr: Expr) -> int:
    if isinstance(expr, BinOp):
        return _PREC[expr.op]
    if isinstance(expr, Neg):
        return 3
    return 4


def format_expression(expr: Expr) -> str:
    if isinstance(expr, Num):
        return format_real(expr.value)
    if isinstance(expr, Ref):
        return expr.name
    if isinstance(expr, Neg):
        inner = format_expression(expr.operand)
        return f"-({inner})" if _prec(expr.operand) < 3 else f"-{inner}"
    if isinstance(expr, BinOp):
        p = _PREC[expr.op]
        left = format_expression(expr.left)
        right = format_expression(expr.right)
        if _prec(expr.left) < p:
            left = f"({left})"
        if _prec(expr.right) <= p:
            right = f"({right})"
        return f"{left} {expr.op} {right}"
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(format_expression(a) for a in expr.args)})"
    raise TypeError(f"not an expression node: {expr!r}")


def serialize_model(model: Model) -> str:
    """Render ``model`` as SDL text that parses back to an equal Model."""
    ts = model.time_spec
    lines = [
        f"model {model.name}",
        f"time {format_real(ts.start)} .. {format_real(ts.end)} step {format_real(ts.step)}",
    ]
    lines += [f"param {k} = {format_real(v)}" for k, v in model.parameters.items()]
    for name, table in model.lookups.items():
        if table.source is not None:
            lines.append(f'lookup {name} from "{table.source}"')
        else:
            pts = ", ".join(f"({format_real(t)}, {format_real(v)})" for t, v in table.points)
            lines.append(f"lookup {name} inline {{ {pts} }}")
    lines += [f"stock {s.name} = {format_real(s.initial_value)}" for s in model.stocks]
    for f in model.flows:
        ends = " ".join(x for x in (f.source, "->", f.sink) if x)
        lines.append(f"flow {f.name}: {ends} rate {format_expression(f.rate)}")
    lines += [f"output {k} = {format_expression(v)}" for k, v in model.outputs.items()]
    return "\n".join(lines) + "\n"
