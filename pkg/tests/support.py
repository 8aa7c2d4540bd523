"""Model builders shared by the test modules."""

from __future__ import annotations

import contextlib
import io
import math
import os
import random
import shlex
import string
from dataclasses import dataclass
from pathlib import Path

from sdkit.core import RESERVED, BinOp, Call, Expr, Flow, LookupTable, Model, Neg, Num, Ref, Stock, TimeSpec
from sdkit.sdl import parse_model


def decay_model(k: float = 1.0, x0: float = 1.0, start: float = 0.0, end: float = 1.0, step: float = 0.1) -> Model:
    """dx/dt = -k*x as a single outflow."""
    return Model(
        name="decay",
        time_spec=TimeSpec(start, end, step),
        parameters={"k": k},
        stocks=(Stock("x", x0),),
        flows=(Flow("loss", "x", None, BinOp("*", Ref("k"), Ref("x"))),),
    )


def transfer_model(k: float = 0.3, a0: float = 100.0, b0: float = 0.0, end: float = 10.0, step: float = 0.001) -> Model:
    """Closed two-stock system A -> B with rate k*A."""
    return Model(
        name="transfer",
        time_spec=TimeSpec(0.0, end, step),
        parameters={"k": k},
        stocks=(Stock("A", a0), Stock("B", b0)),
        flows=(Flow("move", "A", "B", BinOp("*", Ref("k"), Ref("A"))),),
    )


def diverging_model(rate: float = 50.0) -> Model:
    """dx/dt = rate*x*x blows up in finite time well before t=10."""
    return Model(
        name="blowup",
        time_spec=TimeSpec(0.0, 10.0, 0.1),
        parameters={"r": rate},
        stocks=(Stock("x", 1.0),),
        flows=(Flow("grow", None, "x", BinOp("*", BinOp("*", Ref("r"), Ref("x")), Ref("x"))),),
    )


def parse_ok(text: str) -> Model:
    result = parse_model(text)
    assert isinstance(result, Model), result
    return result


def parse_errors(text: str) -> list:
    result = parse_model(text)
    assert isinstance(result, list), "expected parse errors"
    return result


# Random valid models ------------------------------------------------------------

SPECIAL_REALS = (0.0, 0.017, 0.025, 0.1, 1.0, 1e-320, 5e-324, 1.7976931348623157e308, 123456789.123456789)


def random_real(rng: random.Random, allow_negative: bool = True) -> float:
    style = rng.randrange(4)
    if style == 0:
        value = rng.choice(SPECIAL_REALS)
    elif style == 1:
        value = float(rng.randrange(0, 1000))
    elif style == 2:
        value = rng.uniform(0.0, 100.0)
    else:
        value = 10.0 ** rng.uniform(-300.0, 300.0)
    return -value if allow_negative and rng.random() < 0.3 else value


def random_identifier(rng: random.Random, taken: set[str]) -> str:
    tail = string.ascii_letters + string.digits + "_"
    while True:
        name = rng.choice(string.ascii_letters) + "".join(rng.choice(tail) for _ in range(rng.randrange(0, 8)))
        if name not in taken and name not in RESERVED:
            taken.add(name)
            return name


def random_expression(rng: random.Random, values: list[str], lookups: list[str], depth: int = 0) -> Expr:
    leaf = depth >= 4 or rng.random() < 0.3
    if leaf:
        roll = rng.random()
        if roll < 0.4 or not values:
            return Num(random_real(rng, allow_negative=False))
        if roll < 0.5:
            return Ref("time")
        return Ref(rng.choice(values))
    kind = rng.randrange(5)
    if kind == 0:
        return Neg(random_expression(rng, values, lookups, depth + 1))
    if kind == 1 and lookups:
        return Call(rng.choice(lookups), (random_expression(rng, values, lookups, depth + 1),))
    if kind == 2:
        fn = rng.choice(("exp", "min", "max"))
        arity = 1 if fn == "exp" else 2
        return Call(fn, tuple(random_expression(rng, values, lookups, depth + 1) for _ in range(arity)))
    op = rng.choice("+-*/")
    return BinOp(op, random_expression(rng, values, lookups, depth + 1),
                 random_expression(rng, values, lookups, depth + 1))


def random_model(rng: random.Random) -> Model:
    """A model that passes validation; it is built for parsing, not for running."""
    taken: set[str] = set()
    name = random_identifier(rng, taken)
    start = random_real(rng) if rng.random() < 0.5 else 0.0
    if not math.isfinite(start) or abs(start) > 1e12:
        start = 0.0
    length = rng.choice((1.0, 10.0, 60.0, rng.uniform(0.5, 1000.0)))
    end = start + length
    length = end - start
    step = rng.choice((length, length / 10.0, rng.uniform(1e-3, 1.0) * length))
    params = {random_identifier(rng, taken): random_real(rng) for _ in range(rng.randrange(0, 5))}
    lookups = {}
    for _ in range(rng.randrange(0, 3)):
        lname = random_identifier(rng, taken)
        if rng.random() < 0.3:
            lookups[lname] = LookupTable((), source=f"data/{lname}.csv")
        else:
            ts = sorted(set(float(rng.randrange(-50, 200)) for _ in range(rng.randrange(1, 6))))
            lookups[lname] = LookupTable(tuple((t, random_real(rng)) for t in ts))
    stocks = tuple(Stock(random_identifier(rng, taken), random_real(rng)) for _ in range(rng.randrange(1, 5)))
    stock_names = [s.name for s in stocks]
    values = [*params, *stock_names]
    flows = []
    for _ in range(rng.randrange(0, 5)):
        fname = random_identifier(rng, taken)
        source = rng.choice([None, *stock_names])
        sinks = [None, *(n for n in stock_names if n != source)]
        if source is None:
            sinks = sinks[1:] or [stock_names[0]]
        sink = rng.choice(sinks)
        flows.append(Flow(fname, source, sink, random_expression(rng, values, list(lookups))))
    outputs = {random_identifier(rng, taken): random_expression(rng, values, list(lookups))
               for _ in range(rng.randrange(0, 3))}
    return Model(name, TimeSpec(start, end, step), params, stocks, tuple(flows), lookups, outputs)


# Fuzz inputs --------------------------------------------------------------------

FUZZ_VOCAB = (
    "model", "time", "param", "lookup", "stock", "flow", "output", "rate", "step", "from", "inline",
    "exp", "min", "max", "..", "->", "(", ")", "{", "}", ",", ":", "=", "+", "-", "*", "/", "#",
    '"', '"a.csv"', "1", "0.5", "1e", "1e999", ".5", "5.", "x", "S", "k", " ", "\n", "\t", "\r", "é", "\x00",
)


def fuzz_input(rng: random.Random, seeds: list[str]) -> str:
    """Random text: token soup, arbitrary code points, or a mutated valid source."""
    kind = rng.randrange(3)
    if kind == 0:
        return "".join(rng.choice(FUZZ_VOCAB) + rng.choice(("", " ")) for _ in range(rng.randrange(0, 60)))
    if kind == 1:
        alphabet = [chr(rng.randrange(0x20, 0x7F)) for _ in range(20)] + ["\n", "\u2028", "\ufeff", chr(0x1F600)]
        return "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 200)))
    text = list(rng.choice(seeds))
    for _ in range(rng.randrange(1, 8)):
        op = rng.randrange(3)
        pos = rng.randrange(len(text) + 1)
        if op == 0 and text:
            del text[min(pos, len(text) - 1)]
        elif op == 1:
            text.insert(pos, rng.choice(FUZZ_VOCAB))
        elif text:
            text[min(pos, len(text) - 1)] = chr(rng.randrange(0x20, 0x7F))
    return "".join(text)


def spans_in_bounds(text: str, errors) -> bool:
    lines = text.split("\n")
    for e in errors:
        sp = e.span
        if not (1 <= sp.line <= len(lines) and sp.column >= 1 and sp.length >= 1):
            return False
        if sp.column + sp.length - 1 > len(lines[sp.line - 1]) + 1:
            return False
    return True


# CLI golden corpus --------------------------------------------------------------

CORPUS = Path(__file__).resolve().parent / "corpus"


@dataclass(frozen=True)
class CliCase:
    exit_code: int
    stderr_fragment: str
    args: tuple[str, ...]

    @property
    def label(self) -> str:
        return " ".join(self.args) or "<no arguments>"


def load_cli_cases() -> list[CliCase]:
    cases = []
    for line in (CORPUS / "cases.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        code, fragment, args = (part.strip() for part in line.split("|", 2))
        cases.append(CliCase(int(code), fragment, tuple(shlex.split(args))))
    return cases


@contextlib.contextmanager
def working_directory(path: Path):
    previous = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(previous)


def run_cli(args, cwd: Path = CORPUS) -> tuple[int, str, str]:
    """Run ``sdkit`` in-process; returns (exit code, stdout, stderr)."""
    from sdkit.cli import main

    out, err = io.StringIO(), io.StringIO()
    with working_directory(cwd), contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(args))
    return code, out.getvalue(), err.getvalue()


def run_case(case: CliCase, out_dir: Path) -> tuple[int, str, str]:
    return run_cli([a.replace("{out}", str(out_dir)) for a in case.args])


__all__ = [
    "BinOp", "Flow", "LookupTable", "Model", "Neg", "Num", "Ref", "Stock", "TimeSpec",
    "decay_model", "diverging_model", "parse_errors", "parse_ok", "CORPUS", "CliCase", "fuzz_input", "load_cli_cases", "run_case", "run_cli", "working_directory", "random_model", "spans_in_bounds", "random_real", "transfer_model",
]
