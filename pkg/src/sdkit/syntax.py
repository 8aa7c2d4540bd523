"""Lexing and error reporting shared by the model, experiment and calibration languages.

All three are line oriented: one statement per line, ``#`` starts a comment.
Spans are 1-based (line, column, length) with column counted in characters.
A span may point one past the last character of a line (end-of-line errors)
but never outside the input.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterator


class ErrorCode(str, Enum):
    SYNTAX = "SYNTAX"
    DUPLICATE_IDENTIFIER = "DUPLICATE_IDENTIFIER"
    UNRESOLVED_REFERENCE = "UNRESOLVED_REFERENCE"
    BAD_NUMBER = "BAD_NUMBER"
    BAD_TIME_SPEC = "BAD_TIME_SPEC"


@dataclass(frozen=True)
class SourceSpan:
    line: int
    column: int
    length: int = 1

    def __post_init__(self) -> None:
        if self.line < 1 or self.column < 1 or self.length < 1:
            raise ValueError(f"invalid span {self.line}:{self.column}+{self.length}")


@dataclass(frozen=True)
class ParseError:
    span: SourceSpan
    code: ErrorCode
    message: str

    def format(self, filename: str = "<input>") -> str:
        return f"{filename}:{self.span.line}:{self.span.column}: {self.code.value}: {self.message}"

    def __str__(self) -> str:
        return self.format()


class SpecSyntaxError(Exception):
    """Raised by loaders that want an exception rather than an error list."""

    def __init__(self, errors: list[ParseError], filename: str = "<input>"):
        self.errors = errors
        self.filename = filename
        super().__init__("\n".join(e.format(filename) for e in errors))


def split_lines(text: str) -> list[str]:
    """Split on ``\\n`` only, dropping a trailing ``\\r`` per line."""
    return [ln[:-1] if ln.endswith("\r") else ln for ln in text.split("\n")]


def span_in_bounds(text: str, span: SourceSpan) -> bool:
    lines = split_lines(text)
    if span.line > len(lines):
        return False
    width = len(lines[span.line - 1])
    return span.column + span.length - 1 <= width + 1


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT NUMBER STRING OP EOL
    text: str
    line: int
    column: int
    value: float | str | None = None

    @property
    def span(self) -> SourceSpan:
        return SourceSpan(self.line, self.column, max(1, len(self.text)))

    def is_op(self, text: str) -> bool:
        return self.kind == "OP" and self.text == text

    def is_word(self, text: str) -> bool:
        return self.kind == "IDENT" and self.text == text


_NUMBER_RE = re.compile(r"(?:\d+(?:\.(?!\.)\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_IDENT_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*")
_JUNK_AFTER_NUMBER = re.compile(r"[A-Za-z0-9_.]")
_OPS = ("..", "->", "(", ")", "{", "}", ",", ":", "=", "+", "-", "*", "/")


class LexError(Exception):
    def __init__(self, error: ParseError):
        super().__init__(error.message)
        self.error = error


def tokenize_line(line: str, lineno: int) -> list[Token]:
    """Tokens of one line, ending with an EOL token. Raises LexError."""
    toks: list[Token] = []
    i, n = 0, len(line)
    while i < n:
        c = line[i]
        if c in " \t":
            i += 1
            continue
        if c == "#":
            break
        col = i + 1
        if c == '"':
            j = line.find('"', i + 1)
            if j < 0:
                raise LexError(ParseError(SourceSpan(lineno, col, n - i), ErrorCode.SYNTAX, "unterminated string"))
            toks.append(Token("STRING", line[i : j + 1], lineno, col, line[i + 1 : j]))
            i = j + 1
            continue
        if line.startswith("..", i):
            toks.append(Token("OP", "..", lineno, col))
            i += 2
            continue
        m = _NUMBER_RE.match(line, i)
        if m:
            j = m.end()
            if j < n and _JUNK_AFTER_NUMBER.match(line, j) and not line.startswith("..", j):
                k = j
                while k < n and _JUNK_AFTER_NUMBER.match(line, k) and not line.startswith("..", k):
                    k += 1
                raise LexError(
                    ParseError(SourceSpan(lineno, col, k - i), ErrorCode.BAD_NUMBER, f"malformed number {line[i:k]!r}")
                )
            value = float(m.group())
            if not math.isfinite(value):
                raise LexError(
                    ParseError(SourceSpan(lineno, col, j - i), ErrorCode.BAD_NUMBER, f"number {m.group()!r} out of range")
                )
            toks.append(Token("NUMBER", m.group(), lineno, col, value))
            i = j
            continue
        m = _IDENT_RE.match(line, i)
        if m:
            toks.append(Token("IDENT", m.group(), lineno, col))
            i = m.end()
            continue
        for op in _OPS:
            if line.startswith(op, i):
                toks.append(Token("OP", op, lineno, col))
                i += len(op)
                break
        else:
            raise LexError(ParseError(SourceSpan(lineno, col, 1), ErrorCode.SYNTAX, f"unexpected character {c!r}"))
    toks.append(Token("EOL", "", lineno, n + 1))
    return toks


def iter_statements(text: str) -> Iterator[tuple[int, list[Token] | ParseError]]:
    """Yield (line number, tokens) per non-blank line, or a ParseError on lex failure."""
    for lineno, line in enumerate(split_lines(text), start=1):
        try:
            toks = tokenize_line(line, lineno)
        except LexError as exc:
            yield lineno, exc.error
            continue
        if len(toks) > 1:
            yield lineno, toks


class StatementError(Exception):
    def __init__(self, error: ParseError):
        super().__init__(error.message)
        self.error = error


class Cursor:
    """Recursive-descent helper over one statement's tokens."""

    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOL":
            self.pos += 1
        return tok

    def fail(self, message: str, tok: Token | None = None, code: ErrorCode = ErrorCode.SYNTAX) -> StatementError:
        tok = tok or self.tok
        where = "end of line" if tok.kind == "EOL" else repr(tok.text)
        return StatementError(ParseError(tok.span, code, f"{message} (found {where})"))

    def expect_op(self, text: str) -> Token:
        if not self.tok.is_op(text):
            raise self.fail(f"expected {text!r}")
        return self.advance()

    def expect_word(self, text: str) -> Token:
        if not self.tok.is_word(text):
            raise self.fail(f"expected {text!r}")
        return self.advance()

    def accept_op(self, text: str) -> bool:
        if self.tok.is_op(text):
            self.advance()
            return True
        return False

    def accept_word(self, text: str) -> bool:
        if self.tok.is_word(text):
            self.advance()
            return True
        return False

    def expect_ident(self, what: str, reserved: frozenset[str] = frozenset()) -> Token:
        tok = self.tok
        if tok.kind != "IDENT":
            raise self.fail(f"expected {what}")
        if tok.text in reserved:
            raise self.fail(f"{tok.text!r} is a reserved word and cannot be used as a {what}")
        return self.advance()

    def expect_real(self, what: str = "number") -> tuple[float, SourceSpan]:
        """A numeric literal with optional leading minus."""
        start = self.tok
        negative = self.accept_op("-")
        tok = self.tok
        if tok.kind != "NUMBER":
            raise self.fail(f"expected {what}")
        self.advance()
        value = float(tok.value)  # type: ignore[arg-type]
        span = SourceSpan(start.line, start.column, tok.column + len(tok.text) - start.column)
        return (-value if negative else value), span

    def expect_string(self, what: str) -> Token:
        if self.tok.kind != "STRING":
            raise self.fail(f"expected quoted {what}")
        return self.advance()

    def expect_end(self) -> None:
        if self.tok.kind != "EOL":
            raise self.fail("unexpected trailing input")


def format_real(value: float) -> str:
    """Shortest text that reads back to the identical float."""
    return repr(float(value))
