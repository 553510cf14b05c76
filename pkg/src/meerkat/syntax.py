"""Surface syntax for Meerkat: lexer, parser, AST, and pretty-printer.

A source file is a `;`-separated sequence of declarations:

    var x = 1;
    def inc1 = x + 1;
    def bump = action { x := x + 1 };

Expressions are a lambda-calculus core (`fn x => e`, application by
juxtaposition), integer/boolean/string/unit literals, binary operators,
`if e then e1 else e2`, and action literals `action { f := e; ... }`.
Actions submitted by users are written `do <expr>`.

Operator precedence, loosest to tightest:

    ||  <  &&  <  (== <)  <  (+ -)  <  (* /)  <  unary (! -)  <  application

`if` and `fn` extend as far right as possible.  `//` starts a line comment.

Unary operators exist only in the surface syntax: `!e` parses to
`if e then false else true` and `-e` to `0 - e` (a minus directly on an
integer literal folds into the literal).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Union

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

# Parser recursion guard so arbitrary input cannot crash.  One syntactic
# nesting level costs several Python frames (one per precedence tier), so
# this must stay well under the interpreter's recursion limit.
_MAX_NESTING = 80


@dataclass(frozen=True)
class Span:
    """Source position (1-based line and column)."""

    line: int
    col: int


class ParseError(Exception):
    """Malformed input. Carries the position and the tokens that were expected."""

    def __init__(self, message: str, line: int, col: int, expected: tuple[str, ...] = ()):
        loc = f"{line}:{col}"
        super().__init__(f"{loc}: {message}" + (f" (expected {', '.join(expected)})" if expected else ""))
        self.message = message
        self.line = line
        self.col = col
        self.expected = expected

    def to_json(self) -> dict:
        return {
            "reason": "parse",
            "message": self.message,
            "line": self.line,
            "col": self.col,
            "expected": list(self.expected),
        }


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

class Unit:
    """The unit value, written `()`. A single shared instance is exported."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "()"


UNIT = Unit()

Literal = Union[int, bool, str, Unit]


@dataclass(frozen=True)
class Lit:
    value: Literal
    span: Span | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Ref:
    name: str
    span: Span | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Lambda:
    param: str
    body: "Expr"
    span: Span | None = field(default=None, compare=False)


@dataclass(frozen=True)
class App:
    fn: "Expr"
    arg: "Expr"
    span: Span | None = field(default=None, compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "Expr"
    rhs: "Expr"
    span: Span | None = field(default=None, compare=False)


@dataclass(frozen=True)
class If:
    cond: "Expr"
    then: "Expr"
    orelse: "Expr"
    span: Span | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Write:
    """One `target := rhs` entry of an action body."""

    target: str
    rhs: "Expr"
    span: Span | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ActionBody:
    writes: tuple[Write, ...] = ()


@dataclass(frozen=True)
class ActionLit:
    body: ActionBody
    span: Span | None = field(default=None, compare=False)


Expr = Union[Lit, Ref, Lambda, App, BinOp, If, ActionLit]


class DeclKind(Enum):
    STATE = "var"
    DEF = "def"


@dataclass(frozen=True)
class Decl:
    kind: DeclKind
    name: str
    init: Expr
    span: Span | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Program:
    decls: tuple[Decl, ...] = ()


@dataclass(frozen=True)
class DoStmt:
    expr: Expr
    span: Span | None = field(default=None, compare=False)


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

KEYWORDS = {
    "var", "def", "action", "do", "fn", "if", "then", "else", "true", "false",
}

_PUNCT = [
    ("==", "=="), ("=>", "=>"), (":=", ":="), ("&&", "&&"), ("||", "||"),
    ("=", "="), (";", ";"), ("{", "{"), ("}", "}"), ("(", "("), (")", ")"),
    ("+", "+"), ("-", "-"), ("*", "*"), ("/", "/"), ("<", "<"), ("!", "!"),
]

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", '"': '"', "\\": "\\"}

_DIGITS = set("0123456789")
_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_CONT = _IDENT_START | _DIGITS


@dataclass(frozen=True)
class Token:
    kind: str  # "int" | "string" | "ident" | a keyword | a punctuation string | "eof"
    text: str
    line: int
    col: int
    value: object = None  # decoded payload for int/string tokens


def tokenize(source: str) -> list[Token]:
    """Lex `source` into tokens. Raises ParseError on malformed input."""
    tokens: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(source)

    def advance(k: int = 1):
        nonlocal i, line, col
        for _ in range(k):
            if i < n and source[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        ch = source[i]
        if ch in " \t\r\n":
            advance()
            continue
        if ch == "/" and source.startswith("//", i):
            while i < n and source[i] != "\n":
                advance()
            continue
        if ch in _DIGITS:
            l0, c0 = line, col
            start = i
            while i < n and source[i] in _DIGITS:
                advance()
            text = source[start:i]
            value = int(text)
            if value > INT_MAX + 1:  # +1 leaves room for a folded unary minus
                raise ParseError(f"integer literal {text} out of 64-bit range", l0, c0)
            tokens.append(Token("int", text, l0, c0, value))
            continue
        if ch == '"':
            l0, c0 = line, col
            advance()
            buf = []
            while True:
                if i >= n or source[i] == "\n":
                    raise ParseError("unterminated string literal", l0, c0)
                c = source[i]
                if c == '"':
                    advance()
                    break
                if c == "\\":
                    advance()
                    if i >= n or source[i] not in _ESCAPES:
                        raise ParseError("invalid string escape", line, col)
                    buf.append(_ESCAPES[source[i]])
                    advance()
                else:
                    buf.append(c)
                    advance()
            tokens.append(Token("string", "".join(buf), l0, c0, "".join(buf)))
            continue
        if ch in _IDENT_START:
            l0, c0 = line, col
            start = i
            while i < n and source[i] in _IDENT_CONT:
                advance()
            text = source[start:i]
            kind = text if text in KEYWORDS else "ident"
            tokens.append(Token(kind, text, l0, c0))
            continue
        for pat, kind in _PUNCT:
            if source.startswith(pat, i):
                tokens.append(Token(kind, pat, line, col))
                advance(len(pat))
                break
        else:
            raise ParseError(f"unexpected character {ch!r}", line, col)
    tokens.append(Token("eof", "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_ATOM_START = {"int", "string", "ident", "true", "false", "(", "action"}


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0
        self.depth = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def at(self, *kinds: str) -> bool:
        return self.peek().kind in kinds

    def expect(self, kind: str) -> Token:
        tok = self.peek()
        if tok.kind != kind:
            raise ParseError(f"unexpected {describe(tok)}", tok.line, tok.col, (repr(kind),))
        return self.next()

    def fail(self, expected: tuple[str, ...]):
        tok = self.peek()
        raise ParseError(f"unexpected {describe(tok)}", tok.line, tok.col, expected)

    # -- entry points

    def program(self) -> Program:
        decls = []
        while not self.at("eof"):
            decls.append(self.decl())
        return Program(tuple(decls))

    def decl(self) -> Decl:
        tok = self.peek()
        if tok.kind == "var":
            kind = DeclKind.STATE
        elif tok.kind == "def":
            kind = DeclKind.DEF
        else:
            self.fail(("'var'", "'def'"))
        self.next()
        name = self.expect("ident")
        self.expect("=")
        init = self.expr()
        self.expect(";")
        return Decl(kind, name.text, init, Span(tok.line, tok.col))

    def do_stmt(self) -> DoStmt:
        tok = self.expect("do")
        e = self.expr()
        self.expect("eof")
        return DoStmt(e, Span(tok.line, tok.col))

    # -- expression grammar, loosest binding first

    def expr(self) -> Expr:
        self.depth += 1
        if self.depth > _MAX_NESTING:
            tok = self.peek()
            raise ParseError("expression is nested too deeply", tok.line, tok.col)
        try:
            tok = self.peek()
            if tok.kind == "fn":
                self.next()
                param = self.expect("ident")
                self.expect("=>")
                body = self.expr()
                return Lambda(param.text, body, Span(tok.line, tok.col))
            if tok.kind == "if":
                self.next()
                cond = self.expr()
                self.expect("then")
                then = self.expr()
                self.expect("else")
                orelse = self.expr()
                return If(cond, then, orelse, Span(tok.line, tok.col))
            return self.or_expr()
        finally:
            self.depth -= 1

    def _binop_chain(self, sub, ops: tuple[str, ...]) -> Expr:
        e = sub()
        while self.at(*ops):
            tok = self.next()
            rhs = sub()
            e = BinOp(tok.kind, e, rhs, Span(tok.line, tok.col))
        return e

    def or_expr(self) -> Expr:
        return self._binop_chain(self.and_expr, ("||",))

    def and_expr(self) -> Expr:
        return self._binop_chain(self.cmp_expr, ("&&",))

    def cmp_expr(self) -> Expr:
        return self._binop_chain(self.add_expr, ("==", "<"))

    def add_expr(self) -> Expr:
        return self._binop_chain(self.mul_expr, ("+", "-"))

    def mul_expr(self) -> Expr:
        return self._binop_chain(self.unary, ("*", "/"))

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.kind not in ("!", "-"):
            return self.app()
        self.depth += 1
        if self.depth > _MAX_NESTING:
            raise ParseError("expression is nested too deeply", tok.line, tok.col)
        try:
            self.next()
            span = Span(tok.line, tok.col)
            if tok.kind == "-" and self.peek().kind == "int":
                # fold the sign into the literal before the range check so
                # the most negative 64-bit value is writable
                lit_tok = self.next()
                folded = -lit_tok.value
                if folded < INT_MIN:
                    raise ParseError(
                        "integer literal out of 64-bit range", lit_tok.line, lit_tok.col
                    )
                return Lit(folded, span)
            operand = self.unary()
            if tok.kind == "!":
                return If(operand, Lit(False, span), Lit(True, span), span)
            if isinstance(operand, Lit) and type(operand.value) is int:
                folded = -operand.value
                if folded < INT_MIN or folded > INT_MAX:
                    raise ParseError("integer literal out of 64-bit range", tok.line, tok.col)
                return Lit(folded, span)
            return BinOp("-", Lit(0, span), operand, span)
        finally:
            self.depth -= 1

    def app(self) -> Expr:
        e = self.atom()
        while self.at(*_ATOM_START):
            arg = self.atom()
            e = App(e, arg, e.span)
        return e

    def atom(self) -> Expr:
        self.depth += 1
        if self.depth > _MAX_NESTING:
            tok = self.peek()
            raise ParseError("expression is nested too deeply", tok.line, tok.col)
        try:
            tok = self.peek()
            span = Span(tok.line, tok.col)
            if tok.kind == "int":
                self.next()
                if tok.value > INT_MAX:
                    raise ParseError(f"integer literal {tok.text} out of 64-bit range", tok.line, tok.col)
                return Lit(tok.value, span)
            if tok.kind == "string":
                self.next()
                return Lit(tok.value, span)
            if tok.kind == "true":
                self.next()
                return Lit(True, span)
            if tok.kind == "false":
                self.next()
                return Lit(False, span)
            if tok.kind == "ident":
                self.next()
                return Ref(tok.text, span)
            if tok.kind == "(":
                self.next()
                if self.at(")"):
                    self.next()
                    return Lit(UNIT, span)
                e = self.expr()
                self.expect(")")
                return e
            if tok.kind == "action":
                self.next()
                self.expect("{")
                writes = []
                while not self.at("}"):
                    target = self.expect("ident")
                    self.expect(":=")
                    rhs = self.expr()
                    writes.append(Write(target.text, rhs, Span(target.line, target.col)))
                    if self.at(";"):
                        self.next()
                    elif not self.at("}"):
                        self.fail(("';'", "'}'"))
                self.next()
                return ActionLit(ActionBody(tuple(writes)), span)
            self.fail(("an expression",))
        finally:
            self.depth -= 1


def describe(tok: Token) -> str:
    if tok.kind == "eof":
        return "end of input"
    if tok.kind in ("int", "string", "ident"):
        return f"{tok.kind} {tok.text!r}"
    return repr(tok.text)


def parse_program(source: str) -> Program:
    """Parse a `;`-separated declaration sequence. Raises ParseError."""
    return _Parser(tokenize(source)).program()


def parse_do(source: str) -> DoStmt:
    """Parse a `do <expr>` statement. Raises ParseError."""
    return _Parser(tokenize(source)).do_stmt()


def parse_expr(source: str) -> Expr:
    """Parse a single expression (the whole input must be consumed)."""
    p = _Parser(tokenize(source))
    e = p.expr()
    p.expect("eof")
    return e


# ---------------------------------------------------------------------------
# Pretty-printer
# ---------------------------------------------------------------------------

# Precedence levels used when deciding whether a subexpression needs parens.
_LEVEL_LOW = 0      # fn / if
_LEVELS = {"||": 1, "&&": 2, "==": 3, "<": 3, "+": 4, "-": 4, "*": 5, "/": 5}
_LEVEL_UNARY = 6    # a negative literal reparses like a unary minus
_LEVEL_APP = 7
_LEVEL_ATOM = 8


def _level(e: Expr) -> int:
    if isinstance(e, (Lambda, If)):
        return _LEVEL_LOW
    if isinstance(e, BinOp):
        return _LEVELS[e.op]
    if isinstance(e, App):
        return _LEVEL_APP
    if isinstance(e, Lit) and type(e.value) is int and e.value < 0:
        return _LEVEL_UNARY
    return _LEVEL_ATOM


def _escape(s: str) -> str:
    out = s.replace("\\", "\\\\").replace('"', '\\"')
    return out.replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")


def _render_expr(e: Expr, minlevel: int) -> str:
    text = _render_raw(e)
    if _level(e) < minlevel:
        return f"({text})"
    return text


def _render_raw(e: Expr) -> str:
    if isinstance(e, Lit):
        v = e.value
        if v is UNIT:
            return "()"
        if v is True:
            return "true"
        if v is False:
            return "false"
        if isinstance(v, int):
            return str(v)
        return f'"{_escape(v)}"'
    if isinstance(e, Ref):
        return e.name
    if isinstance(e, Lambda):
        return f"fn {e.param} => {_render_expr(e.body, _LEVEL_LOW)}"
    if isinstance(e, If):
        return (
            f"if {_render_expr(e.cond, _LEVEL_LOW)} then {_render_expr(e.then, _LEVEL_LOW)}"
            f" else {_render_expr(e.orelse, _LEVEL_LOW)}"
        )
    if isinstance(e, BinOp):
        lvl = _LEVELS[e.op]
        # left-associative: the right operand needs strictly tighter binding
        return f"{_render_expr(e.lhs, lvl)} {e.op} {_render_expr(e.rhs, lvl + 1)}"
    if isinstance(e, App):
        return f"{_render_expr(e.fn, _LEVEL_APP)} {_render_expr(e.arg, _LEVEL_ATOM)}"
    if isinstance(e, ActionLit):
        if not e.body.writes:
            return "action { }"
        inner = "; ".join(f"{w.target} := {_render_expr(w.rhs, _LEVEL_LOW)}" for w in e.body.writes)
        return f"action {{ {inner} }}"
    raise TypeError(f"not an expression: {e!r}")


def render(ast: Expr | Program | DoStmt) -> str:
    """Pretty-print an AST so that parsing the result reproduces it."""
    if isinstance(ast, Program):
        return "\n".join(
            f"{d.kind.value} {d.name} = {_render_expr(d.init, _LEVEL_LOW)};" for d in ast.decls
        )
    if isinstance(ast, DoStmt):
        return f"do {_render_expr(ast.expr, _LEVEL_LOW)}"
    return _render_expr(ast, _LEVEL_LOW)


def iter_exprs(e: Expr) -> Iterator[Expr]:
    """Yield `e` and every subexpression, pre-order."""
    stack = [e]
    while stack:
        cur = stack.pop()
        yield cur
        if isinstance(cur, Lambda):
            stack.append(cur.body)
        elif isinstance(cur, App):
            stack.extend((cur.arg, cur.fn))
        elif isinstance(cur, BinOp):
            stack.extend((cur.rhs, cur.lhs))
        elif isinstance(cur, If):
            stack.extend((cur.orelse, cur.then, cur.cond))
        elif isinstance(cur, ActionLit):
            stack.extend(w.rhs for w in cur.body.writes)
