"""Lexer, AST, and recursive-descent parser for the scripting language.

The surface syntax is an R-like subset: assignments, arithmetic on scalars
and matrices, `%*%`, indexing with 1-based inclusive ranges, `if`/`for`/
`while`, and function definitions of the form
``name = function(args) return (outs) { body }``.  `$name` placeholders
refer to command-line bindings.  `#` starts a line comment.

AST nodes compare structurally (source positions are excluded), so
``parse(unparse(parse(text)))`` equals ``parse(text)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import ScriptSyntaxError
from .vtypes import ValueType

KEYWORDS = {"if", "else", "for", "while", "function", "return", "in",
            "TRUE", "FALSE", "true", "false"}

_TWO_CHAR = ("==", "!=", "<=", ">=", "&&", "||")
_ONE_CHAR = "+-*/^:<>!&|=()[]{},;"


@dataclass(frozen=True)
class Token:
    kind: str          # NUM FLOAT ID STR NVARG PUNCT EOF
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    toks: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)

    def err(msg):
        raise ScriptSyntaxError(msg, line, col, text[i:i + 8])

    while i < n:
        ch = text[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_col = col
        if ch == "%":
            if text.startswith("%*%", i):
                toks.append(Token("PUNCT", "%*%", line, start_col))
                i += 3
                col += 3
                continue
            err("stray '%'")
        if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            isfloat = False
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == ".":
                isfloat = True
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    isfloat = True
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            toks.append(Token("FLOAT" if isfloat else "NUM", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] in "_."):
                j += 1
            toks.append(Token("ID", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if ch == "$":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            if j == i + 1:
                err("'$' must be followed by a name")
            toks.append(Token("NVARG", text[i + 1:j], line, start_col))
            col += j - i
            i = j
            continue
        if ch == '"':
            j = i + 1
            out = []
            while j < n and text[j] != '"':
                if text[j] == "\\" and j + 1 < n:
                    esc = text[j + 1]
                    out.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc, esc))
                    j += 2
                else:
                    out.append(text[j])
                    j += 1
            if j >= n:
                err("unterminated string")
            toks.append(Token("STR", "".join(out), line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        two = text[i:i + 2]
        if two in _TWO_CHAR:
            toks.append(Token("PUNCT", two, line, start_col))
            i += 2
            col += 2
            continue
        if ch in _ONE_CHAR:
            toks.append(Token("PUNCT", ch, line, start_col))
            i += 1
            col += 1
            continue
        err(f"unexpected character {ch!r}")
    toks.append(Token("EOF", "", line, col))
    return toks


# ------------------------------------------------------------------ AST

@dataclass(frozen=True)
class Num:
    value: float
    vtype: ValueType
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Str:
    value: str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Bool:
    value: bool
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class NVArg:
    name: str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    fname: str
    args: tuple
    named: tuple  # ((name, expr), ...)
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Expr"
    right: "Expr"
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Un:
    op: str
    operand: "Expr"
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Sub:
    """One subscript: a point index, an inclusive range, or all (both None)."""
    lo: Optional["Expr"]
    hi: Optional["Expr"]
    point: bool = False


@dataclass(frozen=True)
class Idx:
    base: "Expr"
    subs: tuple  # of Sub
    line: int = field(default=0, compare=False)


Expr = Union[Num, Str, Bool, Var, NVArg, Call, Bin, Un, Idx]


@dataclass(frozen=True)
class SAssign:
    target: str
    expr: Expr
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SIndexAssign:
    target: str
    subs: tuple
    expr: Expr
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SMulti:
    targets: tuple
    call: Call
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SExpr:
    expr: Expr
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SIf:
    cond: Expr
    then: tuple
    els: tuple
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SFor:
    var: str
    start: Expr
    stop: Expr
    body: tuple
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SWhile:
    cond: Expr
    body: tuple
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SFunc:
    name: str
    params: tuple  # ((name, default_expr|None), ...)
    outs: tuple    # (name, ...)
    body: tuple
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Program:
    stmts: tuple


class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks
        self.pos = 0

    # ------------------------------------------------------------ helpers
    def peek(self, ahead: int = 0) -> Token:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> Token:
        t = self.toks[self.pos]
        if t.kind != "EOF":
            self.pos += 1
        return t

    def at(self, text: str) -> bool:
        t = self.peek()
        return t.kind in ("PUNCT", "ID") and t.text == text

    def expect(self, text: str) -> Token:
        t = self.next()
        if t.text != text or t.kind == "EOF":
            raise ScriptSyntaxError(f"expected {text!r}", t.line, t.col, t.text)
        return t

    def fail(self, msg: str):
        t = self.peek()
        raise ScriptSyntaxError(msg, t.line, t.col, t.text)

    # ----------------------------------------------------------- program
    def program(self) -> Program:
        stmts = []
        self.semi()
        while self.peek().kind != "EOF":
            stmts.append(self.statement())
            self.semi()
        return Program(tuple(stmts))

    def block(self) -> tuple:
        if self.at("{"):
            self.next()
            stmts = []
            self.semi()
            while not self.at("}"):
                if self.peek().kind == "EOF":
                    self.fail("unterminated block")
                stmts.append(self.statement())
                self.semi()
            self.next()
            return tuple(stmts)
        return (self.statement(),)

    def statement(self):
        t = self.peek()
        if t.kind == "ID" and t.text == "if":
            return self.if_stmt()
        if t.kind == "ID" and t.text == "for":
            return self.for_stmt()
        if t.kind == "ID" and t.text == "while":
            return self.while_stmt()
        if self.at("["):
            return self.multi_assign()
        if t.kind == "ID" and t.text not in KEYWORDS:
            nxt = self.peek(1)
            if nxt.text == "=" and self.peek(2).text == "function":
                return self.func_def()
            if nxt.text == "=":
                name = self.next().text
                self.next()
                expr = self.expr()
                self.semi()
                return SAssign(name, expr, t.line)
            if nxt.text == "[":
                save = self.pos
                name = self.next().text
                self.next()
                subs = self.subscripts()
                if self.at("="):
                    self.next()
                    expr = self.expr()
                    self.semi()
                    return SIndexAssign(name, subs, expr, t.line)
                self.pos = save  # an indexing expression used as a statement
        expr = self.expr()
        self.semi()
        return SExpr(expr, t.line)

    def semi(self):
        while self.at(";"):
            self.next()

    def if_stmt(self):
        t = self.expect("if")
        self.expect("(")
        cond = self.expr()
        self.expect(")")
        then = self.block()
        els: tuple = ()
        if self.at("else"):
            self.next()
            els = (self.if_stmt(),) if self.at("if") else self.block()
        return SIf(cond, then, els, t.line)

    def for_stmt(self):
        t = self.expect("for")
        self.expect("(")
        var = self.next()
        if var.kind != "ID":
            self.fail("loop variable expected")
        self.expect("in")
        rng = self.expr()
        if not (isinstance(rng, Bin) and rng.op == ":"):
            self.fail("for requires a 'start:stop' range")
        self.expect(")")
        body = self.block()
        return SFor(var.text, rng.left, rng.right, body, t.line)

    def while_stmt(self):
        t = self.expect("while")
        self.expect("(")
        cond = self.expr()
        self.expect(")")
        return SWhile(cond, self.block(), t.line)

    def multi_assign(self):
        t = self.expect("[")
        targets = [self.next().text]
        while self.at(","):
            self.next()
            targets.append(self.next().text)
        self.expect("]")
        self.expect("=")
        call = self.expr()
        if not isinstance(call, Call):
            self.fail("multi-assignment requires a function call")
        self.semi()
        return SMulti(tuple(targets), call, t.line)

    def func_def(self):
        t = self.next()       # name
        self.expect("=")
        self.expect("function")
        self.expect("(")
        params = []
        while not self.at(")"):
            params.append(self.param())
            if self.at(","):
                self.next()
        self.expect(")")
        self.expect("return")
        self.expect("(")
        outs = []
        while not self.at(")"):
            outs.append(self.typed_name())
            if self.at(","):
                self.next()
        self.expect(")")
        body = self.block()
        return SFunc(t.text, tuple(params), tuple(outs), body, t.line)

    def typed_name(self) -> str:
        """A name with an optional leading type annotation (annotations are
        accepted for compatibility and discarded)."""
        name = self.next()
        if name.kind != "ID":
            self.fail("name expected")
        if self.at("["):      # Matrix[Double] style type argument
            self.next()
            while not self.at("]"):
                self.next()
            self.next()
        if self.peek().kind == "ID" and self.peek().text not in KEYWORDS:
            return self.next().text
        return name.text

    def param(self):
        name = self.typed_name()
        default = None
        if self.at("="):
            self.next()
            default = self.expr()
        return (name, default)

    # -------------------------------------------------- expression levels
    def expr(self) -> Expr:
        return self.p_or()

    def p_or(self):
        left = self.p_and()
        while self.at("|") or self.at("||"):
            t = self.next()
            left = Bin("|", left, self.p_and(), t.line)
        return left

    def p_and(self):
        left = self.p_not()
        while self.at("&") or self.at("&&"):
            t = self.next()
            left = Bin("&", left, self.p_not(), t.line)
        return left

    def p_not(self):
        if self.at("!"):
            t = self.next()
            return Un("!", self.p_not(), t.line)
        return self.p_compare()

    def p_compare(self):
        left = self.p_add()
        while self.peek().text in ("==", "!=", "<", "<=", ">", ">="):
            t = self.next()
            left = Bin(t.text, left, self.p_add(), t.line)
        return left

    def p_add(self):
        left = self.p_mul()
        while self.at("+") or self.at("-"):
            t = self.next()
            left = Bin(t.text, left, self.p_mul(), t.line)
        return left

    def p_mul(self):
        left = self.p_matmul()
        while self.at("*") or self.at("/"):
            t = self.next()
            left = Bin(t.text, left, self.p_matmul(), t.line)
        return left

    def p_matmul(self):
        left = self.p_range()
        while self.at("%*%"):
            t = self.next()
            left = Bin("%*%", left, self.p_range(), t.line)
        return left

    def p_range(self):
        left = self.p_unary()
        while self.at(":"):
            t = self.next()
            left = Bin(":", left, self.p_unary(), t.line)
        return left

    def p_unary(self):
        if self.at("-") or self.at("+"):
            t = self.next()
            operand = self.p_unary()
            return operand if t.text == "+" else Un("-", operand, t.line)
        return self.p_power()

    def p_power(self):
        base = self.p_postfix()
        if self.at("^"):
            t = self.next()
            return Bin("^", base, self.p_unary(), t.line)  # right-assoc
        return base

    def p_postfix(self):
        e = self.p_primary()
        # a bracket on a later line starts a new statement (multi-assign),
        # it does not index the expression above it
        while self.at("[") and self.peek().line == self.toks[self.pos - 1].line:
            t = self.next()
            e = Idx(e, self.subscripts(), t.line)
        return e

    def subscripts(self) -> tuple:
        """Parses `a`, `a:b`, or empty per dimension; consumes the closing ]."""
        subs = []
        while True:
            if self.at(",") or self.at("]"):
                subs.append(Sub(None, None))
            else:
                e = self.expr()
                if isinstance(e, Bin) and e.op == ":":
                    subs.append(Sub(e.left, e.right))
                else:
                    subs.append(Sub(e, e, point=True))
            if self.at(","):
                self.next()
                continue
            self.expect("]")
            return tuple(subs)

    def p_primary(self):
        t = self.peek()
        if t.kind == "NUM":
            self.next()
            return Num(float(int(t.text)), ValueType.INT64, t.line)
        if t.kind == "FLOAT":
            self.next()
            return Num(float(t.text), ValueType.FP64, t.line)
        if t.kind == "STR":
            self.next()
            return Str(t.text, t.line)
        if t.kind == "NVARG":
            self.next()
            return NVArg(t.text, t.line)
        if t.kind == "ID":
            if t.text in ("TRUE", "true"):
                self.next()
                return Bool(True, t.line)
            if t.text in ("FALSE", "false"):
                self.next()
                return Bool(False, t.line)
            if t.text in KEYWORDS:
                self.fail(f"unexpected keyword {t.text!r}")
            self.next()
            if self.at("("):
                self.next()
                args, named = [], []
                while not self.at(")"):
                    if (self.peek().kind == "ID" and self.peek(1).text == "="
                            and self.peek(2).text != "="):
                        k = self.next().text
                        self.next()
                        named.append((k, self.expr()))
                    else:
                        args.append(self.expr())
                    if self.at(","):
                        self.next()
                    elif not self.at(")"):
                        self.fail("expected ',' or ')' in call")
                self.next()
                return Call(t.text, tuple(args), tuple(named), t.line)
            return Var(t.text, t.line)
        if self.at("("):
            self.next()
            e = self.expr()
            self.expect(")")
            return e
        self.fail("expression expected")


def parse(text: str) -> Program:
    return _Parser(tokenize(text)).program()


# ------------------------------------------------------------------ unparse

def _fmt_num(e: Num) -> str:
    if e.vtype == ValueType.INT64:
        return str(int(e.value))
    return repr(e.value)


def unparse_expr(e: Expr) -> str:
    if isinstance(e, Num):
        return _fmt_num(e)
    if isinstance(e, Str):
        s = e.value.replace("\\", "\\\\").replace('"', '\\"')
        s = s.replace("\n", "\\n").replace("\t", "\\t")
        return f'"{s}"'
    if isinstance(e, Bool):
        return "TRUE" if e.value else "FALSE"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, NVArg):
        return f"${e.name}"
    if isinstance(e, Un):
        return f"({e.op}{unparse_expr(e.operand)})"
    if isinstance(e, Bin):
        return f"({unparse_expr(e.left)} {e.op} {unparse_expr(e.right)})"
    if isinstance(e, Call):
        parts = [unparse_expr(a) for a in e.args]
        parts += [f"{k}={unparse_expr(v)}" for k, v in e.named]
        return f"{e.fname}({', '.join(parts)})"
    if isinstance(e, Idx):
        return f"{unparse_expr(e.base)}[{_fmt_subs(e.subs)}]"
    raise TypeError(type(e).__name__)


def _fmt_subs(subs) -> str:
    out = []
    for s in subs:
        if s.lo is None and s.hi is None:
            out.append("")
        elif s.point:
            out.append(unparse_expr(s.lo))
        else:
            out.append(f"{unparse_expr(s.lo)}:{unparse_expr(s.hi)}")
    return ", ".join(out)


def unparse_stmt(s, indent: int = 0) -> str:
    pad = "  " * indent

    def blk(stmts):
        inner = "".join(unparse_stmt(x, indent + 1) for x in stmts)
        return "{\n" + inner + pad + "}"

    if isinstance(s, SAssign):
        return f"{pad}{s.target} = {unparse_expr(s.expr)}\n"
    if isinstance(s, SIndexAssign):
        return f"{pad}{s.target}[{_fmt_subs(s.subs)}] = {unparse_expr(s.expr)}\n"
    if isinstance(s, SMulti):
        return f"{pad}[{', '.join(s.targets)}] = {unparse_expr(s.call)}\n"
    if isinstance(s, SExpr):
        return f"{pad}{unparse_expr(s.expr)}\n"
    if isinstance(s, SIf):
        txt = f"{pad}if ({unparse_expr(s.cond)}) {blk(s.then)}"
        if s.els:
            txt += f" else {blk(s.els)}"
        return txt + "\n"
    if isinstance(s, SFor):
        rng = f"{unparse_expr(s.start)}:{unparse_expr(s.stop)}"
        return f"{pad}for ({s.var} in {rng}) {blk(s.body)}\n"
    if isinstance(s, SWhile):
        return f"{pad}while ({unparse_expr(s.cond)}) {blk(s.body)}\n"
    if isinstance(s, SFunc):
        ps = ", ".join(n if d is None else f"{n} = {unparse_expr(d)}"
                       for n, d in s.params)
        return (f"{pad}{s.name} = function({ps}) return ({', '.join(s.outs)}) "
                f"{blk(s.body)}\n")
    raise TypeError(type(s).__name__)


def unparse(p: Program) -> str:
    return "".join(unparse_stmt(s) for s in p.stmts)
