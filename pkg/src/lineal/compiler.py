"""Compiles parsed scripts into instruction blocks.

Pipeline: collect function definitions -> AST rewrites (constant-branch
removal, the rbind decomposition that exposes per-part reuse, the
self-transpose product fusion, single-call-site inlining, dead-code
elimination) -> flattening of expressions into three-address instructions
grouped by control-flow blocks.

Every rewrite can be switched off independently; with all rewrites off the
compiled program is a direct transliteration of the source.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from . import parser as P
from .errors import ScriptRuntimeError
from .vtypes import Scalar, ValueType

# opcodes whose execution has an observable effect beyond their output value
IMPURE_OPS = {"print", "write", "read", "rand", "fcall", "fed_init"}

AGGREGATES = {"sum", "mean", "min", "max", "rowSums", "colSums"}

# native call targets: script name -> opcode
NATIVE_CALLS = {
    "t": "transpose", "solve": "solve", "tsmm": "tsmm",
    "cbind": "cbind", "rbind": "rbind",
    "nrow": "nrow", "ncol": "ncol", "diag": "diag", "seq": "seq",
    "abs": "abs", "exp": "exp", "log": "log", "sqrt": "sqrt",
    "floor": "floor", "ceil": "ceil", "round": "round",
    "as.scalar": "as.scalar", "as.matrix": "as.matrix",
    "as.integer": "as.integer", "as.double": "as.double",
    "print": "print", "toString": "toString",
    "read": "read", "write": "write",
    "detectSchema": "detectSchema", "genData": "genData",
    "fed_init": "fed_init", "collect": "collect",
}


@dataclass(frozen=True)
class Instr:
    opcode: str
    inputs: tuple
    outputs: tuple
    literals: tuple = ()
    line: int = 0


@dataclass
class Basic:
    instrs: list = field(default_factory=list)


@dataclass
class CIf:
    cond_code: list
    cond_var: str
    then: list
    els: list
    line: int


@dataclass
class CFor:
    var: str
    start_code: list
    start_var: str
    stop_code: list
    stop_var: str
    body: list
    loop_id: str
    innermost: bool
    line: int


@dataclass
class CWhile:
    cond_code: list
    cond_var: str
    body: list
    loop_id: str
    line: int


@dataclass
class CompiledFunction:
    name: str
    params: tuple            # parameter names in order
    defaults: dict           # name -> (blocks, result var)
    outs: tuple
    blocks: list
    has_loop: bool = False


@dataclass
class CompiledProgram:
    main: list
    functions: dict


@dataclass(frozen=True)
class Rewrites:
    dce: bool = True
    const_branch: bool = True
    inline: bool = True
    cv_rbind: bool = True
    tsmm_fuse: bool = True


# ===================================================================== AST
# rewrites operate on the parsed tree before flattening

def _map_expr(e, fn):
    """Bottom-up expression rewriting."""
    if isinstance(e, P.Bin):
        e = P.Bin(e.op, _map_expr(e.left, fn), _map_expr(e.right, fn), e.line)
    elif isinstance(e, P.Un):
        e = P.Un(e.op, _map_expr(e.operand, fn), e.line)
    elif isinstance(e, P.Call):
        e = P.Call(e.fname, tuple(_map_expr(a, fn) for a in e.args),
                   tuple((k, _map_expr(v, fn)) for k, v in e.named), e.line)
    elif isinstance(e, P.Idx):
        subs = tuple(P.Sub(None if s.lo is None else _map_expr(s.lo, fn),
                           None if s.hi is None else _map_expr(s.hi, fn),
                           s.point) for s in e.subs)
        e = P.Idx(_map_expr(e.base, fn), subs, e.line)
    return fn(e)


def _map_stmts(stmts, fn):
    out = []
    for s in stmts:
        if isinstance(s, P.SAssign):
            out.append(P.SAssign(s.target, _map_expr(s.expr, fn), s.line))
        elif isinstance(s, P.SIndexAssign):
            subs = tuple(P.Sub(None if x.lo is None else _map_expr(x.lo, fn),
                               None if x.hi is None else _map_expr(x.hi, fn),
                               x.point) for x in s.subs)
            out.append(P.SIndexAssign(s.target, subs, _map_expr(s.expr, fn), s.line))
        elif isinstance(s, P.SMulti):
            out.append(P.SMulti(s.targets, _map_expr(s.call, fn), s.line))
        elif isinstance(s, P.SExpr):
            out.append(P.SExpr(_map_expr(s.expr, fn), s.line))
        elif isinstance(s, P.SIf):
            out.append(P.SIf(_map_expr(s.cond, fn), _map_stmts(s.then, fn),
                             _map_stmts(s.els, fn), s.line))
        elif isinstance(s, P.SFor):
            out.append(P.SFor(s.var, _map_expr(s.start, fn),
                              _map_expr(s.stop, fn), _map_stmts(s.body, fn), s.line))
        elif isinstance(s, P.SWhile):
            out.append(P.SWhile(_map_expr(s.cond, fn), _map_stmts(s.body, fn), s.line))
        elif isinstance(s, P.SFunc):
            out.append(s)  # bodies rewritten separately
        else:
            raise TypeError(type(s).__name__)
    return tuple(out)


def _rw_cv_rbind(e):
    """tsmm(rbind(a, ..., z)) -> tsmm(a) + ... + tsmm(z), and the
    transpose-product analog; exposes per-part Grams to the reuse cache."""
    if (isinstance(e, P.Call) and e.fname == "tsmm" and len(e.args) == 1
            and not e.named and isinstance(e.args[0], P.Call)
            and e.args[0].fname == "rbind" and len(e.args[0].args) >= 2
            and not e.args[0].named):
        parts = [P.Call("tsmm", (p,), (), e.line) for p in e.args[0].args]
        acc = parts[0]
        for p in parts[1:]:
            acc = P.Bin("+", acc, p, e.line)
        return acc
    if (isinstance(e, P.Bin) and e.op == "%*%"
            and isinstance(e.left, P.Call) and e.left.fname == "t"
            and len(e.left.args) == 1 and not e.left.named
            and isinstance(e.left.args[0], P.Call) and e.left.args[0].fname == "rbind"
            and isinstance(e.right, P.Call) and e.right.fname == "rbind"
            and len(e.left.args[0].args) == len(e.right.args) >= 2
            and not e.left.args[0].named and not e.right.named):
        fparts, gparts = e.left.args[0].args, e.right.args
        terms = [P.Bin("%*%", P.Call("t", (f,), (), e.line), g, e.line)
                 for f, g in zip(fparts, gparts)]
        acc = terms[0]
        for term in terms[1:]:
            acc = P.Bin("+", acc, term, e.line)
        return acc
    return e


def _rw_tsmm_fuse(e):
    """t(X) %*% X -> tsmm(X) whenever both sides are the same expression."""
    if (isinstance(e, P.Bin) and e.op == "%*%"
            and isinstance(e.left, P.Call) and e.left.fname == "t"
            and len(e.left.args) == 1 and not e.left.named
            and e.left.args[0] == e.right):
        return P.Call("tsmm", (e.right,), (), e.line)
    return e


def _rw_const_branch(stmts):
    out = []
    for s in stmts:
        if isinstance(s, P.SIf):
            then = _rw_const_branch(s.then)
            els = _rw_const_branch(s.els)
            if isinstance(s.cond, P.Bool):
                out.extend(then if s.cond.value else els)
            else:
                out.append(P.SIf(s.cond, then, els, s.line))
        elif isinstance(s, P.SFor):
            out.append(P.SFor(s.var, s.start, s.stop, _rw_const_branch(s.body), s.line))
        elif isinstance(s, P.SWhile):
            out.append(P.SWhile(s.cond, _rw_const_branch(s.body), s.line))
        else:
            out.append(s)
    return tuple(out)


# ------------------------------------------------------------------ inlining

def _called_functions(stmts, table, acc):
    def visit(e):
        if isinstance(e, P.Call) and e.fname in table and e.fname not in acc:
            acc.add(e.fname)
            _called_functions(table[e.fname].body, table, acc)
        return e
    _map_stmts(stmts, visit)
    return acc


def _count_call_sites(stmts, counts):
    def visit(e):
        if isinstance(e, P.Call) and e.fname in counts:
            counts[e.fname] += 1
        return e
    _map_stmts(stmts, visit)


def _rename_expr(e, mapping):
    def visit(x):
        if isinstance(x, P.Var) and x.name in mapping:
            return P.Var(mapping[x.name], x.line)
        return x
    return _map_expr(e, visit)


def _rename_stmts(stmts, mapping):
    out = []
    for s in stmts:
        if isinstance(s, P.SAssign):
            out.append(P.SAssign(mapping.get(s.target, s.target),
                                 _rename_expr(s.expr, mapping), s.line))
        elif isinstance(s, P.SIndexAssign):
            subs = tuple(P.Sub(None if x.lo is None else _rename_expr(x.lo, mapping),
                               None if x.hi is None else _rename_expr(x.hi, mapping),
                               x.point) for x in s.subs)
            out.append(P.SIndexAssign(mapping.get(s.target, s.target), subs,
                                      _rename_expr(s.expr, mapping), s.line))
        elif isinstance(s, P.SMulti):
            out.append(P.SMulti(tuple(mapping.get(t, t) for t in s.targets),
                                _rename_expr(s.call, mapping), s.line))
        elif isinstance(s, P.SExpr):
            out.append(P.SExpr(_rename_expr(s.expr, mapping), s.line))
        elif isinstance(s, P.SIf):
            out.append(P.SIf(_rename_expr(s.cond, mapping),
                             _rename_stmts(s.then, mapping),
                             _rename_stmts(s.els, mapping), s.line))
        elif isinstance(s, P.SFor):
            out.append(P.SFor(mapping.get(s.var, s.var),
                              _rename_expr(s.start, mapping),
                              _rename_expr(s.stop, mapping),
                              _rename_stmts(s.body, mapping), s.line))
        elif isinstance(s, P.SWhile):
            out.append(P.SWhile(_rename_expr(s.cond, mapping),
                                _rename_stmts(s.body, mapping), s.line))
        else:
            out.append(s)
    return tuple(out)


def _collect_names(stmts, names):
    def visit(e):
        if isinstance(e, P.Var):
            names.add(e.name)
        return e

    for s in stmts:
        if isinstance(s, (P.SAssign,)):
            names.add(s.target)
        elif isinstance(s, P.SIndexAssign):
            names.add(s.target)
        elif isinstance(s, P.SMulti):
            names.update(s.targets)
        elif isinstance(s, P.SFor):
            names.add(s.var)
            _collect_names(s.body, names)
        elif isinstance(s, (P.SIf,)):
            _collect_names(s.then, names)
            _collect_names(s.els, names)
        elif isinstance(s, P.SWhile):
            _collect_names(s.body, names)
    _map_stmts(stmts, visit)
    return names


def _bind_call_args(fdef: P.SFunc, call: P.Call, mangled):
    """Positional+named call arguments -> preamble assignments."""
    pnames = [n for n, _ in fdef.params]
    defaults = dict(fdef.params)
    bound = {}
    for pos, a in enumerate(call.args):
        if pos >= len(pnames):
            raise ScriptRuntimeError(
                f"too many arguments to {fdef.name}", call.line)
        bound[pnames[pos]] = a
    for k, v in call.named:
        if k not in pnames:
            raise ScriptRuntimeError(
                f"unknown argument {k!r} to {fdef.name}", call.line)
        bound[k] = v
    pre = []
    for n in pnames:
        if n in bound:
            pre.append(P.SAssign(mangled[n], bound[n], call.line))
        elif defaults[n] is not None:
            pre.append(P.SAssign(mangled[n], _rename_expr(defaults[n], mangled),
                                 call.line))
        else:
            raise ScriptRuntimeError(
                f"missing argument {n!r} to {fdef.name}", call.line)
    return pre


def _inline_once(stmts, fname, fdef: P.SFunc):
    """Replaces the unique statement-level call to fname with its body."""
    names = _collect_names(fdef.body, set()) | {n for n, _ in fdef.params}
    mangled = {n: f"{fname}..{n}" for n in names}

    def splice(call, targets, line):
        pre = _bind_call_args(fdef, call, mangled)
        body = _rename_stmts(fdef.body, mangled)
        post = [P.SAssign(t, P.Var(mangled[o]), line)
                for t, o in zip(targets, fdef.outs)]
        return list(pre) + list(body) + post

    out, done = [], False
    for s in stmts:
        if (not done and isinstance(s, P.SAssign) and isinstance(s.expr, P.Call)
                and s.expr.fname == fname):
            out.extend(splice(s.expr, (s.target,), s.line))
            done = True
        elif (not done and isinstance(s, P.SMulti) and s.call.fname == fname):
            out.extend(splice(s.call, s.targets, s.line))
            done = True
        elif isinstance(s, P.SIf):
            then = _inline_once(s.then, fname, fdef)
            els = _inline_once(s.els, fname, fdef)
            out.append(P.SIf(s.cond, then, els, s.line))
        elif isinstance(s, P.SFor):
            out.append(P.SFor(s.var, s.start, s.stop,
                              _inline_once(s.body, fname, fdef), s.line))
        elif isinstance(s, P.SWhile):
            out.append(P.SWhile(s.cond, _inline_once(s.body, fname, fdef), s.line))
        else:
            out.append(s)
    return tuple(out)


def _has_stmt_level_call(stmts, fname) -> int:
    n = 0
    for s in stmts:
        if isinstance(s, P.SAssign) and isinstance(s.expr, P.Call) \
                and s.expr.fname == fname:
            n += 1
        elif isinstance(s, P.SMulti) and s.call.fname == fname:
            n += 1
        elif isinstance(s, P.SIf):
            n += _has_stmt_level_call(s.then, fname)
            n += _has_stmt_level_call(s.els, fname)
        elif isinstance(s, (P.SFor,)):
            n += _has_stmt_level_call(s.body, fname)
        elif isinstance(s, P.SWhile):
            n += _has_stmt_level_call(s.body, fname)
    return n


# ---------------------------------------------------------------------- DCE

def _stmt_reads(s, reads):
    def visit(e):
        if isinstance(e, P.Var):
            reads.add(e.name)
        return e
    _map_stmts((s,), visit)
    if isinstance(s, P.SIndexAssign):
        reads.add(s.target)  # an indexed write updates the existing value


_PURE_CALLS = (set(NATIVE_CALLS) | AGGREGATES | {"matrix"}) - IMPURE_OPS


def _is_pure_assign(s) -> bool:
    if not isinstance(s, P.SAssign):
        return False
    impure = False

    def visit(e):
        nonlocal impure
        if isinstance(e, P.Call) and e.fname not in _PURE_CALLS:
            impure = True
        return e
    _map_expr(s.expr, visit)
    return not impure


def _dce(stmts, live):
    """Whole-tree liveness to fixpoint; removes pure assignments to names
    that are never read anywhere (name-level, conservative)."""
    while True:
        flat = _flatten_stmts(stmts)
        reads = set(live)
        changed = True
        while changed:
            changed = False
            for x in flat:
                if _is_pure_assign(x) and x.target not in reads:
                    continue
                if isinstance(x, (P.SIf, P.SFor, P.SWhile)):
                    # inner statements are visited individually; here only
                    # the control expressions matter
                    exprs = ([x.cond] if isinstance(x, (P.SIf, P.SWhile))
                             else [x.start, x.stop])
                    for e in exprs:
                        before = len(reads)
                        _map_expr(e, lambda n: (reads.add(n.name)
                                                if isinstance(n, P.Var) else None)
                                  or n)
                        changed |= len(reads) != before
                    continue
                before = len(reads)
                _stmt_reads(x, reads)
                changed |= len(reads) != before

        pruned = _filter_stmts(
            stmts, lambda s: not (_is_pure_assign(s) and s.target not in reads))
        if pruned == stmts:
            return pruned
        stmts = pruned


def _flatten_stmts(stmts):
    out = []
    for s in stmts:
        out.append(s)
        if isinstance(s, P.SIf):
            out.extend(_flatten_stmts(s.then))
            out.extend(_flatten_stmts(s.els))
        elif isinstance(s, P.SFor):
            out.extend(_flatten_stmts(s.body))
        elif isinstance(s, P.SWhile):
            out.extend(_flatten_stmts(s.body))
    return out


def _filter_stmts(stmts, keep):
    out = []
    for s in stmts:
        if isinstance(s, P.SIf):
            out.append(P.SIf(s.cond, _filter_stmts(s.then, keep),
                             _filter_stmts(s.els, keep), s.line))
        elif isinstance(s, P.SFor):
            out.append(P.SFor(s.var, s.start, s.stop,
                              _filter_stmts(s.body, keep), s.line))
        elif isinstance(s, P.SWhile):
            out.append(P.SWhile(s.cond, _filter_stmts(s.body, keep), s.line))
        elif keep(s):
            out.append(s)
    return tuple(out)


# ============================================================== flattening

class _Flattener:
    def __init__(self, table, loop_ids):
        self.table = table          # function name -> SFunc
        self.loop_ids = loop_ids    # mutable counter shared across functions
        self.tmp_n = 0

    def tmp(self) -> str:
        self.tmp_n += 1
        return f"%{self.tmp_n}"

    def loop_id(self) -> str:
        self.loop_ids[0] += 1
        return f"L{self.loop_ids[0]}"

    # ------------------------------------------------------------- blocks
    def blocks(self, stmts) -> list:
        blocks: list = []

        def basic() -> Basic:
            if blocks and isinstance(blocks[-1], Basic):
                return blocks[-1]
            b = Basic()
            blocks.append(b)
            return b

        for s in stmts:
            if isinstance(s, P.SAssign):
                self.expr(basic().instrs, s.expr, out=s.target)
            elif isinstance(s, P.SIndexAssign):
                self.index_assign(basic().instrs, s)
            elif isinstance(s, P.SMulti):
                self.call(basic().instrs, s.call, outs=s.targets)
            elif isinstance(s, P.SExpr):
                self.expr(basic().instrs, s.expr, out=None)
            elif isinstance(s, P.SIf):
                code = []
                cvar = self.expr(code, s.cond)
                blocks.append(CIf([Basic(code)], cvar, self.blocks(s.then),
                                  self.blocks(s.els), s.line))
            elif isinstance(s, P.SFor):
                c0, c1 = [], []
                v0 = self.expr(c0, s.start)
                v1 = self.expr(c1, s.stop)
                body = self.blocks(s.body)
                blocks.append(CFor(s.var, [Basic(c0)], v0, [Basic(c1)], v1,
                                   body, self.loop_id(),
                                   not _blocks_have_loop(body, self.table),
                                   s.line))
            elif isinstance(s, P.SWhile):
                code = []
                cvar = self.expr(code, s.cond)
                blocks.append(CWhile([Basic(code)], cvar,
                                     self.blocks(s.body), self.loop_id(), s.line))
            elif isinstance(s, P.SFunc):
                continue  # already collected
            else:
                raise TypeError(type(s).__name__)
        return blocks

    # -------------------------------------------------------- expressions
    def expr(self, code, e, out=None):
        def emit(opcode, inputs, literals=(), line=0):
            name = out if out is not None else self.tmp()
            code.append(Instr(opcode, tuple(inputs), (name,), literals, line))
            return name

        if isinstance(e, P.Num):
            return emit("lit", (), (Scalar(e.vtype, int(e.value)
                                           if e.vtype == ValueType.INT64
                                           else e.value),), e.line)
        if isinstance(e, P.Str):
            return emit("lit", (), (Scalar(ValueType.STRING, e.value),), e.line)
        if isinstance(e, P.Bool):
            return emit("lit", (), (Scalar(ValueType.BOOLEAN, e.value),), e.line)
        if isinstance(e, P.NVArg):
            return emit("nvarg", (), (e.name,), e.line)
        if isinstance(e, P.Var):
            if out is None:
                return e.name
            code.append(Instr("assign", (e.name,), (out,), (), e.line))
            return out
        if isinstance(e, P.Un):
            v = self.expr(code, e.operand)
            return emit("neg" if e.op == "-" else "not", (v,), (), e.line)
        if isinstance(e, P.Bin):
            if e.op == ":":
                a = self.expr(code, e.left)
                b = self.expr(code, e.right)
                return emit("range", (a, b), (), e.line)
            opcode = "matmul" if e.op == "%*%" else e.op
            a = self.expr(code, e.left)
            b = self.expr(code, e.right)
            return emit(opcode, (a, b), (), e.line)
        if isinstance(e, P.Idx):
            base = self.expr(code, e.base)
            inputs, spec = [base], []
            for s in e.subs:
                if s.lo is None and s.hi is None:
                    spec.append("all")
                elif s.point:
                    inputs.append(self.expr(code, s.lo))
                    spec.append("pt")
                else:
                    inputs.append(self.expr(code, s.lo))
                    inputs.append(self.expr(code, s.hi))
                    spec.append("rng")
            return emit("rightindex", inputs, (tuple(spec),), e.line)
        if isinstance(e, P.Call):
            return self.call(code, e, outs=(out,) if out else None)
        raise TypeError(type(e).__name__)

    def index_assign(self, code, s: P.SIndexAssign):
        val = self.expr(code, s.expr)
        inputs, spec = [s.target, val], []
        for x in s.subs:
            if x.lo is None and x.hi is None:
                spec.append("all")
            elif x.point:
                inputs.append(self.expr(code, x.lo))
                spec.append("pt")
            else:
                inputs.append(self.expr(code, x.lo))
                inputs.append(self.expr(code, x.hi))
                spec.append("rng")
        code.append(Instr("leftindex", tuple(inputs), (s.target,),
                          (tuple(spec),), s.line))

    def call(self, code, e: P.Call, outs=None):
        fname = e.fname
        if fname in self.table:
            fdef = self.table[fname]
            pnames = [n for n, _ in fdef.params]
            defaults = dict(fdef.params)
            bound = {}
            for pos, a in enumerate(e.args):
                if pos >= len(pnames):
                    raise ScriptRuntimeError(f"too many arguments to {fname}",
                                             e.line)
                bound[pnames[pos]] = a
            for k, v in e.named:
                if k not in pnames:
                    raise ScriptRuntimeError(
                        f"unknown argument {k!r} to {fname}", e.line)
                bound[k] = v
            inputs, order = [], []
            for n in pnames:
                if n in bound:
                    inputs.append(self.expr(code, bound[n]))
                    order.append(n)
                elif defaults[n] is None:
                    raise ScriptRuntimeError(
                        f"missing argument {n!r} to {fname}", e.line)
            nouts = len(outs) if outs else 1
            if nouts > len(fdef.outs):
                raise ScriptRuntimeError(
                    f"{fname} returns {len(fdef.outs)} values", e.line)
            names = tuple(outs) if outs else (self.tmp(),)
            code.append(Instr("fcall", tuple(inputs), names,
                              (fname, tuple(order)), e.line))
            return names[0]

        if fname in AGGREGATES:
            if len(e.args) == 1 and not e.named:
                v = self.expr(code, e.args[0])
                return self._emit1(code, fname, (v,), (), e.line, outs)
            if fname in ("min", "max") and len(e.args) == 2:
                a = self.expr(code, e.args[0])
                b = self.expr(code, e.args[1])
                return self._emit1(code, fname + "2", (a, b), (), e.line, outs)
            raise ScriptRuntimeError(f"bad arguments to {fname}", e.line)

        if fname == "matrix":
            named = dict(e.named)
            args = list(e.args)
            v = args.pop(0) if args else named.pop("data")
            rows = args.pop(0) if args else named.pop("rows")
            cols = args.pop(0) if args else named.pop("cols")
            ins = [self.expr(code, x) for x in (v, rows, cols)]
            return self._emit1(code, "fill", ins, (), e.line, outs)

        if fname == "rand":
            named = dict(e.named)
            keys, ins = [], []
            for k in ("rows", "cols", "min", "max", "sparsity", "seed"):
                if k in named:
                    keys.append(k)
                    ins.append(self.expr(code, named.pop(k)))
            if named or e.args:
                raise ScriptRuntimeError("rand takes named arguments only", e.line)
            return self._emit1(code, "rand", ins, (tuple(keys),), e.line, outs)

        if fname == "genData":
            if outs is None or len(outs) != 2:
                raise ScriptRuntimeError(
                    "genData returns 2 values; use [X, y] = genData(...)", e.line)
            ins = [self.expr(code, a) for a in e.args]
            code.append(Instr("genData", tuple(ins), tuple(outs), (), e.line))
            return outs[0]

        if fname in NATIVE_CALLS:
            opcode = NATIVE_CALLS[fname]
            ins = [self.expr(code, a) for a in e.args]
            lits = tuple((k, self.expr(code, v)) for k, v in e.named)
            return self._emit1(code, opcode, ins, lits, e.line, outs)

        raise ScriptRuntimeError(f"unknown function {fname!r}", e.line)

    def _emit1(self, code, opcode, inputs, literals, line, outs):
        if outs and len(outs) > 1:
            raise ScriptRuntimeError(f"{opcode} returns a single value", line)
        name = outs[0] if outs else self.tmp()
        outputs = () if opcode in ("print", "write") else (name,)
        code.append(Instr(opcode, tuple(inputs), outputs, tuple(literals), line))
        return name


def _blocks_have_loop(blocks, table, seen=None) -> bool:
    seen = seen if seen is not None else set()
    for b in blocks:
        if isinstance(b, (CFor, CWhile)):
            return True
        if isinstance(b, CIf):
            if _blocks_have_loop(b.then, table, seen) or \
                    _blocks_have_loop(b.els, table, seen):
                return True
        if isinstance(b, Basic):
            for ins in b.instrs:
                if ins.opcode == "fcall":
                    fname = ins.literals[0]
                    if fname in seen:
                        continue
                    seen.add(fname)
                    fdef = table.get(fname)
                    if fdef is not None and _ast_has_loop(fdef.body, table, seen):
                        return True
    return False


def _ast_has_loop(stmts, table, seen) -> bool:
    for s in _flatten_stmts(stmts):
        if isinstance(s, (P.SFor, P.SWhile)):
            return True
        calls = set()

        def visit(e):
            if isinstance(e, P.Call):
                calls.add(e.fname)
            return e
        _map_stmts((s,), visit)
        for c in calls:
            if c in table and c not in seen:
                seen.add(c)
                if _ast_has_loop(table[c].body, table, seen):
                    return True
    return False


# ================================================================ entry point

def compile_program(program: P.Program, keep=(), rewrites: Rewrites = Rewrites(),
                    extra_functions=()) -> CompiledProgram:
    """Compile a parsed program.  ``keep`` names top-level variables treated
    as live outputs; ``extra_functions`` supplies preloaded definitions
    (the script-bodied builtins)."""
    table: dict[str, P.SFunc] = {}
    for f in extra_functions:
        table[f.name] = f
    main = []
    for s in program.stmts:
        if isinstance(s, P.SFunc):
            table[s.name] = s
        else:
            main.append(s)
    main = tuple(main)

    def rewrite_tree(stmts):
        if rewrites.const_branch:
            stmts = _rw_const_branch(stmts)
        if rewrites.cv_rbind:
            stmts = _map_stmts(stmts, _rw_cv_rbind)
        if rewrites.tsmm_fuse:
            stmts = _map_stmts(stmts, _rw_tsmm_fuse)
        return stmts

    main = rewrite_tree(main)
    table = {k: dataclasses.replace(v, body=rewrite_tree(v.body))
             for k, v in table.items()}

    # single-call-site inlining over functions reachable from main
    if rewrites.inline:
        while True:
            reachable = _called_functions(main, table, set())
            counts = {f: 0 for f in reachable}
            _count_call_sites(main, counts)
            for f in reachable:
                _count_call_sites(table[f].body, counts)
            target = None
            for f, c in counts.items():
                recursive = f in _called_functions(table[f].body, table, set())
                if c == 1 and not recursive:
                    # only statement-level calls can be spliced
                    if _has_stmt_level_call(main, f) == 1:
                        target = (f, "main")
                        break
                    for g in reachable:
                        if _has_stmt_level_call(table[g].body, f) == 1:
                            target = (f, g)
                            break
                    if target:
                        break
            if target is None:
                break
            f, where = target
            if where == "main":
                main = _inline_once(main, f, table[f])
            else:
                table[where] = dataclasses.replace(
                    table[where], body=_inline_once(table[where].body, f, table[f]))
            del table[f]

    # only functions reachable from main are compiled; a preloaded library
    # must not leave dangling references once a callee has been inlined away
    reachable = _called_functions(main, table, set())
    table = {k: v for k, v in table.items() if k in reachable}

    if rewrites.dce:
        main = _dce(main, set(keep))
        table = {k: dataclasses.replace(v, body=_dce(v.body, set(v.outs)))
                 for k, v in table.items()}

    loop_ids = [0]
    functions: dict[str, CompiledFunction] = {}
    for name, fdef in table.items():
        fl = _Flattener(table, loop_ids)
        defaults = {}
        for pname, dexpr in fdef.params:
            if dexpr is not None:
                code: list = []
                var = fl.expr(code, dexpr)
                defaults[pname] = ([Basic(code)], var)
        blocks = fl.blocks(fdef.body)
        functions[name] = CompiledFunction(
            name, tuple(n for n, _ in fdef.params), defaults, fdef.outs,
            blocks, _ast_has_loop(fdef.body, table, set()))

    fl = _Flattener(table, loop_ids)
    main_blocks = fl.blocks(main)
    return CompiledProgram(main_blocks, functions)
