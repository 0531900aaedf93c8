"""Script execution: sessions, the instruction pipeline, and loop dedup.

A Session owns the symbol table, the lineage store, the reuse cache, and the
execution statistics.  Every value-producing instruction follows the same
pipeline: build its output lineage, probe the cache for a full hit, attempt
a partial-reuse plan, and only then execute the kernel and admit the result.

Innermost for-loops run under a LoopRecorder so the trace costs one PathNode
per iteration instead of one node per instruction; while-loops and outer
loops trace eagerly.  The recorder stays active across function calls made
from the loop body, but only writes in the loop's own frame become stubs.
"""
from __future__ import annotations

import time
import warnings

import numpy as np

from . import compiler as C
from . import federated
from . import kernels
from . import lineage as L
from . import parser as P
from . import tensorio
from .blocks import BasicTensorBlock, DataTensorBlock, SPARSE
from .builtins import builtin_functions, detect_schema, gen_data
from .cache import DEFAULT_CAPACITY_BYTES, LineageCache, execute_plan, try_partial
from .errors import LinealError, ScriptRuntimeError, ScriptSyntaxError
from .vtypes import Scalar, ValueType, check_numeric

LINEAGE_MODES = ("none", "trace", "reuse_full", "reuse_partial")

_EW = {"+", "-", "*", "/", "^"}
_CMP = {"==", "!=", "<", "<=", ">", ">="}
_LOGIC = {"&", "|"}
_UNARY = {"abs", "exp", "log", "sqrt", "floor", "ceil", "round"}
_AGG = set(kernels.AGG_KINDS)

# ops whose results may enter the reuse cache (deterministic value ops)
CACHEABLE = (_EW | _CMP | _UNARY | _AGG | {
    "matmul", "tsmm", "transpose", "solve", "cbind", "rbind",
    "rightindex", "leftindex", "neg", "not", "min2", "max2",
    "diag", "seq", "range", "fill", "rand", "as.matrix", "genData",
})

_NOMINAL_FLOPS = 1e9  # cost-model rate; keeps admission machine-independent


def _modeled_cost(opcode: str, args, value) -> float:
    """Arithmetic-intensity estimate of an instruction's compute seconds.

    Admission uses max(measured, modeled): the floor still rejects trivially
    recomputable values, but a fast machine cannot starve the cache of real
    tensor math that a reuse-dependent workload needs back.
    """
    if opcode == "matmul" and isinstance(args[0], BasicTensorBlock) \
            and isinstance(args[1], BasicTensorBlock):
        m, k = args[0].dims
        return 2.0 * m * k * args[1].dims[1] / _NOMINAL_FLOPS
    if opcode == "tsmm" and isinstance(args[0], BasicTensorBlock):
        m, n = args[0].dims
        return 2.0 * m * n * n / _NOMINAL_FLOPS
    if opcode == "solve" and isinstance(args[0], BasicTensorBlock):
        n = args[0].dims[0]
        return (n ** 3 / 3.0 + 2.0 * n * n) / _NOMINAL_FLOPS
    if isinstance(value, BasicTensorBlock):
        return value.cells / _NOMINAL_FLOPS
    return 1.0 / _NOMINAL_FLOPS


class ExecStats:
    """Per-opcode execution counters and wall times, plus I/O byte counts."""

    __slots__ = ("counts", "seconds", "bytes_read", "bytes_written", "fed_collects")

    def __init__(self):
        self.counts: dict[str, int] = {}
        self.seconds: dict[str, float] = {}
        self.bytes_read = 0
        self.bytes_written = 0
        self.fed_collects = 0

    def count(self, opcode: str, dt: float) -> None:
        self.counts[opcode] = self.counts.get(opcode, 0) + 1
        self.seconds[opcode] = self.seconds.get(opcode, 0.0) + dt

    def table(self, cache: LineageCache | None = None,
              store: L.LineageStore | None = None) -> str:
        lines = [f"{'op':<14}{'count':>8}{'seconds':>12}"]
        for op in sorted(self.counts):
            lines.append(f"{op:<14}{self.counts[op]:>8}{self.seconds[op]:>12.4f}")
        lines.append(f"bytes read {self.bytes_read}, written {self.bytes_written}")
        if self.fed_collects:
            lines.append(f"federated collect fallbacks: {self.fed_collects}")
        if cache is not None:
            s = cache.stats_dict()
            lines.append(
                f"cache: hits {sum(s['hits'].values())} misses {s['misses']} "
                f"puts {s['puts']} evictions {s['evictions']} "
                f"partial_plans {s['partial_plans']} "
                f"chained {s['chained_partials']} resident {s['bytes_resident']}B")
        if store is not None:
            lines.append(f"lineage nodes stored: {store.node_count()}")
        return "\n".join(lines)


def _fingerprint(value) -> str:
    """Cheap content tag for input leaves, so rebinding a name to different
    data in a later run cannot alias the earlier cache entries."""
    if isinstance(value, BasicTensorBlock):
        if not value.vtype.is_numeric:
            return f"{value.dims}|{value.nnz}|str"
        if value.layout == SPARSE:
            total = float(value.coords_values()[1].sum()) if value.nnz else 0.0
        else:
            total = float(value.to_array().sum())
        return f"{value.dims}|{value.nnz}|{total:.17g}"
    return f"{value.dims}"


def _derive_seed(session_seed: int, counter: int) -> int:
    ss = np.random.SeedSequence(entropy=(session_seed & 0xFFFFFFFFFFFFFFFF, counter))
    return int(ss.generate_state(1, np.uint64)[0])


class Session:
    """One interpreter instance: symbol tables are per-run, while the lineage
    store, reuse cache, statistics, and rand counter persist across runs."""

    def __init__(self, threads: int | None = None,
                 cache_bytes: int = DEFAULT_CAPACITY_BYTES,
                 lineage: str = "none", seed: int = 0,
                 rewrites: C.Rewrites | None = None,
                 cost_floor: float | None = None,
                 dedup: bool = True, echo: bool = True,
                 load_builtins: bool = True):
        if lineage not in LINEAGE_MODES:
            raise ValueError(f"lineage mode must be one of {LINEAGE_MODES}")
        if threads is not None:
            kernels.set_num_threads(threads)
        self.mode = lineage
        self.seed = int(seed)
        self.rewrites = rewrites if rewrites is not None else C.Rewrites()
        self.dedup = dedup
        self.echo = echo
        self.store = L.LineageStore() if lineage != "none" else None
        if lineage in ("reuse_full", "reuse_partial"):
            if cost_floor is None:
                self.cache = LineageCache(cache_bytes)
            else:
                self.cache = LineageCache(cache_bytes, cost_floor=cost_floor)
        else:
            self.cache = None
        self.stats = ExecStats()
        self.prints: list[str] = []
        self.program: C.CompiledProgram | None = None
        self.nvargs: dict = {}
        self._builtins = builtin_functions() if load_builtins else ()
        self._rand_counter = 0
        self._run_ordinal = 0
        self._rec: L.LoopRecorder | None = None
        self._rec_env: dict | None = None
        self._depth = 0
        self._fed_handles: list = []
        self._last_env: dict = {}
        self._last_lin: dict = {}

    # ------------------------------------------------------------------ API
    def run(self, script_text: str, nvargs: dict | None = None,
            inputs: dict | None = None, keep=()) -> dict:
        """Parse, compile, and execute a script; returns the final bindings."""
        program = P.parse(script_text)
        self.program = C.compile_program(program, keep=tuple(keep),
                                         rewrites=self.rewrites,
                                         extra_functions=self._builtins)
        self.nvargs = dict(nvargs or {})
        self._run_ordinal += 1
        env: dict = {}
        lin: dict = {}
        for name, value in (inputs or {}).items():
            if isinstance(value, (bool, int, float, str)):
                value = Scalar.of(value)
            env[name] = value
            if self.store is not None:
                lin[name] = self._input_lineage(name, value)
        self._exec_blocks(self.program.main, env, lin)
        self._last_env, self._last_lin = env, lin
        return {k: v for k, v in env.items() if not k.startswith("%")}

    def lineage_of(self, name: str):
        return self._last_lin.get(name)

    def lineage_text(self, names=None) -> str:
        """Serialized lineage of the last run's surviving bindings."""
        roots = [(k, v) for k, v in sorted(self._last_lin.items())
                 if not k.startswith("%") and (names is None or k in names)
                 and isinstance(v, L.LineageItem) and not isinstance(v, L.Stub)]
        return L.serialize(roots)

    def close(self) -> None:
        for f in self._fed_handles:
            f.close()
        self._fed_handles.clear()

    # ------------------------------------------------------------ internals
    def _input_lineage(self, name: str, value):
        if isinstance(value, Scalar):
            return self.store.literal(value)
        if isinstance(value, (BasicTensorBlock, DataTensorBlock)):
            return self.store.input_leaf(name, meta_dims=value.dims,
                                         fingerprint=_fingerprint(value))
        if isinstance(value, federated.FederatedTensor):
            return self.store.input_leaf(name, meta_dims=value.dims,
                                         fingerprint=f"fed{value.dims}")
        raise ScriptRuntimeError(f"unsupported input type for {name!r}")

    @property
    def _recording(self) -> bool:
        return self._rec is not None and not self._rec.fallback

    def _get(self, env: dict, name: str, line: int):
        try:
            return env[name]
        except KeyError:
            # inlined locals carry a "fname.." prefix; report the source name
            shown = name.rsplit("..", 1)[-1]
            raise ScriptRuntimeError(f"undefined variable {shown!r}", line) from None

    def _truthy(self, value, line: int) -> bool:
        if isinstance(value, Scalar):
            return value.as_bool()
        if isinstance(value, BasicTensorBlock) and value.cells == 1:
            return bool(value.to_array().reshape(-1)[0] != 0)
        raise ScriptRuntimeError("condition must be a scalar", line)

    def _int(self, value, line: int) -> int:
        if isinstance(value, BasicTensorBlock) and value.cells == 1:
            value = Scalar.of(value.to_array().reshape(-1)[0].item())
        if not isinstance(value, Scalar):
            raise ScriptRuntimeError("integer scalar expected", line)
        try:
            return value.as_int()
        except LinealError as ex:
            raise ScriptRuntimeError(str(ex), line) from None

    # ------------------------------------------------------- block execution
    def _exec_blocks(self, blocks, env: dict, lin: dict) -> None:
        for b in blocks:
            if isinstance(b, C.Basic):
                for ins in b.instrs:
                    self._exec_instr(ins, env, lin)
            elif isinstance(b, C.CIf):
                self._exec_blocks(b.cond_code, env, lin)
                taken = self._truthy(self._get(env, b.cond_var, b.line), b.line)
                if self._recording:
                    self._rec.branch(taken)
                self._exec_blocks(b.then if taken else b.els, env, lin)
            elif isinstance(b, C.CFor):
                self._run_for(b, env, lin)
            elif isinstance(b, C.CWhile):
                self._run_while(b, env, lin)
            else:
                raise TypeError(type(b).__name__)

    def _run_while(self, b: C.CWhile, env: dict, lin: dict) -> None:
        while True:
            self._exec_blocks(b.cond_code, env, lin)
            if not self._truthy(self._get(env, b.cond_var, b.line), b.line):
                return
            self._exec_blocks(b.body, env, lin)

    def _run_for(self, b: C.CFor, env: dict, lin: dict) -> None:
        # bounds evaluate once, before the first iteration
        self._exec_blocks(b.start_code, env, lin)
        self._exec_blocks(b.stop_code, env, lin)
        lo = self._int(self._get(env, b.start_var, b.line), b.line)
        hi = self._int(self._get(env, b.stop_var, b.line), b.line)
        step = 1 if lo <= hi else -1
        rec = None
        if self.store is not None and self.dedup and b.innermost \
                and self._rec is None:
            rec = L.LoopRecorder(self.store, f"{self._run_ordinal}.{b.loop_id}")
        for i in range(lo, hi + step, step):
            iv = Scalar(ValueType.INT64, i)
            env[b.var] = iv
            lit = self.store.literal(iv) if self.store is not None else None
            if lit is not None:
                lin[b.var] = lit
            if rec is not None and not rec.fallback:
                rec.begin_iteration()
                rec.note_write(b.var, lit)
                self._rec, self._rec_env = rec, env
                try:
                    self._exec_blocks(b.body, env, lin)
                finally:
                    self._rec, self._rec_env = None, None
                path_node, stubs = rec.end_iteration()
                if path_node is not None:
                    for var, stub in stubs.items():
                        lin[var] = stub
                else:
                    self._swap_stubs(lin)
            else:
                self._exec_blocks(b.body, env, lin)
        if rec is not None:
            self._swap_stubs(lin)

    def _swap_stubs(self, lin: dict) -> None:
        """Replace loop-write stubs by registered projections of their
        PathNode, keeping the post-loop lineage serializable."""
        for var, item in list(lin.items()):
            if isinstance(item, L.Stub):
                pn, name = item.source
                lin[var] = self.store.instruction("PROJ", [pn], payload=name,
                                                  meta_dims=item.meta_dims)

    # -------------------------------------------------- instruction pipeline
    def _exec_instr(self, ins: C.Instr, env: dict, lin: dict) -> None:
        op = ins.opcode
        try:
            if op == "lit":
                s = ins.literals[0]
                env[ins.outputs[0]] = s
                self._note_alias(env, lin, ins.outputs[0],
                                 self.store.literal(s) if self.store else None)
                return
            if op == "nvarg":
                value = self._nvarg_value(ins.literals[0], ins.line)
                env[ins.outputs[0]] = value
                node = None
                if self.store is not None:
                    node = (self.store.literal(value) if isinstance(value, Scalar)
                            else self._input_lineage(f"${ins.literals[0]}", value))
                self._note_alias(env, lin, ins.outputs[0], node)
                return
            if op == "assign":
                env[ins.outputs[0]] = self._get(env, ins.inputs[0], ins.line)
                self._note_alias(env, lin, ins.outputs[0], lin.get(ins.inputs[0]))
                return
            if op == "fcall":
                self._exec_fcall(ins, env, lin)
                return
            if op == "genData":
                self._exec_gendata(ins, env, lin)
                return

            args = [self._get(env, name, ins.line) for name in ins.inputs]
            seed_val = None
            if op == "rand":
                seed_val = self._resolve_rand_seed(ins, args)
            node = None
            if self.store is not None:
                node = self._build_lineage(ins, args, lin, seed_val)
            if self.cache is not None and node is not None and op in CACHEABLE:
                hit = self.cache.probe(node.digest, op)
                if hit is not None:
                    self._bind(env, lin, ins.outputs[0], hit, node)
                    return
                if self.mode == "reuse_partial" and op in ("tsmm", "matmul"):
                    plan = try_partial(self.cache, op, node, args)
                    if plan is not None:
                        self.cache.pin(plan.cached.values())
                        t0 = time.perf_counter()
                        try:
                            value = execute_plan(plan, self.cache, self._plan_exec)
                        finally:
                            self.cache.unpin(plan.cached.values())
                        dt = time.perf_counter() - t0
                        self.cache.put(node.digest, value,
                                       max(dt, _modeled_cost(op, args, value)))
                        self._bind(env, lin, ins.outputs[0], value, node)
                        return
            t0 = time.perf_counter()
            value = self._run_op(op, ins, args, env, seed_val)
            dt = time.perf_counter() - t0
            self.stats.count(op, dt)
            if not ins.outputs:
                return
            if self.cache is not None and node is not None and op in CACHEABLE \
                    and isinstance(value, (BasicTensorBlock, Scalar)):
                self.cache.put(node.digest, value,
                               max(dt, _modeled_cost(op, args, value)))
            self._bind(env, lin, ins.outputs[0], value, node)
        except ScriptRuntimeError:
            raise
        except LinealError as ex:
            raise ScriptRuntimeError(str(ex), ins.line) from ex

    def _bind(self, env: dict, lin: dict, name: str, value, node) -> None:
        env[name] = value
        if node is None:
            return
        if isinstance(value, (BasicTensorBlock, DataTensorBlock)) \
                or isinstance(value, federated.FederatedTensor):
            node.meta_dims = tuple(value.dims)
        lin[name] = node
        rec = self._rec
        if rec is not None and not rec.fallback:
            rec.observe(node, out_var=name if env is self._rec_env else None)

    def _note_alias(self, env: dict, lin: dict, name: str, node) -> None:
        if node is None:
            return
        lin[name] = node
        rec = self._rec
        if rec is not None and not rec.fallback and env is self._rec_env:
            rec.note_write(name, node)

    # ------------------------------------------------------------- lineage
    def _build_lineage(self, ins: C.Instr, args, lin: dict, seed_val):
        op = ins.opcode
        if op in ("print", "write"):
            return None
        register = not self._recording
        if op == "read":
            path = args[0].value if isinstance(args[0], Scalar) else str(args[0])
            return self.store.input_leaf(f"file:{path}")
        children = []
        for name in ins.inputs:
            child = lin.get(name)
            if child is None:
                raise ScriptRuntimeError(
                    f"no lineage recorded for {name!r}", ins.line)
            children.append(child)
        payload = ""
        if op in ("rightindex", "leftindex"):
            payload = ",".join(ins.literals[0])
        elif op == "rand":
            keys = ins.literals[0]
            children = [self.store.seed_leaf(seed_val)] + [
                c for c, k in zip(children, keys) if k != "seed"]
            payload = ",".join(k for k in keys if k != "seed")
        return self.store.instruction(op, children, payload=payload,
                                      register=register)

    # ------------------------------------------------------ special opcodes
    def _resolve_rand_seed(self, ins: C.Instr, args) -> int:
        keys = ins.literals[0]
        if "seed" in keys:
            return self._int(args[list(keys).index("seed")], ins.line)
        self._rand_counter += 1
        return _derive_seed(self.seed, self._rand_counter)

    def _exec_gendata(self, ins: C.Instr, env: dict, lin: dict) -> None:
        args = [self._get(env, name, ins.line) for name in ins.inputs]
        nodes = (None, None)
        if self.store is not None:
            register = not self._recording
            children = [lin[name] for name in ins.inputs]
            nodes = tuple(self.store.instruction("genData", children,
                                                 payload=tag, register=register)
                          for tag in ("X", "y"))
        if self.cache is not None and nodes[0] is not None:
            hx = self.cache.probe(nodes[0].digest, "genData")
            hy = self.cache.probe(nodes[1].digest, "genData")
            if hx is not None and hy is not None:
                self._bind(env, lin, ins.outputs[0], hx, nodes[0])
                self._bind(env, lin, ins.outputs[1], hy, nodes[1])
                return
        m = self._int(args[0], ins.line)
        n = self._int(args[1], ins.line)
        sparsity = args[2].as_float() if len(args) > 2 else 1.0
        seed = self._int(args[3], ins.line) if len(args) > 3 else 0
        t0 = time.perf_counter()
        X, y = gen_data(m, n, sparsity, seed)
        dt = time.perf_counter() - t0
        self.stats.count("genData", dt)
        if self.cache is not None and nodes[0] is not None:
            self.cache.put(nodes[0].digest, X, max(dt, X.cells / _NOMINAL_FLOPS))
            self.cache.put(nodes[1].digest, y, max(dt, y.cells / _NOMINAL_FLOPS))
        self._bind(env, lin, ins.outputs[0], X, nodes[0])
        self._bind(env, lin, ins.outputs[1], y, nodes[1])

    def _exec_fcall(self, ins: C.Instr, env: dict, lin: dict) -> None:
        fname, order = ins.literals
        fn = self.program.functions.get(fname)
        if fn is None:
            raise ScriptRuntimeError(f"unknown function {fname!r}", ins.line)
        if self._depth >= 64:
            raise ScriptRuntimeError(f"call depth exceeded in {fname}", ins.line)
        fenv: dict = {}
        flin: dict = {}
        for pname, argname in zip(order, ins.inputs):
            fenv[pname] = self._get(env, argname, ins.line)
            got = lin.get(argname)
            if got is not None:
                flin[pname] = got
        for pname in fn.params:
            if pname not in fenv:
                blocks, var = fn.defaults[pname]
                self._exec_blocks(blocks, fenv, flin)
                fenv[pname] = fenv[var]
                if var in flin:
                    flin[pname] = flin[var]
        self._depth += 1
        try:
            self._exec_blocks(fn.blocks, fenv, flin)
        finally:
            self._depth -= 1
        for target, out in zip(ins.outputs, fn.outs):
            if out not in fenv:
                raise ScriptRuntimeError(
                    f"{fname} did not assign output {out!r}", ins.line)
            env[target] = fenv[out]
            self._note_alias(env, lin, target, flin.get(out))

    # ------------------------------------------------------------ kernels
    def _plan_exec(self, opcode: str, *args):
        """Kernel callback for compensation plans; fresh sub-computations
        count in the statistics exactly like compiled instructions."""
        t0 = time.perf_counter()
        if opcode == "rightindex":
            value = kernels.slice_block(args[0], list(args[1]))
        elif opcode == "matmul":
            value = kernels.matmul(args[0], args[1])
        elif opcode == "tsmm":
            value = kernels.tsmm(args[0])
        elif opcode == "transpose":
            value = kernels.transpose(args[0])
        elif opcode == "add":
            opcode = "+"
            value = kernels.elementwise("+", args[0], args[1])
        elif opcode in ("cbind", "rbind"):
            value = kernels.bind("cols" if opcode == "cbind" else "rows", list(args))
        else:
            raise ValueError(f"plan step {opcode!r} not executable")
        self.stats.count(opcode, time.perf_counter() - t0)
        return value

    def _localize(self, value, op: str):
        if isinstance(value, federated.FederatedTensor):
            self.stats.fed_collects += 1
            warnings.warn(f"{op} is not federated; collecting the operand",
                          RuntimeWarning, stacklevel=3)
            return federated.collect(value)
        return value

    def _run_op(self, op: str, ins: C.Instr, args, env: dict, seed_val):
        line = ins.line

        if op in _EW or op in _CMP or op in _LOGIC:
            a, b = args
            if isinstance(a, Scalar) and isinstance(b, Scalar):
                return self._scalar_arith(op, a, b, line)
            a, b = self._localize(a, op), self._localize(b, op)
            if op in _LOGIC:
                raise ScriptRuntimeError(f"{op} requires scalar operands", line)
            if op in _EW:
                return kernels.elementwise(op, a, b)
            return kernels.elementwise_compare(op, a, b)

        if op == "neg":
            v = args[0]
            if isinstance(v, Scalar):
                check_numeric(v.vtype, "unary minus")
                if v.vtype in (ValueType.INT64, ValueType.INT32, ValueType.BOOLEAN):
                    return Scalar(ValueType.INT64, -int(v.value))
                return Scalar(ValueType.FP64, -float(v.value))
            return kernels.ew_unary("uminus", self._localize(v, op))
        if op == "not":
            v = args[0]
            if isinstance(v, Scalar):
                return Scalar(ValueType.BOOLEAN, not v.as_bool())
            return kernels.ew_unary("not", self._localize(v, op))

        if op == "matmul":
            return self._matmul(args[0], args[1], line)
        if op == "tsmm":
            return kernels.tsmm(self._localize(args[0], op))
        if op == "transpose":
            return kernels.transpose(self._localize(args[0], op))
        if op == "solve":
            return kernels.solve(self._localize(args[0], op),
                                 self._localize(args[1], op))
        if op in ("cbind", "rbind"):
            parts = [self._localize(a, op) for a in args]
            return kernels.bind("cols" if op == "cbind" else "rows", parts)
        if op == "rightindex":
            return self._rightindex(ins, args, line)
        if op == "leftindex":
            return self._leftindex(ins, args, line)
        if op in _AGG:
            return self._aggregate(op, args[0], line)
        if op in ("min2", "max2"):
            a, b = args
            if not (isinstance(a, Scalar) and isinstance(b, Scalar)):
                raise ScriptRuntimeError(
                    f"{op[:-1]} with two arguments requires scalars", line)
            check_numeric(a.vtype, op)
            check_numeric(b.vtype, op)
            keep_int = a.vtype is ValueType.INT64 and b.vtype is ValueType.INT64
            chosen = (min if op == "min2" else max)(a.as_float(), b.as_float())
            return Scalar(ValueType.INT64, int(chosen)) if keep_int \
                else Scalar(ValueType.FP64, chosen)

        if op in ("nrow", "ncol"):
            v = args[0]
            if isinstance(v, (BasicTensorBlock, DataTensorBlock,
                              federated.FederatedTensor)):
                return Scalar(ValueType.INT64, v.dims[0 if op == "nrow" else 1])
            raise ScriptRuntimeError(f"{op} of a scalar", line)
        if op == "fill":
            return kernels.fill(args[0].as_float(), self._int(args[1], line),
                                self._int(args[2], line))
        if op == "diag":
            return kernels.diag(self._localize(args[0], op))
        if op in ("seq", "range"):
            start = args[0].as_float()
            stop = args[1].as_float()
            if len(args) > 2:
                step = args[2].as_float()
            else:
                step = 1.0 if stop >= start else -1.0
            return kernels.seq(start, stop, step)
        if op == "rand":
            return self._rand(ins, args, seed_val, line)
        if op in _UNARY:
            v = args[0]
            if isinstance(v, Scalar):
                check_numeric(v.vtype, op)
                fn = kernels._UNARY_FUNCS[op]
                with np.errstate(divide="ignore", invalid="ignore"):
                    return Scalar(ValueType.FP64, float(fn(np.float64(v.as_float()))))
            return kernels.ew_unary(op, self._localize(v, op))

        if op == "as.scalar":
            v = args[0]
            if isinstance(v, Scalar):
                return v
            if isinstance(v, BasicTensorBlock) and v.cells == 1:
                return Scalar.of(v.to_array().reshape(-1)[0].item())
            raise ScriptRuntimeError("as.scalar requires a 1x1 operand", line)
        if op == "as.matrix":
            v = args[0]
            if isinstance(v, Scalar):
                return kernels.fill(v.as_float(), 1, 1)
            if isinstance(v, DataTensorBlock):
                return kernels.as_matrix(v)
            return self._localize(v, op)
        if op == "as.integer":
            v = args[0]
            if isinstance(v, BasicTensorBlock) and v.cells == 1:
                v = Scalar.of(v.to_array().reshape(-1)[0].item())
            check_numeric(v.vtype, op)
            return Scalar(ValueType.INT64, int(float(v.value)))
        if op == "as.double":
            v = args[0]
            if isinstance(v, BasicTensorBlock) and v.cells == 1:
                v = Scalar.of(v.to_array().reshape(-1)[0].item())
            return Scalar(ValueType.FP64, v.as_float())

        if op == "toString":
            return Scalar(ValueType.STRING, self._format_value(args[0]))
        if op == "print":
            text = self._format_value(args[0])
            self.prints.append(text)
            if self.echo:
                print(text)
            return None
        if op == "read":
            path = args[0]
            if not (isinstance(path, Scalar) and path.vtype is ValueType.STRING):
                raise ScriptRuntimeError("read expects a path string", line)
            value, nbytes = tensorio.read_any(path.value)
            self.stats.bytes_read += nbytes
            return value
        if op == "write":
            if len(args) < 2:
                raise ScriptRuntimeError("write expects (value, path)", line)
            path = args[1]
            if not (isinstance(path, Scalar) and path.vtype is ValueType.STRING):
                raise ScriptRuntimeError("write expects a path string", line)
            named = {k: self._get(env, v, line) for k, v in ins.literals}
            fmt = named.get("format")
            fmt = fmt.value if isinstance(fmt, Scalar) else "csv"
            nbytes = tensorio.write_any(args[0], path.value, fmt)
            self.stats.bytes_written += nbytes
            return None
        if op == "detectSchema":
            return detect_schema(args[0])
        if op == "fed_init":
            return self._fed_init(args, line)
        if op == "collect":
            v = args[0]
            if isinstance(v, federated.FederatedTensor):
                return federated.collect(v)
            return v
        raise ScriptRuntimeError(f"unsupported operation {op!r}", line)

    # ------------------------------------------------------------ operands
    def _scalar_arith(self, op: str, a: Scalar, b: Scalar, line: int) -> Scalar:
        if op in _LOGIC:
            av, bv = a.as_bool(), b.as_bool()
            return Scalar(ValueType.BOOLEAN, (av and bv) if op == "&" else (av or bv))
        if op in _CMP:
            if a.vtype is ValueType.STRING or b.vtype is ValueType.STRING:
                if a.vtype is not b.vtype or op not in ("==", "!="):
                    raise ScriptRuntimeError(
                        f"{op} not defined for these operand types", line)
                eq = a.value == b.value
                return Scalar(ValueType.BOOLEAN, eq if op == "==" else not eq)
            fn = {"==": lambda x, y: x == y, "!=": lambda x, y: x != y,
                  "<": lambda x, y: x < y, "<=": lambda x, y: x <= y,
                  ">": lambda x, y: x > y, ">=": lambda x, y: x >= y}[op]
            return Scalar(ValueType.BOOLEAN, fn(a.as_float(), b.as_float()))
        if op == "+" and (a.vtype is ValueType.STRING or b.vtype is ValueType.STRING):
            return Scalar(ValueType.STRING,
                          self._format_value(a) + self._format_value(b))
        check_numeric(a.vtype, op)
        check_numeric(b.vtype, op)
        int_types = (ValueType.INT64, ValueType.INT32, ValueType.BOOLEAN)
        both_int = a.vtype in int_types and b.vtype in int_types
        if op == "/":
            with np.errstate(divide="ignore", invalid="ignore"):
                return Scalar(ValueType.FP64,
                              float(np.divide(a.as_float(), b.as_float())))
        if op == "^":
            with np.errstate(over="ignore", invalid="ignore"):
                return Scalar(ValueType.FP64,
                              float(np.power(a.as_float(), b.as_float())))
        if both_int:
            av, bv = int(a.value), int(b.value)
            out = av + bv if op == "+" else av - bv if op == "-" else av * bv
            return Scalar(ValueType.INT64, out)
        av, bv = a.as_float(), b.as_float()
        out = av + bv if op == "+" else av - bv if op == "-" else av * bv
        return Scalar(ValueType.FP64, out)

    def _matmul(self, a, b, line: int):
        if isinstance(a, federated.FederatedTensor) \
                and isinstance(b, BasicTensorBlock):
            if b.rank == 2 and b.dims[1] == 1 and b.dims[0] == a.dims[1]:
                return federated.fed_matvec(a, b)
            a = self._localize(a, "matmul")
        elif isinstance(b, federated.FederatedTensor) \
                and isinstance(a, BasicTensorBlock):
            if a.rank == 2 and a.dims[0] == 1 and a.dims[1] == b.dims[0]:
                return federated.fed_vecmat(kernels.transpose(a), b)
            b = self._localize(b, "matmul")
        else:
            a = self._localize(a, "matmul")
            b = self._localize(b, "matmul")
        return kernels.matmul(a, b)

    def _aggregate(self, op: str, v, line: int):
        if isinstance(v, federated.FederatedTensor):
            if op in ("sum", "colSums", "rowSums"):
                return federated.fed_aggregate(op, v)
            v = self._localize(v, op)
        if isinstance(v, Scalar):
            if op in ("sum", "mean", "min", "max"):
                return Scalar(ValueType.FP64, v.as_float())
            raise ScriptRuntimeError(f"{op} of a scalar", line)
        return kernels.aggregate(op, v)

    def _ranges(self, spec, bounds, rank: int, line: int):
        if len(spec) != rank:
            raise ScriptRuntimeError(
                f"{len(spec)} subscripts for a rank-{rank} value", line)
        ranges, i = [], 0
        for s in spec:
            if s == "all":
                ranges.append(None)
            elif s == "pt":
                p = self._int(bounds[i], line)
                i += 1
                if p < 1:
                    raise ScriptRuntimeError(f"index {p} below 1", line)
                ranges.append((p - 1, p))
            else:
                lo = self._int(bounds[i], line)
                hi = self._int(bounds[i + 1], line)
                i += 2
                if lo < 1:
                    raise ScriptRuntimeError(f"index {lo} below 1", line)
                ranges.append((lo - 1, hi))
        return ranges

    def _rightindex(self, ins: C.Instr, args, line: int):
        base = self._localize(args[0], "indexing")
        if not isinstance(base, BasicTensorBlock):
            raise ScriptRuntimeError("indexing requires a tensor", line)
        ranges = self._ranges(ins.literals[0], args[1:], base.rank, line)
        return kernels.slice_block(base, ranges)

    def _leftindex(self, ins: C.Instr, args, line: int):
        base = self._localize(args[0], "indexed assignment")
        if not isinstance(base, BasicTensorBlock):
            raise ScriptRuntimeError("indexed assignment requires a tensor", line)
        ranges = self._ranges(ins.literals[0], args[2:], base.rank, line)
        value = args[1]
        if isinstance(value, Scalar):
            extents = [(hi - lo) if r is not None else base.dims[d]
                       for d, r in enumerate(ranges)
                       for lo, hi in [(r if r is not None else (0, base.dims[d]))]]
            value = kernels.fill(value.as_float(), extents[0], extents[1])
        return kernels.left_index(base, value, ranges)

    def _rand(self, ins: C.Instr, args, seed_val: int, line: int):
        keys = list(ins.literals[0])
        named = dict(zip(keys, args))
        rows = self._int(named["rows"], line) if "rows" in named else 1
        cols = self._int(named["cols"], line) if "cols" in named else 1
        vmin = named["min"].as_float() if "min" in named else 0.0
        vmax = named["max"].as_float() if "max" in named else 1.0
        sparsity = named["sparsity"].as_float() if "sparsity" in named else 1.0
        return kernels.rand_block(rows, cols, vmin, vmax, sparsity, seed_val)

    def _fed_init(self, args, line: int):
        if len(args) < 2:
            raise ScriptRuntimeError("fed_init expects (tensor, endpoints)", line)
        block, eps = args[0], args[1]
        if not isinstance(block, BasicTensorBlock):
            raise ScriptRuntimeError("fed_init requires a local tensor", line)
        if not (isinstance(eps, Scalar) and eps.vtype is ValueType.STRING):
            raise ScriptRuntimeError(
                'fed_init endpoints must be a "host:port,host:port" string', line)
        endpoints = [e.strip() for e in eps.value.split(",") if e.strip()]
        if not endpoints:
            raise ScriptRuntimeError("fed_init got an empty endpoint list", line)
        splits = None
        if len(args) > 2 and isinstance(args[2], Scalar):
            splits = [int(s) for s in str(args[2].value).split(",") if s.strip()]
        fed = federated.distribute(block, endpoints, splits=splits)
        self._fed_handles.append(fed)
        return fed

    def _nvarg_value(self, name: str, line: int):
        if name not in self.nvargs:
            raise ScriptRuntimeError(f"missing -nvargs value for ${name}", line)
        v = self.nvargs[name]
        if isinstance(v, (Scalar, BasicTensorBlock, DataTensorBlock,
                          federated.FederatedTensor)):
            return v
        if isinstance(v, bool):
            return Scalar(ValueType.BOOLEAN, v)
        if isinstance(v, (int, np.integer)):
            return Scalar(ValueType.INT64, int(v))
        if isinstance(v, float):
            return Scalar(ValueType.FP64, float(v))
        s = str(v)
        if s.upper() in ("TRUE", "FALSE"):
            return Scalar(ValueType.BOOLEAN, s.upper() == "TRUE")
        try:
            if s.strip().lstrip("+-").isdigit():
                return Scalar(ValueType.INT64, int(s))
        except ValueError:
            pass
        try:
            return Scalar(ValueType.FP64, float(s))
        except ValueError:
            return Scalar(ValueType.STRING, s)

    # ---------------------------------------------------------- formatting
    def _format_value(self, v) -> str:
        if isinstance(v, Scalar):
            if v.vtype is ValueType.STRING:
                return v.value
            if v.vtype is ValueType.BOOLEAN:
                return "TRUE" if v.value else "FALSE"
            if v.vtype in (ValueType.INT64, ValueType.INT32):
                return str(v.value)
            return f"{v.value:.6g}"
        if isinstance(v, BasicTensorBlock):
            if v.rank != 2:
                return f"<tensor {'x'.join(str(d) for d in v.dims)}>"
            arr = v.to_array()
            rows = []
            for i in range(v.dims[0]):
                rows.append(" ".join(self._format_cell(arr[i, j])
                                     for j in range(v.dims[1])))
            return "\n".join(rows)
        if isinstance(v, DataTensorBlock):
            rows = []
            for i in range(v.dims[0]):
                rows.append(" ".join(str(v.cell(i, j)) for j in range(v.dims[1])))
            return "\n".join(rows)
        if isinstance(v, federated.FederatedTensor):
            return f"<federated {'x'.join(str(d) for d in v.dims)}>"
        return str(v)

    @staticmethod
    def _format_cell(x) -> str:
        if isinstance(x, (np.floating, float)):
            return f"{float(x):.6g}"
        return str(x)
