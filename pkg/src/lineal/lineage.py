"""Lineage DAGs: tracing, stable 128-bit hashing, serialization, loop dedup.

Every executed instruction yields one lineage node whose digest depends only
on (opcode, payload, ordered child digests), so equal computations hash equal
across runs and platforms.  Inside loops the interpreter records one trace
template per control-flow path and one PathNode per iteration; expanding a
PathNode against its template reproduces the eager per-iteration digests.
"""
from __future__ import annotations

import hashlib
import re

from .errors import LinealError
from .vtypes import Scalar, ValueType

_SALT = b"lineal.lineage.v1\x00"

LEAF_OPCODES = ("LIT", "IN", "SEED")

# deduplication gives up on loops with more observed control-flow paths
MAX_DEDUP_PATHS = 8


def _hash(opcode: str, payload: str, child_digests) -> bytes:
    h = hashlib.md5(_SALT)
    h.update(opcode.encode())
    h.update(b"\x1f")
    h.update(payload.encode())
    h.update(b"\x1f")
    for d in child_digests:
        h.update(d)
    return h.digest()


def render_literal(s: Scalar) -> str:
    """Type-faithful literal text: INT64 5 and FP64 5.0 render (and hash) apart."""
    if s.vtype is ValueType.BOOLEAN:
        return "TRUE" if s.value else "FALSE"
    if s.vtype is ValueType.INT64:
        return str(int(s.value))
    if s.vtype is ValueType.INT32:
        return f"{int(s.value)}i32"
    if s.vtype is ValueType.FP32:
        return f"{float(s.value)!r}f32"
    if s.vtype is ValueType.FP64:
        return repr(float(s.value))
    return '"' + str(s.value).replace("\\", "\\\\").replace('"', '\\"') + '"'


class LineageItem:
    """One node of the lineage DAG; immutable once created."""

    __slots__ = ("id", "opcode", "payload", "children", "meta_dims", "_digest")

    def __init__(self, nid: int, opcode: str, payload: str = "", children=()):
        self.id = nid
        self.opcode = opcode
        self.payload = payload
        self.children = tuple(children)
        self.meta_dims = None
        self._digest = None

    @property
    def digest(self) -> bytes:
        if self._digest is None:
            self._digest = _hash(self.opcode, self.payload,
                                 [c.digest for c in self.children])
        return self._digest

    def hexdigest(self) -> str:
        return self.digest.hex()

    @property
    def is_leaf(self) -> bool:
        return not self.children and self.opcode in LEAF_OPCODES

    def __repr__(self) -> str:
        return f"LineageItem#{self.id}({self.opcode} ({self.payload}) {self.digest.hex()[:8]})"


class Stub(LineageItem):
    """Placeholder for a loop-written variable after its iteration ended.

    Carries the eager digest of the dropped per-iteration trace (so cache
    probes keyed by lineage still hit) plus the (PathNode, var) projection
    that can reproduce it by expansion.  Never registered, never serialized;
    replaced by a PROJ node when its loop exits.
    """

    __slots__ = ("source",)

    def __init__(self, nid: int, digest: bytes, source, meta_dims):
        super().__init__(nid, "STUB", "", ())
        self._digest = digest
        self.source = source  # (PathNode, var name)
        self.meta_dims = meta_dims


class PathNode(LineageItem):
    """One registered node per executed loop iteration."""

    __slots__ = ("loop_id", "path_id", "bindings")

    def __init__(self, nid: int, loop_id: str, path_id: int, bindings):
        self.loop_id = loop_id
        self.path_id = path_id
        self.bindings = tuple(bindings)
        children, specs, seen = [], [], {}
        for b in self.bindings:
            if b[0] == "inline":
                specs.append(f"l:{b[1]}:{_escape_spec(b[2])}")
                continue
            item = b[1] if b[0] == "node" else b[1][0]
            ci = seen.get(id(item))
            if ci is None:
                ci = len(children)
                seen[id(item)] = ci
                children.append(item)
            specs.append(f"n{ci}" if b[0] == "node" else f"p{ci}:{b[1][1]}")
        payload = f"{loop_id}|{path_id}|{','.join(specs)}"
        super().__init__(nid, "PATH", payload, children)


def _escape_spec(text: str) -> str:
    return text.replace("\\", "\\\\").replace(",", "\\,").replace("|", "\\|")


class Template:
    """Lineage sub-DAG of one loop path, with ARG placeholders for outside reads."""

    __slots__ = ("loop_id", "path_id", "nodes", "args", "writes")

    def __init__(self, loop_id, path_id, nodes, args, writes):
        self.loop_id = loop_id
        self.path_id = path_id
        self.nodes = nodes          # body instruction nodes, creation order
        self.args = args            # ARG leaf per placeholder slot
        self.writes = writes        # var -> ("tpl", node) | ("arg", k)

    def size(self) -> int:
        return len(self.nodes) + len(self.args)

    def expand(self, binding_digests) -> dict:
        memo: dict = {}

        def dig(n: LineageItem) -> bytes:
            got = memo.get(id(n))
            if got is not None:
                return got
            if n.opcode == "ARG":
                d = binding_digests[int(n.payload)]
            elif not n.children:
                d = n.digest
            else:
                d = _hash(n.opcode, n.payload, [dig(c) for c in n.children])
            memo[id(n)] = d
            return d

        out = {}
        for var, spec in self.writes.items():
            out[var] = binding_digests[spec[1]] if spec[0] == "arg" else dig(spec[1])
        return out


class LineageStore:
    """Per-session node registry, literal/input interning, and dedup state."""

    def __init__(self):
        self._next_id = 0
        self.registered: list[LineageItem] = []
        self._lit_intern: dict = {}
        self._seed_intern: dict = {}
        self._in_intern: dict = {}
        self.templates: dict = {}      # (loop_id, path_id) -> Template
        self._paths: dict = {}         # loop_id -> {signature: path_id}
        self.fallback_loops: set = set()
        self._expand_cache: dict = {}

    # ------------------------------------------------------------ creation
    def _alloc(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def register(self, item: LineageItem) -> LineageItem:
        self.registered.append(item)
        return item

    def node_count(self) -> int:
        return len(self.registered)

    def literal(self, s: Scalar) -> LineageItem:
        """Interned literal leaf; shared constants are not counted as stored nodes."""
        key = (s.vtype, render_literal(s))
        item = self._lit_intern.get(key)
        if item is None:
            item = LineageItem(self._alloc(), "LIT", key[1])
            self._lit_intern[key] = item
        return item

    def seed_leaf(self, seed: int) -> LineageItem:
        item = self._seed_intern.get(seed)
        if item is None:
            item = LineageItem(self._alloc(), "SEED", str(int(seed)))
            self._seed_intern[seed] = item
        return item

    def input_leaf(self, name: str, meta_dims=None, fingerprint: str = "") -> LineageItem:
        payload = f"{name}|{fingerprint}" if fingerprint else name
        item = self._in_intern.get(payload)
        if item is None:
            item = self.register(LineageItem(self._alloc(), "IN", payload))
            self._in_intern[payload] = item
        if meta_dims is not None:
            item.meta_dims = tuple(meta_dims)
        return item

    def instruction(self, opcode: str, children, payload: str = "",
                    register: bool = True, meta_dims=None) -> LineageItem:
        item = LineageItem(self._alloc(), opcode, payload, children)
        if meta_dims is not None:
            item.meta_dims = tuple(meta_dims)
        if register:
            self.register(item)
        return item

    def make_stub(self, digest: bytes, source, meta_dims) -> Stub:
        return Stub(self._alloc(), digest, source, meta_dims)

    # --------------------------------------------------------------- dedup
    def path_id_for(self, loop_id: str, signature) -> int | None:
        """Stable path id per control-flow signature; None once the loop
        exceeds the dedup path budget (callers fall back to eager tracing)."""
        if loop_id in self.fallback_loops:
            return None
        table = self._paths.setdefault(loop_id, {})
        pid = table.get(signature)
        if pid is None:
            if len(table) >= MAX_DEDUP_PATHS:
                self.fallback_loops.add(loop_id)
                return None
            pid = len(table)
            table[signature] = pid
        return pid

    def register_template(self, template: Template) -> None:
        key = (template.loop_id, template.path_id)
        if key in self.templates:
            raise LinealError(f"template for {key} already registered")
        self.templates[key] = template
        for n in template.nodes:
            self.register(n)
        for a in template.args:
            self.register(a)

    def emit_path_node(self, loop_id: str, path_id: int, bindings) -> PathNode:
        if (loop_id, path_id) not in self.templates:
            raise LinealError(f"unknown path {path_id} for loop {loop_id}")
        return self.register(PathNode(self._alloc(), loop_id, path_id, bindings))

    def expand_path(self, path_node: PathNode) -> dict:
        """Reproduce the eager digests of the iteration the PathNode stands for."""
        cached = self._expand_cache.get(id(path_node))
        if cached is not None:
            return cached
        template = self.templates[(path_node.loop_id, path_node.path_id)]
        digests = []
        for b in path_node.bindings:
            if b[0] == "inline":
                digests.append(_hash(b[1], b[2], []))
            elif b[0] == "node":
                digests.append(b[1].digest)
            else:
                pn, var = b[1]
                digests.append(self.expand_path(pn)[var])
        out = template.expand(digests)
        self._expand_cache[id(path_node)] = out
        return out


class LoopRecorder:
    """Observes one loop's iterations, building templates and PathNodes.

    The recorder classifies every operand of every traced body instruction:
    nodes created this iteration become template references, literal/seed
    leaves become inline-bound placeholders (a template never references
    concrete iteration values), and anything outside the iteration becomes a
    positionally bound placeholder.
    """

    def __init__(self, store: LineageStore, loop_id: str):
        self.store = store
        self.loop_id = loop_id
        self.fallback = loop_id in store.fallback_loops

    def begin_iteration(self) -> None:
        self._tpl_map: dict = {}       # id(ephemeral) -> template node
        self._bindings: list = []      # slot -> ("node", item)|("proj", (pn, var))|("inline", op, payload)
        self._observed: list = []      # ephemeral nodes, creation order
        self._signature: list = []
        self._writes: dict = {}        # var -> final ephemeral/outside lineage, first-write order

    def branch(self, outcome: bool) -> None:
        self._signature.append(bool(outcome))

    def _slot(self, child: LineageItem):
        """Return a template reference for one operand: body node or ARG slot.

        Placeholder slots are strictly positional.  Sharing a slot between
        operands that happen to hold the same value (or the same outside
        node) would bake that coincidence into the template and corrupt the
        binding order of later iterations where they differ; one slot per
        occurrence keeps binding lists congruent along a path by
        construction.
        """
        tpl = self._tpl_map.get(id(child))
        if tpl is not None:
            return tpl
        if isinstance(child, Stub):
            spec = ("proj", child.source)
        elif child.opcode in ("LIT", "SEED") and not child.children:
            spec = ("inline", child.opcode, child.payload)
        else:
            spec = ("node", child)
        slot = len(self._bindings)
        self._bindings.append(spec)
        return ("arg", slot)

    def observe(self, node: LineageItem, out_var: str | None = None) -> None:
        refs = [self._slot(c) for c in node.children]
        self._tpl_map[id(node)] = ("node", node.opcode, node.payload, refs)
        self._observed.append(node)
        if out_var is not None:
            self._writes[out_var] = node  # dict keeps first-write order

    def note_write(self, var: str, lineage: LineageItem) -> None:
        """Record an assignment whose lineage is not a new body node (alias)."""
        self._writes[var] = lineage

    def end_iteration(self):
        """Close the iteration: returns (path_node, {var: stub}) or (None, {})
        when the loop fell back to eager tracing."""
        store = self.store
        signature = tuple(self._signature)
        pid = store.path_id_for(self.loop_id, signature)
        if pid is None:
            self.fallback = True
            for n in self._observed:
                store.register(n)
            return None, {}
        # alias writes resolve to placeholder slots like any outside operand;
        # running this every iteration keeps binding order path-deterministic.
        # "%" temps are statement-scoped and can never be read later, so
        # tracking their writes would only widen every PathNode's bindings.
        write_refs = {var: self._slot(node) for var, node in self._writes.items()
                      if not var.startswith("%")}
        key = (self.loop_id, pid)
        if key not in store.templates:
            args = [LineageItem(store._alloc(), "ARG", str(k))
                    for k in range(len(self._bindings))]
            materialized: dict = {}

            def build(ref):
                if ref[0] == "arg":
                    return args[ref[1]]
                got = materialized.get(id(ref))
                if got is None:
                    _, opcode, payload, children = ref
                    got = LineageItem(store._alloc(), opcode, payload,
                                      [build(c) for c in children])
                    materialized[id(ref)] = got
                return got

            nodes = [build(self._tpl_map[id(n)]) for n in self._observed]
            writes = {var: ("arg", ref[1]) if ref[0] == "arg" else ("tpl", build(ref))
                      for var, ref in write_refs.items()}
            store.register_template(Template(self.loop_id, pid, nodes, args, writes))
        path_node = store.emit_path_node(self.loop_id, pid, self._bindings)
        stubs = {}
        for var, node in self._writes.items():
            if var.startswith("%"):
                continue
            if id(node) in self._tpl_map and not isinstance(node, Stub):
                stubs[var] = store.make_stub(node.digest, (path_node, var), node.meta_dims)
        return path_node, stubs


# ------------------------------------------------------------ serialization

def _escape_payload(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n").replace(")", "\\)")


def _unescape_payload(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append("\n" if nxt == "n" else nxt)
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def serialize(root, name: str | None = None) -> str:
    """One node per line, children before parents: `id opcode (payload) [child-ids]`."""
    roots = root if isinstance(root, list) else [(name, root)]
    ids: dict = {}
    lines: list[str] = []

    def visit(item: LineageItem) -> int:
        got = ids.get(id(item))
        if got is not None:
            return got
        child_ids = [visit(c) for c in item.children]
        nid = len(ids)
        ids[id(item)] = nid
        lines.append(f"{nid} {item.opcode} ({_escape_payload(item.payload)}) "
                     f"[{','.join(str(c) for c in child_ids)}]")
        return nid

    notes = []
    for label, item in roots:
        rid = visit(item)
        if label is not None:
            notes.append(f"# root {label} -> {rid}")
    return "\n".join(lines + notes)


_LINE_RE = re.compile(r"^(\d+) (\S+) \((.*)\) \[([0-9,]*)\]$")


def parse(text: str) -> list[LineageItem]:
    """Rebuild an isomorphic DAG; digests of corresponding nodes are equal."""
    items: dict[int, LineageItem] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _LINE_RE.match(line)
        if m is None:
            raise LinealError(f"unparseable lineage line: {line!r}")
        nid = int(m.group(1))
        child_ids = [int(c) for c in m.group(4).split(",") if c]
        try:
            children = [items[c] for c in child_ids]
        except KeyError as missing:
            raise LinealError(f"line {nid} references unknown node {missing}") from None
        items[nid] = LineageItem(nid, m.group(2), _unescape_payload(m.group(3)), children)
    return [items[k] for k in sorted(items)]
