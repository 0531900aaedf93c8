"""Lineage-keyed reuse cache: full reuse, partial-reuse plans, eviction.

Values are keyed by the 128-bit digest of the lineage that produced them.
Eviction removes unpinned entries in ascending compute_cost/size order (LRU
tiebreak).  Partial reuse pattern-matches an instruction's output lineage
against three fixed rules and, on a match, builds a compensation plan that
combines cached operands with freshly computed sub-tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from .blocks import BasicTensorBlock
from .lineage import LineageItem, _hash
from .vtypes import Scalar

DEFAULT_CAPACITY_BYTES = 256 * 1024 * 1024

# values cheaper than this (seconds of compute) are not worth caching
COST_FLOOR_SECONDS = 1e-3

_SCALAR_BYTES = 16


def digest_of(opcode: str, children: list[bytes], payload: str = "") -> bytes:
    """Digest of a hypothetical node, for probing without building lineage."""
    return _hash(opcode, payload, children)


def _value_bytes(value) -> int:
    if isinstance(value, BasicTensorBlock):
        return value.size_bytes()
    if isinstance(value, Scalar):
        return _SCALAR_BYTES
    raise TypeError(f"uncacheable value type {type(value).__name__}")


class CacheEntry:
    __slots__ = ("digest", "value", "size_bytes", "compute_cost", "last_used", "pinned")

    def __init__(self, digest: bytes, value, size_bytes: int, compute_cost: float):
        self.digest = digest
        self.value = value
        self.size_bytes = size_bytes
        self.compute_cost = compute_cost
        self.last_used = 0
        self.pinned = False

    def score(self) -> float:
        return self.compute_cost / max(self.size_bytes, 1)


class LineageCache:
    """Session-scoped cache of intermediates keyed by lineage digest."""

    def __init__(self, capacity_bytes: int = DEFAULT_CAPACITY_BYTES,
                 cost_floor: float = COST_FLOOR_SECONDS):
        self.capacity = int(capacity_bytes)
        self.cost_floor = float(cost_floor)
        self.entries: dict[bytes, CacheEntry] = {}
        self.bytes_resident = 0
        self._clock = 0
        self.hits: dict[str, int] = {}
        self.misses = 0
        self.puts = 0
        self.evictions = 0
        self.rejected_cheap = 0
        self.rejected_oversize = 0
        self.partial_plans = 0
        self.chained_partials = 0
        self._plan_products: set[bytes] = set()

    # -------------------------------------------------------------- basics
    def probe(self, digest: bytes, opcode: str = "?"):
        """Return the cached value or None; a hit refreshes recency."""
        entry = self.entries.get(digest)
        if entry is None:
            self.misses += 1
            return None
        self._clock += 1
        entry.last_used = self._clock
        self.hits[opcode] = self.hits.get(opcode, 0) + 1
        return entry.value

    def put(self, digest: bytes, value, compute_cost: float) -> bool:
        """Best-effort admission; returns True when the value was stored."""
        if digest in self.entries:
            return True
        if compute_cost < self.cost_floor:
            self.rejected_cheap += 1
            return False
        size = _value_bytes(value)
        if size > self.capacity:
            self.rejected_oversize += 1
            return False
        if self.bytes_resident + size > self.capacity:
            self._evict(self.bytes_resident + size - self.capacity)
            if self.bytes_resident + size > self.capacity:
                return False  # everything left is pinned
        entry = CacheEntry(digest, value, size, compute_cost)
        self._clock += 1
        entry.last_used = self._clock
        self.entries[digest] = entry
        self.bytes_resident += size
        self.puts += 1
        return True

    def _evict(self, bytes_needed: int) -> None:
        victims = sorted(
            (e for e in self.entries.values() if not e.pinned),
            key=lambda e: (e.score(), e.last_used))
        freed = 0
        for e in victims:
            if freed >= bytes_needed:
                break
            del self.entries[e.digest]
            self.bytes_resident -= e.size_bytes
            freed += e.size_bytes
            self.evictions += 1

    def pin(self, digests) -> None:
        for d in digests:
            entry = self.entries.get(d)
            if entry is not None:
                entry.pinned = True

    def unpin(self, digests) -> None:
        for d in digests:
            entry = self.entries.get(d)
            if entry is not None:
                entry.pinned = False

    def stats_dict(self) -> dict:
        return {
            "hits": dict(self.hits),
            "misses": self.misses,
            "puts": self.puts,
            "evictions": self.evictions,
            "partial_plans": self.partial_plans,
            "chained_partials": self.chained_partials,
            "bytes_resident": self.bytes_resident,
        }


# --------------------------------------------------------------- partial reuse

@dataclass
class CompensationPlan:
    """Recipe reproducing an instruction's output from cached plus fresh parts."""

    rule: str
    digest: bytes                      # original output digest
    cached: dict[str, bytes]           # label -> cached digest (pinned while running)
    steps: dict[str, Any] = field(default_factory=dict)


def _gram_digest(part: LineageItem) -> bytes:
    return digest_of("tsmm", [part.digest])


def try_partial(cache: LineageCache, opcode: str, out: LineageItem,
                input_values: list) -> CompensationPlan | None:
    """Match the output lineage against the partial-reuse rules.

    Returns a plan only when every cached operand it relies on is resident.
    ``input_values`` are the instruction's already-materialized operands.
    """
    if opcode == "tsmm" and len(out.children) == 1:
        c = out.children[0]
        x = input_values[0]
        if c.opcode == "cbind" and len(c.children) == 2:
            return _plan_tsmm_cbind(cache, out, c, x)
        if c.opcode == "rbind" and len(c.children) >= 2:
            return _plan_tsmm_rbind(cache, out, c, x)
    if opcode == "matmul" and len(out.children) == 2:
        t, right = out.children
        if (t.opcode == "transpose" and len(t.children) == 1
                and t.children[0].opcode == "rbind" and right.opcode == "rbind"
                and len(t.children[0].children) == len(right.children) >= 2):
            return _plan_matmul_rbind(cache, out, t.children[0], right, input_values)
    return None


def _plan_tsmm_cbind(cache, out, cbind, x) -> CompensationPlan | None:
    """R1: tsmm(cbind(A, B)) from cached tsmm(A) plus new cross-products."""
    a, b = cbind.children
    if a.meta_dims is None or b.meta_dims is None:
        return None
    wa, wb = a.meta_dims[1], b.meta_dims[1]
    if wa + wb != x.dims[1]:
        return None
    ga = _gram_digest(a)
    if ga not in cache.entries:
        return None
    plan = CompensationPlan("tsmm_cbind", out.digest, {"gram_a": ga})
    plan.steps = {"x": x, "split": wa}
    return plan


def _plan_tsmm_rbind(cache, out, rbind, x) -> CompensationPlan | None:
    """R2: tsmm(rbind(parts)) as the sum of per-part Grams."""
    parts = rbind.children
    offsets, off = [], 0
    for p in parts:
        if p.meta_dims is None:
            return None
        offsets.append((off, off + p.meta_dims[0]))
        off += p.meta_dims[0]
    if off != x.dims[0]:
        return None
    cached = {f"gram_{i}": _gram_digest(p) for i, p in enumerate(parts)
              if _gram_digest(p) in cache.entries}
    if not cached:
        return None  # nothing to reuse; run the instruction as compiled
    plan = CompensationPlan("tsmm_rbind", out.digest, cached)
    plan.steps = {"x": x, "offsets": offsets,
                  "part_digests": [_gram_digest(p) for p in parts]}
    return plan


def _plan_matmul_rbind(cache, out, left_rbind, right_rbind, input_values) -> CompensationPlan | None:
    """R3: t(rbind(F...)) %*% rbind(G...) as the element-wise sum of part products."""
    fparts, gparts = left_rbind.children, right_rbind.children
    offsets, off = [], 0
    for f, g in zip(fparts, gparts):
        if f.meta_dims is None or g.meta_dims is None:
            return None
        if f.meta_dims[0] != g.meta_dims[0]:
            return None
        offsets.append((off, off + f.meta_dims[0]))
        off += f.meta_dims[0]
    tx, y = input_values
    if off != tx.dims[1] or off != y.dims[0]:
        return None
    digests = [digest_of("matmul", [digest_of("transpose", [f.digest]), g.digest])
               for f, g in zip(fparts, gparts)]
    cached = {f"prod_{i}": d for i, d in enumerate(digests) if d in cache.entries}
    if not cached:
        return None
    plan = CompensationPlan("matmul_rbind", out.digest, cached)
    plan.steps = {"tx": tx, "y": y, "offsets": offsets, "part_digests": digests}
    return plan


def execute_plan(plan: CompensationPlan, cache: LineageCache,
                 exec_fn: Callable[..., Any]):
    """Run a compensation plan; the caller puts the result under plan.digest.

    ``exec_fn(opcode, *operands)`` executes a tensor-core kernel through the
    interpreter's counting wrapper, so fresh sub-computations show up in
    execution statistics exactly like compiled instructions.
    """
    cache.partial_plans += 1
    if any(d in cache._plan_products for d in plan.cached.values()):
        cache.chained_partials += 1
    if plan.rule == "tsmm_cbind":
        x, split = plan.steps["x"], plan.steps["split"]
        g = cache.probe(plan.cached["gram_a"], "tsmm")
        a_val = exec_fn("rightindex", x, (None, (0, split)))
        b_val = exec_fn("rightindex", x, (None, (split, x.dims[1])))
        cross = exec_fn("matmul", exec_fn("transpose", a_val), b_val)
        corner = exec_fn("tsmm", b_val)
        top = exec_fn("cbind", g, cross)
        bottom = exec_fn("cbind", exec_fn("transpose", cross), corner)
        result = exec_fn("rbind", top, bottom)
    elif plan.rule == "tsmm_rbind":
        x = plan.steps["x"]
        result = None
        for (lo, hi), pd in zip(plan.steps["offsets"], plan.steps["part_digests"]):
            part_gram = cache.probe(pd, "tsmm") if pd in cache.entries else None
            if part_gram is None:
                part = exec_fn("rightindex", x, ((lo, hi), None))
                part_gram = exec_fn("tsmm", part)
                if cache.put(pd, part_gram, COST_FLOOR_SECONDS):
                    cache._plan_products.add(pd)
            result = part_gram if result is None else exec_fn("add", result, part_gram)
    elif plan.rule == "matmul_rbind":
        tx, y = plan.steps["tx"], plan.steps["y"]
        result = None
        for (lo, hi), pd in zip(plan.steps["offsets"], plan.steps["part_digests"]):
            prod = cache.probe(pd, "matmul") if pd in cache.entries else None
            if prod is None:
                tf = exec_fn("rightindex", tx, (None, (lo, hi)))
                g = exec_fn("rightindex", y, ((lo, hi), None))
                prod = exec_fn("matmul", tf, g)
                if cache.put(pd, prod, COST_FLOOR_SECONDS):
                    cache._plan_products.add(pd)
            result = prod if result is None else exec_fn("add", result, prod)
    else:
        raise ValueError(f"unknown plan rule {plan.rule}")
    cache._plan_products.add(plan.digest)
    return result
