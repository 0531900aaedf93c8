"""Kernel library over tensor blocks.

All numeric kernels promote to FP64 outputs and dispatch dense/sparse paths
by operand layout.  Kernels may partition the leading dimension across a
configurable thread count; every output cell has exactly one writer, and
``sum``/``mean`` combine per-partition results in a fixed order, so results
are reproducible for a fixed configuration.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.linalg.blas import dsyrk

from .blocks import DENSE, SPARSE, BasicTensorBlock, DataTensorBlock
from .errors import ShapeError, SingularMatrixError, ValueTypeError
from .vtypes import Scalar, ValueType, check_numeric

# ----------------------------------------------------------------- config

_num_threads = os.cpu_count() or 1

# Row counts below this execute single-threaded regardless of the setting.
_PARTITION_MIN_ROWS = 2048


def set_num_threads(n: int) -> None:
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads() -> int:
    return _num_threads


def _row_ranges(m: int) -> list[tuple[int, int]]:
    t = min(_num_threads, m)
    if t <= 1 or m < _PARTITION_MIN_ROWS:
        return [(0, m)]
    step = (m + t - 1) // t
    return [(lo, min(lo + step, m)) for lo in range(0, m, step)]


def _run_partitioned(fn, ranges):
    """Run fn(lo, hi) per range, concurrently when more than one range."""
    if len(ranges) == 1:
        return [fn(*ranges[0])]
    with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in ranges]
        return [f.result() for f in futures]


class MaddCounter:
    """Counts scalar multiply-add operations performed by matmul-family kernels."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> int:
        c, self.count = self.count, 0
        return c


MADDS = MaddCounter()


# ------------------------------------------------------------- conversion

def _dense_f64(x: BasicTensorBlock) -> np.ndarray:
    arr = x.to_array()
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


def _is_sparse2(x: BasicTensorBlock) -> bool:
    return x.layout == SPARSE and x.rank == 2


def _wrap(arr: np.ndarray) -> BasicTensorBlock:
    return BasicTensorBlock.from_array(arr, ValueType.FP64)


def _wrap_csr(csr) -> BasicTensorBlock:
    csr = sp.csr_array(csr)
    cells = csr.shape[0] * csr.shape[1]
    if cells == 0 or csr.nnz / cells > 0.4:
        return _wrap(csr.toarray())
    return BasicTensorBlock.from_csr(csr, ValueType.FP64)


def _require_rank2(x: BasicTensorBlock, op: str) -> None:
    if x.rank != 2:
        raise ShapeError(f"{op} requires rank-2 operands, got rank {x.rank}")


# ----------------------------------------------------------------- matmul

def matmul(a: BasicTensorBlock, b: BasicTensorBlock) -> BasicTensorBlock:
    """C = A x B with layout-specific dispatch."""
    check_numeric(a.vtype, "matmul")
    check_numeric(b.vtype, "matmul")
    _require_rank2(a, "matmul")
    _require_rank2(b, "matmul")
    m, k = a.dims
    k2, n = b.dims
    if k != k2:
        raise ShapeError(f"matmul shape mismatch: {a.dims} x {b.dims}")
    sa, sb = _is_sparse2(a), _is_sparse2(b)
    if sa and sb:
        ca, cb = a.csr(), b.csr()
        MADDS.add(int(np.diff(cb.indptr)[ca.indices].sum()) if ca.nnz else 0)
        return _wrap_csr(ca @ cb)
    if sa:
        MADDS.add(a.nnz * n)
        return _wrap(a.csr() @ _dense_f64(b))
    if sb:
        MADDS.add(m * b.nnz)
        return _wrap(_dense_f64(a) @ b.csr())
    MADDS.add(m * k * n)
    da, db = _dense_f64(a), _dense_f64(b)
    ranges = _row_ranges(m)
    if len(ranges) == 1 or k * n < 4096:
        return _wrap(da @ db)
    out = np.empty((m, n), dtype=np.float64)

    def chunk(lo, hi):
        out[lo:hi] = da[lo:hi] @ db

    _run_partitioned(chunk, ranges)
    return _wrap(out)


def tsmm(x: BasicTensorBlock) -> BasicTensorBlock:
    """XtX with symmetry exploitation: the upper triangle is computed and mirrored."""
    check_numeric(x.vtype, "tsmm")
    _require_rank2(x, "tsmm")
    m, n = x.dims
    if _is_sparse2(x):
        csr = x.csr()
        rn = np.diff(csr.indptr)
        MADDS.add(int((rn.astype(np.int64) ** 2).sum()))
        g = (csr.T @ csr).toarray()
    else:
        MADDS.add(m * n * (n + 1) // 2)
        dx = np.ascontiguousarray(_dense_f64(x))
        ranges = _row_ranges(m)
        parts = _run_partitioned(lambda lo, hi: dsyrk(1.0, dx[lo:hi], trans=1), ranges)
        g = parts[0]
        for p in parts[1:]:
            g = g + p
    upper = np.triu(g)
    return _wrap(upper + np.triu(g, 1).T)


def transpose(a: BasicTensorBlock) -> BasicTensorBlock:
    check_numeric(a.vtype, "transpose")
    _require_rank2(a, "transpose")
    if _is_sparse2(a):
        return BasicTensorBlock.from_csr(sp.csr_array(a.csr().T), ValueType.FP64)
    return BasicTensorBlock.from_array(np.ascontiguousarray(a.to_array().T),
                                       ValueType.FP64, force_layout=DENSE)


# ------------------------------------------------------------ elementwise

_EW_OPS = {"+", "-", "*", "/", "^"}


def _broadcastable(adims, bdims) -> bool:
    if adims == bdims:
        return True
    # only the right operand broadcasts, and only as a row or column vector
    if len(adims) == 2 and len(bdims) == 2:
        m, n = adims
        return bdims in ((1, n), (m, 1))
    return False


def elementwise(op: str, a, b) -> BasicTensorBlock:
    """Cell-wise arithmetic; division by zero follows IEEE semantics."""
    if op not in _EW_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if isinstance(a, Scalar) and isinstance(b, Scalar):
        raise TypeError("elementwise requires at least one block operand")
    if isinstance(a, BasicTensorBlock):
        check_numeric(a.vtype, "elementwise")
    if isinstance(b, BasicTensorBlock):
        check_numeric(b.vtype, "elementwise")

    # sparse-preserving fast paths
    if op == "*":
        if isinstance(b, Scalar) and _is_sparse2(a):
            return _wrap_csr(a.csr() * b.as_float())
        if isinstance(a, Scalar) and _is_sparse2(b):
            return _wrap_csr(b.csr() * a.as_float())
        if isinstance(a, BasicTensorBlock) and isinstance(b, BasicTensorBlock) \
                and _is_sparse2(a) and _is_sparse2(b) and a.dims == b.dims:
            return _wrap_csr(a.csr().multiply(b.csr()))

    if isinstance(a, Scalar):
        da: np.ndarray | float = a.as_float()
        out_dims = b.dims
    else:
        da = _dense_f64(a)
        out_dims = a.dims
    if isinstance(b, Scalar):
        db: np.ndarray | float = b.as_float()
    else:
        db = _dense_f64(b)
        if isinstance(a, BasicTensorBlock) and not _broadcastable(a.dims, b.dims):
            raise ShapeError(f"elementwise shape mismatch: {a.dims} vs {b.dims}")

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if op == "+":
            out = da + db
        elif op == "-":
            out = da - db
        elif op == "*":
            out = da * db
        elif op == "/":
            out = da / db
        else:
            out = np.power(da, db)
    out = np.broadcast_to(out, out_dims) if np.shape(out) != tuple(out_dims) else out
    return _wrap(np.array(out, dtype=np.float64))


_CMP_OPS = {"<", "<=", ">", ">=", "==", "!="}


def elementwise_compare(op: str, a, b) -> BasicTensorBlock:
    """Cell-wise comparison producing a 0/1 FP64 block."""
    if op not in _CMP_OPS:
        raise ValueError(f"unknown comparison {op!r}")
    da = a.as_float() if isinstance(a, Scalar) else _dense_f64(a)
    db = b.as_float() if isinstance(b, Scalar) else _dense_f64(b)
    if isinstance(a, BasicTensorBlock) and isinstance(b, BasicTensorBlock) \
            and not _broadcastable(a.dims, b.dims):
        raise ShapeError(f"comparison shape mismatch: {a.dims} vs {b.dims}")
    fn = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal,
          "==": np.equal, "!=": np.not_equal}[op]
    return _wrap(fn(da, db).astype(np.float64))


_UNARY_FUNCS = {
    "uminus": np.negative,
    "abs": np.abs,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "floor": np.floor,
    "ceil": np.ceil,
    "round": np.round,
    "not": lambda v: (v == 0).astype(np.float64),
}


def ew_unary(op: str, a: BasicTensorBlock) -> BasicTensorBlock:
    check_numeric(a.vtype, op)
    fn = _UNARY_FUNCS[op]
    with np.errstate(divide="ignore", invalid="ignore"):
        return _wrap(np.asarray(fn(_dense_f64(a)), dtype=np.float64))


# -------------------------------------------------------------- aggregate

AGG_KINDS = ("sum", "mean", "min", "max", "rowSums", "colSums")


def aggregate(kind: str, a: BasicTensorBlock):
    """Full or per-axis aggregation; returns a Scalar or a vector block."""
    check_numeric(a.vtype, kind)
    if kind not in AGG_KINDS:
        raise ValueError(f"unknown aggregate {kind!r}")
    if kind in ("rowSums", "colSums"):
        _require_rank2(a, kind)
        if _is_sparse2(a):
            axis = 1 if kind == "rowSums" else 0
            v = np.asarray(a.csr().sum(axis=axis), dtype=np.float64)
        else:
            axis = 1 if kind == "rowSums" else 0
            v = a.to_array().astype(np.float64).sum(axis=axis)
        return _wrap(v.reshape(-1, 1) if kind == "rowSums" else v.reshape(1, -1))
    if kind in ("min", "max") and a.cells == 0:
        raise ShapeError(f"{kind} of an empty tensor")
    if a.layout == SPARSE:
        data = a.csr().data if a._csr is not None else a.coords_values()[1]
        if kind == "sum":
            return Scalar(ValueType.FP64, float(data.sum()))
        if kind == "mean":
            if a.cells == 0:
                raise ShapeError("mean of an empty tensor")
            return Scalar(ValueType.FP64, float(data.sum()) / a.cells)
        ext = float(data.min() if kind == "min" else data.max()) if len(data) else 0.0
        if a.nnz < a.cells:  # implicit zeros participate
            ext = min(ext, 0.0) if kind == "min" else max(ext, 0.0)
        return Scalar(ValueType.FP64, ext)
    if kind == "sum" or kind == "mean":
        if a.cells == 0:
            if kind == "mean":
                raise ShapeError("mean of an empty tensor")
            return Scalar(ValueType.FP64, 0.0)
        arr = _dense_f64(a)
        flat = arr.reshape(a.dims[0], -1) if a.rank > 1 else arr.reshape(-1, 1)
        ranges = _row_ranges(flat.shape[0]) if flat.shape[0] else [(0, 0)]
        parts = _run_partitioned(lambda lo, hi: float(flat[lo:hi].sum()), ranges)
        total = 0.0
        for p in parts:  # fixed-order combination
            total += p
        return Scalar(ValueType.FP64, total if kind == "sum" else total / a.cells)
    arr = _dense_f64(a)
    return Scalar(ValueType.FP64, float(arr.min() if kind == "min" else arr.max()))


# ------------------------------------------------------------- bind/slice

def bind(axis: str, parts: Sequence[BasicTensorBlock]) -> BasicTensorBlock:
    """Concatenate rank-2 blocks along rows or cols, in list order."""
    if axis not in ("rows", "cols"):
        raise ValueError(f"bind axis must be rows or cols, got {axis!r}")
    if not parts:
        raise ShapeError("bind of an empty part list")
    ax = 0 if axis == "rows" else 1
    first = parts[0]
    for p in parts:
        _require_rank2(p, "bind")
        if p.vtype != first.vtype:
            raise ValueTypeError("bind requires a single value type")
        if p.dims[1 - ax] != first.dims[1 - ax]:
            raise ShapeError(f"bind extent mismatch: {p.dims} vs {first.dims}")
    if len(parts) == 1:
        return parts[0]
    if first.vtype.is_numeric:
        nnz = sum(p.nnz for p in parts)
        cells = sum(p.cells for p in parts)
        if cells and all(_is_sparse2(p) for p in parts) and nnz / cells <= 0.4:
            stack = sp.vstack if ax == 0 else sp.hstack
            return BasicTensorBlock.from_csr(stack([p.csr() for p in parts], format="csr"),
                                             ValueType.FP64)
        arrs = [_dense_f64(p) for p in parts]
        return _wrap(np.concatenate(arrs, axis=ax))
    arrs = [p.to_array() for p in parts]
    return BasicTensorBlock.from_array(np.concatenate(arrs, axis=ax), first.vtype)


def slice_block(a: BasicTensorBlock, ranges: Sequence[tuple[int, int] | None]) -> BasicTensorBlock:
    """Copy the sub-tensor covered by per-dimension half-open ranges."""
    if len(ranges) != a.rank:
        raise ShapeError(f"{len(ranges)} ranges for rank-{a.rank} block")
    resolved = []
    for d, r in enumerate(ranges):
        lo, hi = (0, a.dims[d]) if r is None else (int(r[0]), int(r[1]))
        if lo < 0 or hi > a.dims[d]:
            raise ShapeError(f"range [{lo},{hi}) out of bounds for dim {d} (extent {a.dims[d]})")
        if lo >= hi:
            raise ShapeError(f"empty range [{lo},{hi}) for dim {d}")
        resolved.append((lo, hi))
    if a.layout == DENSE:
        idx = tuple(slice(lo, hi) for lo, hi in resolved)
        return BasicTensorBlock.from_array(np.ascontiguousarray(a.to_array()[idx]), a.vtype)
    if a._csr is not None:
        (r0, r1), (c0, c1) = resolved
        return _wrap_csr(a.csr()[r0:r1, c0:c1])
    coords, values = a.coords_values()
    mask = np.ones(len(coords), dtype=bool)
    for d, (lo, hi) in enumerate(resolved):
        mask &= (coords[:, d] >= lo) & (coords[:, d] < hi)
    sub = coords[mask] - np.array([lo for lo, _ in resolved], dtype=np.int64)
    new_dims = tuple(hi - lo for lo, hi in resolved)
    return BasicTensorBlock.from_coords(new_dims, sub, values[mask], a.vtype)


def left_index(a: BasicTensorBlock, v: BasicTensorBlock,
               ranges: Sequence[tuple[int, int] | None]) -> BasicTensorBlock:
    """Copy of ``a`` with the ranged region replaced by ``v`` (copy-on-write)."""
    check_numeric(a.vtype, "left_index")
    _require_rank2(a, "left_index")
    _require_rank2(v, "left_index")
    if len(ranges) != a.rank:
        raise ShapeError(f"{len(ranges)} ranges for rank-{a.rank} block")
    resolved = []
    for d, r in enumerate(ranges):
        lo, hi = (0, a.dims[d]) if r is None else (int(r[0]), int(r[1]))
        if not (0 <= lo < hi <= a.dims[d]):
            raise ShapeError(f"assignment range [{lo},{hi}) invalid for dim {d}")
        resolved.append((lo, hi))
    widths = tuple(hi - lo for lo, hi in resolved)
    if v.dims != widths:
        raise ShapeError(f"assignment value dims {v.dims} != region {widths}")
    out = _dense_f64(a).copy()
    out[resolved[0][0]:resolved[0][1], resolved[1][0]:resolved[1][1]] = _dense_f64(v)
    return _wrap(out)


# ------------------------------------------------------------------ solve

def _chol(a: np.ndarray):
    """Cholesky with the pivot semantics of the unblocked loop below.

    LAPACK does the heavy lifting when the matrix is comfortably positive
    definite; since L[j,j]^2 equals the j-th elimination pivot, the loop's
    tolerance check can be applied after the fact.  Failures fall back to
    the unblocked loop so the reported pivot index is exact.
    """
    n = a.shape[0]
    if n == 0:
        return np.zeros_like(a), math.inf, -1
    tol = n * np.finfo(np.float64).eps * max(float(np.abs(np.diag(a)).max()), 1.0)
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return _cholesky_lower(a)
    d = np.diag(L) ** 2
    bad = np.flatnonzero(~np.isfinite(d) | (d <= tol))
    if bad.size:
        raise SingularMatrixError(int(bad[0]))
    j = int(np.argmin(d))
    return L, float(d[j]), j


def _cholesky_lower(a: np.ndarray):
    """Unblocked Cholesky; returns (L, min_pivot, argmin_pivot) or raises with the pivot."""
    n = a.shape[0]
    L = np.zeros_like(a)
    min_d, min_j = math.inf, -1
    tol = n * np.finfo(np.float64).eps * max(float(np.abs(np.diag(a)).max()), 1.0)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if not np.isfinite(d) or d <= tol:
            raise SingularMatrixError(j)
        if d < min_d:
            min_d, min_j = d, j
        L[j, j] = math.sqrt(d)
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L, min_d, min_j


def solve(a: BasicTensorBlock, b: BasicTensorBlock) -> BasicTensorBlock:
    """Solve A x = b for symmetric positive definite A via Cholesky.

    One retry adds 1e-10 * trace(A)/n to the diagonal; if the factorization
    still fails, or succeeds only by leaning on the added ridge, the system
    is reported singular with the failing pivot.
    """
    check_numeric(a.vtype, "solve")
    check_numeric(b.vtype, "solve")
    _require_rank2(a, "solve")
    _require_rank2(b, "solve")
    n = a.dims[0]
    if a.dims[1] != n:
        raise ShapeError(f"solve requires a square matrix, got {a.dims}")
    if b.dims[0] != n or b.dims[1] != 1:
        raise ShapeError(f"solve rhs must be {n}x1, got {b.dims}")
    da = _dense_f64(a)
    if n and not np.allclose(da, da.T, rtol=1e-10, atol=1e-12):
        raise ShapeError("solve requires a symmetric matrix")
    db = _dense_f64(b).reshape(n, 1)
    try:
        L, _, _ = _chol(da)
    except SingularMatrixError:
        bump = 1e-10 * float(np.trace(da)) / max(n, 1)
        try:
            L, min_d, min_j = _chol(da + bump * np.eye(n))
        except SingularMatrixError as second:
            raise SingularMatrixError(second.pivot) from None
        if min_d <= 100.0 * bump:
            raise SingularMatrixError(min_j, "pivot survives only due to regularization") from None
    y = solve_triangular(L, db, lower=True)
    x = solve_triangular(L.T, y, lower=False)
    return _wrap(x)


# --------------------------------------------------------------- builders

def fill(value: float, rows: int, cols: int) -> BasicTensorBlock:
    if rows < 0 or cols < 0:
        raise ShapeError(f"fill dims ({rows},{cols}) invalid")
    return _wrap(np.full((rows, cols), float(value), dtype=np.float64))


def diag(a: BasicTensorBlock) -> BasicTensorBlock:
    """Vector -> diagonal matrix; square matrix -> diagonal column vector."""
    check_numeric(a.vtype, "diag")
    _require_rank2(a, "diag")
    m, n = a.dims
    if n == 1 or m == 1:
        v = _dense_f64(a).reshape(-1)
        return _wrap(np.diag(v))
    if m != n:
        raise ShapeError(f"diag requires a vector or a square matrix, got {a.dims}")
    return _wrap(np.diag(_dense_f64(a)).reshape(-1, 1).copy())


def seq(start: float, stop: float, step: float = 1.0) -> BasicTensorBlock:
    if step == 0:
        raise ValueError("seq step must be nonzero")
    count = int(math.floor((stop - start) / step + 1e-10)) + 1
    if count <= 0:
        raise ShapeError(f"empty sequence seq({start},{stop},{step})")
    v = start + step * np.arange(count, dtype=np.float64)
    return _wrap(v.reshape(-1, 1))


def rand_block(rows: int, cols: int, vmin: float = 0.0, vmax: float = 1.0,
               sparsity: float = 1.0, seed: int = 0) -> BasicTensorBlock:
    """Uniform random block; ``sparsity`` is the cell-retention probability."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"rand dims ({rows},{cols}) invalid")
    if not 0.0 < sparsity <= 1.0:
        raise ValueError(f"sparsity must be in (0,1], got {sparsity}")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    x = rng.uniform(vmin, vmax, size=(rows, cols))
    if sparsity < 1.0:
        x = np.where(rng.random((rows, cols)) < sparsity, x, 0.0)
    return _wrap(x)


# ------------------------------------------------------------- data casts

def as_matrix(d: DataTensorBlock, col_range: tuple[int, int] | None = None) -> BasicTensorBlock:
    """Cast a numeric column range of a data tensor to an FP64 matrix."""
    if d.rank != 2:
        raise ShapeError("as_matrix requires a rank-2 data tensor")
    lo, hi = (0, d.dims[1]) if col_range is None else (int(col_range[0]), int(col_range[1]))
    if not (0 <= lo < hi <= d.dims[1]):
        raise ShapeError(f"column range [{lo},{hi}) out of bounds")
    for j in range(lo, hi):
        if d.schema[j] is ValueType.STRING:
            raise ValueTypeError(f"STRING column {j} cannot be cast to a matrix")
    out = np.empty((d.dims[0], hi - lo), dtype=np.float64)
    for start, stop, blk in d.col_groups:
        s, e = max(start, lo), min(stop, hi)
        if s >= e:
            continue
        out[:, s - lo:e - lo] = blk.to_array()[:, s - start:e - start].astype(np.float64)
    return BasicTensorBlock.from_array(out, ValueType.FP64, force_layout=DENSE)
