"""Local tensor blocks: homogeneous n-d arrays and schema-typed data tensors.

A ``BasicTensorBlock`` is an immutable n-d array of one value type, stored
dense (row-major) or sparse (CSR for rank 2, sorted coordinates above).
A ``DataTensorBlock`` adds a per-column value-type schema on dimension 2 and
is internally composed of one basic block per maximal run of equal schema
entries.
"""
from __future__ import annotations

import math
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError, ValueTypeError
from .vtypes import ValueType, cell_bytes, numpy_dtype, representable, vtype_of_dtype

DENSE = "DENSE"
SPARSE = "SPARSE"

# A numeric rank-2 block is stored sparse when at most this dense.
SPARSE_DENSITY_THRESHOLD = 0.4


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def preferred_layout(dims: Sequence[int], nnz: int, vtype: ValueType) -> str:
    cells = math.prod(dims)
    if not vtype.is_numeric or len(dims) != 2 or cells == 0:
        return DENSE
    if nnz / cells <= SPARSE_DENSITY_THRESHOLD:
        return SPARSE
    return DENSE


class BasicTensorBlock:
    """Immutable homogeneous tensor block.

    Construct via :func:`construct`, :meth:`from_array`, or the sparse
    factories; never mutate a block after construction.
    """

    __slots__ = ("dims", "vtype", "layout", "nnz", "_dense", "_csr", "_coords", "_values")

    def __init__(self, dims, vtype, layout, nnz, dense=None, csr=None, coords=None, values=None):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 1 or any(d < 0 for d in self.dims):
            raise ShapeError(f"invalid dims {dims}")
        self.vtype = vtype
        self.layout = layout
        self.nnz = int(nnz)
        self._dense = dense
        self._csr = csr
        self._coords = coords
        self._values = values

    # ---------------------------------------------------------------- shape
    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def cells(self) -> int:
        return math.prod(self.dims)

    @property
    def nrows(self) -> int:
        return self.dims[0]

    @property
    def ncols(self) -> int:
        if self.rank != 2:
            raise ShapeError("ncols requires a rank-2 block")
        return self.dims[1]

    def density(self) -> float:
        return self.nnz / self.cells if self.cells else 0.0

    # ------------------------------------------------------------ factories
    @staticmethod
    def from_array(arr: np.ndarray, vtype: ValueType | None = None,
                   force_layout: str | None = None) -> "BasicTensorBlock":
        """Wrap an ndarray, choosing the layout by the sparsity rule."""
        arr = np.asarray(arr)
        if vtype is None:
            vtype = vtype_of_dtype(arr.dtype)
        if arr.dtype != numpy_dtype(vtype):
            arr = arr.astype(numpy_dtype(vtype))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if vtype is ValueType.STRING:
            nnz = int(sum(1 for v in arr.ravel() if v != ""))
            if force_layout == SPARSE:
                raise ValueTypeError("STRING blocks cannot be sparse")
            return BasicTensorBlock(arr.shape, vtype, DENSE, nnz,
                                    dense=_freeze(np.ascontiguousarray(arr)))
        nnz = int(np.count_nonzero(arr))
        layout = force_layout or preferred_layout(arr.shape, nnz, vtype)
        if layout == SPARSE:
            return BasicTensorBlock._sparse_from_dense(arr, vtype, nnz)
        return BasicTensorBlock(arr.shape, vtype, DENSE, nnz,
                                dense=_freeze(np.ascontiguousarray(arr)))

    @staticmethod
    def _sparse_from_dense(arr: np.ndarray, vtype: ValueType, nnz: int) -> "BasicTensorBlock":
        if arr.ndim == 2:
            csr = sp.csr_array(arr.astype(np.float64) if arr.dtype != np.float64 else arr)
            csr.sum_duplicates()
            return BasicTensorBlock.from_csr(csr, vtype)
        coords = np.argwhere(arr)
        order = np.lexsort(coords.T[::-1]) if len(coords) else np.array([], dtype=np.int64)
        coords = coords[order].astype(np.int64)
        values = arr[tuple(coords.T)].astype(np.float64) if len(coords) else np.array([], dtype=np.float64)
        return BasicTensorBlock(arr.shape, vtype, SPARSE, nnz,
                                coords=_freeze(coords), values=_freeze(values))

    @staticmethod
    def from_csr(csr: sp.csr_array | sp.csr_matrix, vtype: ValueType = ValueType.FP64) -> "BasicTensorBlock":
        csr = sp.csr_array(csr)
        csr.eliminate_zeros()
        csr.sort_indices()
        for part in (csr.data, csr.indices, csr.indptr):
            part.flags.writeable = False
        return BasicTensorBlock(csr.shape, vtype, SPARSE, int(csr.nnz), csr=csr)

    @staticmethod
    def from_coords(dims, coords: np.ndarray, values: np.ndarray,
                    vtype: ValueType = ValueType.FP64) -> "BasicTensorBlock":
        """Sorted-coordinate sparse block for rank > 2."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(dims))
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        keep = values != 0
        coords, values = coords[keep], values[keep]
        if len(coords):
            order = np.lexsort(coords.T[::-1])
            coords, values = coords[order], values[order]
        return BasicTensorBlock(dims, vtype, SPARSE, len(values),
                                coords=_freeze(coords), values=_freeze(values))

    # -------------------------------------------------------------- access
    def to_array(self) -> np.ndarray:
        """Densify into an ndarray of the block's dtype (always a copy for sparse)."""
        if self.layout == DENSE:
            return self._dense
        if self._csr is not None:
            out = self._csr.toarray()
        else:
            out = np.zeros(self.dims, dtype=np.float64)
            if len(self._coords):
                out[tuple(self._coords.T)] = self._values
        # sparse storage is float64 internally; surface the declared type
        if out.dtype != numpy_dtype(self.vtype):
            out = out.astype(numpy_dtype(self.vtype))
        return out

    def csr(self) -> sp.csr_array:
        if self.layout == SPARSE and self._csr is not None:
            return self._csr
        if self.rank != 2:
            raise ShapeError("CSR view requires a rank-2 block")
        return sp.csr_array(self.to_array().astype(np.float64))

    def coords_values(self) -> tuple[np.ndarray, np.ndarray]:
        if self.layout != SPARSE or self._coords is None:
            raise ShapeError("coordinate view requires a rank>2 sparse block")
        return self._coords, self._values

    def cell(self, *coords) -> Any:
        if len(coords) != self.rank:
            raise ShapeError(f"expected {self.rank} coordinates, got {len(coords)}")
        if self.layout == DENSE:
            v = self._dense[coords]
        elif self._csr is not None:
            v = self._csr[coords]
        else:
            mask = np.all(self._coords == np.asarray(coords), axis=1)
            idx = np.nonzero(mask)[0]
            v = self._values[idx[0]] if len(idx) else 0.0
        if self.vtype is ValueType.STRING:
            return v
        v = v.item() if isinstance(v, np.generic) else v
        if self.vtype in (ValueType.INT32, ValueType.INT64):
            return int(v)
        if self.vtype is ValueType.BOOLEAN:
            return bool(v)
        return float(v)

    def size_bytes(self) -> int:
        """In-memory footprint estimate used for cache accounting."""
        if self.layout == DENSE:
            return self.cells * cell_bytes(self.vtype)
        if self._csr is not None:
            return self.nnz * (8 + self._csr.indices.dtype.itemsize) + (self.dims[0] + 1) * 8
        return self.nnz * (8 * self.rank + 8)

    def __repr__(self) -> str:
        shape = "x".join(str(d) for d in self.dims)
        return f"BasicTensorBlock({shape} {self.vtype.value} {self.layout} nnz={self.nnz})"


def construct(dims: Sequence[int], vtype: ValueType,
              cells: Iterable[Any] | None = None,
              pairs: Iterable[tuple[Sequence[int], Any]] | None = None) -> BasicTensorBlock:
    """Build a block from a row-major cell list or sparse coordinate pairs.

    Exactly one of ``cells`` and ``pairs`` must be given.  The storage layout
    is chosen by the sparsity rule; ``nnz`` is computed exactly.
    """
    dims = tuple(int(d) for d in dims)
    total = math.prod(dims)
    if (cells is None) == (pairs is None):
        raise ValueError("provide exactly one of cells or pairs")
    if cells is not None:
        if isinstance(cells, np.ndarray) and cells.shape == dims:
            flat = cells.ravel()
        else:
            flat = np.asarray(list(cells) if not isinstance(cells, np.ndarray) else cells).ravel()
        if flat.size != total:
            raise ShapeError(f"{flat.size} cells for dims {dims} (need {total})")
        if vtype is ValueType.STRING:
            arr = np.empty(dims, dtype=object)
            arr.ravel()[:] = [representable(v, vtype) for v in flat]
        else:
            arr = np.asarray([representable(v, vtype) for v in flat],
                             dtype=numpy_dtype(vtype)).reshape(dims)
        return BasicTensorBlock.from_array(arr, vtype)
    if vtype is ValueType.STRING:
        raise ValueTypeError("STRING blocks cannot be sparse")
    arr = np.zeros(dims, dtype=numpy_dtype(vtype))
    for coord, value in pairs:
        coord = tuple(int(c) for c in coord)
        if len(coord) != len(dims) or any(not 0 <= c < d for c, d in zip(coord, dims)):
            raise ShapeError(f"coordinate {coord} out of range for dims {dims}")
        arr[coord] = representable(value, vtype)
    return BasicTensorBlock.from_array(arr, vtype)


def convert_layout(block: BasicTensorBlock, target_layout: str) -> BasicTensorBlock:
    """Re-encode a block in the requested layout; contents are unchanged."""
    if target_layout not in (DENSE, SPARSE):
        raise ValueError(f"unknown layout {target_layout!r}")
    if target_layout == SPARSE and not block.vtype.is_numeric:
        raise ValueTypeError("STRING blocks cannot be sparse")
    if block.layout == target_layout:
        return block
    return BasicTensorBlock.from_array(block.to_array(), block.vtype, force_layout=target_layout)


def same_cells(a: BasicTensorBlock, b: BasicTensorBlock) -> bool:
    """Exact cell-for-cell equality, ignoring layout."""
    if a.dims != b.dims:
        return False
    if a.vtype is ValueType.STRING or b.vtype is ValueType.STRING:
        return a.vtype == b.vtype and bool(np.all(a.to_array() == b.to_array()))
    return bool(np.array_equal(a.to_array(), b.to_array()))


class DataTensorBlock:
    """Tensor with a per-column value-type schema on dimension 2."""

    __slots__ = ("dims", "schema", "col_groups")

    def __init__(self, dims, schema: Sequence[ValueType], col_groups):
        self.dims = tuple(int(d) for d in dims)
        self.schema = tuple(schema)
        if len(self.dims) < 2:
            raise ShapeError("data tensors need at least 2 dimensions")
        if len(self.schema) != self.dims[1]:
            raise ShapeError(
                f"schema length {len(self.schema)} != dim-2 extent {self.dims[1]}")
        self.col_groups = list(col_groups)
        covered = 0
        for start, stop, blk in self.col_groups:
            if start != covered:
                raise ShapeError("column groups must tile dimension 2 without gaps")
            covered = stop
        if covered != self.dims[1]:
            raise ShapeError("column groups must cover all of dimension 2")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @staticmethod
    def from_columns(columns: Sequence[np.ndarray], schema: Sequence[ValueType]) -> "DataTensorBlock":
        """Assemble a rank-2 data tensor from per-column arrays."""
        schema = tuple(schema)
        if len(columns) != len(schema):
            raise ShapeError("one column array per schema entry")
        nrows = len(columns[0]) if columns else 0
        groups = []
        start = 0
        while start < len(schema):
            stop = start
            while stop < len(schema) and schema[stop] == schema[start]:
                stop += 1
            vt = schema[start]
            mat = np.empty((nrows, stop - start), dtype=numpy_dtype(vt))
            for k in range(start, stop):
                col = columns[k]
                if len(col) != nrows:
                    raise ShapeError("ragged columns")
                mat[:, k - start] = col
            groups.append((start, stop, BasicTensorBlock.from_array(mat, vt, force_layout=DENSE)))
            start = stop
        return DataTensorBlock((nrows, len(schema)), schema, groups)

    @staticmethod
    def from_rows(rows: Sequence[Sequence[Any]], schema: Sequence[ValueType]) -> "DataTensorBlock":
        schema = tuple(schema)
        cols = []
        for j, vt in enumerate(schema):
            if vt is ValueType.STRING:
                col = np.empty(len(rows), dtype=object)
                col[:] = [representable(r[j], vt) for r in rows]
            else:
                col = np.asarray([representable(r[j], vt) for r in rows], dtype=numpy_dtype(vt))
            cols.append(col)
        return DataTensorBlock.from_columns(cols, schema)

    def column(self, j: int) -> np.ndarray:
        if not 0 <= j < self.dims[1]:
            raise ShapeError(f"column {j} out of range")
        for start, stop, blk in self.col_groups:
            if start <= j < stop:
                return blk.to_array()[:, j - start]
        raise ShapeError(f"column {j} not covered")  # unreachable by invariant

    def cell(self, i: int, j: int) -> Any:
        return self.column(j)[i]

    def __repr__(self) -> str:
        shape = "x".join(str(d) for d in self.dims)
        kinds = ",".join(vt.value for vt in self.schema)
        return f"DataTensorBlock({shape} [{kinds}])"
