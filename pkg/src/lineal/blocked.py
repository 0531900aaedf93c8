"""Fixed-size blocking of n-d tensors and blocked matrix multiply.

Block side lengths shrink with rank so a dense FP64 block never exceeds
1024 * 1024 cells.  Only trailing blocks per dimension may be smaller than
the scheme side; all-zero tiles are never stored.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kernels
from .blocks import DENSE, SPARSE, BasicTensorBlock
from .errors import ShapeError
from .vtypes import ValueType, numpy_dtype

_SCHEME = {2: 1024, 3: 128, 4: 32, 5: 16, 6: 8, 7: 8}


def blocking_side(rank: int) -> int:
    if rank not in _SCHEME:
        raise ShapeError(f"no blocking scheme for rank {rank} (supported: 2..7)")
    return _SCHEME[rank]


class BlockedTensor:
    """Immutable map from block index to tile, tiling ``dims`` exactly."""

    __slots__ = ("dims", "vtype", "side", "blocks")

    def __init__(self, dims, vtype: ValueType, blocks: dict):
        self.dims = tuple(int(d) for d in dims)
        self.vtype = vtype
        self.side = blocking_side(len(self.dims))
        grid = self.grid()
        ordered = {}
        for idx in sorted(blocks):  # row-major deterministic iteration
            tile = blocks[idx]
            if tile.nnz == 0:
                continue  # absence denotes an all-zero tile
            if len(idx) != len(self.dims) or any(c < 0 or c >= g for c, g in zip(idx, grid)):
                raise ShapeError(f"block index {idx} outside grid {grid}")
            want = tuple(min(self.side, d - c * self.side) for c, d in zip(idx, self.dims))
            if tile.dims != want:
                raise ShapeError(f"block {idx} has dims {tile.dims}, expected {want}")
            ordered[idx] = tile
        self.blocks = ordered

    def grid(self) -> tuple[int, ...]:
        return tuple(-(-d // self.side) for d in self.dims)

    def __repr__(self) -> str:
        shape = "x".join(str(d) for d in self.dims)
        return f"BlockedTensor({shape} side={self.side} blocks={len(self.blocks)})"


def _tile_ranges(dims, side, idx):
    return [(c * side, min((c + 1) * side, d)) for c, d in zip(idx, dims)]


def to_blocked(x: BasicTensorBlock) -> BlockedTensor:
    side = blocking_side(x.rank)
    grid = tuple(-(-d // side) for d in x.dims)
    blocks: dict = {}
    if x.layout == SPARSE and x._csr is None:
        coords, values = x.coords_values()
        if len(coords):
            bidx = coords // side
            # group coordinate records by owning block
            order = np.lexsort(bidx.T[::-1])
            bidx, coords, values = bidx[order], coords[order], values[order]
            cuts = np.nonzero(np.any(np.diff(bidx, axis=0), axis=1))[0] + 1
            for seg_coords, seg_vals, seg_b in zip(
                    np.split(coords, cuts), np.split(values, cuts), np.split(bidx, cuts)):
                idx = tuple(int(c) for c in seg_b[0])
                lo = np.array([r[0] for r in _tile_ranges(x.dims, side, idx)], dtype=np.int64)
                extents = tuple(hi - lo_ for lo_, hi in _tile_ranges(x.dims, side, idx))
                blocks[idx] = BasicTensorBlock.from_coords(extents, seg_coords - lo,
                                                           seg_vals, x.vtype)
        return BlockedTensor(x.dims, x.vtype, blocks)
    for idx in itertools.product(*
                                 (range(g) for g in grid)):
        ranges = _tile_ranges(x.dims, side, idx)
        if x._csr is not None:
            (r0, r1), (c0, c1) = ranges
            sub = x.csr()[r0:r1, c0:c1]
            if sub.nnz == 0:
                continue
            blocks[idx] = BasicTensorBlock.from_csr(sub, x.vtype)
        else:
            sub = x.to_array()[tuple(slice(lo, hi) for lo, hi in ranges)]
            tile = BasicTensorBlock.from_array(np.ascontiguousarray(sub), x.vtype)
            if tile.nnz == 0:
                continue
            blocks[idx] = tile
    return BlockedTensor(x.dims, x.vtype, blocks)


def from_blocked(b: BlockedTensor) -> BasicTensorBlock:
    if b.vtype is ValueType.STRING:
        out = np.full(b.dims, "", dtype=object)
    else:
        out = np.zeros(b.dims, dtype=numpy_dtype(b.vtype))
    for idx, tile in b.blocks.items():
        ranges = _tile_ranges(b.dims, b.side, idx)
        out[tuple(slice(lo, hi) for lo, hi in ranges)] = tile.to_array()
    return BasicTensorBlock.from_array(out, b.vtype)


def reblock_2d_to_3d(b: BlockedTensor, target_dims) -> BlockedTensor:
    """Reinterpret a rank-2 blocked tensor as rank-3 by row-major linearization."""
    target_dims = tuple(int(d) for d in target_dims)
    if len(b.dims) != 2 or len(target_dims) != 3:
        raise ShapeError(f"reblock supports 2d->3d only, got {b.dims} -> {target_dims}")
    if math.prod(target_dims) != math.prod(b.dims):
        raise ShapeError(
            f"cell-count mismatch: {b.dims} has {math.prod(b.dims)}, "
            f"target {target_dims} has {math.prod(target_dims)}")
    flat = from_blocked(b).to_array().reshape(target_dims)
    return to_blocked(BasicTensorBlock.from_array(flat, b.vtype))


def blocked_matmul(a: BlockedTensor, b: BlockedTensor) -> BlockedTensor:
    """Block-aligned multiply: C(i,j) = sum_k A(i,k) x B(k,j), one task per output block."""
    if len(a.dims) != 2 or len(b.dims) != 2:
        raise ShapeError("blocked_matmul requires rank-2 operands")
    if a.dims[1] != b.dims[0]:
        raise ShapeError(f"blocked_matmul shape mismatch: {a.dims} x {b.dims}")
    m, n = a.dims[0], b.dims[1]
    ga, gb = a.grid(), b.grid()

    def compute(gi: int, gj: int):
        acc = None
        for gk in range(ga[1]):
            ta, tb = a.blocks.get((gi, gk)), b.blocks.get((gk, gj))
            if ta is None or tb is None:
                continue
            term = kernels.matmul(ta, tb)
            acc = term if acc is None else kernels.elementwise("+", acc, term)
        return acc

    tasks = list(itertools.product(range(ga[0]), range(gb[1])))
    if kernels.get_num_threads() > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=kernels.get_num_threads()) as pool:
            results = list(pool.map(lambda t: compute(*t), tasks))
    else:
        results = [compute(*t) for t in tasks]
    blocks = {t: r for t, r in zip(tasks, results) if r is not None and r.nnz > 0}
    return BlockedTensor((m, n), ValueType.FP64, blocks)
