"""Tensor I/O: delimited text with sidecar metadata, and a binary block format.

CSV files carry no schema; a sidecar file `<data>.mtd` of flat `key: value`
lines supplies dimensions, value type, format, header flag, and delimiter.
Reads are parallelized by splitting the byte range at row boundaries; each
thread parses a disjoint slice of rows into preallocated storage, so the
result is identical for any thread count.

The binary format is self-describing:
  magic "DSTB" | version u8 | vtype u8 | rank u8 | dims u64[] LE | layout u8 |
  dense: row-major cell payload, or sparse: nnz u64 then (coords, value) records.
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.sparse as sp

from . import kernels
from .blocks import DENSE, SPARSE, BasicTensorBlock, DataTensorBlock
from .errors import IOFormatError
from .vtypes import ValueType, numpy_dtype

_MAGIC = b"DSTB"
_VERSION = 1
_VTYPE_ORDER = (ValueType.FP32, ValueType.FP64, ValueType.INT32,
                ValueType.INT64, ValueType.BOOLEAN, ValueType.STRING)
_LAYOUT_CODE = {DENSE: 0, SPARSE: 1}


# ================================================================== sidecar

def write_sidecar(data_path: str, meta: dict) -> str:
    path = data_path + ".mtd"
    with open(path, "w", encoding="utf-8") as f:
        for k, v in meta.items():
            f.write(f"{k}: {v}\n")
    return path


def read_sidecar(data_path: str) -> dict:
    path = data_path + ".mtd"
    if not os.path.exists(path):
        raise IOFormatError(f"missing sidecar {path}")
    meta: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            if ":" not in line:
                raise IOFormatError(f"bad sidecar line {line!r} in {path}")
            k, v = line.split(":", 1)
            meta[k.strip()] = v.strip()
    for key in ("rows", "cols"):
        if key in meta:
            meta[key] = int(meta[key])
            if meta[key] <= 0:
                raise IOFormatError(f"sidecar {path}: {key} must be positive")
    return meta


def _sidecar_for(block: BasicTensorBlock, fmt: str, delimiter: str = ",",
                 header: bool = False) -> dict:
    meta = {"rows": block.dims[0],
            "cols": block.dims[1] if block.rank > 1 else 1,
            "value_type": block.vtype.name, "format": fmt,
            "header": "true" if header else "false", "delimiter": delimiter}
    if block.layout == SPARSE:
        meta["nnz"] = block.nnz
    return meta


# ====================================================================== CSV

def _format_cell(v, vtype: ValueType, delimiter: str) -> str:
    if vtype == ValueType.STRING:
        s = str(v)
        if any(c in s for c in (delimiter, '"', "\n", "\r")):
            return '"' + s.replace('"', '""') + '"'
        return s
    if vtype == ValueType.BOOLEAN:
        return "TRUE" if v else "FALSE"
    if vtype in (ValueType.INT32, ValueType.INT64):
        return str(int(v))
    return repr(float(v))  # shortest text that reparses to the same double


def write_csv(block: BasicTensorBlock, path: str, delimiter: str = ",",
              header: bool = False) -> None:
    if block.rank != 2:
        raise IOFormatError(f"csv writer requires rank 2, got {block.rank}")
    if block.cells == 0:
        raise IOFormatError("refusing to write an empty block")
    arr = block.to_array()
    vt = block.vtype
    with open(path, "w", encoding="utf-8", newline="") as f:
        if header:
            f.write(delimiter.join(f"C{j + 1}" for j in range(block.dims[1])) + "\n")
        for i in range(block.dims[0]):
            f.write(delimiter.join(_format_cell(arr[i, j], vt, delimiter)
                                   for j in range(block.dims[1])) + "\n")
    write_sidecar(path, _sidecar_for(block, "csv", delimiter, header))


def _split_fields(line: str, delimiter: str, quoted: bool) -> list[str]:
    if not quoted or '"' not in line:
        return line.split(delimiter)
    fields, cur, i, inq = [], [], 0, False
    while i < len(line):
        c = line[i]
        if inq:
            if c == '"':
                if i + 1 < len(line) and line[i + 1] == '"':
                    cur.append('"')
                    i += 1
                else:
                    inq = False
            else:
                cur.append(c)
        elif c == '"':
            inq = True
        elif c == delimiter:
            fields.append("".join(cur))
            cur = []
        else:
            cur.append(c)
        i += 1
    fields.append("".join(cur))
    return fields


_BOOL_WORDS = {"true": 1.0, "TRUE": 1.0, "True": 1.0,
               "false": 0.0, "FALSE": 0.0, "False": 0.0}


def _parse_numeric_rows(lines, out: np.ndarray, row0: int, delimiter: str,
                        vtype: ValueType, path: str):
    cols = out.shape[1]
    isbool = vtype == ValueType.BOOLEAN
    for k, line in enumerate(lines):
        parts = line.split(delimiter)
        if len(parts) != cols:
            raise IOFormatError(
                f"{path}: row {row0 + k + 1} has {len(parts)} fields, expected {cols}")
        try:
            if isbool:
                out[row0 + k] = [_BOOL_WORDS[p] if p in _BOOL_WORDS
                                 else float(p) for p in parts]
            else:
                out[row0 + k] = [float(p) for p in parts]
        except (ValueError, TypeError) as ex:
            raise IOFormatError(
                f"{path}: unparseable cell at row {row0 + k + 1}: {ex}") from None


def read_csv(path: str, meta: dict | None = None):
    """Reads a delimited file described by its sidecar.  Numeric value types
    produce a BasicTensorBlock; STRING produces a DataTensorBlock."""
    if meta is None:
        meta = read_sidecar(path)
    rows, cols = meta["rows"], meta["cols"]
    delimiter = meta.get("delimiter", ",")
    header = str(meta.get("header", "false")).lower() == "true"
    vtype = ValueType[meta.get("value_type", "FP64")]

    with open(path, "r", encoding="utf-8", newline="") as f:
        text = f.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if header:
        lines = lines[1:]
    if len(lines) != rows:
        raise IOFormatError(
            f"{path}: sidecar says rows={rows}, file has {len(lines)}")

    if vtype == ValueType.STRING:
        cells = [_split_fields(ln, delimiter, True) for ln in lines]
        bad = next((i for i, r in enumerate(cells) if len(r) != cols), None)
        if bad is not None:
            raise IOFormatError(
                f"{path}: row {bad + 1} has {len(cells[bad])} fields, expected {cols}")
        colarrs = [np.array([r[j] for r in cells], dtype=object)
                   for j in range(cols)]
        return DataTensorBlock.from_columns(colarrs, [ValueType.STRING] * cols)

    out = np.empty((rows, cols), dtype=np.float64)
    nthreads = max(1, min(kernels.get_num_threads(), rows))
    bounds = [(i * rows) // nthreads for i in range(nthreads + 1)]
    chunks = [(bounds[i], bounds[i + 1]) for i in range(nthreads)
              if bounds[i] < bounds[i + 1]]
    if len(chunks) <= 1:
        _parse_numeric_rows(lines, out, 0, delimiter, vtype, path)
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futs = [pool.submit(_parse_numeric_rows, lines[lo:hi], out, lo,
                                delimiter, vtype, path) for lo, hi in chunks]
            for f in futs:
                f.result()
    return BasicTensorBlock.from_array(out.astype(numpy_dtype(vtype)), vtype)


# =================================================================== binary

def block_to_bytes(block: BasicTensorBlock) -> bytes:
    head = [_MAGIC, struct.pack("<BBB", _VERSION,
                                _VTYPE_ORDER.index(block.vtype), block.rank)]
    head.append(struct.pack(f"<{block.rank}Q", *block.dims))
    head.append(struct.pack("<B", _LAYOUT_CODE[block.layout]))
    if block.layout == DENSE:
        arr = block.to_array()
        if block.vtype == ValueType.STRING:
            payload = bytearray()
            for s in arr.ravel():
                b = str(s).encode("utf-8")
                payload += struct.pack("<I", len(b)) + b
            head.append(bytes(payload))
        elif block.vtype == ValueType.BOOLEAN:
            head.append(arr.astype(np.uint8).tobytes())
        else:
            head.append(np.ascontiguousarray(arr).tobytes())
    else:
        if block.rank == 2:
            coo = block.csr().tocoo()
            coords = np.column_stack([coo.row, coo.col]).astype(np.int64)
            values = coo.data.astype(np.float64)
        else:
            coords, values = block.coords_values()
        head.append(struct.pack("<Q", block.nnz))
        head.append(coords.astype("<i8").tobytes())
        head.append(values.astype("<f8").tobytes())
    return b"".join(head)


def block_from_bytes(buf: bytes) -> BasicTensorBlock:
    if buf[:4] != _MAGIC:
        raise IOFormatError("bad magic; not a binary tensor block")
    version, vcode, rank = struct.unpack_from("<BBB", buf, 4)
    if version != _VERSION:
        raise IOFormatError(f"unsupported binary version {version}")
    vtype = _VTYPE_ORDER[vcode]
    off = 7
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    (layout_code,) = struct.unpack_from("<B", buf, off)
    off += 1
    if layout_code == 0:
        cells = int(np.prod(dims)) if dims else 0
        if vtype == ValueType.STRING:
            vals = []
            for _ in range(cells):
                (ln,) = struct.unpack_from("<I", buf, off)
                off += 4
                vals.append(buf[off:off + ln].decode("utf-8"))
                off += ln
            arr = np.array(vals, dtype=object).reshape(dims)
        elif vtype == ValueType.BOOLEAN:
            arr = np.frombuffer(buf, dtype=np.uint8, count=cells,
                                offset=off).astype(bool).reshape(dims)
        else:
            arr = np.frombuffer(buf, dtype=numpy_dtype(vtype), count=cells,
                                offset=off).reshape(dims)
        return BasicTensorBlock.from_array(arr.copy(), vtype, force_layout=DENSE)
    (nnz,) = struct.unpack_from("<Q", buf, off)
    off += 8
    coords = np.frombuffer(buf, dtype="<i8", count=nnz * rank,
                           offset=off).reshape(nnz, rank).copy()
    off += 8 * nnz * rank
    values = np.frombuffer(buf, dtype="<f8", count=nnz, offset=off).copy()
    if rank == 2:
        csr = sp.csr_array((values, (coords[:, 0], coords[:, 1])), shape=dims)
        return BasicTensorBlock.from_csr(csr, vtype)
    return BasicTensorBlock.from_coords(dims, coords, values, vtype)


def write_binary(block: BasicTensorBlock, path: str) -> None:
    if block.cells == 0:
        raise IOFormatError("refusing to write an empty block")
    with open(path, "wb") as f:
        f.write(block_to_bytes(block))
    meta = {"rows": block.dims[0],
            "cols": block.dims[1] if block.rank > 1 else 1,
            "value_type": block.vtype.name, "format": "binary",
            "header": "false", "delimiter": ","}
    if block.rank > 2:
        meta["dims"] = "x".join(str(d) for d in block.dims)
    if block.layout == SPARSE:
        meta["nnz"] = block.nnz
    write_sidecar(path, meta)


def read_binary(path: str) -> BasicTensorBlock:
    with open(path, "rb") as f:
        return block_from_bytes(f.read())


# ================================================================ dispatch

def read_any(path: str):
    """Reads a tensor according to its sidecar; returns (value, bytes_read)."""
    if not os.path.exists(path):
        raise IOFormatError(f"no such file: {path}")
    meta = read_sidecar(path)
    size = os.path.getsize(path)
    fmt = meta.get("format", "csv")
    if fmt == "binary":
        return read_binary(path), size
    if fmt != "csv":
        raise IOFormatError(f"{path}: unknown format {fmt!r}")
    return read_csv(path, meta), size


def write_any(value, path: str, fmt: str = "csv") -> int:
    """Writes a tensor plus sidecar; returns bytes written to the data file."""
    if not isinstance(value, BasicTensorBlock):
        raise IOFormatError(f"cannot write {type(value).__name__} to {path}")
    if fmt == "csv":
        write_csv(value, path)
    elif fmt == "binary":
        write_binary(value, path)
    else:
        raise IOFormatError(f"{path}: unknown format {fmt!r}")
    return os.path.getsize(path)
