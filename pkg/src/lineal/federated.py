"""Federated tensors: wire protocol, worker service, and federated ops.

A federated tensor is metadata only: row ranges mapped to worker endpoints
holding the actual blocks.  The master broadcasts or slices vectors, pushes
one instruction per range, and combines partial results locally.  Uncovered
row ranges read as zero.

Wire frame (all integers little-endian except the 2-byte magic):
  0xFED5 | version u8 = 1 | type u8 | request_id u64 | payload_len u64 | payload
One request is in flight per connection; responses echo the request id.
Variables are session-scoped: a connection only sees ids it created.
"""
from __future__ import annotations

import socket
import socketserver
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .blocks import BasicTensorBlock
from .errors import FederatedError
from .tensorio import block_from_bytes, block_to_bytes
from .vtypes import ValueType

MAGIC = 0xFED5
VERSION = 1

PUT, EXEC, GET, REMOVE, SHUTDOWN, OK, ERR = 1, 2, 3, 4, 5, 6, 7

_HEADER = struct.Struct(">H")          # magic is big-endian on the wire
_FIXED = struct.Struct("<BBQQ")        # version, type, request_id, payload_len
FRAME_OVERHEAD = 2 + _FIXED.size       # 20 bytes before the payload

# serialized dense FP64 column vector: DSTB header for rank 2
VECTOR_HEADER_BYTES = 4 + 1 + 1 + 1 + 16 + 1


def encode_frame(mtype: int, request_id: int, payload: bytes = b"") -> bytes:
    return (_HEADER.pack(MAGIC)
            + _FIXED.pack(VERSION, mtype, request_id, len(payload)) + payload)


def decode_frame(buf: bytes):
    """Returns (mtype, request_id, payload); raises on malformed frames."""
    if len(buf) < FRAME_OVERHEAD:
        raise FederatedError("truncated frame")
    (magic,) = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FederatedError(f"bad magic 0x{magic:04X}")
    version, mtype, rid, plen = _FIXED.unpack_from(buf, 2)
    if version != VERSION:
        raise FederatedError(f"unsupported protocol version {version}")
    if len(buf) != FRAME_OVERHEAD + plen:
        raise FederatedError("payload length mismatch")
    return mtype, rid, buf[FRAME_OVERHEAD:]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    parts = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed")
        parts.append(chunk)
        n -= len(chunk)
    return b"".join(parts)


def read_frame(sock: socket.socket):
    head = _recv_exact(sock, FRAME_OVERHEAD)
    (magic,) = _HEADER.unpack_from(head, 0)
    if magic != MAGIC:
        raise FederatedError(f"bad magic 0x{magic:04X}")
    version, mtype, rid, plen = _FIXED.unpack_from(head, 2)
    if version != VERSION:
        raise FederatedError(f"unsupported protocol version {version}")
    payload = _recv_exact(sock, plen) if plen else b""
    return mtype, rid, payload


# ==================================================================== worker

class _WorkerHandler(socketserver.BaseRequestHandler):
    """One connection: private variable namespace, lockstep request loop."""

    def handle(self):
        vars: dict[int, BasicTensorBlock] = {}
        next_id = 0
        sock = self.request
        while True:
            try:
                mtype, rid, payload = read_frame(sock)
            except (ConnectionError, FederatedError):
                return
            try:
                if mtype == PUT:
                    vars[next_id] = block_from_bytes(payload)
                    reply = encode_frame(OK, rid, str(next_id).encode())
                    next_id += 1
                elif mtype == EXEC:
                    result = self._exec(payload.decode("utf-8"), vars)
                    vars[next_id] = result
                    reply = encode_frame(OK, rid, str(next_id).encode())
                    next_id += 1
                elif mtype == GET:
                    vid = int(payload.decode())
                    if vid not in vars:
                        raise FederatedError(f"unknown variable {vid}")
                    reply = encode_frame(OK, rid, block_to_bytes(vars[vid]))
                elif mtype == REMOVE:
                    vid = int(payload.decode())
                    if vid not in vars:
                        raise FederatedError(f"unknown variable {vid}")
                    del vars[vid]
                    reply = encode_frame(OK, rid)
                elif mtype == SHUTDOWN:
                    sock.sendall(encode_frame(OK, rid))
                    threading.Thread(target=self.server.shutdown,
                                     daemon=True).start()
                    return
                else:
                    raise FederatedError(f"unsupported message type {mtype}")
            except Exception as ex:  # keep the connection usable
                reply = encode_frame(ERR, rid, str(ex).encode("utf-8"))
            sock.sendall(reply)

    @staticmethod
    def _exec(text: str, vars) -> BasicTensorBlock:
        parts = text.split()
        op = parts[0]

        def var(tok: str) -> BasicTensorBlock:
            vid = int(tok)
            if vid not in vars:
                raise FederatedError(f"unknown variable {vid}")
            return vars[vid]

        if op == "matvec":
            return kernels.matmul(var(parts[1]), var(parts[2]))
        if op == "vecmat":
            return kernels.matmul(kernels.transpose(var(parts[1])), var(parts[2]))
        if op == "agg":
            kind = parts[1]
            out = kernels.aggregate(kind, var(parts[2]))
            if isinstance(out, BasicTensorBlock):
                return out
            return BasicTensorBlock.from_array(
                np.array([[out.as_float()]]), ValueType.FP64)
        raise FederatedError(f"unsupported opcode {op!r}")


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class Worker:
    """In-process worker, also the backing of the CLI `worker` command."""

    def __init__(self, port: int = 0, host: str = "127.0.0.1"):
        self.server = _Server((host, port), _WorkerHandler)
        self.host, self.port = self.server.server_address[:2]
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "Worker":
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def serve_blocking(self) -> None:
        self.server.serve_forever()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread:
            self._thread.join(timeout=5)


# ==================================================================== client

class WorkerClient:
    """Lockstep connection to one worker; counts wire bytes both ways."""

    def __init__(self, endpoint: str):
        self.endpoint = endpoint
        host, port = endpoint.rsplit(":", 1)
        try:
            self.sock = socket.create_connection((host, int(port)), timeout=30)
        except OSError as ex:
            raise FederatedError(f"cannot connect: {ex}", endpoint) from None
        self._rid = 0
        self.bytes_sent = 0
        self.bytes_received = 0
        self.sent_by_type: dict[int, int] = {}

    def request(self, mtype: int, payload: bytes = b"") -> bytes:
        self._rid += 1
        frame = encode_frame(mtype, self._rid, payload)
        try:
            self.sock.sendall(frame)
            rtype, rid, rpayload = read_frame(self.sock)
        except (OSError, ConnectionError) as ex:
            raise FederatedError(f"connection lost: {ex}", self.endpoint) from None
        self.bytes_sent += len(frame)
        self.sent_by_type[mtype] = self.sent_by_type.get(mtype, 0) + len(frame)
        self.bytes_received += FRAME_OVERHEAD + len(rpayload)
        if rid != self._rid:
            raise FederatedError(f"response id {rid} != request id {self._rid}",
                                 self.endpoint)
        if rtype == ERR:
            raise FederatedError(rpayload.decode("utf-8"), self.endpoint)
        if rtype != OK:
            raise FederatedError(f"unexpected response type {rtype}", self.endpoint)
        return rpayload

    def put(self, block: BasicTensorBlock) -> int:
        return int(self.request(PUT, block_to_bytes(block)).decode())

    def execute(self, text: str) -> int:
        return int(self.request(EXEC, text.encode("utf-8")).decode())

    def get(self, vid: int) -> BasicTensorBlock:
        return block_from_bytes(self.request(GET, str(vid).encode()))

    def remove(self, vid: int) -> None:
        self.request(REMOVE, str(vid).encode())

    def shutdown_worker(self) -> None:
        self.request(SHUTDOWN)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


# ============================================================ federated tensor

@dataclass
class FederatedRange:
    row_lo: int
    row_hi: int
    endpoint: str
    remote_var: int

    @property
    def height(self) -> int:
        return self.row_hi - self.row_lo


class FederatedTensor:
    """Metadata handle: dims, vtype, and disjoint row ranges on workers."""

    def __init__(self, dims, vtype: ValueType, ranges: list[FederatedRange],
                 clients: dict):
        self.dims = tuple(int(d) for d in dims)
        self.vtype = vtype
        self.ranges = list(ranges)
        self._clients = clients     # one connection per range index
        self.bytes_sent = 0
        self.bytes_received = 0

    def nrows(self) -> int:
        return self.dims[0]

    def ncols(self) -> int:
        return self.dims[1]

    def _settle(self):
        self.bytes_sent = sum(c.bytes_sent for c in self._clients.values())
        self.bytes_received = sum(c.bytes_received for c in self._clients.values())

    def close(self) -> None:
        for c in self._clients.values():
            c.close()


def _check_disjoint(parts, nrows: int) -> None:
    spans = sorted((lo, hi) for lo, hi, _ in parts)
    prev = 0
    for lo, hi in spans:
        if lo < prev:
            raise FederatedError(f"overlapping ranges at row {lo}")
        if hi > nrows or lo >= hi:
            raise FederatedError(f"range [{lo},{hi}) outside 0..{nrows}")
        prev = hi


def fed_init(parts, endpoints, dims=None) -> FederatedTensor:
    """Distribute row slices to workers.

    ``parts``: list of (row_lo, row_hi, BasicTensorBlock); one endpoint per
    part, in order.  Partial failures roll the already-placed parts back.
    """
    if len(parts) != len(endpoints):
        raise FederatedError("one endpoint per part required")
    if not parts:
        raise FederatedError("at least one part required")
    ncols = parts[0][2].dims[1]
    nrows = dims[0] if dims else max(hi for _, hi, _ in parts)
    _check_disjoint(parts, nrows)
    for lo, hi, b in parts:
        if b.rank != 2 or b.dims != (hi - lo, ncols):
            raise FederatedError(
                f"part [{lo},{hi}) has dims {b.dims}, expected {(hi - lo, ncols)}")
    clients: dict[int, WorkerClient] = {}
    ranges: list[FederatedRange] = []
    try:
        for k, ((lo, hi, block), ep) in enumerate(zip(parts, endpoints)):
            c = WorkerClient(ep)
            clients[k] = c
            vid = c.put(block)
            ranges.append(FederatedRange(lo, hi, ep, vid))
    except Exception:
        for k, r in enumerate(ranges):  # roll back whatever landed
            try:
                clients[k].remove(r.remote_var)
            except Exception:
                pass
        for c in clients.values():
            c.close()
        raise
    vt = parts[0][2].vtype
    return FederatedTensor((nrows, ncols), vt, ranges, clients)


def distribute(block: BasicTensorBlock, endpoints, splits=None) -> FederatedTensor:
    """Split a local matrix into contiguous row parts, one per endpoint."""
    m = block.dims[0]
    w = len(endpoints)
    if splits is None:
        splits = [(i * m) // w for i in range(w + 1)]
    parts = []
    for i in range(w):
        lo, hi = splits[i], splits[i + 1]
        parts.append((lo, hi, kernels.slice_block(block, [(lo, hi), None])))
    return fed_init(parts, endpoints, dims=block.dims)


def _per_range(fed: FederatedTensor, fn):
    """Run fn(range_index, range, client) concurrently across ranges."""
    with ThreadPoolExecutor(max_workers=max(1, len(fed.ranges))) as pool:
        futs = [pool.submit(fn, k, r, fed._clients[k])
                for k, r in enumerate(fed.ranges)]
        results = [f.result() for f in futs]
    fed._settle()
    return results


def fed_matvec(fed: FederatedTensor, v: BasicTensorBlock) -> BasicTensorBlock:
    """F %*% v: broadcast v, run per-range MV remotely, stack by row order."""
    if v.dims != (fed.dims[1], 1):
        raise FederatedError(f"dims {fed.dims} x {v.dims} not conformable")

    def task(k, r, c):
        vid = c.put(v)
        out = c.execute(f"matvec {r.remote_var} {vid}")
        part = c.get(out)
        c.remove(vid)
        c.remove(out)
        return part

    parts = _per_range(fed, task)
    result = np.zeros((fed.dims[0], 1))
    for r, p in zip(fed.ranges, parts):
        result[r.row_lo:r.row_hi] = p.to_array()
    return BasicTensorBlock.from_array(result)


def fed_vecmat(v: BasicTensorBlock, fed: FederatedTensor) -> BasicTensorBlock:
    """t(v) %*% F: each worker receives only its slice of v; partial 1 x n
    results are added element-wise."""
    if v.dims != (fed.dims[0], 1):
        raise FederatedError(f"dims {v.dims}^T x {fed.dims} not conformable")

    def task(k, r, c):
        vslice = kernels.slice_block(v, [(r.row_lo, r.row_hi), None])
        vid = c.put(vslice)
        out = c.execute(f"vecmat {vid} {r.remote_var}")
        part = c.get(out)
        c.remove(vid)
        c.remove(out)
        return part

    parts = _per_range(fed, task)
    total = np.zeros((1, fed.dims[1]))
    for p in parts:
        total += p.to_array()
    return BasicTensorBlock.from_array(total)


def fed_aggregate(kind: str, fed: FederatedTensor):
    """sum/colSums add partial results; rowSums stacks them in range order."""
    if kind not in ("sum", "rowSums", "colSums"):
        raise FederatedError(f"unsupported federated aggregate {kind!r}")

    def task(k, r, c):
        out = c.execute(f"agg {kind} {r.remote_var}")
        part = c.get(out)
        c.remove(out)
        return part

    parts = _per_range(fed, task)
    if kind == "sum":
        from .vtypes import Scalar
        return Scalar(ValueType.FP64, float(sum(p.to_array()[0, 0] for p in parts)))
    if kind == "colSums":
        total = np.zeros((1, fed.dims[1]))
        for p in parts:
            total += p.to_array()
        return BasicTensorBlock.from_array(total)
    result = np.zeros((fed.dims[0], 1))
    for r, p in zip(fed.ranges, parts):
        result[r.row_lo:r.row_hi] = p.to_array().reshape(r.height, 1)
    return BasicTensorBlock.from_array(result)


def collect(fed: FederatedTensor, max_bytes: int | None = None) -> BasicTensorBlock:
    """Materialize locally; uncovered areas are zero."""
    need = fed.dims[0] * fed.dims[1] * 8
    if max_bytes is not None and need > max_bytes:
        raise FederatedError(
            f"collect of {need} bytes exceeds budget {max_bytes}")

    def task(k, r, c):
        return c.get(r.remote_var)

    parts = _per_range(fed, task)
    out = np.zeros(fed.dims)
    for r, p in zip(fed.ranges, parts):
        out[r.row_lo:r.row_hi] = p.to_array()
    return BasicTensorBlock.from_array(out)
