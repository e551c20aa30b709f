"""TMF1 binary messages.

Every message starts with the 4-byte magic ``TMF1`` and a one-byte type.
All integers are little-endian u32 and all reals little-endian f32.

======  ================  ==================================================
type    name              body after magic + type
======  ================  ==================================================
0x01    dense weights     round, count, count x f32
0x02    sparse delta      round, global_count, entry count, entries (u32, f32)
0x03    round assignment  round, client id
0x04    client hello      client id, tag length (u8), task family tag (ascii)
0x05    shutdown          (empty)
0x06    round report      round, support loss f32, query loss f32
======  ================  ==================================================

On a stream socket each message is preceded by its total length as u32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

import numpy as np

from .nn import DTYPE
from .sparse import SparseDelta

MAGIC = b"TMF1"
MAX_FRAME = 64 * 1024 * 1024

_PREFIX = struct.Struct("<4sB")
_DENSE = struct.Struct("<II")
_SPARSE = struct.Struct("<III")
_ASSIGN = struct.Struct("<II")
_HELLO = struct.Struct("<IB")
_REPORT = struct.Struct("<Iff")
_LEN = struct.Struct("<I")
_ENTRY = np.dtype([("index", "<u4"), ("value", "<f4")])

DENSE_HEADER = _PREFIX.size + _DENSE.size
SPARSE_HEADER = _PREFIX.size + _SPARSE.size


class DecodeError(ValueError):
    """A byte sequence is not a well-formed TMF1 message."""


class MsgType(IntEnum):
    DENSE = 0x01
    SPARSE = 0x02
    ASSIGN = 0x03
    HELLO = 0x04
    SHUTDOWN = 0x05
    REPORT = 0x06


@dataclass(frozen=True, eq=False)
class DenseWeights:
    round: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=DTYPE).ravel())

    def __eq__(self, other):
        return (
            isinstance(other, DenseWeights)
            and self.round == other.round
            and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )

    __hash__ = None


@dataclass(frozen=True)
class RoundAssignment:
    round: int
    client_id: int


@dataclass(frozen=True)
class Hello:
    client_id: int
    family: str


@dataclass(frozen=True)
class Shutdown:
    pass


@dataclass(frozen=True)
class RoundReport:
    round: int
    support_loss: float
    query_loss: float


Message = Union[DenseWeights, SparseDelta, RoundAssignment, Hello, Shutdown, RoundReport]


def _prefix(t: MsgType) -> bytes:
    return _PREFIX.pack(MAGIC, int(t))


def encode(msg: Message) -> bytes:
    if isinstance(msg, SparseDelta):
        entries = np.empty(len(msg), dtype=_ENTRY)
        entries["index"] = msg.indices
        entries["value"] = msg.values
        head = _SPARSE.pack(msg.round, msg.global_count, len(msg))
        return _prefix(MsgType.SPARSE) + head + entries.tobytes()
    if isinstance(msg, DenseWeights):
        body = msg.values.astype("<f4").tobytes()
        return _prefix(MsgType.DENSE) + _DENSE.pack(msg.round, msg.values.size) + body
    if isinstance(msg, RoundAssignment):
        return _prefix(MsgType.ASSIGN) + _ASSIGN.pack(msg.round, msg.client_id)
    if isinstance(msg, Hello):
        tag = msg.family.encode("ascii")
        if len(tag) > 255:
            raise ValueError("task family tag longer than 255 bytes")
        return _prefix(MsgType.HELLO) + _HELLO.pack(msg.client_id, len(tag)) + tag
    if isinstance(msg, Shutdown):
        return _prefix(MsgType.SHUTDOWN)
    if isinstance(msg, RoundReport):
        return _prefix(MsgType.REPORT) + _REPORT.pack(msg.round, msg.support_loss, msg.query_loss)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def peek_type(data: bytes) -> MsgType:
    if len(data) < _PREFIX.size:
        raise DecodeError(f"message of {len(data)} bytes is shorter than the prefix")
    magic, kind = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    try:
        return MsgType(kind)
    except ValueError:
        raise DecodeError(f"unknown message type 0x{kind:02x}") from None


def _need(data: bytes, n: int, what: str) -> None:
    if len(data) != n:
        raise DecodeError(f"{what} message should be {n} bytes, got {len(data)}")


def decode(data: bytes) -> Message:
    kind = peek_type(data)
    off = _PREFIX.size
    if kind is MsgType.SPARSE:
        if len(data) < SPARSE_HEADER:
            raise DecodeError("truncated sparse delta header")
        rnd, count, n = _SPARSE.unpack_from(data, off)
        _need(data, SPARSE_HEADER + 8 * n, "sparse delta")
        entries = np.frombuffer(data, dtype=_ENTRY, count=n, offset=SPARSE_HEADER)
        try:
            return SparseDelta(rnd, count, entries["index"].copy(), entries["value"].astype(DTYPE))
        except ValueError as exc:
            raise DecodeError(f"invalid sparse delta: {exc}") from None
    if kind is MsgType.DENSE:
        if len(data) < DENSE_HEADER:
            raise DecodeError("truncated dense header")
        rnd, n = _DENSE.unpack_from(data, off)
        _need(data, DENSE_HEADER + 4 * n, "dense weights")
        values = np.frombuffer(data, dtype="<f4", count=n, offset=DENSE_HEADER).astype(DTYPE)
        return DenseWeights(rnd, values)
    if kind is MsgType.ASSIGN:
        _need(data, off + _ASSIGN.size, "round assignment")
        return RoundAssignment(*_ASSIGN.unpack_from(data, off))
    if kind is MsgType.HELLO:
        if len(data) < off + _HELLO.size:
            raise DecodeError("truncated hello")
        cid, n = _HELLO.unpack_from(data, off)
        _need(data, off + _HELLO.size + n, "hello")
        try:
            family = data[off + _HELLO.size :].decode("ascii")
        except UnicodeDecodeError:
            raise DecodeError("hello tag is not ascii") from None
        return Hello(cid, family)
    if kind is MsgType.SHUTDOWN:
        _need(data, off, "shutdown")
        return Shutdown()
    _need(data, off + _REPORT.size, "round report")
    return RoundReport(*_REPORT.unpack_from(data, off))


def dense_size(count: int) -> int:
    return DENSE_HEADER + 4 * count


def sparse_size(entries: int) -> int:
    return SPARSE_HEADER + 8 * entries


def byte_cost(delta: SparseDelta) -> int:
    return sparse_size(len(delta))


def full_cost(global_count: int) -> int:
    """Size of the dense message carrying ``global_count`` values."""
    return dense_size(global_count)


def frame(data: bytes) -> bytes:
    return _LEN.pack(len(data)) + data


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame" if buf else "connection closed")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if n > MAX_FRAME:
        raise DecodeError(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


def write_frame(sock, data: bytes) -> int:
    """Send one length-prefixed frame; returns bytes put on the wire."""
    payload = frame(data)
    sock.sendall(payload)
    return len(payload)
