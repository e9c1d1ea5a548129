"""On-disk binary change log.

Record layout, little-endian::

    u32 length                      bytes of the body that follows
    body:
      u64 lsn
      u64 txn_id
      u8  op                        1 Insert, 2 Update, 3 Delete, 4 Commit, 5 Abort
      u16 len + UTF-8 tenant
      u16 len + UTF-8 entity
      row before                    see values.encode_row
      row after
    u32 crc32(body)

A transaction's records are written with one ``write`` call. At recovery a
torn trailing record is cut off, together with any data records left without
their Commit.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

from ..errors import CorruptLog
from ..values import decode_row, encode_row

_HEAD = struct.Struct("<I")
_FIXED = struct.Struct("<QQB")
_U16 = struct.Struct("<H")


class LogOp(IntEnum):
    INSERT = 1
    UPDATE = 2
    DELETE = 3
    COMMIT = 4
    ABORT = 5


@dataclass(frozen=True)
class LogRecord:
    lsn: int
    txn_id: int
    tenant_id: str
    entity: str
    op: LogOp
    before: dict | None = None
    after: dict | None = None

    @property
    def is_data(self) -> bool:
        return self.op <= LogOp.DELETE


def encode_record(rec: LogRecord) -> bytes:
    tenant = rec.tenant_id.encode("utf-8")
    entity = rec.entity.encode("utf-8")
    body = b"".join((
        _FIXED.pack(rec.lsn, rec.txn_id, int(rec.op)),
        _U16.pack(len(tenant)), tenant,
        _U16.pack(len(entity)), entity,
        encode_row(rec.before),
        encode_row(rec.after),
    ))
    return _HEAD.pack(len(body)) + body + _HEAD.pack(zlib.crc32(body))


def _decode_body(body: bytes) -> LogRecord:
    lsn, txn_id, op = _FIXED.unpack_from(body, 0)
    pos = _FIXED.size
    (n,) = _U16.unpack_from(body, pos)
    pos += 2
    tenant = body[pos:pos + n].decode("utf-8")
    pos += n
    (n,) = _U16.unpack_from(body, pos)
    pos += 2
    entity = body[pos:pos + n].decode("utf-8")
    pos += n
    before, pos = decode_row(body, pos)
    after, pos = decode_row(body, pos)
    if pos != len(body):
        raise CorruptLog(f"record {lsn}: {len(body) - pos} trailing bytes")
    try:
        op = LogOp(op)
    except ValueError:
        raise CorruptLog(f"record {lsn}: bad op {op}") from None
    return LogRecord(lsn, txn_id, tenant, entity, op, before, after)


@dataclass
class RecoveryReport:
    records: list
    valid_bytes: int
    torn_records: int = 0
    discarded_records: int = 0


def scan(buf: bytes) -> RecoveryReport:
    """Decode ``buf``; stop at a torn tail, fail on corruption mid-file."""
    records: list[LogRecord] = []
    ends: list[int] = []
    pos = 0
    torn = 0
    while pos < len(buf):
        if pos + 4 > len(buf):
            torn = 1
            break
        (length,) = _HEAD.unpack_from(buf, pos)
        end = pos + 4 + length + 4
        if end > len(buf):
            torn = 1
            break
        body = buf[pos + 4:pos + 4 + length]
        (crc,) = _HEAD.unpack_from(buf, pos + 4 + length)
        if zlib.crc32(body) != crc:
            if end == len(buf):
                torn = 1
                break
            raise CorruptLog(f"checksum mismatch at offset {pos}")
        try:
            records.append(_decode_body(body))
        except (CorruptLog, struct.error, UnicodeDecodeError) as exc:
            raise CorruptLog(f"undecodable record at offset {pos}: {exc}") from exc
        ends.append(end)
        pos = end
    # drop data records whose transaction never finished
    keep = len(records)
    while keep and records[keep - 1].is_data:
        keep -= 1
    discarded = len(records) - keep
    valid = ends[keep - 1] if keep else 0
    return RecoveryReport(records[:keep], valid, torn, discarded)


class BinlogFile:
    """Append-only log file; ``strict`` durability fsyncs every append."""

    def __init__(self, path: str, durability: str = "relaxed"):
        if durability not in ("strict", "relaxed"):
            raise ValueError(f"durability must be strict or relaxed, not {durability!r}")
        self.path = path
        self.durability = durability
        self.recovery = RecoveryReport([], 0)
        if os.path.exists(path):
            with open(path, "rb") as fh:
                data = fh.read()
            self.recovery = scan(data)
            if self.recovery.valid_bytes != len(data):
                with open(path, "r+b") as fh:
                    fh.truncate(self.recovery.valid_bytes)
                    fh.flush()
                    os.fsync(fh.fileno())
        self._fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    def append(self, records) -> None:
        data = b"".join(encode_record(r) for r in records)
        view = memoryview(data)
        while view:
            n = os.write(self._fd, view)
            view = view[n:]
        if self.durability == "strict":
            os.fsync(self._fd)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


def read_file(path: str) -> RecoveryReport:
    with open(path, "rb") as fh:
        return scan(fh.read())
