"""Scalar kinds, value coercion and the compact binary row codec."""

from __future__ import annotations

import struct
from decimal import Decimal, InvalidOperation
from enum import Enum

from .errors import CorruptLog, TypeMismatch

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class Scalar(str, Enum):
    INT64 = "Int64"
    DECIMAL = "Decimal"
    TEXT = "Text"
    BOOL = "Bool"
    TIMESTAMP_MILLIS = "TimestampMillis"
    GEOPOINT = "GeoPoint"


def coerce(scalar: Scalar, value):
    """Return ``value`` normalised to the Python type backing ``scalar``.

    Accepts the loose forms that arrive over JSON (decimal strings, point
    lists) and raises TypeMismatch for anything else. ``None`` passes through;
    nullability is the caller's concern.
    """
    if value is None:
        return None
    if scalar in (Scalar.INT64, Scalar.TIMESTAMP_MILLIS):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatch(f"expected {scalar.value}, got {value!r}")
        if not INT64_MIN <= value <= INT64_MAX:
            raise TypeMismatch(f"{value} outside 64-bit range")
        return value
    if scalar is Scalar.DECIMAL:
        if isinstance(value, Decimal):
            return value
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise TypeMismatch(f"expected Decimal, got {value!r}")
        try:
            return Decimal(value)
        except InvalidOperation as exc:
            raise TypeMismatch(f"bad decimal {value!r}") from exc
    if scalar is Scalar.TEXT:
        if not isinstance(value, str):
            raise TypeMismatch(f"expected Text, got {value!r}")
        return value
    if scalar is Scalar.BOOL:
        if not isinstance(value, bool):
            raise TypeMismatch(f"expected Bool, got {value!r}")
        return value
    if scalar is Scalar.GEOPOINT:
        if isinstance(value, dict):
            value = (value.get("x"), value.get("y"))
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise TypeMismatch(f"expected GeoPoint, got {value!r}")
        x, y = value
        for c in (x, y):
            if isinstance(c, bool) or not isinstance(c, (int, float)):
                raise TypeMismatch(f"expected GeoPoint, got {value!r}")
        return (float(x), float(y))
    raise TypeMismatch(f"unknown scalar {scalar!r}")


def to_jsonable(value):
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, tuple):
        return [to_jsonable(v) for v in value]
    if isinstance(value, list):
        return [to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: to_jsonable(v) for k, v in value.items()}
    return value


# -- binary codec -------------------------------------------------------------
# tags: 0 null, 1 int64, 2 decimal text, 3 utf-8 text, 4 bool, 6 geopoint

_I64 = struct.Struct("<q")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_POINT = struct.Struct("<dd")


def _encode_value(out: bytearray, value) -> None:
    if value is None:
        out.append(0)
    elif isinstance(value, bool):
        out.append(4)
        out.append(1 if value else 0)
    elif isinstance(value, int):
        out.append(1)
        out += _I64.pack(value)
    elif isinstance(value, Decimal):
        raw = str(value).encode("ascii")
        out.append(2)
        out += _U16.pack(len(raw))
        out += raw
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(3)
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(value, tuple) and len(value) == 2:
        out.append(6)
        out += _POINT.pack(*value)
    else:
        raise TypeMismatch(f"cannot encode {value!r}")


def encode_row(row: dict | None) -> bytes:
    """Presence byte, field count, then (name, tagged value) pairs."""
    if row is None:
        return b"\x00"
    out = bytearray(b"\x01")
    out += _U16.pack(len(row))
    for name, value in row.items():
        raw = name.encode("utf-8")
        out += _U16.pack(len(raw))
        out += raw
        _encode_value(out, value)
    return bytes(out)


def decode_row(buf: bytes, pos: int) -> tuple[dict | None, int]:
    try:
        present = buf[pos]
        pos += 1
        if not present:
            return None, pos
        (n,) = _U16.unpack_from(buf, pos)
        pos += 2
        row = {}
        for _ in range(n):
            (ln,) = _U16.unpack_from(buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            tag = buf[pos]
            pos += 1
            if tag == 0:
                value = None
            elif tag == 1:
                (value,) = _I64.unpack_from(buf, pos)
                pos += 8
            elif tag == 2:
                (ln,) = _U16.unpack_from(buf, pos)
                pos += 2
                value = Decimal(buf[pos:pos + ln].decode("ascii"))
                pos += ln
            elif tag == 3:
                (ln,) = _U32.unpack_from(buf, pos)
                pos += 4
                value = buf[pos:pos + ln].decode("utf-8")
                pos += ln
            elif tag == 4:
                value = bool(buf[pos])
                pos += 1
            elif tag == 6:
                value = _POINT.unpack_from(buf, pos)
                pos += 16
            else:
                raise CorruptLog(f"unknown value tag {tag}")
            row[name] = value
        return row, pos
    except (IndexError, struct.error, UnicodeDecodeError) as exc:
        raise CorruptLog(f"truncated row at offset {pos}") from exc
