"""Recursive length-prefix serialization.

Items are ``bytes`` or (nested) lists of items. Integers are encoded as
minimal big-endian byte strings; :func:`encode` accepts ``int`` for
convenience, :func:`decode` always yields bytes.
"""
from __future__ import annotations

from typing import List, Tuple, Union

Item = Union[bytes, List["Item"]]


class RLPError(ValueError):
    """Malformed or non-canonical RLP input; ``offset`` points at the fault."""

    def __init__(self, message: str, offset: int = 0) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def int_to_bytes(value: int) -> bytes:
    if value < 0:
        raise ValueError("RLP cannot encode negative integers")
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


def bytes_to_int(data: bytes, strict: bool = True) -> int:
    if strict and data[:1] == b"\x00":
        raise RLPError("integer has leading zero byte")
    return int.from_bytes(data, "big")


def _length_prefix(length: int, offset: int) -> bytes:
    if length < 56:
        return bytes([offset + length])
    raw = int_to_bytes(length)
    if len(raw) > 8:
        raise ValueError("RLP item too long")
    return bytes([offset + 55 + len(raw)]) + raw


def encode(item) -> bytes:
    if isinstance(item, bool):
        raise TypeError("booleans are not RLP-encodable")
    if isinstance(item, int):
        item = int_to_bytes(item)
    if isinstance(item, (bytes, bytearray)):
        item = bytes(item)
        if len(item) == 1 and item[0] < 0x80:
            return item
        return _length_prefix(len(item), 0x80) + item
    if isinstance(item, str):
        return encode(item.encode())
    if isinstance(item, (list, tuple)):
        payload = b"".join(encode(x) for x in item)
        return _length_prefix(len(payload), 0xC0) + payload
    raise TypeError(f"cannot RLP-encode {type(item).__name__}")


def _decode_at(data: bytes, pos: int) -> Tuple[Item, int]:
    if pos >= len(data):
        raise RLPError("unexpected end of input", pos)
    b0 = data[pos]
    if b0 < 0x80:
        return data[pos:pos + 1], pos + 1
    if b0 < 0xB8:
        n = b0 - 0x80
        start = pos + 1
        end = start + n
        if end > len(data):
            raise RLPError("string runs past end of input", pos)
        if n == 1 and data[start] < 0x80:
            raise RLPError("single byte below 0x80 must not be prefixed", pos)
        return data[start:end], end
    if b0 < 0xC0:
        ll = b0 - 0xB7
        n, start = _long_length(data, pos, ll)
        end = start + n
        if end > len(data):
            raise RLPError("string runs past end of input", pos)
        return data[start:end], end
    if b0 < 0xF8:
        n = b0 - 0xC0
        start = pos + 1
    else:
        n, start = _long_length(data, pos, b0 - 0xF7)
    end = start + n
    if end > len(data):
        raise RLPError("list runs past end of input", pos)
    items = []
    cur = start
    while cur < end:
        item, cur = _decode_at(data, cur)
        if cur > end:
            raise RLPError("list element overruns list payload", cur)
        items.append(item)
    return items, end


def _long_length(data: bytes, pos: int, ll: int) -> Tuple[int, int]:
    start = pos + 1 + ll
    if start > len(data):
        raise RLPError("length-of-length runs past end of input", pos)
    raw = data[pos + 1:start]
    if raw[0] == 0:
        raise RLPError("length has leading zero byte", pos)
    n = int.from_bytes(raw, "big")
    if n < 56:
        raise RLPError("long form used for short payload", pos)
    return n, start


def decode(data: bytes, strict: bool = True) -> Item:
    """Decode one item. ``strict`` rejects trailing bytes after it."""
    item, end = _decode_at(bytes(data), 0)
    if strict and end != len(data):
        raise RLPError("trailing bytes after RLP item", end)
    return item


def decode_prefix(data: bytes) -> Tuple[Item, int]:
    """Decode the first item and return it with the number of bytes used."""
    return _decode_at(bytes(data), 0)
