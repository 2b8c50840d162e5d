"""DER TLV primitives.

Just enough ASN.1 to measure certificates byte-exactly: header
decoding, child iteration, and OID rendering. No value interpretation
beyond that.
"""

from __future__ import annotations

from typing import Iterator

from .errors import DerParseError

TAG_SEQUENCE = 0x30
TAG_SET = 0x31
TAG_INTEGER = 0x02
TAG_BIT_STRING = 0x03
TAG_OCTET_STRING = 0x04
TAG_OID = 0x06
TAG_CTX_0 = 0xA0  # [0] constructed
TAG_CTX_3 = 0xA3  # [3] constructed


def read_header(data: bytes, off: int) -> tuple[int, int, int]:
    """Return (tag, header_len, content_len) for the TLV at ``off``."""
    if off >= len(data):
        raise DerParseError("unexpected end of input", off)
    tag = data[off]
    if tag & 0x1F == 0x1F:
        raise DerParseError("multi-byte tags are not used in certificates", off)
    if off + 1 >= len(data):
        raise DerParseError("missing length byte", off)
    first = data[off + 1]
    if first < 0x80:
        return tag, 2, first
    n = first & 0x7F
    if n == 0 or n > 4:
        raise DerParseError(f"unsupported length-of-length {n}", off)
    if off + 2 + n > len(data):
        raise DerParseError("truncated long-form length", off)
    content_len = int.from_bytes(data[off + 2:off + 2 + n], "big")
    return tag, 2 + n, content_len


def tlv_end(data: bytes, off: int) -> int:
    tag, hlen, clen = read_header(data, off)
    end = off + hlen + clen
    if end > len(data):
        raise DerParseError("TLV extends past end of input", off)
    return end


def iter_children(data: bytes, start: int, end: int) -> Iterator[tuple[int, int, int, int]]:
    """Yield (tag, offset, header_len, content_len) for TLVs in [start, end)."""
    off = start
    while off < end:
        tag, hlen, clen = read_header(data, off)
        if off + hlen + clen > end:
            raise DerParseError("child TLV overruns parent", off)
        yield tag, off, hlen, clen
        off += hlen + clen
    if off != end:
        raise DerParseError("children do not fill parent exactly", off)


def decode_oid(content: bytes) -> str:
    if not content:
        raise DerParseError("empty OID", 0)
    first = content[0]
    parts = [str(first // 40), str(first % 40)]
    value = 0
    for byte in content[1:]:
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            parts.append(str(value))
            value = 0
    return ".".join(parts)
