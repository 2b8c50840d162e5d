"""Plaintext packet framing for closed-loop probing.

Mirrors the QUIC packet/frame layout (long-header packets carrying
connection IDs and length-prefixed frames, PADDING as runs of zero
bytes) without packet protection, so mock servers and the prober can
exchange deterministic byte counts over real UDP sockets. The trace
layer is identical to what a production QUIC transport backend would
produce.

Packet wire format:
    kind(1) | scid_len(1) scid | dcid_len(1) dcid | payload_len(2 BE) | payload

Frame wire format inside a payload:
    0x00            -> PADDING, one byte per zero byte (runs are merged)
    0x02 len(2) ... -> ACK
    0x06 len(2) ... -> CRYPTO, len TLS bytes follow
    other len(2) .. -> opaque frame (markers below)

RETRY packets carry a token as raw payload, no frames. Zero bytes after
the last packet of a datagram are UDP-layer trailing padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import MalformedTraceError
from .trace import (
    Datagram,
    Direction,
    FrameKind,
    FrameSummary,
    PacketKind,
    PacketRecord,
)

PKT_BYTE = {
    PacketKind.INITIAL: 0x01,
    PacketKind.HANDSHAKE: 0x02,
    PacketKind.RETRY: 0x03,
    PacketKind.ONE_RTT: 0x04,
    PacketKind.VERSION_NEGOTIATION: 0x05,
}
BYTE_PKT = {v: k for k, v in PKT_BYTE.items()}

FRAME_PADDING = 0x00
FRAME_ACK = 0x02
FRAME_CRYPTO = 0x06
# Opaque marker frames used by the loopback protocol machine.
FRAME_END_BURST = 0xE1   # last datagram of a server flight burst; elicits a client ACK
FRAME_TOKEN = 0xE2       # Retry token echoed inside the client's second Initial
FRAME_DONE = 0xE3        # server handshake confirmation

CID_LEN = 8
PACKET_HEADER_LEN = 5 + 2 * CID_LEN  # kind + 2 cid length bytes + u16 payload len + cids
FRAME_HEADER_LEN = 3                 # kind + u16 length

ACK_CONTENT_LEN = 8
CLIENT_HELLO_LEN = 280
SERVER_HELLO_LEN = 120
FINISHED_LEN = 36

FILL_BYTE = 0x5A


@dataclass(frozen=True)
class ParsedPacket:
    kind: PacketKind
    scid: bytes
    dcid: bytes
    payload: bytes
    wire_len: int


def build_frame(kind_byte: int, content: bytes = b"") -> bytes:
    if kind_byte == FRAME_PADDING:
        raise ValueError("padding is emitted as raw zero bytes, use build_padding")
    return struct.pack("!BH", kind_byte, len(content)) + content


def build_padding(n: int) -> bytes:
    return b"\x00" * n


def build_crypto(content: bytes) -> bytes:
    return build_frame(FRAME_CRYPTO, content)


def build_ack() -> bytes:
    return build_frame(FRAME_ACK, bytes(ACK_CONTENT_LEN))


def build_packet(kind: PacketKind, scid: bytes, dcid: bytes, payload: bytes) -> bytes:
    if len(scid) != CID_LEN or len(dcid) != CID_LEN:
        raise ValueError(f"connection IDs must be {CID_LEN} bytes")
    return bytes([PKT_BYTE[kind], len(scid)]) + scid + bytes([len(dcid)]) + dcid + \
        struct.pack("!H", len(payload)) + payload


def packet_len(payload_len: int) -> int:
    return PACKET_HEADER_LEN + payload_len


def crypto_frame_len(content_len: int) -> int:
    return FRAME_HEADER_LEN + content_len


def parse_datagram_bytes(data: bytes) -> tuple[list[ParsedPacket], int]:
    """Split a datagram into packets plus trailing UDP-layer padding."""
    packets: list[ParsedPacket] = []
    off = 0
    n = len(data)
    while off < n:
        kind_byte = data[off]
        if kind_byte == 0x00:
            rest = data[off:]
            if rest.strip(b"\x00"):
                raise MalformedTraceError("nonzero bytes inside trailing padding")
            return packets, n - off
        kind = BYTE_PKT.get(kind_byte)
        if kind is None:
            raise MalformedTraceError(f"unknown packet kind byte {kind_byte:#x}")
        if off + 2 > n:
            raise MalformedTraceError("truncated packet header")
        scid_len = data[off + 1]
        p = off + 2
        scid = data[p:p + scid_len]
        p += scid_len
        if p >= n:
            raise MalformedTraceError("truncated packet header")
        dcid_len = data[p]
        p += 1
        dcid = data[p:p + dcid_len]
        p += dcid_len
        if p + 2 > n:
            raise MalformedTraceError("truncated packet length")
        (payload_len,) = struct.unpack_from("!H", data, p)
        p += 2
        if p + payload_len > n:
            raise MalformedTraceError("packet payload exceeds datagram")
        payload = data[p:p + payload_len]
        p += payload_len
        packets.append(ParsedPacket(kind, scid, dcid, payload, p - off))
        off = p
    return packets, 0


def parse_frames(payload: bytes) -> list[tuple[int, bytes]]:
    """Raw (kind_byte, content) frames; padding runs collapse to one entry."""
    frames: list[tuple[int, bytes]] = []
    off = 0
    n = len(payload)
    while off < n:
        kind = payload[off]
        if kind == FRAME_PADDING:
            run = off
            while run < n and payload[run] == 0x00:
                run += 1
            frames.append((FRAME_PADDING, payload[off:run]))
            off = run
            continue
        if off + FRAME_HEADER_LEN > n:
            raise MalformedTraceError("truncated frame header")
        (length,) = struct.unpack_from("!H", payload, off + 1)
        start = off + FRAME_HEADER_LEN
        if start + length > n:
            raise MalformedTraceError("frame content exceeds packet payload")
        frames.append((kind, payload[start:start + length]))
        off = start + length
    return frames


def summarize_packet(p: ParsedPacket) -> PacketRecord:
    if p.kind is PacketKind.RETRY:
        return PacketRecord(kind=p.kind, wire_len=p.wire_len, frames=(),
                            scid=p.scid, dcid=p.dcid)
    summaries = []
    for kind_byte, content in parse_frames(p.payload):
        if kind_byte == FRAME_PADDING:
            summaries.append(FrameSummary(FrameKind.PADDING, len(content)))
        elif kind_byte == FRAME_CRYPTO:
            summaries.append(FrameSummary(FrameKind.CRYPTO,
                                          FRAME_HEADER_LEN + len(content), len(content)))
        elif kind_byte == FRAME_ACK:
            summaries.append(FrameSummary(FrameKind.ACK, FRAME_HEADER_LEN + len(content)))
        else:
            summaries.append(FrameSummary(FrameKind.OTHER, FRAME_HEADER_LEN + len(content)))
    return PacketRecord(kind=p.kind, wire_len=p.wire_len, frames=tuple(summaries),
                        scid=p.scid, dcid=p.dcid)


def datagram_from_bytes(direction: Direction, time_us: int, data: bytes) -> Datagram:
    packets, trailing = parse_datagram_bytes(data)
    return Datagram(
        direction=direction,
        udp_payload_len=len(data),
        time_us=time_us,
        packets=tuple(summarize_packet(p) for p in packets),
        trailing_padding=trailing,
    )


def fill_bytes(n: int) -> bytes:
    return bytes([FILL_BYTE]) * n


def encode_declared_total(total: int) -> bytes:
    """ServerHello content: 4-byte declared handshake-crypto total + filler."""
    body = struct.pack("!I", total) + fill_bytes(SERVER_HELLO_LEN - 4)
    return body


def decode_declared_total(server_hello: bytes) -> int:
    if len(server_hello) < 4:
        raise MalformedTraceError("server hello too short")
    (total,) = struct.unpack_from("!I", server_hello, 0)
    return total
