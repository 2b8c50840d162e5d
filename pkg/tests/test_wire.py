import pytest
from hypothesis import given, strategies as st

from quicaudit import wire
from quicaudit.errors import MalformedTraceError
from quicaudit.trace import Direction, FrameKind, PacketKind

SCID = b"\x11" * 8
DCID = b"\x22" * 8


def test_packet_round_trip():
    payload = wire.build_ack() + wire.build_crypto(b"hello") + wire.build_padding(40)
    raw = wire.build_packet(PacketKind.INITIAL, SCID, DCID, payload)
    packets, trailing = wire.parse_datagram_bytes(raw)
    assert trailing == 0
    assert len(packets) == 1
    p = packets[0]
    assert p.kind is PacketKind.INITIAL
    assert p.scid == SCID and p.dcid == DCID
    assert p.wire_len == len(raw)
    frames = wire.parse_frames(p.payload)
    assert [k for k, _ in frames] == [wire.FRAME_ACK, wire.FRAME_CRYPTO, wire.FRAME_PADDING]
    assert frames[1][1] == b"hello"
    assert len(frames[2][1]) == 40


def test_coalesced_packets_and_trailing_padding():
    a = wire.build_packet(PacketKind.INITIAL, SCID, DCID, wire.build_ack())
    b = wire.build_packet(PacketKind.HANDSHAKE, SCID, DCID, wire.build_crypto(b"x" * 100))
    raw = a + b + b"\x00" * 37
    packets, trailing = wire.parse_datagram_bytes(raw)
    assert [p.kind for p in packets] == [PacketKind.INITIAL, PacketKind.HANDSHAKE]
    assert trailing == 37
    d = wire.datagram_from_bytes(Direction.SERVER_TO_CLIENT, 5, raw)
    assert d.udp_payload_len == len(raw)
    assert d.trailing_padding == 37
    assert sum(p.wire_len for p in d.packets) + 37 == len(raw)


def test_retry_has_no_frames():
    raw = wire.build_packet(PacketKind.RETRY, SCID, DCID, b"tok" * 5)
    d = wire.datagram_from_bytes(Direction.SERVER_TO_CLIENT, 0, raw)
    assert d.packets[0].kind is PacketKind.RETRY
    assert d.packets[0].frames == ()
    assert d.packets[0].header_len == len(raw)


def test_frame_summaries_account_every_byte():
    payload = (wire.build_crypto(b"a" * 300) + wire.build_padding(50) +
               wire.build_frame(wire.FRAME_END_BURST))
    raw = wire.build_packet(PacketKind.HANDSHAKE, SCID, DCID, payload)
    d = wire.datagram_from_bytes(Direction.SERVER_TO_CLIENT, 0, raw)
    p = d.packets[0]
    kinds = [f.kind for f in p.frames]
    assert kinds == [FrameKind.CRYPTO, FrameKind.PADDING, FrameKind.OTHER]
    assert p.header_len == wire.PACKET_HEADER_LEN
    assert sum(f.payload_len for f in p.frames) + p.header_len == p.wire_len
    assert p.frames[0].crypto_tls_len == 300


def test_truncated_inputs_rejected():
    good = wire.build_packet(PacketKind.INITIAL, SCID, DCID, wire.build_ack())
    with pytest.raises(MalformedTraceError):
        wire.parse_datagram_bytes(good[:-3])
    with pytest.raises(MalformedTraceError):
        wire.parse_datagram_bytes(b"\xff" + good)
    with pytest.raises(MalformedTraceError):
        wire.parse_frames(b"\x06\x00\x10abc")  # declared 16, got 3


def test_nonzero_bytes_in_trailing_padding_rejected():
    good = wire.build_packet(PacketKind.INITIAL, SCID, DCID, wire.build_ack())
    with pytest.raises(MalformedTraceError):
        wire.parse_datagram_bytes(good + b"\x00\x00\x07")


def test_declared_total_round_trip():
    body = wire.encode_declared_total(123456)
    assert len(body) == wire.SERVER_HELLO_LEN
    assert wire.decode_declared_total(body) == 123456


@given(st.binary(min_size=0, max_size=400), st.integers(0, 200))
def test_property_crypto_padding_round_trip(content, pad):
    payload = wire.build_crypto(content) + wire.build_padding(pad)
    raw = wire.build_packet(PacketKind.HANDSHAKE, SCID, DCID, payload)
    packets, trailing = wire.parse_datagram_bytes(raw)
    frames = wire.parse_frames(packets[0].payload)
    assert frames[0] == (wire.FRAME_CRYPTO, content)
    if pad:
        assert frames[1][0] == wire.FRAME_PADDING and len(frames[1][1]) == pad
