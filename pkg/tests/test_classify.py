import pytest
from hypothesis import given, settings

from quicaudit.classify import (
    HandshakeClass,
    LimitPolicy,
    amplification_factor,
    classify_handshake,
    coalescence_report,
    count_client_flights,
    limit_check,
    payload_decomposition,
    validation_point,
)
from quicaudit.errors import (
    FramesUnavailableError,
    MalformedTraceError,
    NotClassifiableError,
)
from quicaudit.trace import (
    Datagram,
    Direction,
    FrameKind,
    FrameSummary,
    PacketKind,
    PacketRecord,
    TraceOutcome,
)

from .reference import reference_classify, reference_validation_point
from .tracebuild import C, S, crypto_frames, dgram, packet, trace, traces_strategy


# ---------------------------------------------------------------------------
# validation_point
# ---------------------------------------------------------------------------

def test_validation_point_basic():
    t = trace(C(1200), S(2000), C(1200), S(3000))
    assert validation_point(t) == 2


def test_validation_point_no_second_flight():
    t = trace(C(1200), S(2000), outcome=TraceOutcome.TIMED_OUT)
    assert validation_point(t) == 2  # end of trace: everything pre-validation


def test_validation_point_multiple_server_bursts():
    # Enumerated by hand: S-a, S-b are pre-validation, S-c is post.
    t = trace(C(1200), S(1500), S(1500), C(1200), S(2000), C(1200))
    vp = validation_point(t)
    assert vp == 3
    assert vp == reference_validation_point(t)
    pre_server = sum(d.udp_payload_len for d in t.datagrams[:vp]
                     if d.direction is Direction.SERVER_TO_CLIENT)
    assert pre_server == 3000


def test_validation_point_malformed():
    t = trace(S(1200), C(1200))
    with pytest.raises(MalformedTraceError):
        validation_point(t)


# ---------------------------------------------------------------------------
# amplification_factor
# ---------------------------------------------------------------------------

def test_factor_resend_28x():
    # 35,056 server bytes against a 1,252-byte Initial, never acknowledged.
    t = trace(C(1252), S(14000), S(14000), S(7056), outcome=TraceOutcome.TIMED_OUT)
    assert amplification_factor(t) == pytest.approx(28.0)


def test_factor_resend_5x_group():
    t = trace(C(1252), S(7000), outcome=TraceOutcome.TIMED_OUT)
    assert amplification_factor(t) == pytest.approx(7000 / 1252)
    assert amplification_factor(t) > 5


def test_factor_zero_when_server_silent():
    t = trace(C(1362), outcome=TraceOutcome.TIMED_OUT)
    assert amplification_factor(t) == 0.0


def test_factor_exact_3x_boundary():
    t = trace(C(1200), S(1200), S(1200), S(1200), C(1200))
    assert amplification_factor(t) == 3.0
    assert limit_check(t, LimitPolicy.DATA_3X_RFC9000).compliant


# ---------------------------------------------------------------------------
# classify_handshake
# ---------------------------------------------------------------------------

def test_classify_retry_always_wins():
    retry = dgram(Direction.SERVER_TO_CLIENT, 40, packets=(
        PacketRecord(kind=PacketKind.RETRY, wire_len=40, frames=()),))
    # Even with absurd byte counts, Retry wins.
    t = trace(C(1200), retry, C(1200), S(60000), C(1200))
    r = classify_handshake(t)
    assert r.klass is HandshakeClass.RETRY


def test_classify_amplification_with_factor():
    t = trace(C(1362), S(8340, kind=PacketKind.HANDSHAKE), C(1200))
    r = classify_handshake(t)
    assert r.klass is HandshakeClass.AMPLIFICATION
    assert r.amplification_factor == pytest.approx(8340 / 1362)
    assert r.amplification_factor == pytest.approx(6.12, abs=0.01)
    assert r.limit_exceeded


def test_classify_multi_rtt_stall():
    t = trace(C(1200), S(3600, kind=PacketKind.HANDSHAKE), C(1200),
              S(1400, kind=PacketKind.HANDSHAKE), C(1200))
    r = classify_handshake(t)
    assert r.klass is HandshakeClass.MULTI_RTT
    assert r.amplification_factor == 3.0
    assert not r.limit_exceeded
    assert r.multi_rtt_flag
    assert r.client_flights == 2


def test_classify_one_rtt():
    # 3,900 <= 3 x 1,362 = 4,086
    t = trace(C(1362), S(3900, kind=PacketKind.HANDSHAKE), C(1200))
    r = classify_handshake(t)
    assert r.klass is HandshakeClass.ONE_RTT
    assert not r.limit_exceeded
    assert r.client_flights == 1


def test_classify_amplification_and_multi_rtt_overlap():
    # Exceeds the limit AND needs extra roundtrips: class is
    # AMPLIFICATION, the multi-RTT overlap stays visible in the flag.
    t = trace(C(1200), S(4000, kind=PacketKind.HANDSHAKE), C(1200),
              S(1000, kind=PacketKind.HANDSHAKE), C(1200))
    r = classify_handshake(t)
    assert r.klass is HandshakeClass.AMPLIFICATION
    assert r.multi_rtt_flag


def test_classify_rejects_unreachable_and_refused():
    for outcome in (TraceOutcome.UNREACHABLE, TraceOutcome.REFUSED):
        t = trace(C(1200), outcome=outcome)
        with pytest.raises(NotClassifiableError):
            classify_handshake(t)


def test_classify_rejects_version_negotiation():
    vn = dgram(Direction.SERVER_TO_CLIENT, 60, kind=PacketKind.VERSION_NEGOTIATION)
    t = trace(C(1200), vn, C(1200))
    with pytest.raises(NotClassifiableError):
        classify_handshake(t)


def test_classify_rejects_timed_out_without_server_data():
    t = trace(C(1200), outcome=TraceOutcome.TIMED_OUT)
    with pytest.raises(NotClassifiableError):
        classify_handshake(t)


def test_one_rtt_requires_single_flight_post_validation_acks_ok():
    # Server confirmation in a 1-RTT packet after the client ACK does not
    # turn a one-roundtrip handshake into multi-RTT.
    t = trace(C(1200), S(2400, kind=PacketKind.HANDSHAKE), C(1200),
              S(28, kind=PacketKind.ONE_RTT))
    r = classify_handshake(t)
    assert r.klass is HandshakeClass.ONE_RTT
    assert r.client_flights == 1


# ---------------------------------------------------------------------------
# payload_decomposition
# ---------------------------------------------------------------------------

def test_decomposition_all_padding_datagram():
    all_pad = Datagram(direction=Direction.SERVER_TO_CLIENT, udp_payload_len=1200,
                       time_us=1, packets=(), trailing_padding=1200)
    t = trace(C(1200, frames=crypto_frames(280) +
               (FrameSummary(FrameKind.PADDING, 1200 - 21 - 283),)),
              all_pad, outcome=TraceOutcome.TIMED_OUT)
    d = payload_decomposition(t)
    assert d.padding_bytes == 1200
    assert d.tls_bytes == 0
    assert d.total == 1200


def test_decomposition_constructed_partition():
    # CRYPTO 3,000 TLS bytes + 120 header/frame overhead + 480 padding.
    pkt = PacketRecord(
        kind=PacketKind.HANDSHAKE, wire_len=3120,
        frames=(FrameSummary(FrameKind.CRYPTO, 3099, 3000),))  # 21 hdr + 99 overhead
    server = Datagram(direction=Direction.SERVER_TO_CLIENT, udp_payload_len=3600,
                      time_us=1, packets=(pkt,), trailing_padding=480)
    t = trace(C(1200), server, C(1200))
    d = payload_decomposition(t)
    assert (d.tls_bytes, d.quic_header_bytes, d.padding_bytes, d.ack_overhead_bytes) == \
        (3000, 120, 480, 0)
    assert d.total == 3600


def test_decomposition_requires_frames():
    t = trace(C(1200), S(2000, frames=None), C(1200))
    with pytest.raises(FramesUnavailableError):
        payload_decomposition(t)


def test_decomposition_ack_bucket():
    pkt = PacketRecord(kind=PacketKind.INITIAL, wire_len=1200, frames=(
        FrameSummary(FrameKind.ACK, 11),
        FrameSummary(FrameKind.PADDING, 1168),))
    server = Datagram(direction=Direction.SERVER_TO_CLIENT, udp_payload_len=1200,
                      time_us=1, packets=(pkt,))
    t = trace(C(1200), server, C(1200))
    d = payload_decomposition(t)
    assert d.ack_overhead_bytes == 11
    assert d.padding_bytes == 1168
    assert d.quic_header_bytes == 21


# ---------------------------------------------------------------------------
# coalescence_report
# ---------------------------------------------------------------------------

def test_coalescence_histogram_three_packets():
    pkts = tuple(packet(kind=k, wire_len=400) for k in
                 (PacketKind.INITIAL, PacketKind.HANDSHAKE, PacketKind.HANDSHAKE))
    server = Datagram(direction=Direction.SERVER_TO_CLIENT, udp_payload_len=1200,
                      time_us=1, packets=pkts)
    t = trace(C(1200), server, C(1200))
    rep = coalescence_report(t)
    assert rep.packets_per_datagram == {3: 1}
    assert not rep.separate_ack_flight


def test_coalescence_separate_ack_pattern():
    ack_pkt = PacketRecord(kind=PacketKind.INITIAL, wire_len=1200, frames=(
        FrameSummary(FrameKind.ACK, 11), FrameSummary(FrameKind.PADDING, 1168)))
    sh_pkt = PacketRecord(kind=PacketKind.INITIAL, wire_len=1300, frames=(
        FrameSummary(FrameKind.CRYPTO, 123, 120), FrameSummary(FrameKind.PADDING, 1156)))
    hs_pkt = packet(kind=PacketKind.HANDSHAKE, wire_len=1400)
    t = trace(
        C(1200),
        Datagram(Direction.SERVER_TO_CLIENT, 1200, 1, (ack_pkt,)),
        Datagram(Direction.SERVER_TO_CLIENT, 1300, 2, (sh_pkt,)),
        Datagram(Direction.SERVER_TO_CLIENT, 1400, 3, (hs_pkt,)),
        C(1200),
    )
    rep = coalescence_report(t)
    assert rep.separate_ack_flight
    assert max(rep.packets_per_datagram) == 1


def test_coalescence_not_flagged_when_coalesced():
    both = (packet(kind=PacketKind.INITIAL, wire_len=200),
            packet(kind=PacketKind.HANDSHAKE, wire_len=1000))
    ack_alone = PacketRecord(kind=PacketKind.INITIAL, wire_len=1200, frames=(
        FrameSummary(FrameKind.ACK, 11), FrameSummary(FrameKind.PADDING, 1168)))
    t = trace(
        C(1200),
        Datagram(Direction.SERVER_TO_CLIENT, 1200, 1, (ack_alone,)),
        Datagram(Direction.SERVER_TO_CLIENT, 1200, 2, both),
        C(1200),
    )
    assert not coalescence_report(t).separate_ack_flight


# ---------------------------------------------------------------------------
# limit_check
# ---------------------------------------------------------------------------

def test_limit_check_datagram_count():
    t = trace(C(1200), S(100), S(100), S(100), S(100), C(1200))
    assert not limit_check(t, LimitPolicy.DATAGRAMS_3).compliant
    t3 = trace(C(1200), S(100), S(100), S(100), C(1200))
    assert limit_check(t3, LimitPolicy.DATAGRAMS_3).compliant


def test_limit_check_bytes_equality_compliant():
    t = trace(C(1200), S(3600), C(1200))
    for policy in (LimitPolicy.BYTES_3X, LimitPolicy.DATA_3X_RFC9000):
        chk = limit_check(t, policy)
        assert chk.compliant
        assert chk.observed == 3600
        assert chk.allowed == 3600


def test_limit_check_handshake_packets_only():
    # 5 INITIAL + 2 HANDSHAKE packets: only Handshake packets count.
    initials = tuple(packet(kind=PacketKind.INITIAL, wire_len=100) for _ in range(5))
    hs = tuple(packet(kind=PacketKind.HANDSHAKE, wire_len=100) for _ in range(2))
    server = Datagram(Direction.SERVER_TO_CLIENT, 700, 1, initials + hs)
    t = trace(C(1200), server, C(1200))
    chk = limit_check(t, LimitPolicy.HANDSHAKE_PACKETS_3)
    assert chk.compliant
    assert chk.observed == 2


def test_limit_check_four_handshake_packets_violates():
    hs = tuple(packet(kind=PacketKind.HANDSHAKE, wire_len=100) for _ in range(4))
    server = Datagram(Direction.SERVER_TO_CLIENT, 400, 1, hs)
    t = trace(C(1200), server, C(1200))
    assert not limit_check(t, LimitPolicy.HANDSHAKE_PACKETS_3).compliant


def test_policy_enum_is_exactly_four():
    assert {p.name for p in LimitPolicy} == {
        "HANDSHAKE_PACKETS_3", "DATAGRAMS_3", "BYTES_3X", "DATA_3X_RFC9000"}
    for p in LimitPolicy:
        assert p.source_label


# ---------------------------------------------------------------------------
# Properties
# ---------------------------------------------------------------------------

@given(traces_strategy())
def test_property_classify_matches_reference(t):
    try:
        r = classify_handshake(t)
    except NotClassifiableError:
        return
    assert r.klass.value == reference_classify(t)


@given(traces_strategy(frames_visible=True))
def test_property_decomposition_partition(t):
    try:
        d = payload_decomposition(t)
    except FramesUnavailableError:
        return
    vp = validation_point(t)
    server = sum(x.udp_payload_len for x in t.datagrams[:vp]
                 if x.direction is Direction.SERVER_TO_CLIENT)
    assert d.total == server


@given(traces_strategy())
def test_property_monotonic_in_server_bytes(t):
    base = amplification_factor(t)
    vp = validation_point(t)
    extra = S(900, kind=PacketKind.HANDSHAKE)
    position = max(1, vp)
    dgrams = list(t.datagrams)
    dgrams.insert(position, Datagram(
        direction=extra.direction, udp_payload_len=extra.udp_payload_len,
        time_us=extra.time_us, packets=extra.packets,
        trailing_padding=extra.trailing_padding))
    grown = type(t)(datagrams=tuple(dgrams),
                    client_initial_size=t.client_initial_size,
                    outcome=t.outcome,
                    handshake_confirmed_time=t.handshake_confirmed_time)
    assert amplification_factor(grown) >= base


@given(traces_strategy())
def test_property_equality_boundary_never_exceeds(t):
    try:
        r = classify_handshake(t)
    except NotClassifiableError:
        return
    if r.pre_validation_server_bytes == 3 * r.pre_validation_client_bytes:
        assert not r.limit_exceeded


@given(traces_strategy())
def test_property_flights_match_reference(t):
    from .reference import reference_client_flights
    assert count_client_flights(t) == reference_client_flights(t)
