"""Handshake classification and anti-amplification accounting.

Servers must not send more than three times the bytes received from an
address they have not validated yet. Validation happens through a
completed roundtrip (or a Retry token), so from the client's viewpoint
everything the server sends before the client's second flight is
"pre-validation" and subject to the limit.

Completed handshakes fall into four disjoint groups, checked in order:

1. RETRY          -- the server forced address validation via Retry.
2. AMPLIFICATION  -- the pre-validation reply exceeded the limit.
3. MULTI_RTT      -- completion needed more than one client flight
                     (typically: the certificate chain did not fit).
4. ONE_RTT        -- completed in one roundtrip, within the limit.

A handshake can both exceed the limit and need extra roundtrips; the
class is then AMPLIFICATION and ``multi_rtt_flag`` keeps the overlap
visible.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .errors import (
    FramesUnavailableError,
    NotClassifiableError,
    UndefinedRatioError,
)
from .trace import (
    Datagram,
    Direction,
    FrameKind,
    HandshakeTrace,
    PacketKind,
    TraceOutcome,
    require_well_formed,
)

# The pre-validation reply budget relative to client bytes (RFC 9000 §8.1).
AMPLIFICATION_LIMIT_FACTOR = 3


class LimitPolicy(Enum):
    """Historical anti-amplification rules from the transport draft series.

    Exactly four variants existed: a cap of three Handshake packets, a cap
    of three datagrams, and the 3x rule first phrased over bytes and later
    over data. The two 3x variants are evaluated identically; the rules
    say "more than three times", so equality is compliant.
    """

    HANDSHAKE_PACKETS_3 = "draft-10..12: at most three Handshake packets to an unverified source"
    DATAGRAMS_3 = "draft-13..14: at most three datagrams to an unverified source"
    BYTES_3X = "draft-15..32: at most 3x the bytes received before address verification"
    DATA_3X_RFC9000 = "RFC 9000: at most 3x the data received from the unvalidated address"

    @property
    def source_label(self) -> str:
        return self.value


class HandshakeClass(str, Enum):
    ONE_RTT = "ONE_RTT"
    RETRY = "RETRY"
    MULTI_RTT = "MULTI_RTT"
    AMPLIFICATION = "AMPLIFICATION"


@dataclass(frozen=True)
class ClassificationResult:
    klass: HandshakeClass
    amplification_factor: float
    pre_validation_server_bytes: int
    pre_validation_client_bytes: int
    client_flights: int
    limit_exceeded: bool
    multi_rtt_flag: bool


@dataclass(frozen=True)
class PayloadDecomposition:
    """Exact partition of pre-validation server bytes."""

    tls_bytes: int
    quic_header_bytes: int
    padding_bytes: int
    ack_overhead_bytes: int

    @property
    def total(self) -> int:
        return self.tls_bytes + self.quic_header_bytes + self.padding_bytes + self.ack_overhead_bytes


@dataclass(frozen=True)
class CoalescenceReport:
    packets_per_datagram: dict
    separate_ack_flight: bool


@dataclass(frozen=True)
class LimitCheck:
    compliant: bool
    policy: LimitPolicy
    observed: int
    allowed: int
    detail: str


def validation_point(trace: HandshakeTrace) -> int:
    """Index of the client's second flight; len(trace.datagrams) if absent.

    The second flight is the first client datagram sent after the first
    server datagram (an Initial ACK or a Handshake flight); its arrival is
    what validates the client address. Server datagrams at positions
    strictly before the returned index are pre-validation. Attribution is
    by client send/receive order, the only vantage a prober has.
    """
    require_well_formed(trace)
    first_server = None
    for i, d in enumerate(trace.datagrams):
        if first_server is None:
            if not d.is_client:
                first_server = i
        elif d.is_client:
            return i
    return len(trace.datagrams)


def _pre_validation_bytes(trace: HandshakeTrace) -> tuple[int, int, list[Datagram]]:
    vp = validation_point(trace)
    server_dgrams = [d for d in trace.datagrams[:vp] if not d.is_client]
    server = sum(d.udp_payload_len for d in server_dgrams)
    client = sum(d.udp_payload_len for d in trace.datagrams[:vp] if d.is_client)
    return server, client, server_dgrams


def amplification_factor(trace: HandshakeTrace) -> float:
    """Pre-validation server bytes divided by pre-validation client bytes.

    Counts UDP payload bytes on both sides; padding and resent bytes are
    part of the numerator. Returns 0.0 when the server sent nothing.
    """
    server, client, _ = _pre_validation_bytes(trace)
    if server == 0:
        return 0.0
    if client == 0:
        raise UndefinedRatioError("no client bytes before the validation point")
    return server / client


def _datagram_has_handshake_crypto(d: Datagram) -> bool:
    """True if the datagram advances the handshake (vs. pure acks/1-RTT).

    With frame visibility this means TLS bytes inside INITIAL/HANDSHAKE
    packets; without frames any INITIAL/HANDSHAKE packet counts, a
    conservative approximation.
    """
    for p in d.packets:
        if p.kind not in (PacketKind.INITIAL, PacketKind.HANDSHAKE):
            continue
        if p.frames is None:
            return True
        if any(f.crypto_tls_len > 0 for f in p.frames):
            return True
    return False


def count_client_flights(trace: HandshakeTrace) -> int:
    """Client flights that preceded the end of the server's crypto delivery.

    Groups consecutive client datagrams into flights and counts those sent
    strictly before the last server datagram that carried handshake
    crypto. A one-roundtrip handshake therefore counts a single flight:
    the client's ACK/Finished flight follows the full server reply. Never
    returns less than 1 for a well-formed trace.
    """
    require_well_formed(trace)
    last_crypto = None
    for i, d in enumerate(trace.datagrams):
        if not d.is_client and _datagram_has_handshake_crypto(d):
            last_crypto = i
    if last_crypto is None:
        return 1
    flights = 0
    prev_client = False
    for i, d in enumerate(trace.datagrams[:last_crypto]):
        if d.is_client and not prev_client:
            flights += 1
        prev_client = d.is_client
    return max(flights, 1)


def limit_check(trace: HandshakeTrace, policy: LimitPolicy) -> LimitCheck:
    """Evaluate one historical anti-amplification policy over a trace."""
    server, client, server_dgrams = _pre_validation_bytes(trace)
    if policy is LimitPolicy.HANDSHAKE_PACKETS_3:
        observed = sum(
            1 for d in server_dgrams for p in d.packets if p.kind is PacketKind.HANDSHAKE
        )
        allowed = 3
        detail = f"{observed} Handshake packets pre-validation (allowed {allowed})"
    elif policy is LimitPolicy.DATAGRAMS_3:
        observed = len(server_dgrams)
        allowed = 3
        detail = f"{observed} server datagrams pre-validation (allowed {allowed})"
    else:  # BYTES_3X and DATA_3X_RFC9000 are the same arithmetic
        observed = server
        allowed = AMPLIFICATION_LIMIT_FACTOR * client
        detail = f"{observed} server bytes vs {client} client bytes (allowed {allowed})"
    return LimitCheck(
        compliant=observed <= allowed,
        policy=policy,
        observed=observed,
        allowed=allowed,
        detail=detail,
    )


def classify_handshake(
    trace: HandshakeTrace,
    policy: LimitPolicy = LimitPolicy.DATA_3X_RFC9000,
) -> ClassificationResult:
    """Assign the four-group verdict with full byte accounting.

    Precedence: Retry observed > limit exceeded > multiple roundtrips >
    1-RTT. ``multi_rtt_flag`` and ``limit_exceeded`` are reported
    independently of the winning class.
    """
    require_well_formed(trace)
    if trace.outcome in (TraceOutcome.UNREACHABLE, TraceOutcome.REFUSED):
        raise NotClassifiableError(f"trace outcome {trace.outcome.value} is not classifiable")
    if any(p.kind is PacketKind.VERSION_NEGOTIATION for d in trace.datagrams for p in d.packets):
        raise NotClassifiableError("version negotiation traces are not classifiable")
    server_dgrams = trace.server_datagrams()
    if trace.outcome is not TraceOutcome.COMPLETED and not server_dgrams:
        raise NotClassifiableError("incomplete trace without any server datagram")

    server, client, _ = _pre_validation_bytes(trace)
    check = limit_check(trace, policy)
    flights = count_client_flights(trace)
    factor = amplification_factor(trace)
    retry_seen = any(p.kind is PacketKind.RETRY for d in server_dgrams for p in d.packets)

    if retry_seen:
        klass = HandshakeClass.RETRY
    elif not check.compliant:
        klass = HandshakeClass.AMPLIFICATION
    elif flights >= 2:
        klass = HandshakeClass.MULTI_RTT
    else:
        klass = HandshakeClass.ONE_RTT

    return ClassificationResult(
        klass=klass,
        amplification_factor=factor,
        pre_validation_server_bytes=server,
        pre_validation_client_bytes=client,
        client_flights=flights,
        limit_exceeded=not check.compliant,
        multi_rtt_flag=flights >= 2,
    )


def payload_decomposition(trace: HandshakeTrace) -> PayloadDecomposition:
    """Split pre-validation server bytes into TLS payload, QUIC headers,
    padding, and ACK overhead. The four components sum to the
    pre-validation server byte total exactly.

    Requires frame visibility on every pre-validation server packet;
    raises ``FramesUnavailableError`` otherwise (classification remains
    possible without it).
    """
    _, _, server_dgrams = _pre_validation_bytes(trace)
    tls = header = padding = ack = 0
    for d in server_dgrams:
        padding += d.trailing_padding
        for p in d.packets:
            if p.frames is None:
                raise FramesUnavailableError(
                    "frame visibility missing on a pre-validation server packet"
                )
            header += p.header_len
            for f in p.frames:
                if f.kind is FrameKind.CRYPTO:
                    tls += f.crypto_tls_len
                    header += f.payload_len - f.crypto_tls_len
                elif f.kind is FrameKind.ACK:
                    ack += f.payload_len
                elif f.kind is FrameKind.PADDING:
                    padding += f.payload_len
                else:
                    header += f.payload_len
    return PayloadDecomposition(
        tls_bytes=tls,
        quic_header_bytes=header,
        padding_bytes=padding,
        ack_overhead_bytes=ack,
    )


MIN_PADDED_DATAGRAM = 1200


def _is_lone_padded_ack_initial(d: Datagram) -> bool:
    """A datagram whose sole packet is an INITIAL carrying only ACK/PADDING,
    padded out (the "ACK in its own padded datagram" pattern)."""
    if len(d.packets) != 1 or d.packets[0].kind is not PacketKind.INITIAL:
        return False
    p = d.packets[0]
    if p.frames is None:
        # No frame visibility: fall back to "single padded Initial".
        return d.udp_payload_len >= MIN_PADDED_DATAGRAM or d.trailing_padding > 0
    kinds = {f.kind for f in p.frames}
    if FrameKind.ACK not in kinds or kinds - {FrameKind.ACK, FrameKind.PADDING}:
        return False
    pad = d.trailing_padding + sum(f.payload_len for f in p.frames if f.kind is FrameKind.PADDING)
    return pad > 0


def coalescence_report(trace: HandshakeTrace) -> CoalescenceReport:
    """Packets-per-datagram histogram over server datagrams, plus the
    missing-coalescence flag.

    ``separate_ack_flight`` is set when the server both ships the Initial
    ACK in its own padded datagram and never coalesces an INITIAL with a
    HANDSHAKE packet -- the two-level coalescence failure that wastes the
    pre-validation byte budget on padding.
    """
    require_well_formed(trace)
    server_dgrams = trace.server_datagrams()
    histogram = Counter(len(d.packets) for d in server_dgrams)
    lone_ack = any(_is_lone_padded_ack_initial(d) for d in server_dgrams)
    ever_coalesced = any(
        {PacketKind.INITIAL, PacketKind.HANDSHAKE} <= {p.kind for p in d.packets}
        for d in server_dgrams
    )
    return CoalescenceReport(
        packets_per_datagram=dict(sorted(histogram.items())),
        separate_ack_flight=lone_ack and not ever_coalesced,
    )
