"""Live QUIC handshake probing with controlled Initial sizes.

Two probe modes:

* COMPLETE runs the handshake to confirmation, acknowledging normally.
* NO_ACK sends exactly one Initial and then stays silent for an
  observation window, recording everything the server volunteers --
  the behavior of a spoofed-source client.

The transport capability contract: a pluggable backend must (a) pad the
client Initial to an exact byte size, (b) record per-datagram sizes and
timestamps in both directions, (c) expose packet types, (d) optionally
expose frames, (e) support ACK suppression, and (f) surface Retry
packets. ``PlaintextTransport`` (UDP + the plaintext framing from
``wire``) satisfies all six and is what closed-loop tests run against;
a production QUIC stack meeting the same contract can be passed to
``probe_once`` unchanged. Missing frame visibility only disables byte
decomposition, never classification.
"""

from __future__ import annotations

import os
import socket
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from . import wire
from .classify import LimitPolicy, classify_handshake
from .errors import NotClassifiableError, QuicAuditError
from .records import ScanRecord
from .trace import (
    Datagram,
    Direction,
    HandshakeTrace,
    PacketKind,
    TraceOutcome,
    require_well_formed,
)

IP_UDP_HEADER_BYTES = 28
DEFAULT_MTU = 1500
MIN_INITIAL = 1200
DEFAULT_SWEEP_SIZES = tuple(range(1200, 1473, 10))
DEFAULT_SWEEP_SPACING = 1800.0  # pause between probes of one service
DEFAULT_OBSERVATION_WINDOW = 60.0


class ProbeMode(str, Enum):
    COMPLETE = "COMPLETE"
    NO_ACK = "NO_ACK"


@dataclass(frozen=True)
class ProbeTarget:
    host: str
    port: int = 443
    domain: Optional[str] = None

    @property
    def label(self) -> str:
        return self.domain or self.host


@dataclass(frozen=True)
class ProbeConfig:
    target: ProbeTarget
    initial_size: int = MIN_INITIAL
    mode: ProbeMode = ProbeMode.COMPLETE
    timeout: float = 10.0
    observation_window: float = DEFAULT_OBSERVATION_WINDOW
    alpn: str = "h3"
    retry_enabled: bool = True
    local_mtu: int = DEFAULT_MTU

    def __post_init__(self):
        cap = self.local_mtu - IP_UDP_HEADER_BYTES
        if not (MIN_INITIAL <= self.initial_size <= cap):
            raise ValueError(f"initial_size must be within [{MIN_INITIAL}, {cap}]")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.observation_window <= 0:
            raise ValueError("observation_window must be > 0")


def _now_us() -> int:
    return time.monotonic_ns() // 1000


class PlaintextTransport:
    """Reference transport: real UDP, plaintext packet framing."""

    def run(self, cfg: ProbeConfig) -> HandshakeTrace:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.connect((cfg.target.host, cfg.target.port))
            return self._drive(cfg, sock)
        finally:
            sock.close()

    # -- helpers -----------------------------------------------------------

    def _client_initial(self, cfg: ProbeConfig, scid: bytes, dcid: bytes,
                        token: bytes = b"") -> bytes:
        hello = cfg.alpn.encode()
        hello += wire.fill_bytes(wire.CLIENT_HELLO_LEN - len(hello))
        payload = wire.build_crypto(hello)
        if token:
            payload += wire.build_frame(wire.FRAME_TOKEN, token)
        body = wire.packet_len(len(payload))
        pad = cfg.initial_size - body
        if pad < 0:
            raise QuicAuditError(f"initial_size {cfg.initial_size} below packet floor {body}")
        payload += wire.build_padding(pad)
        dgram = wire.build_packet(PacketKind.INITIAL, scid, dcid, payload)
        assert len(dgram) == cfg.initial_size
        return dgram

    def _ack_datagram(self, scid: bytes, dcid: bytes, finished: bool) -> bytes:
        # Initial-bearing client datagrams stay padded to 1200, as on the wire.
        initial = wire.build_packet(PacketKind.INITIAL, scid, dcid, wire.build_ack())
        hs = b""
        if finished:
            hs_payload = wire.build_ack() + wire.build_crypto(wire.fill_bytes(wire.FINISHED_LEN))
            hs = wire.build_packet(PacketKind.HANDSHAKE, scid, dcid, hs_payload)
        pad = max(0, 1200 - len(initial) - len(hs))
        return initial + hs + wire.build_padding(pad)

    def _drive(self, cfg: ProbeConfig, sock: socket.socket) -> HandshakeTrace:
        scid, dcid = os.urandom(wire.CID_LEN), os.urandom(wire.CID_LEN)
        datagrams: list[Datagram] = []
        stateless_reset = False
        confirmed_at: Optional[int] = None

        def send(data: bytes) -> None:
            sock.send(data)
            datagrams.append(wire.datagram_from_bytes(
                Direction.CLIENT_TO_SERVER, _now_us(), data))

        def finish(outcome: TraceOutcome) -> HandshakeTrace:
            trace = HandshakeTrace(
                datagrams=tuple(datagrams),
                client_initial_size=cfg.initial_size,
                outcome=outcome,
                handshake_confirmed_time=confirmed_at,
                stateless_reset=stateless_reset,
            )
            require_well_formed(trace)
            return trace

        try:
            send(self._client_initial(cfg, scid, dcid))
        except ConnectionRefusedError:
            return finish(TraceOutcome.UNREACHABLE)

        window = cfg.observation_window if cfg.mode is ProbeMode.NO_ACK else cfg.timeout
        deadline = time.monotonic() + window
        declared_total: Optional[int] = None
        crypto_received = 0
        retried = False
        got_server_data = False

        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            sock.settimeout(remaining)
            try:
                data = sock.recv(65535)
            except socket.timeout:
                break
            except ConnectionRefusedError:
                if not got_server_data:
                    return finish(TraceOutcome.UNREACHABLE)
                break
            now = _now_us()
            try:
                parsed, trailing = wire.parse_datagram_bytes(data)
            except QuicAuditError:
                # Not a recognizable packet train: treat as a stateless reset.
                stateless_reset = True
                datagrams.append(Datagram(
                    direction=Direction.SERVER_TO_CLIENT, udp_payload_len=len(data),
                    time_us=now, packets=(), trailing_padding=len(data)))
                continue
            datagrams.append(wire.datagram_from_bytes(Direction.SERVER_TO_CLIENT, now, data))
            got_server_data = True
            if cfg.mode is ProbeMode.NO_ACK:
                continue

            end_burst = False
            done = False
            retry_pkt = None
            for p in parsed:
                if p.kind is PacketKind.RETRY:
                    retry_pkt = p
                    continue
                for kind_byte, content in wire.parse_frames(p.payload):
                    if kind_byte == wire.FRAME_CRYPTO:
                        if p.kind is PacketKind.INITIAL:
                            declared_total = wire.decode_declared_total(content)
                        elif p.kind is PacketKind.HANDSHAKE:
                            crypto_received += len(content)
                    elif kind_byte == wire.FRAME_END_BURST:
                        end_burst = True
                    elif kind_byte == wire.FRAME_DONE:
                        done = True

            if retry_pkt is not None and not retried:
                if not cfg.retry_enabled:
                    break
                retried = True
                send(self._client_initial(cfg, scid, dcid, token=retry_pkt.payload))
                continue
            if done:
                confirmed_at = now
                return finish(TraceOutcome.COMPLETED)
            if end_burst:
                finished = declared_total is not None and crypto_received >= declared_total
                send(self._ack_datagram(scid, dcid, finished))

        if cfg.mode is ProbeMode.NO_ACK:
            return finish(TraceOutcome.TIMED_OUT if got_server_data else TraceOutcome.UNREACHABLE)
        return finish(TraceOutcome.TIMED_OUT if got_server_data else TraceOutcome.UNREACHABLE)


def probe_once(cfg: ProbeConfig, transport=None) -> HandshakeTrace:
    """Run one probe and return its trace.

    Timeouts yield a TIMED_OUT trace, an unanswerable target yields
    UNREACHABLE; both are ordinary results, not exceptions.
    """
    transport = transport or PlaintextTransport()
    return transport.run(cfg)


@dataclass(frozen=True)
class SweepProbe:
    initial_size: int
    record: ScanRecord
    trace: Optional[HandshakeTrace]


def sweep(
    target: ProbeTarget,
    sizes=DEFAULT_SWEEP_SIZES,
    spacing: float = DEFAULT_SWEEP_SPACING,
    mode: ProbeMode = ProbeMode.COMPLETE,
    timeout: float = 10.0,
    observation_window: float = DEFAULT_OBSERVATION_WINDOW,
    policy: LimitPolicy = LimitPolicy.DATA_3X_RFC9000,
    transport=None,
) -> list[SweepProbe]:
    """Probe one target across an Initial-size grid.

    Emits exactly one record per size regardless of per-probe failures;
    probes of the same service are spaced by ``spacing`` seconds.
    """
    results: list[SweepProbe] = []
    sizes = list(sizes)
    for i, size in enumerate(sizes):
        started = time.time()
        trace = None
        quic_class = None
        outcome = None
        error = None
        try:
            cfg = ProbeConfig(target=target, initial_size=size, mode=mode,
                              timeout=timeout, observation_window=observation_window)
            trace = probe_once(cfg, transport=transport)
            outcome = trace.outcome.value
            quic_class = classify_handshake(trace, policy)
        except NotClassifiableError as exc:
            error = str(exc)
        except QuicAuditError as exc:
            error = str(exc)
        except OSError as exc:
            error = f"probe failed: {exc}"
        record = ScanRecord(
            domain=target.label,
            initial_size=size,
            quic_class=quic_class,
            outcome=outcome,
            started_at=started,
            finished_at=time.time(),
            error=error,
        )
        results.append(SweepProbe(initial_size=size, record=record, trace=trace))
        if spacing > 0 and i < len(sizes) - 1:
            time.sleep(spacing)
    return results
