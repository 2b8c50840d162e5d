"""Handshake trace model.

A trace is an ordered list of UDP datagrams captured on one connection
attempt, each tagged with direction and a monotonic timestamp and broken
down into QUIC packets and frames. All values are immutable after
construction, so traces can be shared freely between threads.

Byte accounting convention: every size is a UDP payload size. IP and UDP
headers are never counted anywhere in this package.

Traces serialize to line-delimited JSON: one ``meta`` line per trace
followed by one ``datagram`` line per datagram (see ``trace_to_jsonl``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Optional

from .errors import MalformedTraceError

# RFC 9000 bounds for a UDP payload carrying QUIC.
MAX_UDP_PAYLOAD = 65527
MIN_CLIENT_INITIAL = 1200

TRACE_JSONL_VERSION = 1


class Direction(str, Enum):
    CLIENT_TO_SERVER = "c2s"
    SERVER_TO_CLIENT = "s2c"


class PacketKind(str, Enum):
    INITIAL = "INITIAL"
    HANDSHAKE = "HANDSHAKE"
    RETRY = "RETRY"
    ONE_RTT = "ONE_RTT"
    VERSION_NEGOTIATION = "VERSION_NEGOTIATION"


class FrameKind(str, Enum):
    CRYPTO = "CRYPTO"
    ACK = "ACK"
    PADDING = "PADDING"
    OTHER = "OTHER"


class TraceOutcome(str, Enum):
    COMPLETED = "COMPLETED"
    TIMED_OUT = "TIMED_OUT"
    REFUSED = "REFUSED"
    UNREACHABLE = "UNREACHABLE"


@dataclass(frozen=True)
class FrameSummary:
    """One frame inside a packet.

    ``payload_len`` counts the full wire footprint of the frame (type byte
    and length prefix included); ``crypto_tls_len`` is the number of TLS
    handshake bytes carried, nonzero only for CRYPTO frames.
    """

    kind: FrameKind
    payload_len: int
    crypto_tls_len: int = 0

    def __post_init__(self):
        if self.payload_len < 0:
            raise ValueError("frame payload_len must be >= 0")
        if self.crypto_tls_len < 0 or self.crypto_tls_len > self.payload_len:
            raise ValueError("crypto_tls_len must be within [0, payload_len]")
        if self.kind is not FrameKind.CRYPTO and self.crypto_tls_len != 0:
            raise ValueError(f"{self.kind.value} frames carry no TLS bytes")


@dataclass(frozen=True)
class PacketRecord:
    """One QUIC packet inside a datagram.

    ``frames`` is ``None`` when the capture had no frame visibility; an
    empty tuple means frames were visible and there were none (Retry).
    """

    kind: PacketKind
    wire_len: int
    frames: Optional[tuple[FrameSummary, ...]] = None
    scid: bytes = b""
    dcid: bytes = b""

    def __post_init__(self):
        if self.wire_len <= 0:
            raise ValueError("packet wire_len must be > 0")
        if self.kind is PacketKind.RETRY and self.frames:
            raise ValueError("RETRY packets carry no frames")
        if self.frames is not None:
            frame_bytes = sum(f.payload_len for f in self.frames)
            if frame_bytes > self.wire_len:
                raise ValueError("frame bytes exceed packet wire_len")

    @property
    def header_len(self) -> int:
        """Wire bytes not claimed by any frame (packet header, Retry token)."""
        if self.frames is None:
            return 0
        return self.wire_len - sum(f.payload_len for f in self.frames)


@dataclass(frozen=True)
class Datagram:
    """One UDP datagram: direction, capture time, and packet breakdown.

    ``trailing_padding`` records UDP-layer padding that follows the last
    QUIC packet (some deployments pad at the UDP layer, outside any
    packet). The identity ``udp_payload_len == sum(wire_len) +
    trailing_padding`` always holds.
    """

    direction: Direction
    udp_payload_len: int
    time_us: int
    packets: tuple[PacketRecord, ...] = ()
    trailing_padding: int = 0

    def __post_init__(self):
        if not (1 <= self.udp_payload_len <= MAX_UDP_PAYLOAD):
            raise ValueError(f"udp_payload_len {self.udp_payload_len} out of [1, {MAX_UDP_PAYLOAD}]")
        if self.trailing_padding < 0:
            raise ValueError("trailing_padding must be >= 0")
        packet_bytes = sum(p.wire_len for p in self.packets)
        if packet_bytes + self.trailing_padding != self.udp_payload_len:
            raise ValueError(
                f"udp_payload_len {self.udp_payload_len} != packets {packet_bytes} "
                f"+ trailing_padding {self.trailing_padding}"
            )

    @property
    def is_client(self) -> bool:
        return self.direction is Direction.CLIENT_TO_SERVER


@dataclass(frozen=True)
class HandshakeTrace:
    """A full connection attempt as observed by the client.

    Structural invariants (first datagram is a client Initial whose size
    equals ``client_initial_size``) are checked by ``require_well_formed``
    at ingestion and inside every operation, not at construction, so that
    importers can materialize malformed inputs and have them rejected with
    a precise error.
    """

    datagrams: tuple[Datagram, ...]
    client_initial_size: int
    outcome: TraceOutcome
    handshake_confirmed_time: Optional[int] = None
    stateless_reset: bool = False

    def server_datagrams(self) -> list[Datagram]:
        return [d for d in self.datagrams if not d.is_client]

    def client_datagrams(self) -> list[Datagram]:
        return [d for d in self.datagrams if d.is_client]


@dataclass(frozen=True)
class BrowserProfile:
    """A browser's Initial size and offered certificate compression."""

    name: str
    initial_size: int
    compression_algorithms: frozenset = frozenset()

    def __post_init__(self):
        if not (MIN_CLIENT_INITIAL <= self.initial_size <= 1472):
            raise ValueError("browser Initial sizes sit within [1200, 1472]")


BROWSER_PROFILES = (
    BrowserProfile("firefox", 1357),
    BrowserProfile("chromium", 1250, frozenset({"brotli"})),
)


def require_well_formed(trace: HandshakeTrace) -> None:
    """Raise ``MalformedTraceError`` unless the trace starts with a client Initial."""
    if not trace.datagrams:
        raise MalformedTraceError("trace has no datagrams")
    first = trace.datagrams[0]
    if not first.is_client:
        raise MalformedTraceError("first datagram is not client-to-server")
    if not any(p.kind is PacketKind.INITIAL for p in first.packets):
        raise MalformedTraceError("first client datagram carries no INITIAL packet")
    if trace.client_initial_size != first.udp_payload_len:
        raise MalformedTraceError(
            f"client_initial_size {trace.client_initial_size} != first datagram "
            f"payload {first.udp_payload_len}"
        )


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

def _frame_to_obj(f: FrameSummary) -> dict:
    obj = {"kind": f.kind.value, "payload_len": f.payload_len}
    if f.crypto_tls_len:
        obj["crypto_tls_len"] = f.crypto_tls_len
    return obj


def _packet_to_obj(p: PacketRecord) -> dict:
    return {
        "kind": p.kind.value,
        "wire_len": p.wire_len,
        "scid": p.scid.hex(),
        "dcid": p.dcid.hex(),
        "frames": None if p.frames is None else [_frame_to_obj(f) for f in p.frames],
    }


def _packet_from_obj(obj: dict) -> PacketRecord:
    frames = obj.get("frames")
    return PacketRecord(
        kind=PacketKind(obj["kind"]),
        wire_len=obj["wire_len"],
        frames=None if frames is None else tuple(
            FrameSummary(FrameKind(f["kind"]), f["payload_len"], f.get("crypto_tls_len", 0))
            for f in frames
        ),
        scid=bytes.fromhex(obj.get("scid", "")),
        dcid=bytes.fromhex(obj.get("dcid", "")),
    )


def datagram_to_obj(d: Datagram) -> dict:
    return {
        "type": "datagram",
        "dir": d.direction.value,
        "time_us": d.time_us,
        "udp_len": d.udp_payload_len,
        "trailing_padding": d.trailing_padding,
        "packets": [_packet_to_obj(p) for p in d.packets],
    }


def datagram_from_obj(obj: dict) -> Datagram:
    return Datagram(
        direction=Direction(obj["dir"]),
        udp_payload_len=obj["udp_len"],
        time_us=obj["time_us"],
        packets=tuple(_packet_from_obj(p) for p in obj.get("packets", [])),
        trailing_padding=obj.get("trailing_padding", 0),
    )


def trace_to_jsonl(trace: HandshakeTrace) -> Iterator[str]:
    """Yield JSONL lines: one meta line, then one line per datagram."""
    meta = {
        "type": "trace_meta",
        "version": TRACE_JSONL_VERSION,
        "client_initial_size": trace.client_initial_size,
        "outcome": trace.outcome.value,
        "handshake_confirmed_time": trace.handshake_confirmed_time,
        "stateless_reset": trace.stateless_reset,
    }
    yield json.dumps(meta, separators=(",", ":"))
    for d in trace.datagrams:
        yield json.dumps(datagram_to_obj(d), separators=(",", ":"))


def write_traces(traces: Iterable[HandshakeTrace], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            for line in trace_to_jsonl(trace):
                fh.write(line + "\n")


def read_traces(source) -> list[HandshakeTrace]:
    """Parse traces from a path or an iterable of JSONL lines.

    Every trace is checked with ``require_well_formed`` before being
    returned.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    else:
        lines = list(source)

    traces: list[HandshakeTrace] = []
    meta: Optional[dict] = None
    datagrams: list[Datagram] = []

    def flush():
        nonlocal meta, datagrams
        if meta is None:
            if datagrams:
                raise MalformedTraceError("datagram lines before any trace_meta line")
            return
        trace = HandshakeTrace(
            datagrams=tuple(datagrams),
            client_initial_size=meta["client_initial_size"],
            outcome=TraceOutcome(meta["outcome"]),
            handshake_confirmed_time=meta.get("handshake_confirmed_time"),
            stateless_reset=meta.get("stateless_reset", False),
        )
        require_well_formed(trace)
        traces.append(trace)
        meta, datagrams = None, []

    for raw in lines:
        raw = raw.strip()
        if not raw:
            continue
        obj = json.loads(raw)
        if obj.get("type") == "trace_meta":
            flush()
            meta = obj
        elif obj.get("type") == "datagram":
            datagrams.append(datagram_from_obj(obj))
        else:
            raise MalformedTraceError(f"unknown record type {obj.get('type')!r}")
    flush()
    return traces


# ---------------------------------------------------------------------------
# qlog adapter
# ---------------------------------------------------------------------------

_QLOG_PACKET_KIND = {
    "initial": PacketKind.INITIAL,
    "handshake": PacketKind.HANDSHAKE,
    "retry": PacketKind.RETRY,
    "1RTT": PacketKind.ONE_RTT,
    "0RTT": PacketKind.ONE_RTT,
    "short_header": PacketKind.ONE_RTT,
    "version_negotiation": PacketKind.VERSION_NEGOTIATION,
}

_QLOG_FRAME_KIND = {
    "crypto": FrameKind.CRYPTO,
    "ack": FrameKind.ACK,
    "padding": FrameKind.PADDING,
}


def trace_from_qlog(events: Iterable[dict], outcome: TraceOutcome = TraceOutcome.COMPLETED,
                    perspective: str = "client") -> HandshakeTrace:
    """Build a trace from qlog-style packet events.

    Accepts the common shape: events named ``*packet_sent`` /
    ``*packet_received`` with ``data.header.packet_type``,
    ``data.raw.length`` and optionally ``data.frames``. Each packet event
    becomes its own datagram (datagram-level coalescence is not encoded in
    this event family), so coalescence reports from qlog imports are a
    lower bound.
    """
    datagrams: list[Datagram] = []
    sent_dir = Direction.CLIENT_TO_SERVER if perspective == "client" else Direction.SERVER_TO_CLIENT
    recv_dir = Direction.SERVER_TO_CLIENT if perspective == "client" else Direction.CLIENT_TO_SERVER
    for ev in events:
        name = ev.get("name", "")
        if name.endswith("packet_sent"):
            direction = sent_dir
        elif name.endswith("packet_received"):
            direction = recv_dir
        else:
            continue
        data = ev.get("data", {})
        header = data.get("header", {})
        kind = _QLOG_PACKET_KIND.get(header.get("packet_type", ""))
        if kind is None:
            continue
        raw = data.get("raw", {})
        wire_len = raw.get("length")
        if wire_len is None:
            continue
        frames = None
        if "frames" in data and kind is not PacketKind.RETRY:
            frames = []
            claimed = 0
            for fr in data["frames"]:
                fkind = _QLOG_FRAME_KIND.get(fr.get("frame_type", ""), FrameKind.OTHER)
                flen = fr.get("length", fr.get("payload_length", 0)) or 0
                tls = fr.get("length", 0) if fkind is FrameKind.CRYPTO else 0
                frames.append(FrameSummary(fkind, flen, min(tls, flen)))
                claimed += flen
            if claimed > wire_len:
                frames = None  # inconsistent lengths; drop frame visibility
        time_us = int(float(ev.get("time", 0)) * 1000)  # qlog times are ms
        datagrams.append(Datagram(
            direction=direction,
            udp_payload_len=wire_len,
            time_us=time_us,
            packets=(PacketRecord(
                kind=kind,
                wire_len=wire_len,
                frames=None if frames is None else tuple(frames),
                scid=bytes.fromhex(header.get("scid", "") or ""),
                dcid=bytes.fromhex(header.get("dcid", "") or ""),
            ),),
        ))
    if not datagrams:
        raise MalformedTraceError("qlog stream contained no packet events")
    trace = HandshakeTrace(
        datagrams=tuple(datagrams),
        client_initial_size=datagrams[0].udp_payload_len,
        outcome=outcome,
    )
    require_well_formed(trace)
    return trace
