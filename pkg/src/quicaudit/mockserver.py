"""Configurable QUIC-like server behaviors for closed-loop testing.

A real UDP endpoint speaking the plaintext framing from ``wire``. Each
behavior knob reproduces a server pathology observed in the wild:
missing packet coalescence with superfluous padding, Retry-always
deployments, large certificate chains with or without stalling at the
anti-amplification limit, and persistent retransmission to silent
clients.

Byte semantics: ``chain_len`` is the total pre-validation flight budget
in UDP payload bytes; packet headers, the Initial ACK and the
ServerHello are carved out of it, so a flight totals exactly
``chain_len + superfluous_padding`` bytes on the wire. This keeps every
expected classification analytically derivable from the spec alone.
"""

from __future__ import annotations

import json
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

from . import wire
from .classify import HandshakeClass
from .trace import PacketKind

MTU_CLAMP = 1472          # max datagram the mock accepts/emits (1500 MTU - 28)
RETRY_TOKEN_LEN = 16
MIN_TAIL = wire.PACKET_HEADER_LEN + wire.FRAME_HEADER_LEN + 1 + wire.FRAME_HEADER_LEN
# ^ smallest emittable crypto datagram that still carries an end-of-burst marker

DEFAULT_RESEND_INTERVAL = 0.5  # seconds between retransmission passes


class RetryMode(str, Enum):
    NEVER = "never"
    ALWAYS = "always"


class ResendKind(str, Enum):
    NONE = "NONE"
    CAPPED_3X = "CAPPED_3X"
    UNCAPPED = "UNCAPPED"


@dataclass(frozen=True)
class ResendPolicy:
    kind: ResendKind = ResendKind.NONE
    total_bytes: int = 0

    def __post_init__(self):
        if self.kind is ResendKind.UNCAPPED and self.total_bytes <= 0:
            raise ValueError("UNCAPPED resend policy requires total_bytes > 0")

    @staticmethod
    def none() -> "ResendPolicy":
        return ResendPolicy(ResendKind.NONE)

    @staticmethod
    def capped() -> "ResendPolicy":
        return ResendPolicy(ResendKind.CAPPED_3X)

    @staticmethod
    def uncapped(total_bytes: int) -> "ResendPolicy":
        return ResendPolicy(ResendKind.UNCAPPED, total_bytes)


@dataclass(frozen=True)
class BehaviorSpec:
    coalesce: bool = True
    superfluous_padding: int = 0
    retry: RetryMode = RetryMode.NEVER
    chain_len: int = 2329
    resend_policy: ResendPolicy = field(default_factory=ResendPolicy.none)
    stall_at_limit: bool = False
    encapsulation_overhead: int = 0
    resend_interval: float = DEFAULT_RESEND_INTERVAL

    def __post_init__(self):
        if self.superfluous_padding < 0:
            raise ValueError("superfluous_padding must be >= 0")
        if self.superfluous_padding and self.coalesce:
            raise ValueError("superfluous padding models the non-coalescing ACK pattern; "
                             "set coalesce=False")
        if self.chain_len < 200:
            raise ValueError("chain_len too small for the flight layout")
        if self.encapsulation_overhead < 0:
            raise ValueError("encapsulation_overhead must be >= 0")

    @property
    def flight_total(self) -> int:
        """Exact pre-validation flight size for any Initial (before stalling)."""
        return self.chain_len + self.superfluous_padding

    def to_json(self) -> str:
        obj = {
            "coalesce": self.coalesce,
            "superfluous_padding": self.superfluous_padding,
            "retry": self.retry.value,
            "chain_len": self.chain_len,
            "resend_policy": {"kind": self.resend_policy.kind.value,
                              "total_bytes": self.resend_policy.total_bytes},
            "stall_at_limit": self.stall_at_limit,
            "encapsulation_overhead": self.encapsulation_overhead,
            "resend_interval": self.resend_interval,
        }
        return json.dumps(obj, indent=2)

    @staticmethod
    def from_json(text: str) -> "BehaviorSpec":
        obj = json.loads(text)
        rp = obj.get("resend_policy", {})
        return BehaviorSpec(
            coalesce=obj.get("coalesce", True),
            superfluous_padding=obj.get("superfluous_padding", 0),
            retry=RetryMode(obj.get("retry", "never")),
            chain_len=obj.get("chain_len", 2329),
            resend_policy=ResendPolicy(ResendKind(rp.get("kind", "NONE")),
                                       rp.get("total_bytes", 0)),
            stall_at_limit=obj.get("stall_at_limit", False),
            encapsulation_overhead=obj.get("encapsulation_overhead", 0),
            resend_interval=obj.get("resend_interval", DEFAULT_RESEND_INTERVAL),
        )


# ---------------------------------------------------------------------------
# Flight construction (pure, deterministic)
# ---------------------------------------------------------------------------

def _chunk_crypto_parts(budget: int, first_cap: int) -> list[int]:
    """Split ``budget`` bytes into crypto datagram part sizes.

    Each part is one HANDSHAKE packet (header + CRYPTO frame); the last
    part additionally carries the end-of-burst marker, hence the MIN_TAIL
    floor. Greedy max-size chunks, shrinking the penultimate chunk when
    the tail would become unemittable.
    """
    min_part = wire.PACKET_HEADER_LEN + wire.FRAME_HEADER_LEN + 1
    if budget < MIN_TAIL:
        raise ValueError(f"crypto budget {budget} below minimum {MIN_TAIL}")
    sizes: list[int] = []
    left = budget
    while left > 0:
        cap = first_cap if not sizes else MTU_CLAMP
        take = min(cap, left)
        if 0 < left - take < max(min_part, MIN_TAIL):
            take = left - MIN_TAIL
        if take < min_part:
            raise ValueError("flight layout infeasible at this budget")
        sizes.append(take)
        left -= take
    return sizes


def _crypto_datagram(size: int, scid: bytes, dcid: bytes, last: bool) -> tuple[bytes, int]:
    """Build one HANDSHAKE crypto datagram of exactly ``size`` bytes.

    Returns (datagram, crypto_content_len).
    """
    marker = wire.build_frame(wire.FRAME_END_BURST) if last else b""
    content_len = size - wire.PACKET_HEADER_LEN - wire.FRAME_HEADER_LEN - len(marker)
    if content_len < 1:
        raise ValueError("crypto datagram too small")
    payload = wire.build_crypto(wire.fill_bytes(content_len)) + marker
    dgram = wire.build_packet(PacketKind.HANDSHAKE, scid, dcid, payload)
    assert len(dgram) == size
    return dgram, content_len


def build_flights(spec: BehaviorSpec, initial_size: int, scid: bytes, dcid: bytes,
                  ) -> tuple[list[bytes], list[bytes], int]:
    """Construct the server flight for a client Initial of ``initial_size``.

    Returns (burst1, burst2, declared_handshake_crypto_total). burst2 is
    empty unless the spec stalls at the limit and the flight does not fit
    in 3x the Initial. The byte totals of burst1+burst2 equal
    ``spec.flight_total`` exactly.
    """
    total = spec.flight_total
    limit = 3 * initial_size
    burst1_budget = total
    if spec.stall_at_limit and total > limit:
        burst1_budget = limit
        if total - burst1_budget < MIN_TAIL:
            burst1_budget = total - MIN_TAIL  # keep the remainder emittable

    prelude: list[bytes] = []
    hdr = wire.PACKET_HEADER_LEN
    ack = wire.build_ack()
    declared_placeholder = wire.encode_declared_total(0)

    if spec.coalesce:
        prelude_len = hdr + len(ack) + wire.FRAME_HEADER_LEN + wire.SERVER_HELLO_LEN
        first_cap = MTU_CLAMP - prelude_len
    elif spec.superfluous_padding:
        # Non-coalescing ACK pattern: the Initial ACK ships in its own
        # padded datagram, the ServerHello in a second padded one.
        pad_a = min(spec.superfluous_padding, 1200 - hdr - len(ack))
        pad_b = spec.superfluous_padding - pad_a
        dgram_b_len = hdr + wire.FRAME_HEADER_LEN + wire.SERVER_HELLO_LEN + pad_b
        if dgram_b_len > MTU_CLAMP:
            raise ValueError("superfluous_padding too large for a single ServerHello datagram")
        prelude.append(wire.build_packet(PacketKind.INITIAL, scid, dcid,
                                         ack + wire.build_padding(pad_a)))
        prelude.append(wire.build_packet(
            PacketKind.INITIAL, scid, dcid,
            wire.build_crypto(declared_placeholder) + wire.build_padding(pad_b)))
        prelude_len = sum(len(d) for d in prelude)
        first_cap = MTU_CLAMP
    else:
        prelude.append(wire.build_packet(PacketKind.INITIAL, scid, dcid,
                                         ack + wire.build_crypto(declared_placeholder)))
        prelude_len = sum(len(d) for d in prelude)
        first_cap = MTU_CLAMP

    crypto_budget1 = burst1_budget - prelude_len
    parts1 = _chunk_crypto_parts(crypto_budget1, first_cap)
    burst2_budget = total - burst1_budget
    parts2 = _chunk_crypto_parts(burst2_budget, MTU_CLAMP) if burst2_budget else []

    crypto_total = 0
    burst1: list[bytes] = []
    burst2: list[bytes] = []
    for i, size in enumerate(parts1):
        dgram, content = _crypto_datagram(size, scid, dcid, last=(i == len(parts1) - 1))
        crypto_total += content
        burst1.append(dgram)
    for i, size in enumerate(parts2):
        dgram, content = _crypto_datagram(size, scid, dcid, last=(i == len(parts2) - 1))
        crypto_total += content
        burst2.append(dgram)

    declared = wire.encode_declared_total(crypto_total)
    if spec.coalesce:
        initial_pkt = wire.build_packet(PacketKind.INITIAL, scid, dcid,
                                        ack + wire.build_crypto(declared))
        burst1[0] = initial_pkt + burst1[0]
    else:
        # Patch the declared total into the ServerHello datagram.
        sh_index = 1 if spec.superfluous_padding else 0
        raw = bytearray(prelude[sh_index])
        pos = raw.find(declared_placeholder)
        raw[pos:pos + len(declared)] = declared
        prelude[sh_index] = bytes(raw)
        burst1 = prelude + burst1

    assert sum(map(len, burst1)) + sum(map(len, burst2)) == total
    return burst1, burst2, crypto_total


def expected_class(spec: BehaviorSpec, initial_size: int) -> HandshakeClass:
    """Analytic classification for a complete-mode probe at this Initial size.

    Derived from the behavior parameters alone; never consults the wire
    implementation.
    """
    if spec.retry is RetryMode.ALWAYS:
        return HandshakeClass.RETRY
    flight = spec.chain_len + spec.superfluous_padding
    limit = 3 * initial_size
    if spec.stall_at_limit:
        return HandshakeClass.ONE_RTT if flight <= limit else HandshakeClass.MULTI_RTT
    return HandshakeClass.AMPLIFICATION if flight > limit else HandshakeClass.ONE_RTT


# ---------------------------------------------------------------------------
# Endpoint
# ---------------------------------------------------------------------------

@dataclass
class _Connection:
    initial_size: int
    burst2: list[bytes]
    resend_source: list[bytes]
    validated: bool = False
    done: bool = False
    cumulative: int = 0
    resend_target: int = 0
    next_resend: float = 0.0
    scid: bytes = b""
    client_scid: bytes = b""


class MockQuicServer:
    """UDP endpoint answering client Initials according to a BehaviorSpec.

    Per-connection state is keyed by client address; byte counts for a
    given (spec, initial_size, mode) are deterministic across runs.
    """

    def __init__(self, spec: BehaviorSpec, host: str = "127.0.0.1", port: int = 0):
        self.spec = spec
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind((host, port))
        self._sock.settimeout(0.02)
        self._conns: dict = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def serve(self) -> "MockQuicServer":
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=2.0)
        self._sock.close()

    def __enter__(self) -> "MockQuicServer":
        return self.serve()

    def __exit__(self, *exc) -> None:
        self.close()

    # -- internals ---------------------------------------------------------

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self._sock.recvfrom(65535)
            except socket.timeout:
                self._handle_resends()
                continue
            except OSError:
                break
            try:
                self._handle(data, addr)
            except Exception:
                # A malformed client datagram must not kill the endpoint.
                continue
            self._handle_resends()

    def _send(self, conn: _Connection, addr, payload: bytes) -> None:
        if conn is not None:
            if (self.spec.resend_policy.kind is ResendKind.CAPPED_3X
                    and not conn.validated
                    and conn.cumulative + len(payload) > 3 * conn.initial_size):
                raise RuntimeError("CAPPED_3X self-check: would exceed 3x client bytes")
            conn.cumulative += len(payload)
        self._sock.sendto(payload, addr)

    def _handle(self, data: bytes, addr) -> None:
        if self.spec.encapsulation_overhead and \
                len(data) + self.spec.encapsulation_overhead > MTU_CLAMP:
            return  # tunneled path drops the oversized encapsulated datagram
        packets, _ = wire.parse_datagram_bytes(data)
        if not packets:
            return
        with self._lock:
            conn = self._conns.get(addr)
            if conn is None:
                self._handle_new(data, packets, addr)
            else:
                self._handle_followup(conn, packets, addr)

    def _handle_new(self, data: bytes, packets, addr) -> None:
        initial = next((p for p in packets if p.kind is PacketKind.INITIAL), None)
        if initial is None:
            return
        frames = wire.parse_frames(initial.payload)
        has_token = any(k == wire.FRAME_TOKEN for k, _ in frames)
        if self.spec.retry is RetryMode.ALWAYS and not has_token:
            scid = os.urandom(wire.CID_LEN)
            retry = wire.build_packet(PacketKind.RETRY, scid, initial.scid,
                                      os.urandom(RETRY_TOKEN_LEN))
            self._sock.sendto(retry, addr)
            return
        initial_size = len(data)
        scid = os.urandom(wire.CID_LEN)
        # A token already validated the address, so stalling doesn't apply.
        flight_spec = replace(self.spec, stall_at_limit=False) if has_token else self.spec
        burst1, burst2, _ = build_flights(flight_spec, initial_size, scid, initial.scid)
        conn = _Connection(
            initial_size=initial_size,
            burst2=burst2,
            resend_source=list(burst1) + list(burst2),
            scid=scid,
            client_scid=initial.scid,
        )
        # A token-bearing Initial proves a completed roundtrip already.
        conn.validated = has_token
        self._conns[addr] = conn
        for dgram in burst1:
            self._send(conn, addr, dgram)
        policy = self.spec.resend_policy
        if policy.kind is not ResendKind.NONE and not conn.validated:
            conn.resend_target = (3 * initial_size if policy.kind is ResendKind.CAPPED_3X
                                  else policy.total_bytes)
            conn.next_resend = time.monotonic() + self.spec.resend_interval

    def _handle_followup(self, conn: _Connection, packets, addr) -> None:
        conn.validated = True
        conn.next_resend = 0.0
        if conn.burst2:
            pending, conn.burst2 = conn.burst2, []
            for dgram in pending:
                self._send(conn, addr, dgram)
            return
        finished = any(
            p.kind is PacketKind.HANDSHAKE and
            any(k == wire.FRAME_CRYPTO for k, _ in wire.parse_frames(p.payload))
            for p in packets
        )
        if finished and not conn.done:
            conn.done = True
            done = wire.build_packet(PacketKind.ONE_RTT, conn.scid, conn.client_scid,
                                     wire.build_frame(wire.FRAME_DONE, b"\x00\x00\x00\x00"))
            self._send(conn, addr, done)

    def _handle_resends(self) -> None:
        now = time.monotonic()
        with self._lock:
            for addr, conn in self._conns.items():
                if conn.validated or not conn.next_resend or now < conn.next_resend:
                    continue
                if conn.cumulative >= conn.resend_target:
                    conn.next_resend = 0.0
                    continue
                for dgram in conn.resend_source:
                    gap = conn.resend_target - conn.cumulative
                    if gap <= 0:
                        break
                    if len(dgram) <= gap:
                        self._send(conn, addr, dgram)
                    else:
                        self._send(conn, addr, b"\x00" * gap)  # exact-size padding filler
                        break
                if conn.cumulative >= conn.resend_target:
                    conn.next_resend = 0.0
                else:
                    conn.next_resend = now + self.spec.resend_interval


def serve(spec: BehaviorSpec, bind_address: tuple[str, int] = ("127.0.0.1", 0)) -> MockQuicServer:
    """Start a behavior endpoint; returns the running server handle."""
    return MockQuicServer(spec, bind_address[0], bind_address[1]).serve()


# ---------------------------------------------------------------------------
# Presets and the conformance grid
# ---------------------------------------------------------------------------

def preset(name: str, chain_len: Optional[int] = None, **overrides) -> BehaviorSpec:
    """Named behavior presets modeled on deployments observed in the wild."""
    builders: dict[str, Callable[[], BehaviorSpec]] = {
        # Two padded Initial datagrams, no coalescence, no stalling: the
        # flight overshoots the limit with a constant padding surplus.
        "cloudflare": lambda: BehaviorSpec(coalesce=False, superfluous_padding=2462,
                                           chain_len=2329, stall_at_limit=False),
        # Large flight plus persistent retransmission to silent clients.
        "meta": lambda: BehaviorSpec(chain_len=7000, stall_at_limit=False,
                                     resend_policy=ResendPolicy.uncapped(35056)),
        "retry": lambda: BehaviorSpec(retry=RetryMode.ALWAYS, chain_len=2329,
                                      stall_at_limit=True),
        "compliant": lambda: BehaviorSpec(chain_len=2329, stall_at_limit=True),
        "stall": lambda: BehaviorSpec(chain_len=5000, stall_at_limit=True),
        "capped": lambda: BehaviorSpec(chain_len=2329, stall_at_limit=False,
                                       resend_policy=ResendPolicy.capped()),
        "amplifier": lambda: BehaviorSpec(chain_len=8340, stall_at_limit=False),
        "tunneled": lambda: BehaviorSpec(chain_len=2329, stall_at_limit=True,
                                         encapsulation_overhead=80),
    }
    if name not in builders:
        raise ValueError(f"unknown preset {name!r} (known: {', '.join(sorted(builders))})")
    spec = builders[name]()
    if chain_len is not None:
        spec = replace(spec, chain_len=chain_len)
    if overrides:
        spec = replace(spec, **overrides)
    return spec


@dataclass(frozen=True)
class GridRow:
    name: str
    spec: BehaviorSpec
    expected: Callable[[int], HandshakeClass]


def behavior_grid() -> list[GridRow]:
    """The conformance matrix for acceptance sweeps.

    Expected classes come from ``expected_class`` (pure arithmetic over
    the behavior parameters), never from the wire implementation.
    """
    rows = [
        "compliant",
        "retry",
        "cloudflare",
        "meta",
        "capped",
        "amplifier",
    ]
    grid = [GridRow(n, preset(n), _expected_fn(preset(n))) for n in rows]
    grid.append(GridRow("stall-3900", preset("stall", chain_len=3900),
                        _expected_fn(preset("stall", chain_len=3900))))
    grid.append(GridRow("stall-5000", preset("stall", chain_len=5000),
                        _expected_fn(preset("stall", chain_len=5000))))
    return grid


def _expected_fn(spec: BehaviorSpec) -> Callable[[int], HandshakeClass]:
    return lambda size: expected_class(spec, size)
