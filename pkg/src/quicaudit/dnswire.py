"""Minimal DNS wire codec plus a scriptable stub resolver.

Only what a scanner needs: build an A query aimed at a specific
resolver, read back the rcode and any A answers. The stub server exists
for closed-loop pipelines and tests; it answers from a per-name script
(address list, error rcode, or artificial delay).
"""

from __future__ import annotations

import os
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional

QTYPE_A = 1
QCLASS_IN = 1

RCODE_NOERROR = 0
RCODE_SERVFAIL = 2
RCODE_NXDOMAIN = 3
RCODE_REFUSED = 5

_FLAGS_RD = 0x0100
_FLAGS_RESPONSE = 0x8000


def encode_name(name: str) -> bytes:
    out = b""
    for label in name.rstrip(".").split("."):
        raw = label.encode("idna") if not label.isascii() else label.encode()
        if not 0 < len(raw) < 64:
            raise ValueError(f"bad DNS label {label!r}")
        out += bytes([len(raw)]) + raw
    return out + b"\x00"


def build_query(qid: int, name: str, qtype: int = QTYPE_A) -> bytes:
    header = struct.pack("!HHHHHH", qid, _FLAGS_RD, 1, 0, 0, 0)
    return header + encode_name(name) + struct.pack("!HH", qtype, QCLASS_IN)


def _skip_name(data: bytes, off: int) -> int:
    while True:
        if off >= len(data):
            raise ValueError("truncated DNS name")
        length = data[off]
        if length == 0:
            return off + 1
        if length & 0xC0 == 0xC0:
            return off + 2  # compression pointer ends the name
        off += 1 + length


@dataclass(frozen=True)
class DnsResponse:
    qid: int
    rcode: int
    addresses: tuple[str, ...]


def parse_response(data: bytes) -> DnsResponse:
    if len(data) < 12:
        raise ValueError("DNS response too short")
    qid, flags, qd, an, _ns, _ar = struct.unpack_from("!HHHHHH", data, 0)
    if not flags & _FLAGS_RESPONSE:
        raise ValueError("not a DNS response")
    rcode = flags & 0x000F
    off = 12
    for _ in range(qd):
        off = _skip_name(data, off) + 4
    addresses = []
    for _ in range(an):
        off = _skip_name(data, off)
        rtype, rclass, _ttl, rdlen = struct.unpack_from("!HHIH", data, off)
        off += 10
        if rtype == QTYPE_A and rclass == QCLASS_IN and rdlen == 4:
            addresses.append(socket.inet_ntoa(data[off:off + 4]))
        off += rdlen
    return DnsResponse(qid=qid, rcode=rcode, addresses=tuple(addresses))


def query(name: str, resolver: tuple[str, int], timeout: float = 10.0) -> DnsResponse:
    """One UDP query against a specific resolver; raises socket.timeout."""
    qid = int.from_bytes(os.urandom(2), "big")
    payload = build_query(qid, name)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.settimeout(timeout)
        deadline = time.monotonic() + timeout
        sock.sendto(payload, resolver)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout("DNS query timed out")
            sock.settimeout(remaining)
            data, _ = sock.recvfrom(4096)
            resp = parse_response(data)
            if resp.qid == qid:
                return resp
    finally:
        sock.close()


# ---------------------------------------------------------------------------
# Stub resolver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StubAnswer:
    """Script entry: either addresses (NOERROR) or an rcode, after a delay."""
    addresses: tuple[str, ...] = ()
    rcode: int = RCODE_NOERROR
    delay: float = 0.0


class StubDnsServer:
    """UDP resolver answering from a name->StubAnswer script.

    Unscripted names get NXDOMAIN.
    """

    def __init__(self, script: Optional[dict[str, StubAnswer]] = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.script = dict(script or {})
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind((host, port))
        self._sock.settimeout(0.05)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def serve(self) -> "StubDnsServer":
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=2.0)
        self._sock.close()

    def __enter__(self) -> "StubDnsServer":
        return self.serve()

    def __exit__(self, *exc) -> None:
        self.close()

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self._sock.recvfrom(4096)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                reply = self._answer(data)
            except Exception:
                continue
            if reply is not None:
                self._sock.sendto(reply, addr)

    def _answer(self, data: bytes) -> Optional[bytes]:
        qid, _flags, qd, *_ = struct.unpack_from("!HHHHHH", data, 0)
        if qd != 1:
            return None
        off = 12
        labels = []
        while data[off]:
            n = data[off]
            labels.append(data[off + 1:off + 1 + n].decode("ascii", "replace"))
            off += 1 + n
        off += 1
        qtype, qclass = struct.unpack_from("!HH", data, off)
        name = ".".join(labels)
        question = data[12:off + 4]
        answer = self.script.get(name, StubAnswer(rcode=RCODE_NXDOMAIN))
        if answer.delay:
            time.sleep(answer.delay)
        rcode = answer.rcode
        rrs = b""
        count = 0
        if rcode == RCODE_NOERROR and qtype == QTYPE_A:
            for ip in answer.addresses:
                rrs += encode_name(name) + struct.pack("!HHIH", QTYPE_A, QCLASS_IN, 60, 4)
                rrs += socket.inet_aton(ip)
                count += 1
        flags = _FLAGS_RESPONSE | _FLAGS_RD | 0x0080 | rcode  # RA set
        header = struct.pack("!HHHHHH", qid, flags, 1, count, 0, 0)
        return header + question + rrs
