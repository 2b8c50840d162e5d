"""quicaudit: QUIC handshake auditing and TLS chain analysis toolkit."""

from .classify import (
    ClassificationResult,
    HandshakeClass,
    LimitPolicy,
    amplification_factor,
    classify_handshake,
    coalescence_report,
    limit_check,
    payload_decomposition,
    validation_point,
)
from .trace import (
    BROWSER_PROFILES,
    BrowserProfile,
    Datagram,
    Direction,
    FrameKind,
    FrameSummary,
    HandshakeTrace,
    PacketKind,
    PacketRecord,
    TraceOutcome,
)

__version__ = "0.1.0"

__all__ = [
    "BROWSER_PROFILES",
    "BrowserProfile",
    "ClassificationResult",
    "Datagram",
    "Direction",
    "FrameKind",
    "FrameSummary",
    "HandshakeClass",
    "HandshakeTrace",
    "LimitPolicy",
    "PacketKind",
    "PacketRecord",
    "TraceOutcome",
    "amplification_factor",
    "classify_handshake",
    "coalescence_report",
    "limit_check",
    "payload_decomposition",
    "validation_point",
]
