"""Exception types shared across the toolkit."""


class QuicAuditError(Exception):
    """Base class for all toolkit errors."""


class MalformedTraceError(QuicAuditError):
    """Trace violates a structural invariant (e.g. first datagram is not a client Initial)."""


class NotClassifiableError(QuicAuditError):
    """Trace cannot be assigned a handshake class (unreachable, refused, version negotiation)."""


class UndefinedRatioError(QuicAuditError):
    """Amplification ratio requested for a trace with zero client bytes."""


class FramesUnavailableError(QuicAuditError):
    """Frame visibility was not captured; byte decomposition is impossible."""


class DerParseError(QuicAuditError):
    """Malformed DER input. Carries the byte offset at which parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnsupportedAlgorithmError(QuicAuditError):
    """Requested compression algorithm is not available."""


class RedirectLoopError(QuicAuditError):
    """Redirect chain exceeded the configured depth limit."""

    def __init__(self, message: str, hops):
        super().__init__(message)
        self.hops = hops


class SchemaError(QuicAuditError):
    """Input file does not match the expected schema version."""
