"""Scan record schema and persistence.

One ScanRecord is one probe outcome row. Records serialize to JSONL
(full fidelity, used for checkpoints and round-trips) and CSV (flat,
consumed by the reporting pipeline). Every exported row carries the
schema version in its first column so downstream consumers can refuse
inputs they do not understand.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .classify import ClassificationResult, HandshakeClass
from .errors import SchemaError

SCAN_SCHEMA = "scan.v1"

CSV_COLUMNS = [
    "schema", "domain", "rank", "initial_size", "dns_status", "addresses",
    "outcome", "quic_class", "amplification_factor",
    "pre_validation_server_bytes", "pre_validation_client_bytes",
    "client_flights", "limit_exceeded", "multi_rtt_flag",
    "chain_ref", "started_at", "finished_at", "error",
]


class DnsStatus(str, Enum):
    A_RECORD = "A_RECORD"
    SERVFAIL = "SERVFAIL"
    NXDOMAIN = "NXDOMAIN"
    TIMEOUT = "TIMEOUT"
    REFUSED = "REFUSED"


@dataclass(frozen=True)
class DnsOutcome:
    status: DnsStatus
    addresses: tuple[str, ...] = ()


@dataclass(frozen=True)
class ScanRecord:
    domain: str
    rank: Optional[int] = None
    initial_size: Optional[int] = None
    dns: Optional[DnsOutcome] = None
    quic_class: Optional[ClassificationResult] = None
    outcome: Optional[str] = None
    chain_ref: Optional[str] = None
    started_at: float = 0.0
    finished_at: float = 0.0
    error: Optional[str] = None

    def __post_init__(self):
        if self.rank is not None and self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.quic_class is not None and self.error is not None:
            raise ValueError("a probe yields either a classification or an error, not both")


def _classification_to_obj(c: ClassificationResult) -> dict:
    return {
        "klass": c.klass.value,
        "amplification_factor": c.amplification_factor,
        "pre_validation_server_bytes": c.pre_validation_server_bytes,
        "pre_validation_client_bytes": c.pre_validation_client_bytes,
        "client_flights": c.client_flights,
        "limit_exceeded": c.limit_exceeded,
        "multi_rtt_flag": c.multi_rtt_flag,
    }


def _classification_from_obj(obj: dict) -> ClassificationResult:
    return ClassificationResult(
        klass=HandshakeClass(obj["klass"]),
        amplification_factor=obj["amplification_factor"],
        pre_validation_server_bytes=obj["pre_validation_server_bytes"],
        pre_validation_client_bytes=obj["pre_validation_client_bytes"],
        client_flights=obj["client_flights"],
        limit_exceeded=obj["limit_exceeded"],
        multi_rtt_flag=obj["multi_rtt_flag"],
    )


def record_to_obj(r: ScanRecord) -> dict:
    return {
        "schema": SCAN_SCHEMA,
        "domain": r.domain,
        "rank": r.rank,
        "initial_size": r.initial_size,
        "dns": None if r.dns is None else {
            "status": r.dns.status.value, "addresses": list(r.dns.addresses)},
        "quic_class": None if r.quic_class is None else _classification_to_obj(r.quic_class),
        "outcome": r.outcome,
        "chain_ref": r.chain_ref,
        "started_at": r.started_at,
        "finished_at": r.finished_at,
        "error": r.error,
    }


def record_from_obj(obj: dict) -> ScanRecord:
    if obj.get("schema") != SCAN_SCHEMA:
        raise SchemaError(f"expected schema {SCAN_SCHEMA}, got {obj.get('schema')!r}")
    dns = obj.get("dns")
    quic = obj.get("quic_class")
    return ScanRecord(
        domain=obj["domain"],
        rank=obj.get("rank"),
        initial_size=obj.get("initial_size"),
        dns=None if dns is None else DnsOutcome(DnsStatus(dns["status"]),
                                                tuple(dns.get("addresses", []))),
        quic_class=None if quic is None else _classification_from_obj(quic),
        outcome=obj.get("outcome"),
        chain_ref=obj.get("chain_ref"),
        started_at=obj.get("started_at", 0.0),
        finished_at=obj.get("finished_at", 0.0),
        error=obj.get("error"),
    )


def record_to_csv_row(r: ScanRecord) -> list:
    c = r.quic_class
    return [
        SCAN_SCHEMA,
        r.domain,
        "" if r.rank is None else r.rank,
        "" if r.initial_size is None else r.initial_size,
        "" if r.dns is None else r.dns.status.value,
        "" if r.dns is None else " ".join(r.dns.addresses),
        r.outcome or "",
        "" if c is None else c.klass.value,
        "" if c is None else f"{c.amplification_factor:.6f}",
        "" if c is None else c.pre_validation_server_bytes,
        "" if c is None else c.pre_validation_client_bytes,
        "" if c is None else c.client_flights,
        "" if c is None else str(c.limit_exceeded).lower(),
        "" if c is None else str(c.multi_rtt_flag).lower(),
        r.chain_ref or "",
        f"{r.started_at:.6f}",
        f"{r.finished_at:.6f}",
        r.error or "",
    ]


def _atomic_write(path, writer_fn) -> None:
    """Write via a temp file and rename, so failures never leave partial files."""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            writer_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_records_csv(records: Iterable[ScanRecord], path) -> None:
    records = list(records)

    def _write(fh):
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(record_to_csv_row(r))

    _atomic_write(path, _write)


def write_records_jsonl(records: Iterable[ScanRecord], path) -> None:
    records = list(records)

    def _write(fh):
        for r in records:
            fh.write(json.dumps(record_to_obj(r), separators=(",", ":")) + "\n")

    _atomic_write(path, _write)


def read_records_jsonl(path) -> list[ScanRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_obj(json.loads(line)))
    return out
