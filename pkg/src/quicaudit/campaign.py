"""Campaign driver: ranked domain lists through resolve / collect / probe.

Runs the pipeline stages with bounded concurrency, appends every
finished record to a JSONL checkpoint (single writer), and resumes by
skipping domains the checkpoint already covers. Per-domain failures
are recorded, never fatal.
"""

from __future__ import annotations

import csv
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .certs import chain_to_pem
from .classify import LimitPolicy, classify_handshake
from .errors import QuicAuditError
from .probe import ProbeConfig, ProbeMode, ProbeTarget, probe_once
from .records import (
    DnsOutcome,
    DnsStatus,
    ScanRecord,
    read_records_jsonl,
    record_to_obj,
    write_records_csv,
    write_records_jsonl,
)
from .webscan import collect_https_chain, resolve_domain

RESOLVER_ENV_VAR = "QUICAUDIT_RESOLVER"
DEFAULT_RESOLVER = "8.8.8.8"
DEFAULT_CONCURRENCY = 64
DEFAULT_SPACING = 1800.0
CHECKPOINT_NAME = "checkpoint.jsonl"

VALID_STAGES = ("dns", "https", "quic")


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[str, ...] = VALID_STAGES
    initial_size: int = 1362
    spacing: float = DEFAULT_SPACING
    probe_timeout: float = 10.0
    resolver: Optional[str] = None
    concurrency: int = DEFAULT_CONCURRENCY
    quic_port: int = 443
    http_port: int = 80
    https_port: int = 443
    policy: LimitPolicy = LimitPolicy.DATA_3X_RFC9000
    # Closed-loop hooks: fixed per-domain QUIC ports and a host override
    # for lab setups where every domain lands on loopback endpoints.
    port_map: Optional[dict] = None
    quic_host: Optional[str] = None

    def __post_init__(self):
        unknown = set(self.stages) - set(VALID_STAGES)
        if unknown:
            raise ValueError(f"unknown stages: {sorted(unknown)}")
        if not self.stages:
            raise ValueError("at least one stage required")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def resolver_address(self) -> str:
        return self.resolver or os.environ.get(RESOLVER_ENV_VAR) or DEFAULT_RESOLVER


class RateLimiter:
    """Enforces a minimum spacing between acquisitions of the same key."""

    def __init__(self, spacing: float):
        self.spacing = spacing
        self._last: dict = {}
        self._lock = threading.Lock()

    def acquire(self, key) -> None:
        if self.spacing <= 0:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                last = self._last.get(key)
                if last is None or now - last >= self.spacing:
                    self._last[key] = now
                    return
                wait = self.spacing - (now - last)
            time.sleep(wait)


def read_domain_list(path) -> list[tuple[int, str]]:
    """Tranco-style CSV: rank,domain per line."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            out.append((int(row[0]), row[1].strip()))
    return out


@dataclass
class CampaignResult:
    records: list[ScanRecord]
    partial_failures: int
    out_dir: Path


class _CheckpointWriter:
    def __init__(self, path: Path):
        self._fh = open(path, "a", encoding="utf-8")
        self._lock = threading.Lock()

    def append(self, record: ScanRecord) -> None:
        line = json.dumps(record_to_obj(record), separators=(",", ":"))
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _scan_domain(rank: int, domain: str, config: PipelineConfig,
                 limiter: RateLimiter, chains_dir: Path) -> ScanRecord:
    started = time.time()
    dns: Optional[DnsOutcome] = None
    chain_ref: Optional[str] = None
    error: Optional[str] = None
    outcome: Optional[str] = None
    quic_class = None
    probe_host: Optional[str] = config.quic_host

    gate_ok = True
    if "dns" in config.stages:
        dns = resolve_domain(domain, config.resolver_address(),
                             timeout=config.probe_timeout)
        gate_ok = dns.status is DnsStatus.A_RECORD
        if gate_ok and probe_host is None:
            probe_host = dns.addresses[0]

    if gate_ok and "https" in config.stages:
        try:
            chain, _hops = collect_https_chain(
                domain, http_port=config.http_port, https_port=config.https_port,
                timeout=config.probe_timeout)
        except QuicAuditError as exc:
            chain, error = None, f"https: {exc}"
        if chain is not None:
            ref = chains_dir / f"{domain}.pem"
            ref.write_bytes(chain_to_pem(chain))
            chain_ref = str(ref)
        gate_ok = chain_ref is not None

    if gate_ok and "quic" in config.stages and error is None:
        limiter.acquire((domain, "quic"))
        port = (config.port_map or {}).get(domain, config.quic_port)
        try:
            cfg = ProbeConfig(
                target=ProbeTarget(host=probe_host or domain, port=port, domain=domain),
                initial_size=config.initial_size,
                mode=ProbeMode.COMPLETE,
                timeout=config.probe_timeout,
            )
            trace = probe_once(cfg)
            outcome = trace.outcome.value
            quic_class = classify_handshake(trace, config.policy)
        except (QuicAuditError, OSError) as exc:
            error = f"quic: {exc}"

    return ScanRecord(
        domain=domain,
        rank=rank,
        initial_size=config.initial_size if "quic" in config.stages else None,
        dns=dns,
        quic_class=quic_class,
        outcome=outcome,
        chain_ref=chain_ref,
        started_at=started,
        finished_at=time.time(),
        error=error,
    )


def run_campaign(domains: Iterable[tuple[int, str]], config: PipelineConfig,
                 out_dir) -> CampaignResult:
    """Execute the pipeline over a ranked domain list.

    Resumable: domains already present in ``out_dir/checkpoint.jsonl``
    are not re-scanned, so an interrupted campaign re-run converges to
    the same record set as an uninterrupted one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chains_dir = out_dir / "chains"
    chains_dir.mkdir(exist_ok=True)
    checkpoint_path = out_dir / CHECKPOINT_NAME

    done: dict[str, ScanRecord] = {}
    if checkpoint_path.exists():
        for r in read_records_jsonl(checkpoint_path):
            done[r.domain] = r

    todo = [(rank, d) for rank, d in domains if d not in done]
    limiter = RateLimiter(config.spacing)
    writer = _CheckpointWriter(checkpoint_path)
    lock = threading.Lock()

    def work(item):
        rank, domain = item
        record = _scan_domain(rank, domain, config, limiter, chains_dir)
        writer.append(record)
        with lock:
            done[domain] = record

    try:
        if todo:
            workers = min(config.concurrency, len(todo))
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(work, todo))
    finally:
        writer.close()

    records = sorted(done.values(), key=lambda r: (r.rank or 0, r.domain))
    return CampaignResult(records=records,
                          partial_failures=sum(1 for r in records if r.error),
                          out_dir=out_dir)


def export(records: Iterable[ScanRecord], out_dir) -> dict:
    """Write the versioned CSV + JSONL views; atomic per file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "records.csv"
    jsonl_path = out_dir / "records.jsonl"
    records = list(records)
    write_records_csv(records, csv_path)
    write_records_jsonl(records, jsonl_path)
    return {"csv": csv_path, "jsonl": jsonl_path}


@dataclass(frozen=True)
class RankGroupSummary:
    group_index: int
    rank_lo: int
    rank_hi: int
    domain_count: int
    quic_share: float
    https_only_share: float
    class_shares: dict


def rank_group_summary(records: Iterable[ScanRecord],
                       group_size: int = 100000) -> list[RankGroupSummary]:
    """Reachability and class shares per contiguous rank group."""
    groups: dict[int, list[ScanRecord]] = {}
    for r in records:
        if r.rank is None:
            continue
        groups.setdefault((r.rank - 1) // group_size, []).append(r)
    out = []
    for gi in sorted(groups):
        members = groups[gi]
        n = len(members)
        quic = [r for r in members if r.quic_class is not None]
        https_only = [r for r in members if r.chain_ref is not None and r.quic_class is None]
        shares: dict[str, float] = {}
        for r in quic:
            k = r.quic_class.klass.value
            shares[k] = shares.get(k, 0) + 1
        class_shares = {k: v / len(quic) for k, v in sorted(shares.items())} if quic else {}
        out.append(RankGroupSummary(
            group_index=gi,
            rank_lo=gi * group_size + 1,
            rank_hi=(gi + 1) * group_size,
            domain_count=n,
            quic_share=len(quic) / n,
            https_only_share=len(https_only) / n,
            class_shares=class_shares,
        ))
    return out
