"""Telescope backscatter sessionization and amplification accounting.

Backscatter records are normalized datagram observations (source,
destination, time, UDP length, source connection ID). Grouping by
(provider, SCID) with a gap timeout turns them into sessions; dividing
session bytes by an assumed client Initial yields the amplification a
spoofed victim would have absorbed.
"""

from __future__ import annotations

import csv
import ipaddress
import json
from dataclasses import dataclass
from statistics import median, quantiles
from typing import Iterable, Optional

SESSION_GAP_TIMEOUT = 300.0  # seconds of silence that end a session
BACKSCATTER_SCHEMA = "backscatter.v1"
UNKNOWN_PROVIDER = "OTHER"


@dataclass(frozen=True)
class BackscatterRecord:
    src_ip: str
    dst_ip: str
    time_us: int
    udp_len: int
    scid: bytes
    provider_label: Optional[str] = None


@dataclass(frozen=True)
class Session:
    provider: str
    scid: bytes
    total_bytes: int
    first_us: int
    last_us: int
    record_count: int

    @property
    def duration_s(self) -> float:
        return (self.last_us - self.first_us) / 1e6


class PrefixMap:
    """Longest-prefix provider lookup over IPv4 networks."""

    def __init__(self, entries: Iterable[tuple[str, str]] = ()):
        self._nets = [(ipaddress.ip_network(p), label) for p, label in entries]
        self._nets.sort(key=lambda e: -e[0].prefixlen)

    def lookup(self, ip: str) -> str:
        addr = ipaddress.ip_address(ip)
        for net, label in self._nets:
            if addr in net:
                return label
        return UNKNOWN_PROVIDER

    @staticmethod
    def from_csv(path) -> "PrefixMap":
        entries = []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0] == "prefix":
                    continue
                entries.append((row[0].strip(), row[1].strip()))
        return PrefixMap(entries)


def read_backscatter(path) -> list[BackscatterRecord]:
    """Load records from JSONL or CSV (by extension)."""
    records = []
    text = str(path)
    if text.endswith(".csv"):
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(BackscatterRecord(
                    src_ip=row["src_ip"], dst_ip=row["dst_ip"],
                    time_us=int(row["time_us"]), udp_len=int(row["udp_len"]),
                    scid=bytes.fromhex(row["scid"]),
                    provider_label=row.get("provider_label") or None))
    else:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                records.append(BackscatterRecord(
                    src_ip=obj["src_ip"], dst_ip=obj["dst_ip"],
                    time_us=obj["time_us"], udp_len=obj["udp_len"],
                    scid=bytes.fromhex(obj["scid"]),
                    provider_label=obj.get("provider_label")))
    return records


def sessionize(records: Iterable[BackscatterRecord],
               prefix_map: Optional[PrefixMap] = None,
               gap_timeout: float = SESSION_GAP_TIMEOUT) -> list[Session]:
    """Partition records into (provider, SCID) sessions.

    Records more than ``gap_timeout`` seconds apart under the same key
    start a new session (SCIDs get reused; the timeout keeps unrelated
    reuses apart). Every record lands in exactly one session and byte
    totals are conserved.
    """
    prefix_map = prefix_map or PrefixMap()
    gap_us = int(gap_timeout * 1e6)
    ordered = sorted(records, key=lambda r: r.time_us)
    open_sessions: dict[tuple[str, bytes], dict] = {}
    finished: list[Session] = []

    def close(state: dict) -> None:
        finished.append(Session(
            provider=state["provider"], scid=state["scid"],
            total_bytes=state["bytes"], first_us=state["first"],
            last_us=state["last"], record_count=state["count"]))

    for r in ordered:
        provider = r.provider_label or prefix_map.lookup(r.src_ip)
        key = (provider, r.scid)
        state = open_sessions.get(key)
        if state is not None and r.time_us - state["last"] > gap_us:
            close(state)
            state = None
        if state is None:
            open_sessions[key] = {
                "provider": provider, "scid": r.scid, "bytes": r.udp_len,
                "first": r.time_us, "last": r.time_us, "count": 1}
        else:
            state["bytes"] += r.udp_len
            state["last"] = r.time_us
            state["count"] += 1
    for state in open_sessions.values():
        close(state)
    finished.sort(key=lambda s: (s.provider, s.first_us, s.scid))
    return finished


@dataclass(frozen=True)
class ProviderDistribution:
    provider: str
    session_count: int
    factor_min: float
    factor_q1: float
    factor_median: float
    factor_q3: float
    factor_max: float
    duration_median_s: float
    duration_max_s: float


def amplification_distribution(sessions: Iterable[Session],
                               assumed_initial: int = 1362,
                               ) -> list[ProviderDistribution]:
    """Per-provider amplification factors assuming a fixed client Initial."""
    if assumed_initial < 1200:
        raise ValueError("assumed_initial must be >= 1200")
    by_provider: dict[str, list[Session]] = {}
    for s in sessions:
        by_provider.setdefault(s.provider, []).append(s)
    out = []
    for provider in sorted(by_provider):
        group = by_provider[provider]
        factors = sorted(s.total_bytes / assumed_initial for s in group)
        durations = [s.duration_s for s in group]
        if len(factors) >= 2:
            q1, q2, q3 = quantiles(factors, n=4, method="inclusive")
        else:
            q1 = q2 = q3 = factors[0]
        out.append(ProviderDistribution(
            provider=provider,
            session_count=len(group),
            factor_min=factors[0],
            factor_q1=q1,
            factor_median=q2,
            factor_q3=q3,
            factor_max=factors[-1],
            duration_median_s=median(durations),
            duration_max_s=max(durations),
        ))
    return out


def write_distribution_csv(dists: Iterable[ProviderDistribution], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema", "provider", "session_count", "factor_min", "factor_q1",
                    "factor_median", "factor_q3", "factor_max",
                    "duration_median_s", "duration_max_s"])
        for d in dists:
            w.writerow([BACKSCATTER_SCHEMA, d.provider, d.session_count,
                        f"{d.factor_min:.6f}", f"{d.factor_q1:.6f}",
                        f"{d.factor_median:.6f}", f"{d.factor_q3:.6f}",
                        f"{d.factor_max:.6f}", f"{d.duration_median_s:.6f}",
                        f"{d.duration_max_s:.6f}"])
