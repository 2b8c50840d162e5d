"""DNS resolution and HTTPS certificate collection.

Resolution targets one explicit resolver and maps the reply into a
five-way outcome: A_RECORD, SERVFAIL, NXDOMAIN, TIMEOUT, REFUSED. A
NOERROR answer without any A record also maps to NXDOMAIN (there is no
IPv4 endpoint to probe). An unreachable resolver counts as TIMEOUT.

Chain collection connects over HTTP and HTTPS, follows both 3xx
redirects and HTML meta-refresh hops up to a depth limit, and records
the certificate chain of every HTTPS hop. Full chains are fetched with
``openssl s_client`` because the Python ssl module exposes only the
peer certificate.
"""

from __future__ import annotations

import re
import socket
import subprocess
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional
from urllib.parse import urljoin, urlsplit

import requests

from . import dnswire
from .certs import ChainRecord, ChainSource, parse_chain
from .errors import QuicAuditError, RedirectLoopError
from .records import DnsOutcome, DnsStatus

DEFAULT_DNS_TIMEOUT = 10.0
DEFAULT_REDIRECT_DEPTH = 10
DEFAULT_HTTP_TIMEOUT = 10.0

_RCODE_STATUS = {
    dnswire.RCODE_SERVFAIL: DnsStatus.SERVFAIL,
    dnswire.RCODE_NXDOMAIN: DnsStatus.NXDOMAIN,
    dnswire.RCODE_REFUSED: DnsStatus.REFUSED,
}

_META_REFRESH_RE = re.compile(
    rb"""<meta[^>]+http-equiv\s*=\s*["']?refresh["']?[^>]*?"""
    rb"""content\s*=\s*["']?\s*\d+\s*;\s*url\s*=\s*([^"'>\s]+)""",
    re.IGNORECASE | re.DOTALL,
)


def parse_resolver_address(address: str, default_port: int = 53) -> tuple[str, int]:
    host, _, port = address.partition(":")
    return host, int(port) if port else default_port


def resolve_domain(name: str, resolver_address: str,
                   timeout: float = DEFAULT_DNS_TIMEOUT) -> DnsOutcome:
    """Resolve IPv4 addresses for ``name`` against one resolver."""
    resolver = parse_resolver_address(resolver_address)
    try:
        resp = dnswire.query(name, resolver, timeout=timeout)
    except (socket.timeout, TimeoutError, ConnectionRefusedError, OSError):
        return DnsOutcome(status=DnsStatus.TIMEOUT)
    if resp.rcode in _RCODE_STATUS:
        return DnsOutcome(status=_RCODE_STATUS[resp.rcode])
    if resp.rcode != dnswire.RCODE_NOERROR or not resp.addresses:
        return DnsOutcome(status=DnsStatus.NXDOMAIN)
    return DnsOutcome(status=DnsStatus.A_RECORD, addresses=resp.addresses)


def fetch_chain_sclient(host: str, port: int, servername: str,
                        timeout: float = DEFAULT_HTTP_TIMEOUT) -> ChainRecord:
    """Grab the full delivered chain of one TLS endpoint."""
    cmd = [
        "openssl", "s_client", "-connect", f"{host}:{port}",
        "-servername", servername, "-showcerts", "-verify", "0",
    ]
    proc = subprocess.run(cmd, input=b"", capture_output=True, timeout=timeout + 5)
    pem = proc.stdout
    if b"-----BEGIN CERTIFICATE-----" not in pem:
        err = proc.stderr.decode("utf-8", "replace").strip().splitlines()
        raise QuicAuditError(f"no certificate from {host}:{port}: {err[-1] if err else 'no output'}")
    return parse_chain(pem, domain=servername, source=ChainSource.HTTPS)


@dataclass(frozen=True)
class Hop:
    url: str
    status: Optional[int] = None
    redirect_to: Optional[str] = None
    chain: Optional[ChainRecord] = None
    error: Optional[str] = None


def _next_location(resp: requests.Response, url: str) -> Optional[str]:
    if 300 <= resp.status_code < 400 and "location" in resp.headers:
        return urljoin(url, resp.headers["location"])
    m = _META_REFRESH_RE.search(resp.content[:65536])
    if m:
        return urljoin(url, m.group(1).decode("utf-8", "replace"))
    return None


def collect_https_chain(
    domain: str,
    http_port: int = 80,
    https_port: int = 443,
    max_redirects: int = DEFAULT_REDIRECT_DEPTH,
    timeout: float = DEFAULT_HTTP_TIMEOUT,
) -> tuple[Optional[ChainRecord], list[Hop]]:
    """Collect the chains a client encounters when visiting ``domain``.

    Starts on both the plain and the TLS port, follows redirects, and
    returns (chain of the final HTTPS hop, all hops). Raises
    RedirectLoopError when a path exceeds ``max_redirects``.
    """
    hops: list[Hop] = []
    final_chain: Optional[ChainRecord] = None

    def port_for(scheme: str, netloc_port: Optional[int]) -> int:
        if netloc_port:
            return netloc_port
        return https_port if scheme == "https" else http_port

    for scheme in ("http", "https"):
        url = f"{scheme}://{domain}:{port_for(scheme, None)}/"
        seen = set()
        depth = 0
        while url:
            if url in seen:
                raise RedirectLoopError(f"redirect loop at {url}", hops)
            if depth > max_redirects:
                raise RedirectLoopError(
                    f"redirect depth exceeded {max_redirects} at {url}", hops)
            seen.add(url)
            depth += 1
            parts = urlsplit(url)
            host = parts.hostname or domain
            port = port_for(parts.scheme, parts.port)
            chain = None
            if parts.scheme == "https":
                try:
                    chain = fetch_chain_sclient(host, port, host, timeout=timeout)
                    final_chain = chain
                except (QuicAuditError, subprocess.TimeoutExpired) as exc:
                    hops.append(Hop(url=url, error=f"tls: {exc}"))
                    break
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    resp = requests.get(url, allow_redirects=False, verify=False,
                                        timeout=timeout)
            except requests.RequestException as exc:
                hops.append(Hop(url=url, chain=chain, error=str(exc)))
                break
            nxt = _next_location(resp, url)
            hops.append(Hop(url=url, status=resp.status_code, redirect_to=nxt, chain=chain))
            url = nxt
    return final_chain, hops
