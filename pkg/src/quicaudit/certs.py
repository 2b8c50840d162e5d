"""X.509 chain parsing with exact per-field byte anatomy.

Certificates are measured, not validated: parsing is lossless (the raw
DER is retained and re-serialization is the identity), and every byte
of a certificate lands in exactly one of nine field buckets or the
explicit structural-overhead bucket, so sums always reproduce the DER
length.

Name handling is byte-wise on the DER-encoded names: issuer/subject
chaining is a byte comparison, exactly as path building treats it.
"""

from __future__ import annotations

import csv
import hashlib
import os
import re
from base64 import b64decode, b64encode
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from statistics import mean, median
from typing import Iterable, Optional

from cryptography import x509

from . import asn1
from .errors import DerParseError

FIELD_NAMES = (
    "version", "serial", "signature_algo", "issuer", "validity",
    "subject", "public_key", "extensions", "signature",
)

# Leaf certificates with at least this share of bytes in SAN entries sit
# in the top percentile of web deployments ("cruise liners").
CRUISE_LINER_SAN_SHARE = 0.289

# Chains above this many bytes form the heavy tail of web deployments.
LARGE_CHAIN_THRESHOLD = 4000

_OID_RSA = "1.2.840.113549.1.1.1"
_OID_EC = "1.2.840.10045.2.1"
_OID_P256 = "1.2.840.10045.3.1.7"
_OID_P384 = "1.3.132.0.34"
_OID_CN = "2.5.4.3"
_OID_SAN = "2.5.29.17"

CERTS_SCHEMA = "certs.v1"
CHAINS_SCHEMA = "chains.v1"
PARENTS_SCHEMA = "parents.v1"


class Role(str, Enum):
    LEAF = "LEAF"
    INTERMEDIATE = "INTERMEDIATE"
    ROOT = "ROOT"


class KeyAlgo(str, Enum):
    RSA_2048 = "RSA-2048"
    RSA_4096 = "RSA-4096"
    ECDSA_256 = "ECDSA-256"
    ECDSA_384 = "ECDSA-384"
    OTHER = "OTHER"


class ChainSource(str, Enum):
    QUIC = "QUIC"
    HTTPS = "HTTPS"
    FILE = "FILE"


@dataclass(frozen=True)
class CertRecord:
    der: bytes
    der_len: int
    role: Role
    field_sizes: dict
    structural_overhead: int
    key_algo: KeyAlgo
    subject_der: bytes
    issuer_der: bytes
    subject_cn: str
    issuer_cn: str
    spki_digest: str
    self_signed: bool
    san_bytes: int

    def __post_init__(self):
        total = sum(self.field_sizes.values()) + self.structural_overhead
        if total != self.der_len:
            raise DerParseError(
                f"field sizes + overhead = {total}, expected {self.der_len}", 0)


@dataclass(frozen=True)
class ChainRecord:
    certs: tuple[CertRecord, ...]
    total_len: int
    ordered_correctly: bool
    parent_chain_id: str
    source: ChainSource = ChainSource.FILE
    domain: Optional[str] = None

    @property
    def leaf(self) -> CertRecord:
        return self.certs[0]

    def serialize(self) -> bytes:
        return b"".join(c.der for c in self.certs)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _find_cn(der: bytes, name_off: int, name_hlen: int, name_clen: int) -> str:
    """Pull the commonName out of a DER Name, best effort."""
    try:
        start = name_off + name_hlen
        for set_tag, s_off, s_hlen, s_clen in asn1.iter_children(der, start, start + name_clen):
            if set_tag != asn1.TAG_SET:
                continue
            for seq_tag, q_off, q_hlen, q_clen in asn1.iter_children(
                    der, s_off + s_hlen, s_off + s_hlen + s_clen):
                kids = list(asn1.iter_children(der, q_off + q_hlen, q_off + q_hlen + q_clen))
                if len(kids) != 2 or kids[0][0] != asn1.TAG_OID:
                    continue
                oid_tag, o_off, o_hlen, o_clen = kids[0]
                oid = asn1.decode_oid(der[o_off + o_hlen:o_off + o_hlen + o_clen])
                if oid == _OID_CN:
                    _, v_off, v_hlen, v_clen = kids[1]
                    return der[v_off + v_hlen:v_off + v_hlen + v_clen].decode(
                        "utf-8", "replace")
    except DerParseError:
        pass
    return ""


def _key_algo(der: bytes, spki_off: int, spki_hlen: int, spki_clen: int) -> KeyAlgo:
    kids = list(asn1.iter_children(der, spki_off + spki_hlen, spki_off + spki_hlen + spki_clen))
    if len(kids) != 2:
        return KeyAlgo.OTHER
    algo_tag, a_off, a_hlen, a_clen = kids[0]
    bits_tag, b_off, b_hlen, b_clen = kids[1]
    if algo_tag != asn1.TAG_SEQUENCE or bits_tag != asn1.TAG_BIT_STRING:
        return KeyAlgo.OTHER
    algo_kids = list(asn1.iter_children(der, a_off + a_hlen, a_off + a_hlen + a_clen))
    if not algo_kids or algo_kids[0][0] != asn1.TAG_OID:
        return KeyAlgo.OTHER
    _, o_off, o_hlen, o_clen = algo_kids[0]
    oid = asn1.decode_oid(der[o_off + o_hlen:o_off + o_hlen + o_clen])
    if oid == _OID_RSA:
        # BIT STRING content: pad-bit count byte, then RSAPublicKey SEQUENCE.
        key = der[b_off + b_hlen + 1:b_off + b_hlen + b_clen]
        try:
            tag, hlen, clen = asn1.read_header(key, 0)
            kids2 = list(asn1.iter_children(key, hlen, hlen + clen))
            _, m_off, m_hlen, m_clen = kids2[0]
            modulus = key[m_off + m_hlen:m_off + m_hlen + m_clen].lstrip(b"\x00")
            bits = len(modulus) * 8
        except (DerParseError, IndexError):
            return KeyAlgo.OTHER
        if bits == 2048:
            return KeyAlgo.RSA_2048
        if bits == 4096:
            return KeyAlgo.RSA_4096
        return KeyAlgo.OTHER
    if oid == _OID_EC and len(algo_kids) >= 2 and algo_kids[1][0] == asn1.TAG_OID:
        _, c_off, c_hlen, c_clen = algo_kids[1]
        curve = asn1.decode_oid(der[c_off + c_hlen:c_off + c_hlen + c_clen])
        if curve == _OID_P256:
            return KeyAlgo.ECDSA_256
        if curve == _OID_P384:
            return KeyAlgo.ECDSA_384
    return KeyAlgo.OTHER


def _san_extension_bytes(der: bytes, ext_off: int, ext_hlen: int, ext_clen: int) -> int:
    """Size of the full subjectAltName Extension TLV inside [3] extensions."""
    # [3] wraps SEQUENCE OF Extension.
    inner = list(asn1.iter_children(der, ext_off + ext_hlen, ext_off + ext_hlen + ext_clen))
    if len(inner) != 1 or inner[0][0] != asn1.TAG_SEQUENCE:
        return 0
    _, s_off, s_hlen, s_clen = inner[0]
    for tag, e_off, e_hlen, e_clen in asn1.iter_children(der, s_off + s_hlen,
                                                         s_off + s_hlen + s_clen):
        kids = list(asn1.iter_children(der, e_off + e_hlen, e_off + e_hlen + e_clen))
        if kids and kids[0][0] == asn1.TAG_OID:
            _, o_off, o_hlen, o_clen = kids[0]
            if asn1.decode_oid(der[o_off + o_hlen:o_off + o_hlen + o_clen]) == _OID_SAN:
                return e_hlen + e_clen
    return 0


def parse_certificate(der: bytes) -> CertRecord:
    """Measure a single DER certificate.

    Raises DerParseError with the failing offset for malformed input.
    """
    tag, outer_hlen, outer_clen = asn1.read_header(der, 0)
    if tag != asn1.TAG_SEQUENCE:
        raise DerParseError(f"certificate must start with SEQUENCE, got tag {tag:#x}", 0)
    if outer_hlen + outer_clen != len(der):
        raise DerParseError("certificate TLV does not span the input", 0)

    top = list(asn1.iter_children(der, outer_hlen, len(der)))
    if len(top) != 3:
        raise DerParseError(f"expected 3 top-level elements, found {len(top)}", outer_hlen)
    (tbs_tag, tbs_off, tbs_hlen, tbs_clen), sig_algo_outer, sig_value = top
    if tbs_tag != asn1.TAG_SEQUENCE:
        raise DerParseError("tbsCertificate is not a SEQUENCE", tbs_off)

    fields = {name: 0 for name in FIELD_NAMES}
    overhead = outer_hlen + tbs_hlen
    fields["signature_algo"] = sig_algo_outer[2] + sig_algo_outer[3]
    fields["signature"] = sig_value[2] + sig_value[3]

    tbs_children = list(asn1.iter_children(der, tbs_off + tbs_hlen,
                                           tbs_off + tbs_hlen + tbs_clen))
    idx = 0

    def take(expect_tags, bucket: Optional[str]):
        nonlocal idx, overhead
        if idx >= len(tbs_children):
            raise DerParseError("tbsCertificate ended early", tbs_off)
        tag, off, hlen, clen = tbs_children[idx]
        if tag not in expect_tags:
            raise DerParseError(f"unexpected tag {tag:#x} in tbsCertificate", off)
        idx += 1
        if bucket:
            fields[bucket] += hlen + clen
        else:
            overhead += hlen + clen
        return tag, off, hlen, clen

    if tbs_children and tbs_children[0][0] == asn1.TAG_CTX_0:
        take({asn1.TAG_CTX_0}, "version")
    take({asn1.TAG_INTEGER}, "serial")
    sig_inner = take({asn1.TAG_SEQUENCE}, "signature_algo")
    issuer = take({asn1.TAG_SEQUENCE}, "issuer")
    take({asn1.TAG_SEQUENCE}, "validity")
    subject = take({asn1.TAG_SEQUENCE}, "subject")
    spki = take({asn1.TAG_SEQUENCE}, "public_key")

    san_bytes = 0
    while idx < len(tbs_children):
        tag, off, hlen, clen = tbs_children[idx]
        if tag == asn1.TAG_CTX_3:
            take({asn1.TAG_CTX_3}, "extensions")
            san_bytes = _san_extension_bytes(der, off, hlen, clen)
        elif tag in (0x81, 0x82, 0xA1, 0xA2):
            take({tag}, None)  # issuer/subjectUniqueID: rare, structural bucket
        else:
            raise DerParseError(f"unexpected trailing tag {tag:#x} in tbsCertificate", off)

    _, i_off, i_hlen, i_clen = issuer
    _, s_off, s_hlen, s_clen = subject
    issuer_der = der[i_off:i_off + i_hlen + i_clen]
    subject_der = der[s_off:s_off + s_hlen + s_clen]
    _, k_off, k_hlen, k_clen = spki
    spki_der = der[k_off:k_off + k_hlen + k_clen]

    self_signed = False
    if issuer_der == subject_der:
        try:
            cert = x509.load_der_x509_certificate(der)
            cert.verify_directly_issued_by(cert)
            self_signed = True
        except Exception:
            self_signed = False

    return CertRecord(
        der=der,
        der_len=len(der),
        role=Role.INTERMEDIATE,
        field_sizes=fields,
        structural_overhead=overhead,
        key_algo=_key_algo(der, k_off, k_hlen, k_clen),
        subject_der=subject_der,
        issuer_der=issuer_der,
        subject_cn=_find_cn(der, s_off, s_hlen, s_clen),
        issuer_cn=_find_cn(der, i_off, i_hlen, i_clen),
        spki_digest=hashlib.sha256(spki_der).hexdigest(),
        self_signed=self_signed,
        san_bytes=san_bytes,
    )


_PEM_RE = re.compile(
    b"-----BEGIN CERTIFICATE-----(.*?)-----END CERTIFICATE-----", re.DOTALL)


def split_blob(blob: bytes) -> list[bytes]:
    """Split a PEM or concatenated-DER blob into DER certificates."""
    if not blob:
        raise DerParseError("empty input", 0)
    if b"-----BEGIN CERTIFICATE-----" in blob:
        ders = []
        for m in _PEM_RE.finditer(blob):
            ders.append(b64decode(m.group(1)))
        if not ders:
            raise DerParseError("PEM markers present but no certificate decoded", 0)
        return ders
    ders = []
    off = 0
    while off < len(blob):
        end = asn1.tlv_end(blob, off)
        ders.append(blob[off:end])
        off = end
    return ders


def parse_chain(blob: bytes, domain: Optional[str] = None,
                source: ChainSource = ChainSource.FILE) -> ChainRecord:
    """Parse a delivered chain (leaf first). Lossless: ``serialize()``
    reproduces the concatenated DER input exactly."""
    ders = split_blob(blob)
    certs = [parse_certificate(d) for d in ders]
    roled = []
    for i, c in enumerate(certs):
        if c.self_signed:
            role = Role.ROOT
        elif i == 0:
            role = Role.LEAF
        else:
            role = Role.INTERMEDIATE
        roled.append(replace(c, role=role))
    ordered = all(
        roled[i].issuer_der == roled[i + 1].subject_der for i in range(len(roled) - 1)
    )
    parent_id = hashlib.sha256(b"".join(c.der for c in roled[1:])).hexdigest()
    return ChainRecord(
        certs=tuple(roled),
        total_len=sum(c.der_len for c in roled),
        ordered_correctly=ordered,
        parent_chain_id=parent_id,
        source=source,
        domain=domain,
    )


def chain_to_pem(chain: ChainRecord) -> bytes:
    out = []
    for c in chain.certs:
        body = b64encode(c.der)
        lines = [body[i:i + 64] for i in range(0, len(body), 64)]
        out.append(b"-----BEGIN CERTIFICATE-----\n" + b"\n".join(lines) +
                   b"\n-----END CERTIFICATE-----\n")
    return b"".join(out)


# ---------------------------------------------------------------------------
# Trust store
# ---------------------------------------------------------------------------

class TrustStore:
    """Set of self-signed anchors keyed by (subject, SPKI digest)."""

    def __init__(self, roots: Iterable[CertRecord] = ()):
        self.roots: dict[tuple[bytes, str], CertRecord] = {}
        for r in roots:
            self.add(r)

    def add(self, root: CertRecord) -> None:
        if not root.self_signed:
            raise ValueError(f"trust store roots must be self-signed: {root.subject_cn!r}")
        self.roots[(root.subject_der, root.spki_digest)] = root

    def __len__(self) -> int:
        return len(self.roots)

    def contains_key_of(self, cert: CertRecord) -> bool:
        return (cert.subject_der, cert.spki_digest) in self.roots

    @staticmethod
    def from_dir(path) -> "TrustStore":
        store = TrustStore()
        for entry in sorted(Path(path).iterdir()):
            if entry.suffix.lower() not in (".pem", ".crt", ".der"):
                continue
            for der in split_blob(entry.read_bytes()):
                store.add(parse_certificate(der))
        return store

    @staticmethod
    def bundled() -> "TrustStore":
        return TrustStore.from_dir(Path(__file__).parent / "data" / "truststore")


# ---------------------------------------------------------------------------
# Analyses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnatomyRow:
    role_class: str  # "leaf" | "non-leaf"
    field: str
    mean: float
    median: float
    count: int


def field_anatomy(chains: Iterable[ChainRecord]) -> list[AnatomyRow]:
    """Per-field size distribution, split into leaf vs non-leaf certs."""
    chains = list(chains)
    if not chains:
        raise ValueError("field_anatomy requires a non-empty chain set")
    buckets: dict[str, list[CertRecord]] = {"leaf": [], "non-leaf": []}
    for chain in chains:
        for i, cert in enumerate(chain.certs):
            buckets["leaf" if i == 0 else "non-leaf"].append(cert)
    rows = []
    for role_class, certs in buckets.items():
        if not certs:
            continue
        for fname in FIELD_NAMES:
            values = [c.field_sizes[fname] for c in certs]
            rows.append(AnatomyRow(role_class, fname, mean(values), median(values),
                                   len(values)))
        ov = [c.structural_overhead for c in certs]
        rows.append(AnatomyRow(role_class, "structural_overhead", mean(ov), median(ov),
                               len(ov)))
    return rows


@dataclass(frozen=True)
class CrossSignFinding:
    cert_index: int
    subject_cn: str
    issuer_cn: str
    der_len: int
    recommendation: str


def detect_cross_signed(chain: ChainRecord, store: TrustStore) -> list[CrossSignFinding]:
    """Flag non-leaf certs whose key already anchors the trust store but
    which were delivered as a cross-signed variant (issuer differs)."""
    if not len(store):
        raise ValueError("detect_cross_signed requires a non-empty trust store")
    findings = []
    for i, cert in enumerate(chain.certs):
        if i == 0 and cert.role is Role.LEAF:
            continue
        if cert.issuer_der != cert.subject_der and store.contains_key_of(cert):
            findings.append(CrossSignFinding(
                cert_index=i,
                subject_cn=cert.subject_cn,
                issuer_cn=cert.issuer_cn,
                der_len=cert.der_len,
                recommendation=(
                    f"drop the cross-signed variant of {cert.subject_cn!r}; clients "
                    f"already trust the self-signed anchor ({cert.der_len} bytes saved)"),
            ))
    return findings


@dataclass(frozen=True)
class AnchorFinding:
    cert_index: int
    subject_cn: str
    byte_savings: int


def detect_included_anchor(chain: ChainRecord) -> list[AnchorFinding]:
    """Flag self-signed certificates delivered inside the chain; trust
    anchors live in the client store, shipping them is wasted bytes."""
    return [
        AnchorFinding(cert_index=i, subject_cn=c.subject_cn, byte_savings=c.der_len)
        for i, c in enumerate(chain.certs) if c.self_signed
    ]


@dataclass(frozen=True)
class ParentChainGroup:
    parent_chain_id: str
    service_count: int
    coverage: float
    non_leaf_sizes: tuple[int, ...]
    median_leaf: float
    max_leaf: int
    example_domain: Optional[str]


def parent_chain_group(chains: Iterable[ChainRecord]) -> list[ParentChainGroup]:
    """Group chains by their shared non-leaf suffix, ranked by coverage.

    Chains that are not ordered correctly are excluded (their parent
    identity is not meaningful).
    """
    usable = [c for c in chains if c.ordered_correctly]
    total = len(usable)
    by_parent: dict[str, list[ChainRecord]] = {}
    for c in usable:
        by_parent.setdefault(c.parent_chain_id, []).append(c)
    groups = []
    for pid, members in by_parent.items():
        leaf_sizes = [m.leaf.der_len for m in members]
        groups.append(ParentChainGroup(
            parent_chain_id=pid,
            service_count=len(members),
            coverage=len(members) / total,
            non_leaf_sizes=tuple(c.der_len for c in members[0].certs[1:]),
            median_leaf=median(leaf_sizes),
            max_leaf=max(leaf_sizes),
            example_domain=next((m.domain for m in members if m.domain), None),
        ))
    groups.sort(key=lambda g: (-g.coverage, g.parent_chain_id))
    return groups


@dataclass(frozen=True)
class LimitFit:
    fits: bool
    budget: int
    used: int


def limit_fit(chain: ChainRecord, initial_size: int, overhead: int = 0) -> LimitFit:
    """Does the chain (plus fixed handshake overhead) fit the 3x reply
    budget a server has before validating the client?"""
    if not (1200 <= initial_size <= 65527):
        raise ValueError("initial_size out of [1200, 65527]")
    budget = 3 * initial_size
    used = chain.total_len + overhead
    return LimitFit(fits=used <= budget, budget=budget, used=used)


@dataclass(frozen=True)
class CruiseLinerScore:
    san_share: float
    flagged: bool


def cruise_liner_score(chain: ChainRecord) -> CruiseLinerScore:
    """Share of leaf bytes spent on subject alternative names."""
    if not chain.certs:
        raise ValueError("chain has no leaf")
    leaf = chain.certs[0]
    share = leaf.san_bytes / leaf.der_len
    return CruiseLinerScore(san_share=share, flagged=share >= CRUISE_LINER_SAN_SHARE)


def key_algo_stats(chains: Iterable[ChainRecord],
                   min_fraction: float = 0.01) -> dict[tuple[str, str], float]:
    """Frequency of key algorithms per leaf/non-leaf role, cells below
    ``min_fraction`` dropped."""
    counts: dict[str, dict[str, int]] = {"leaf": {}, "non-leaf": {}}
    totals = {"leaf": 0, "non-leaf": 0}
    for chain in chains:
        for i, cert in enumerate(chain.certs):
            role_class = "leaf" if i == 0 else "non-leaf"
            counts[role_class][cert.key_algo.value] = \
                counts[role_class].get(cert.key_algo.value, 0) + 1
            totals[role_class] += 1
    out = {}
    for role_class, algos in counts.items():
        if not totals[role_class]:
            continue
        for algo, n in algos.items():
            frac = n / totals[role_class]
            if frac > min_fraction:
                out[(role_class, algo)] = frac
    return out


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def write_cert_csv(chains: Iterable[ChainRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema", "domain", "cert_index", "role", "der_len",
                    *FIELD_NAMES, "structural_overhead", "key_algo",
                    "self_signed", "san_bytes"])
        for chain in chains:
            for i, c in enumerate(chain.certs):
                w.writerow([CERTS_SCHEMA, chain.domain or "", i, c.role.value, c.der_len,
                            *(c.field_sizes[f] for f in FIELD_NAMES),
                            c.structural_overhead, c.key_algo.value,
                            str(c.self_signed).lower(), c.san_bytes])


def write_chain_csv(chains: Iterable[ChainRecord], path,
                    budgets: tuple[int, ...] = (1200, 1357)) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema", "domain", "source", "n_certs", "total_len",
                    "ordered_correctly", "parent_chain_id", "leaf_len", "san_share",
                    *(f"fits_3x{b}" for b in budgets)])
        for c in chains:
            score = cruise_liner_score(c)
            w.writerow([CHAINS_SCHEMA, c.domain or "", c.source.value, len(c.certs),
                        c.total_len, str(c.ordered_correctly).lower(),
                        c.parent_chain_id, c.leaf.der_len, f"{score.san_share:.6f}",
                        *(str(limit_fit(c, b).fits).lower() for b in budgets)])


def write_parent_chain_csv(groups: Iterable[ParentChainGroup], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema", "parent_chain_id", "service_count", "coverage",
                    "non_leaf_sizes", "median_leaf", "max_leaf", "example_domain"])
        for g in groups:
            w.writerow([PARENTS_SCHEMA, g.parent_chain_id, g.service_count,
                        f"{g.coverage:.6f}",
                        " ".join(map(str, g.non_leaf_sizes)),
                        f"{g.median_leaf:.1f}", g.max_leaf, g.example_domain or ""])
