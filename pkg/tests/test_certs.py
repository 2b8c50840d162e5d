"""Chain parser tests, including the external DER-dump oracle.

``openssl asn1parse`` is the independent authority for field offsets and
header lengths; the parser's nine field buckets must match the spans it
reports exactly.
"""

import re
import subprocess

import pytest
from hypothesis import given, settings, strategies as st

from quicaudit.certs import (
    CRUISE_LINER_SAN_SHARE,
    CertRecord,
    ChainRecord,
    KeyAlgo,
    Role,
    TrustStore,
    cruise_liner_score,
    detect_cross_signed,
    detect_included_anchor,
    field_anatomy,
    key_algo_stats,
    limit_fit,
    parent_chain_group,
    parse_certificate,
    parse_chain,
    split_blob,
    chain_to_pem,
    write_cert_csv,
    write_chain_csv,
)
from quicaudit.errors import DerParseError

from . import pki

_ASN1_LINE = re.compile(
    r"^\s*(\d+):d=(\d+)\s+hl=(\d+)\s+l=\s*(\d+)\s+(cons|prim):\s*(.*)$")


def asn1parse(der: bytes) -> list[dict]:
    proc = subprocess.run(
        ["openssl", "asn1parse", "-inform", "DER", "-i"],
        input=der, capture_output=True, check=True)
    rows = []
    for line in proc.stdout.decode().splitlines():
        m = _ASN1_LINE.match(line)
        if m:
            rows.append({
                "offset": int(m.group(1)), "depth": int(m.group(2)),
                "hl": int(m.group(3)), "l": int(m.group(4)),
                "label": m.group(6).strip(),
            })
    return rows


def oracle_field_spans(der: bytes) -> tuple[dict, int]:
    """Independent field-size map derived from openssl asn1parse output."""
    rows = asn1parse(der)
    top = [r for r in rows if r["depth"] == 1]
    tbs, sig_algo, signature = top[0], top[-2], top[-1]
    tbs_end = tbs["offset"] + tbs["hl"] + tbs["l"]
    d2 = [r for r in rows if r["depth"] == 2 and tbs["offset"] < r["offset"] < tbs_end]
    fields = {name: 0 for name in (
        "version", "serial", "signature_algo", "issuer", "validity",
        "subject", "public_key", "extensions", "signature")}
    order = iter(d2)
    first = next(order)
    if "cont [ 0 ]" in first["label"]:
        fields["version"] = first["hl"] + first["l"]
        first = next(order)
    fields["serial"] = first["hl"] + first["l"]
    for name in ("signature_algo", "issuer", "validity", "subject", "public_key"):
        r = next(order)
        fields[name] += r["hl"] + r["l"]
    for r in order:
        if "cont [ 3 ]" in r["label"]:
            fields["extensions"] = r["hl"] + r["l"]
    fields["signature_algo"] += sig_algo["hl"] + sig_algo["l"]
    fields["signature"] = signature["hl"] + signature["l"]
    outer = rows[0]
    overhead = outer["hl"] + tbs["hl"]
    return fields, overhead


def oracle_san_bytes(der: bytes) -> int:
    rows = asn1parse(der)
    last_d4_seq = None
    for r in rows:
        if r["depth"] == 4 and "SEQUENCE" in r["label"]:
            last_d4_seq = r
        if "X509v3 Subject Alternative Name" in r["label"] and last_d4_seq:
            return last_d4_seq["hl"] + last_d4_seq["l"]
    return 0


# ---------------------------------------------------------------------------
# Parsing and byte accounting
# ---------------------------------------------------------------------------

def test_minimal_self_signed_is_root(fixture_certs):
    rec = parse_certificate(fixture_certs["ec_root"])
    chain = parse_chain(fixture_certs["ec_root"])
    assert chain.certs[0].role is Role.ROOT
    assert rec.self_signed
    assert rec.key_algo is KeyAlgo.ECDSA_256


def test_three_cert_chain_additivity(ec_pki):
    leaf = ec_pki.leaf("additivity.example")
    blob = ec_pki.chain_blob(leaf, include_root=True)
    chain = parse_chain(blob, domain="additivity.example")
    assert len(chain.certs) == 3
    assert chain.total_len == sum(c.der_len for c in chain.certs)
    assert chain.total_len == len(blob)
    assert [c.role for c in chain.certs] == [Role.LEAF, Role.INTERMEDIATE, Role.ROOT]
    assert chain.ordered_correctly


def test_field_sizes_match_external_der_dump(fixture_certs):
    for name, der in fixture_certs.items():
        rec = parse_certificate(der)
        expected_fields, expected_overhead = oracle_field_spans(der)
        assert rec.field_sizes == expected_fields, name
        assert rec.structural_overhead == expected_overhead, name


def test_byte_accounting_exact(fixture_certs):
    for name, der in fixture_certs.items():
        rec = parse_certificate(der)
        assert sum(rec.field_sizes.values()) + rec.structural_overhead == rec.der_len, name
        assert rec.der == der


def test_round_trip_bit_exact(ec_pki, fixture_certs):
    leaf = ec_pki.leaf("roundtrip.example")
    blob = ec_pki.chain_blob(leaf, include_root=True)
    assert parse_chain(blob).serialize() == blob
    for der in fixture_certs.values():
        assert parse_chain(der).serialize() == der


def test_pem_parsing_same_ders(ec_pki):
    leaf = ec_pki.leaf("pem.example")
    pem_blob = pki.pem(leaf) + pki.pem(ec_pki.intermediate)
    der_blob = pki.der(leaf) + pki.der(ec_pki.intermediate)
    assert parse_chain(pem_blob).serialize() == der_blob


def test_key_algos(fixture_certs):
    assert parse_certificate(fixture_certs["rsa_leaf"]).key_algo is KeyAlgo.RSA_2048
    assert parse_certificate(fixture_certs["rsa4096_leaf"]).key_algo is KeyAlgo.RSA_4096
    assert parse_certificate(fixture_certs["p384_leaf"]).key_algo is KeyAlgo.ECDSA_384
    assert parse_certificate(fixture_certs["ec_leaf"]).key_algo is KeyAlgo.ECDSA_256


def test_malformed_der_reports_offset():
    with pytest.raises(DerParseError) as exc:
        parse_certificate(b"\x30\x82\xff\xff" + b"\x00" * 10)
    assert exc.value.offset >= 0
    with pytest.raises(DerParseError):
        split_blob(b"")


def test_ordering_detection(ec_pki):
    leaf = ec_pki.leaf("order.example")
    good = parse_chain(ec_pki.chain_blob(leaf, include_root=True))
    assert good.ordered_correctly
    swapped = pki.der(ec_pki.intermediate) + pki.der(leaf) + pki.der(ec_pki.root)
    assert not parse_chain(swapped).ordered_correctly


_PERM_PKI = pki.MiniPki("perm")
_PERM_DERS = [pki.der(_PERM_PKI.leaf("perm.example")),
              pki.der(_PERM_PKI.intermediate), pki.der(_PERM_PKI.root)]


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(3)))
def test_property_reordering_breaks_chain(perm):
    # Identity permutation keeps the chain ordered; everything else breaks it.
    blob = b"".join(_PERM_DERS[i] for i in perm)
    chain = parse_chain(blob)
    if list(perm) == [0, 1, 2]:
        assert chain.ordered_correctly
    else:
        assert not chain.ordered_correctly


# ---------------------------------------------------------------------------
# Findings
# ---------------------------------------------------------------------------

def test_included_anchor_flagged(ec_pki):
    leaf = ec_pki.leaf("anchor.example")
    chain = parse_chain(ec_pki.chain_blob(leaf, include_root=True))
    findings = detect_included_anchor(chain)
    assert len(findings) == 1
    assert findings[0].cert_index == 2
    assert findings[0].byte_savings == chain.certs[2].der_len


def test_leaf_only_chain_no_anchor_finding(ec_pki):
    chain = parse_chain(pki.der(ec_pki.leaf("solo.example")))
    assert detect_included_anchor(chain) == []


def test_anchor_mid_chain_breaks_ordering(ec_pki):
    leaf = ec_pki.leaf("weird.example")
    blob = (pki.der(leaf) + pki.der(ec_pki.root) + pki.der(ec_pki.intermediate) +
            pki.der(ec_pki.root))
    chain = parse_chain(blob)
    findings = detect_included_anchor(chain)
    assert {f.cert_index for f in findings} == {1, 3}
    assert not chain.ordered_correctly


def test_cross_sign_synthetic(ec_pki):
    # Twin of the root: same subject and key, issued by an unrelated CA.
    other = pki.MiniPki("other")
    cross = pki.build_cert("ec root", "other root", ec_pki.root_key.public_key(),
                           other.root_key)
    leaf = ec_pki.leaf("cross.example")
    inter_signed_by_root = ec_pki.intermediate
    blob = pki.der(leaf) + pki.der(inter_signed_by_root) + pki.der(cross)
    chain = parse_chain(blob)
    store = TrustStore([parse_certificate(pki.der(ec_pki.root))])
    findings = detect_cross_signed(chain, store)
    assert len(findings) == 1
    assert findings[0].cert_index == 2
    assert "cross-signed" in findings[0].recommendation


def test_cross_sign_isrg_scenario():
    # The delivered chain carries a cross-signed twin of a store anchor
    # (same subject + SPKI, different issuer): reconstruct the well-known
    # case from the genuine anchor's public key.
    store = TrustStore.bundled()
    isrg = next(r for r in store.roots.values() if r.subject_cn == "ISRG Root X1")
    from cryptography import x509
    real = x509.load_der_x509_certificate(isrg.der)
    throwaway = pki.ec_key()
    cross = pki.build_cert("unused", "DST Root CA X3", real.public_key(), throwaway)
    # Rebuild with the real subject so subject bytes match the anchor.
    import datetime
    builder = (x509.CertificateBuilder()
               .subject_name(real.subject)
               .issuer_name(x509.Name([x509.NameAttribute(
                   x509.oid.NameOID.COMMON_NAME, "DST Root CA X3")]))
               .public_key(real.public_key())
               .serial_number(x509.random_serial_number())
               .not_valid_before(datetime.datetime(2025, 1, 1))
               .not_valid_after(datetime.datetime(2026, 1, 1)))
    from cryptography.hazmat.primitives import hashes
    cross = builder.sign(throwaway, hashes.SHA256())
    ec = pki.MiniPki("le")
    leaf = ec.leaf("isrg-like.example")
    blob = pki.der(leaf) + pki.der(ec.intermediate) + pki.der(cross)
    findings = detect_cross_signed(parse_chain(blob), store)
    assert len(findings) == 1
    assert findings[0].subject_cn == "ISRG Root X1"


def test_cross_sign_no_store_overlap(ec_pki):
    leaf = ec_pki.leaf("clean.example")
    chain = parse_chain(ec_pki.chain_blob(leaf))
    unrelated = pki.MiniPki("unrelated")
    store = TrustStore([parse_certificate(pki.der(unrelated.root))])
    assert detect_cross_signed(chain, store) == []


def test_trust_store_rejects_non_roots(ec_pki):
    inter = parse_certificate(pki.der(ec_pki.intermediate))
    with pytest.raises(ValueError):
        TrustStore([inter])


# ---------------------------------------------------------------------------
# Grouping, fit, scores, stats
# ---------------------------------------------------------------------------

def test_parent_chain_single_group(ec_pki):
    chains = [parse_chain(ec_pki.chain_blob(ec_pki.leaf(f"d{i}.example")),
                          domain=f"d{i}.example") for i in range(5)]
    groups = parent_chain_group(chains)
    assert len(groups) == 1
    assert groups[0].coverage == 1.0
    assert groups[0].service_count == 5


def test_parent_chain_three_groups():
    pkis = [pki.MiniPki(f"g{i}") for i in range(3)]
    chains = []
    for count, p in zip((5, 3, 2), pkis):
        for i in range(count):
            chains.append(parse_chain(p.chain_blob(p.leaf(f"x{i}.{p.tag}.example")),
                                      domain=f"x{i}.{p.tag}.example"))
    groups = parent_chain_group(chains)
    assert [g.service_count for g in groups] == [5, 3, 2]
    assert sum(g.coverage for g in groups) == pytest.approx(1.0)
    assert groups[0].median_leaf > 0
    assert groups[0].max_leaf >= groups[0].median_leaf


def test_parent_chain_excludes_unordered(ec_pki):
    leaf = ec_pki.leaf("mixed.example")
    ordered = parse_chain(ec_pki.chain_blob(leaf))
    shuffled = parse_chain(pki.der(ec_pki.intermediate) + pki.der(leaf))
    groups = parent_chain_group([ordered, shuffled])
    assert sum(g.service_count for g in groups) == 1


def _sized_chain(total_len: int) -> ChainRecord:
    cert = CertRecord(
        der=b"\x30" * total_len, der_len=total_len, role=Role.LEAF,
        field_sizes={n: 0 for n in ("version", "serial", "signature_algo", "issuer",
                                    "validity", "subject", "public_key", "extensions",
                                    "signature")},
        structural_overhead=total_len, key_algo=KeyAlgo.OTHER,
        subject_der=b"s", issuer_der=b"i", subject_cn="sized", issuer_cn="sized",
        spki_digest="0" * 64, self_signed=False, san_bytes=0)
    return ChainRecord(certs=(cert,), total_len=total_len, ordered_correctly=True,
                       parent_chain_id="0" * 64)


def test_limit_fit_boundaries():
    assert limit_fit(_sized_chain(4022), 1357).fits          # 4022 <= 4071
    assert not limit_fit(_sized_chain(4022), 1340).fits      # 4022 > 4020
    assert limit_fit(_sized_chain(2329), 1200).fits          # 2329 <= 3600
    assert not limit_fit(_sized_chain(3601), 1200).fits
    assert limit_fit(_sized_chain(3600), 1200).fits          # equality fits
    with pytest.raises(ValueError):
        limit_fit(_sized_chain(100), 1100)


@given(st.integers(1200, 4000), st.integers(200, 20000))
def test_property_limit_fit_monotone(initial, size):
    fit_small = limit_fit(_sized_chain(size), initial)
    fit_bigger_initial = limit_fit(_sized_chain(size), initial + 100)
    if fit_small.fits:
        assert fit_bigger_initial.fits
    fit_bigger_chain = limit_fit(_sized_chain(size + 300), initial)
    if not fit_small.fits:
        assert not fit_bigger_chain.fits


def _san_chain(san_bytes: int, der_len: int) -> ChainRecord:
    cert = CertRecord(
        der=b"\x30" * der_len, der_len=der_len, role=Role.LEAF,
        field_sizes={n: 0 for n in ("version", "serial", "signature_algo", "issuer",
                                    "validity", "subject", "public_key", "extensions",
                                    "signature")},
        structural_overhead=der_len, key_algo=KeyAlgo.OTHER,
        subject_der=b"s", issuer_der=b"i", subject_cn="san", issuer_cn="san",
        spki_digest="0" * 64, self_signed=False, san_bytes=san_bytes)
    return ChainRecord(certs=(cert,), total_len=der_len, ordered_correctly=True,
                       parent_chain_id="0" * 64)


def test_cruise_liner_score():
    small = cruise_liner_score(_san_chain(20, 1000))
    assert small.san_share == pytest.approx(0.02)
    assert not small.flagged
    at_threshold = cruise_liner_score(_san_chain(289, 1000))
    assert at_threshold.flagged
    below = cruise_liner_score(_san_chain(288, 1000))
    assert not below.flagged
    assert CRUISE_LINER_SAN_SHARE == 0.289


def test_cruise_liner_on_generated_200_san_cert(fixture_certs):
    rec = parse_certificate(fixture_certs["san_leaf"])
    assert rec.san_bytes == oracle_san_bytes(fixture_certs["san_leaf"])
    chain = parse_chain(fixture_certs["san_leaf"])
    score = cruise_liner_score(chain)
    assert score.san_share == rec.san_bytes / rec.der_len
    assert score.flagged  # 200 SANs dominate a small EC cert


def test_key_algo_stats_uniform(ec_pki):
    chains = [parse_chain(ec_pki.chain_blob(ec_pki.leaf(f"k{i}.example")))
              for i in range(4)]
    stats = key_algo_stats(chains)
    assert stats[("leaf", "ECDSA-256")] == 1.0
    assert stats[("non-leaf", "ECDSA-256")] == 1.0


def test_key_algo_stats_mixed(ec_pki, rsa_pki):
    chains = []
    for i in range(3):
        chains.append(parse_chain(ec_pki.chain_blob(ec_pki.leaf(f"m{i}.example"))))
    chains.append(parse_chain(rsa_pki.chain_blob(
        rsa_pki.leaf("m-rsa.example", key_factory=lambda: pki.rsa_key(2048)))))
    stats = key_algo_stats(chains)
    assert stats[("leaf", "ECDSA-256")] == pytest.approx(0.75)
    assert stats[("leaf", "RSA-2048")] == pytest.approx(0.25)


def test_field_anatomy_single_cert(fixture_certs):
    chain = parse_chain(fixture_certs["ec_leaf"])
    rows = field_anatomy([chain])
    by_field = {(r.role_class, r.field): r for r in rows}
    rec = chain.certs[0]
    for fname, size in rec.field_sizes.items():
        row = by_field[("leaf", fname)]
        assert row.mean == size and row.median == size


def test_field_anatomy_exact_means(ec_pki):
    a = parse_chain(ec_pki.chain_blob(ec_pki.leaf("fa1.example", filler=100)))
    b = parse_chain(ec_pki.chain_blob(ec_pki.leaf("fa2.example", filler=300)))
    rows = field_anatomy([a, b])
    ext = next(r for r in rows if r.role_class == "leaf" and r.field == "extensions")
    expected = (a.certs[0].field_sizes["extensions"] +
                b.certs[0].field_sizes["extensions"]) / 2
    assert ext.mean == expected


def test_csv_outputs(tmp_path, ec_pki):
    chain = parse_chain(ec_pki.chain_blob(ec_pki.leaf("csv.example")),
                        domain="csv.example")
    certs_csv = tmp_path / "certs.csv"
    chains_csv = tmp_path / "chains.csv"
    write_cert_csv([chain], certs_csv)
    write_chain_csv([chain], chains_csv)
    lines = certs_csv.read_text().strip().splitlines()
    assert len(lines) == 3  # header + 2 certs
    assert lines[1].startswith("certs.v1,csv.example,0,LEAF")
    chain_lines = chains_csv.read_text().strip().splitlines()
    assert chain_lines[1].startswith("chains.v1,csv.example,FILE,2")
    assert chain_to_pem(chain).count(b"BEGIN CERTIFICATE") == 2
