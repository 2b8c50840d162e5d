import random
import subprocess
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric import ec

from quicaudit.certs import ChainRecord, parse_chain

from . import pki

TOOLS_DIR = Path(__file__).parent / "tools"

CODEC_LIBS = [
    "/usr/lib/x86_64-linux-gnu/libzstd.so.1",
    "/usr/lib/x86_64-linux-gnu/libbrotlienc.so.1",
]


@pytest.fixture(scope="session")
def minicomp(tmp_path_factory) -> Path:
    """Compile the independent command-line compressor oracle."""
    out = tmp_path_factory.mktemp("tools") / "minicomp"
    cmd = ["gcc", "-O2", str(TOOLS_DIR / "minicomp.c"), "-o", str(out), *CODEC_LIBS, "-lz"]
    subprocess.run(cmd, check=True, capture_output=True)
    return out


@pytest.fixture(scope="session")
def ec_pki() -> pki.MiniPki:
    return pki.MiniPki("ec")


@pytest.fixture(scope="session")
def rsa_pki() -> pki.MiniPki:
    return pki.MiniPki("rsa", key_factory=lambda: pki.rsa_key(2048))


@pytest.fixture(scope="session")
def fixture_certs(ec_pki, rsa_pki) -> dict:
    """A spread of single certificates covering key algos and shapes."""
    certs = {
        "ec_root": ec_pki.root,
        "ec_intermediate": ec_pki.intermediate,
        "ec_leaf": ec_pki.leaf("plain.example"),
        "rsa_root": rsa_pki.root,
        "rsa_leaf": rsa_pki.leaf("rsa.example", key_factory=lambda: pki.rsa_key(2048)),
        "rsa4096_leaf": rsa_pki.leaf("rsa4096.example",
                                     key_factory=lambda: pki.rsa_key(4096)),
        "p384_leaf": ec_pki.leaf("p384.example",
                                 key_factory=lambda: pki.ec_key(ec.SECP384R1())),
        "san_leaf": ec_pki.leaf("san.example",
                                sans=[f"alt{i}.san.example" for i in range(200)]),
        "filler_leaf": ec_pki.leaf("filler.example", filler=3000),
    }
    return {name: pki.der(cert) for name, cert in certs.items()}


@pytest.fixture(scope="session")
def fixture_chains(ec_pki, rsa_pki) -> list[ChainRecord]:
    """20 parsed chains of varying sizes for compression-oracle checks."""
    chains = []
    for i in range(10):
        leaf = ec_pki.leaf(f"c{i}.ec.example", filler=50 * i)
        chains.append(parse_chain(ec_pki.chain_blob(leaf), domain=f"c{i}.ec.example"))
    for i in range(8):
        leaf = rsa_pki.leaf(f"c{i}.rsa.example", filler=200 * i,
                            key_factory=lambda: pki.rsa_key(2048))
        chains.append(parse_chain(rsa_pki.chain_blob(leaf), domain=f"c{i}.rsa.example"))
    big = ec_pki.leaf("big.example", sans=[f"s{i}.big.example" for i in range(150)])
    chains.append(parse_chain(ec_pki.chain_blob(big, include_root=True),
                              domain="big.example"))
    chains.append(parse_chain(pki.der(ec_pki.root), domain="root-only.example"))
    assert len(chains) == 20
    return chains


@pytest.fixture(scope="session")
def straddling_corpus(ec_pki) -> list[ChainRecord]:
    """200 chains whose compressed sizes straddle the 3x1200 / 3x1357
    budgets (incompressible filler of spread sizes)."""
    rng = random.Random(20220910)
    chains = []
    for i in range(200):
        filler = rng.randrange(100, 6000)
        leaf = ec_pki.leaf(f"s{i}.corpus.example", filler=filler)
        chains.append(parse_chain(ec_pki.chain_blob(leaf),
                                  domain=f"s{i}.corpus.example"))
    return chains
