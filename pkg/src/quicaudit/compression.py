"""Certificate-chain compression under anti-amplification budgets.

Implements the three compression algorithms negotiated for TLS
certificate payloads (zlib, brotli, zstd) over the concatenated chain
bytes, exactly as a CompressedCertificate payload would carry them.
zlib comes from the standard library; brotli and zstd bind the system
codec libraries directly (no Python packages required).

Chains are compressed once and cacheable server-side, so the default
levels are the strongest standard settings per algorithm. "Ratio" is
the size reduction 1 - compressed/original; the remaining fraction
compressed/original is exposed alongside it since both conventions are
in circulation.
"""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import zlib
from dataclasses import dataclass
from enum import Enum
from statistics import mean, median
from typing import Iterable, Optional

from .certs import ChainRecord
from .errors import UnsupportedAlgorithmError

COMPRESSION_SCHEMA = "compression.v1"

# Non-certificate handshake bytes (ServerHello, EncryptedExtensions,
# Finished, headers) that share the pre-validation budget with the
# chain. Surfaced as an explicit default for CLI reports; the analysis
# functions take overhead as a parameter.
DEFAULT_HANDSHAKE_OVERHEAD = 1100

DEFAULT_BUDGETS = (1200, 1357)


class Algorithm(str, Enum):
    ZLIB = "zlib"
    BROTLI = "brotli"
    ZSTD = "zstd"


DEFAULT_LEVELS = {Algorithm.ZLIB: 9, Algorithm.BROTLI: 11, Algorithm.ZSTD: 22}

_BROTLI_MODE_GENERIC = 0
_BROTLI_LGWIN = 22


def _load_lib(*names: str):
    for name in names:
        try:
            return ctypes.CDLL(name)
        except OSError:
            continue
    return None


class _Zstd:
    def __init__(self):
        found = ctypes.util.find_library("zstd")
        self.lib = _load_lib(*( [found] if found else [] ), "libzstd.so.1", "libzstd.so")
        if self.lib is None:
            return
        lib = self.lib
        lib.ZSTD_compressBound.restype = ctypes.c_size_t
        lib.ZSTD_compressBound.argtypes = [ctypes.c_size_t]
        lib.ZSTD_compress.restype = ctypes.c_size_t
        lib.ZSTD_compress.argtypes = [ctypes.c_void_p, ctypes.c_size_t,
                                      ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
        lib.ZSTD_decompress.restype = ctypes.c_size_t
        lib.ZSTD_decompress.argtypes = [ctypes.c_void_p, ctypes.c_size_t,
                                        ctypes.c_void_p, ctypes.c_size_t]
        lib.ZSTD_isError.restype = ctypes.c_uint
        lib.ZSTD_isError.argtypes = [ctypes.c_size_t]
        lib.ZSTD_getFrameContentSize.restype = ctypes.c_ulonglong
        lib.ZSTD_getFrameContentSize.argtypes = [ctypes.c_void_p, ctypes.c_size_t]

    def compress(self, data: bytes, level: int) -> bytes:
        bound = self.lib.ZSTD_compressBound(len(data))
        buf = ctypes.create_string_buffer(bound)
        n = self.lib.ZSTD_compress(buf, bound, data, len(data), level)
        if self.lib.ZSTD_isError(n):
            raise UnsupportedAlgorithmError("zstd compression failed")
        return buf.raw[:n]

    def decompress(self, data: bytes) -> bytes:
        size = self.lib.ZSTD_getFrameContentSize(data, len(data))
        if size in (2 ** 64 - 1, 2 ** 64 - 2):  # unknown / error markers
            raise UnsupportedAlgorithmError("zstd frame without content size")
        buf = ctypes.create_string_buffer(size or 1)
        n = self.lib.ZSTD_decompress(buf, size, data, len(data))
        if self.lib.ZSTD_isError(n):
            raise UnsupportedAlgorithmError("zstd decompression failed")
        return buf.raw[:n]


class _Brotli:
    def __init__(self):
        self.enc = _load_lib("libbrotlienc.so.1", "libbrotlienc.so")
        self.dec = _load_lib("libbrotlidec.so.1", "libbrotlidec.so")
        if self.enc is None or self.dec is None:
            self.enc = self.dec = None
            return
        self.enc.BrotliEncoderCompress.restype = ctypes.c_int
        self.enc.BrotliEncoderCompress.argtypes = [
            ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_size_t,
            ctypes.c_void_p, ctypes.POINTER(ctypes.c_size_t), ctypes.c_void_p]
        self.enc.BrotliEncoderMaxCompressedSize.restype = ctypes.c_size_t
        self.enc.BrotliEncoderMaxCompressedSize.argtypes = [ctypes.c_size_t]
        self.dec.BrotliDecoderDecompress.restype = ctypes.c_int
        self.dec.BrotliDecoderDecompress.argtypes = [
            ctypes.c_size_t, ctypes.c_void_p, ctypes.POINTER(ctypes.c_size_t),
            ctypes.c_void_p]

    def compress(self, data: bytes, level: int) -> bytes:
        bound = self.enc.BrotliEncoderMaxCompressedSize(len(data)) or len(data) + 1024
        out_len = ctypes.c_size_t(bound)
        buf = ctypes.create_string_buffer(bound)
        ok = self.enc.BrotliEncoderCompress(level, _BROTLI_LGWIN, _BROTLI_MODE_GENERIC,
                                            len(data), data, ctypes.byref(out_len), buf)
        if ok != 1:
            raise UnsupportedAlgorithmError("brotli compression failed")
        return buf.raw[:out_len.value]

    def decompress(self, data: bytes) -> bytes:
        # One-shot decode with a growing buffer; chains are small.
        size = max(4 * len(data), 1024)
        for _ in range(10):
            out_len = ctypes.c_size_t(size)
            buf = ctypes.create_string_buffer(size)
            ok = self.dec.BrotliDecoderDecompress(len(data), data,
                                                  ctypes.byref(out_len), buf)
            if ok == 1:
                return buf.raw[:out_len.value]
            size *= 4
        raise UnsupportedAlgorithmError("brotli decompression failed")


_zstd = _Zstd()
_brotli = _Brotli()


def available_algorithms() -> list[Algorithm]:
    out = [Algorithm.ZLIB]
    if _brotli.enc is not None:
        out.append(Algorithm.BROTLI)
    if _zstd.lib is not None:
        out.append(Algorithm.ZSTD)
    return out


def compress_bytes(data: bytes, algorithm: Algorithm, level: Optional[int] = None) -> bytes:
    level = DEFAULT_LEVELS[algorithm] if level is None else level
    if algorithm is Algorithm.ZLIB:
        return zlib.compress(data, level)
    if algorithm is Algorithm.BROTLI:
        if _brotli.enc is None:
            raise UnsupportedAlgorithmError("brotli codec library not available")
        return _brotli.compress(data, level)
    if algorithm is Algorithm.ZSTD:
        if _zstd.lib is None:
            raise UnsupportedAlgorithmError("zstd codec library not available")
        return _zstd.compress(data, level)
    raise UnsupportedAlgorithmError(f"unknown algorithm {algorithm!r}")


def decompress_bytes(data: bytes, algorithm: Algorithm) -> bytes:
    if algorithm is Algorithm.ZLIB:
        return zlib.decompress(data)
    if algorithm is Algorithm.BROTLI:
        if _brotli.dec is None:
            raise UnsupportedAlgorithmError("brotli codec library not available")
        return _brotli.decompress(data)
    if algorithm is Algorithm.ZSTD:
        if _zstd.lib is None:
            raise UnsupportedAlgorithmError("zstd codec library not available")
        return _zstd.decompress(data)
    raise UnsupportedAlgorithmError(f"unknown algorithm {algorithm!r}")


@dataclass(frozen=True)
class CompressionOutcome:
    algorithm: Algorithm
    original_len: int
    compressed_len: int
    ratio: float                 # size reduction: 1 - compressed/original
    fits_under: dict             # initial_size -> compressed + overhead <= 3x size
    payload: bytes = b""

    @property
    def remaining_fraction(self) -> float:
        return self.compressed_len / self.original_len if self.original_len else 0.0


def compress_chain(chain: ChainRecord, algorithm: Algorithm,
                   level: Optional[int] = None,
                   budgets: tuple[int, ...] = DEFAULT_BUDGETS,
                   overhead: int = 0) -> CompressionOutcome:
    """Compress the concatenated chain bytes; deterministic for fixed
    (input, algorithm, level). Expansion on incompressible input is
    recorded as a negative ratio, never clamped."""
    data = chain.serialize()
    payload = compress_bytes(data, algorithm, level)
    return CompressionOutcome(
        algorithm=algorithm,
        original_len=len(data),
        compressed_len=len(payload),
        ratio=1 - len(payload) / len(data) if data else 0.0,
        fits_under={b: len(payload) + overhead <= 3 * b for b in budgets},
        payload=payload,
    )


def decompress_outcome(outcome: CompressionOutcome) -> bytes:
    return decompress_bytes(outcome.payload, outcome.algorithm)


@dataclass(frozen=True)
class AlgorithmReport:
    algorithm: Algorithm
    count: int
    ratio_min: float
    ratio_median: float
    ratio_mean: float
    ratio_max: float
    fit_fractions: dict  # budget -> fraction of chains fitting


def compression_report(chains: Iterable[ChainRecord],
                       budgets: tuple[int, ...] = DEFAULT_BUDGETS,
                       overhead: int = 0,
                       algorithms: Optional[Iterable[Algorithm]] = None,
                       levels: Optional[dict] = None,
                       ) -> tuple[list[AlgorithmReport], list[tuple[ChainRecord, CompressionOutcome]]]:
    """Corpus-level view: ratio distribution and budget-fit fraction per
    algorithm. Returns (summaries, per-chain outcomes)."""
    chains = list(chains)
    if not chains:
        raise ValueError("compression_report requires a non-empty corpus")
    algorithms = list(algorithms) if algorithms else list(Algorithm)
    levels = levels or {}
    summaries = []
    outcomes: list[tuple[ChainRecord, CompressionOutcome]] = []
    for algo in algorithms:
        per_algo = [
            (c, compress_chain(c, algo, levels.get(algo), budgets, overhead))
            for c in chains
        ]
        outcomes.extend(per_algo)
        ratios = [o.ratio for _, o in per_algo]
        summaries.append(AlgorithmReport(
            algorithm=algo,
            count=len(per_algo),
            ratio_min=min(ratios),
            ratio_median=median(ratios),
            ratio_mean=mean(ratios),
            ratio_max=max(ratios),
            fit_fractions={
                b: sum(o.fits_under[b] for _, o in per_algo) / len(per_algo)
                for b in budgets
            },
        ))
    return summaries, outcomes


def write_compression_csv(outcomes: Iterable[tuple[ChainRecord, CompressionOutcome]],
                          path, budgets: tuple[int, ...] = DEFAULT_BUDGETS) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema", "domain", "algorithm", "original_len", "compressed_len",
                    "ratio", *(f"fits_3x{b}" for b in budgets)])
        for chain, o in outcomes:
            w.writerow([COMPRESSION_SCHEMA, chain.domain or "", o.algorithm.value,
                        o.original_len, o.compressed_len, f"{o.ratio:.6f}",
                        *(str(o.fits_under[b]).lower() for b in budgets)])
