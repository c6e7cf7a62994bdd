"""Exact lossless entropy coder over integer symbols with 16-bit CDF tables.

The core is a binary arithmetic coder with a 46-bit state (products of a
16-bit total and the range fit a uint64) and underflow-bit renormalization,
jitted with numba so desk-scale payload accounting stays fast. Payload
layout: [symbol_count: u32 LE][coded bytes][CRC32 of coded bytes: u32 LE].
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit, uint64

PRECISION = 16
TOTAL = 1 << PRECISION

_STATE = 46
_MASK = (1 << _STATE) - 1
_TOP = 1 << (_STATE - 1)
_SECOND = 1 << (_STATE - 2)
CONTAINER_OVERHEAD = 8  # count u32 + crc u32


class CoderError(ValueError):
    pass


class CapacityError(CoderError):
    pass


class SymbolDomainError(CoderError):
    pass


class CorruptStreamError(CoderError):
    pass


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts over a contiguous integer alphabet.

    cum has length S+1 with cum[0] == 0, cum[S] == 2^16, strictly increasing;
    offset is the integer symbol mapped to index 0.
    """

    cum: np.ndarray
    offset: int

    @property
    def n_symbols(self) -> int:
        return len(self.cum) - 1

    def validate(self) -> None:
        if self.cum[0] != 0 or self.cum[-1] != TOTAL:
            raise CoderError("cdf must span exactly [0, 2^16]")
        if np.any(np.diff(self.cum.astype(np.int64)) < 1):
            raise CoderError("cdf counts must be strictly increasing (every symbol >= 1)")


@dataclass(frozen=True)
class Bitstream:
    payload: bytes  # full container: count + coded + crc
    symbol_count: int
    bit_length: int  # bits of the coded stream proper

    @property
    def coded_bytes(self) -> int:
        return len(self.payload) - CONTAINER_OVERHEAD


def build_cdf_table(masses: np.ndarray, offset: int) -> CdfTable:
    """Quantize a probability vector to integer counts summing to 2^16.

    Largest-remainder rounding keeps every bin within one count of its ideal
    share; zero bins are raised to one count, paid for by the largest bins.
    """
    p = np.asarray(masses, dtype=np.float64)
    if p.ndim != 1 or len(p) < 1:
        raise CoderError("masses must be a non-empty vector")
    if len(p) > TOTAL:
        raise CapacityError(f"alphabet of {len(p)} symbols exceeds 2^{PRECISION}")
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise CoderError("masses must be finite and positive")
    ideal = p / p.sum() * TOTAL
    counts = np.floor(ideal).astype(np.int64)
    rem = ideal - counts
    short = TOTAL - int(counts.sum())
    if short > 0:
        counts[np.argsort(-rem, kind="stable")[:short]] += 1
    # codability repair: every symbol needs >= 1 count
    need = int(np.sum(counts == 0))
    counts[counts == 0] = 1
    while need > 0:
        donor = int(np.argmax(counts))
        take = min(counts[donor] - 1, need)
        if take <= 0:
            raise CapacityError("cannot repair table: alphabet too large for precision")
        counts[donor] -= take
        need -= take
    cum = np.zeros(len(p) + 1, dtype=np.uint32)
    np.cumsum(counts, out=cum[1:])
    table = CdfTable(cum=cum, offset=int(offset))
    table.validate()
    return table


# ---------------------------------------------------------------------------
# jitted kernels


@njit(cache=True)
def _ac_encode(idx, tidx, cdfs, out):  # pragma: no cover - exercised via encode()
    low = uint64(0)
    high = uint64(_MASK)
    underflow = 0
    nbits = 0
    for n in range(idx.shape[0]):
        t = tidx[n]
        s = idx[n]
        rng = high - low + uint64(1)
        symlow = uint64(cdfs[t, s])
        symhigh = uint64(cdfs[t, s + 1])
        high = low + symhigh * rng // uint64(TOTAL) - uint64(1)
        low = low + symlow * rng // uint64(TOTAL)
        while ((low ^ high) & uint64(_TOP)) == uint64(0):
            bit = (low >> uint64(_STATE - 1)) & uint64(1)
            out[nbits >> 3] |= np.uint8(bit << uint64(7 - (nbits & 7)))
            nbits += 1
            inv = uint64(1) - bit
            for _ in range(underflow):
                out[nbits >> 3] |= np.uint8(inv << uint64(7 - (nbits & 7)))
                nbits += 1
            underflow = 0
            low = (low << uint64(1)) & uint64(_MASK)
            high = ((high << uint64(1)) & uint64(_MASK)) | uint64(1)
        while (low & ~high & uint64(_SECOND)) != uint64(0):
            underflow += 1
            low = (low << uint64(1)) & uint64(_MASK >> 1)
            high = ((high << uint64(1)) & uint64(_MASK >> 1)) | uint64(_TOP) | uint64(1)
    # termination: one disambiguating bit, flushing pending underflow
    out[nbits >> 3] |= np.uint8(1 << (7 - (nbits & 7)))
    nbits += 1
    for _ in range(underflow):
        nbits += 1  # zeros; buffer already zeroed
    return nbits


@njit(cache=True)
def _ac_decode(n_symbols, tidx, cdfs, sizes, data, nbits, out):  # pragma: no cover
    low = uint64(0)
    high = uint64(_MASK)
    code = uint64(0)
    pos = 0
    for _ in range(_STATE):
        bit = uint64(0)
        if pos < nbits:
            bit = uint64((data[pos >> 3] >> (7 - (pos & 7))) & 1)
        pos += 1
        code = (code << uint64(1)) | bit
    for n in range(n_symbols):
        t = tidx[n]
        rng = high - low + uint64(1)
        offset = code - low
        value = ((offset + uint64(1)) * uint64(TOTAL) - uint64(1)) // rng
        lo = 0
        hi = sizes[t]
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if uint64(cdfs[t, mid]) <= value:
                lo = mid
            else:
                hi = mid
        out[n] = lo
        symlow = uint64(cdfs[t, lo])
        symhigh = uint64(cdfs[t, lo + 1])
        high = low + symhigh * rng // uint64(TOTAL) - uint64(1)
        low = low + symlow * rng // uint64(TOTAL)
        while ((low ^ high) & uint64(_TOP)) == uint64(0):
            bit = uint64(0)
            if pos < nbits:
                bit = uint64((data[pos >> 3] >> (7 - (pos & 7))) & 1)
            pos += 1
            code = ((code << uint64(1)) & uint64(_MASK)) | bit
            low = (low << uint64(1)) & uint64(_MASK)
            high = ((high << uint64(1)) & uint64(_MASK)) | uint64(1)
        while (low & ~high & uint64(_SECOND)) != uint64(0):
            bit = uint64(0)
            if pos < nbits:
                bit = uint64((data[pos >> 3] >> (7 - (pos & 7))) & 1)
            pos += 1
            code = (code & uint64(_TOP)) | ((code << uint64(1)) & uint64(_MASK >> 1)) | bit
            low = (low << uint64(1)) & uint64(_MASK >> 1)
            high = ((high << uint64(1)) & uint64(_MASK >> 1)) | uint64(_TOP) | uint64(1)
    return 0


# ---------------------------------------------------------------------------
# public API


def _pack_tables(tables: Sequence[CdfTable], n: int):
    """Stack table CDFs into one padded matrix plus a per-symbol table index."""
    if len(tables) == 1:
        tidx = np.zeros(n, dtype=np.int64)
        uniq = list(tables)
    elif len(tables) == n:
        uniq = []
        ids: dict[int, int] = {}
        tidx = np.empty(n, dtype=np.int64)
        for i, t in enumerate(tables):
            key = id(t)
            if key not in ids:
                ids[key] = len(uniq)
                uniq.append(t)
            tidx[i] = ids[key]
    else:
        raise CoderError(f"need 1 or {n} tables, got {len(tables)}")
    smax = max(t.n_symbols for t in uniq) if uniq else 1
    cdfs = np.full((len(uniq), smax + 1), TOTAL, dtype=np.uint32)
    sizes = np.empty(len(uniq), dtype=np.int64)
    offsets = np.empty(len(uniq), dtype=np.int64)
    for j, t in enumerate(uniq):
        cdfs[j, : t.n_symbols + 1] = t.cum
        sizes[j] = t.n_symbols
        offsets[j] = t.offset
    return cdfs, sizes, offsets, tidx


def encode(symbols, tables: CdfTable | Sequence[CdfTable]) -> Bitstream:
    """Entropy-code integer symbols; `tables` is one table or one per element."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if isinstance(tables, CdfTable):
        tables = [tables]
    n = len(symbols)
    cdfs, sizes, offsets, tidx = _pack_tables(tables, n)
    idx = symbols - offsets[tidx]
    bad = np.nonzero((idx < 0) | (idx >= sizes[tidx]))[0]
    if len(bad):
        i = int(bad[0])
        raise SymbolDomainError(
            f"symbol {symbols[i]} at position {i} outside table alphabet "
            f"[{offsets[tidx[i]]}, {offsets[tidx[i]] + sizes[tidx[i]] - 1}]")
    buf = np.zeros(4 * n + 64, dtype=np.uint8)
    nbits = int(_ac_encode(idx, tidx, cdfs, buf))
    coded = buf[: (nbits + 7) // 8].tobytes()
    payload = struct.pack("<I", n) + coded + struct.pack("<I", zlib.crc32(coded))
    return Bitstream(payload=payload, symbol_count=n, bit_length=nbits)


def decode(payload: bytes, tables: CdfTable | Sequence[CdfTable], n: int) -> np.ndarray:
    """Exact inverse of encode; raises CorruptStreamError on damaged payloads."""
    if isinstance(tables, CdfTable):
        tables = [tables]
    if len(payload) < CONTAINER_OVERHEAD:
        raise CorruptStreamError("payload shorter than container framing")
    (count,) = struct.unpack_from("<I", payload, 0)
    coded = payload[4:-4]
    (crc,) = struct.unpack_from("<I", payload, len(payload) - 4)
    if zlib.crc32(coded) != crc:
        raise CorruptStreamError("payload CRC mismatch")
    if count != n:
        raise CorruptStreamError(f"payload declares {count} symbols, caller expects {n}")
    cdfs, sizes, offsets, tidx = _pack_tables(tables, n)
    data = np.frombuffer(coded, dtype=np.uint8)
    out = np.empty(n, dtype=np.int64)
    _ac_decode(n, tidx, cdfs, sizes, data, 8 * len(coded), out)
    return out + offsets[tidx]


def ideal_bits(symbols, tables: CdfTable | Sequence[CdfTable]) -> float:
    """Information content of the sequence under the quantized table counts."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if isinstance(tables, CdfTable):
        tables = [tables]
    n = len(symbols)
    cdfs, sizes, offsets, tidx = _pack_tables(tables, n)
    idx = symbols - offsets[tidx]
    counts = cdfs[tidx, idx + 1].astype(np.float64) - cdfs[tidx, idx]
    return float(-np.log2(counts / TOTAL).sum())
