"""Physical address -> DRAM (channel, dimm, rank, bank, row) mapping and an
open-row buffer model.

Default mapping for the testbed geometry (2 channels, 1 DIMM, 2 ranks,
16 banks, 8KB rows)::

    bits  0-5   column (byte within line)
    bit   6     channel
    bits  7-13  column
    bits 14-17  bank, with bank bit 0 XOR address bit 7
    bit   18    rank
    bits 19+    row

Row bits are the most significant bits, so the row is ``pa >> 19``.  The
bit-7 term splits each 4KB page across four (channel, bank) cells, 1KB of
the page per DRAM row.  "linear" keeps the same row bits but places channel,
rank and bank above a contiguous 8KB column, so a page sits in one row.
"""
from __future__ import annotations

from typing import NamedTuple

from .config import DramConfig


class DramRangeError(ValueError):
    pass


class RowPairNotFound(LookupError):
    pass


class DramAddress(NamedTuple):
    channel: int
    dimm: int
    rank: int
    bank: int
    row: int


def _log2(v: int) -> int:
    return v.bit_length() - 1


def row_shift(geometry: DramConfig = DramConfig()) -> int:
    return _log2(geometry.row_size) + _log2(geometry.total_banks)


def dram_map(pa, geometry: DramConfig = DramConfig()) -> DramAddress:
    """Map a physical address (int or numpy integer array) to DRAM coordinates."""
    if isinstance(pa, int) and not 0 <= pa < geometry.capacity:
        raise DramRangeError(f"physical address {pa:#x} outside DRAM [0, {geometry.capacity:#x})")
    cbits = _log2(geometry.channels)
    dbits = _log2(geometry.dimms)
    rbits = _log2(geometry.ranks)
    bbits = _log2(geometry.banks)
    colbits = _log2(geometry.row_size)
    shift_row = colbits + cbits + dbits + rbits + bbits
    row = pa >> shift_row
    if geometry.mapping == "linear":
        s = colbits
        channel = (pa >> s) & (geometry.channels - 1)
        s += cbits
        dimm = (pa >> s) & (geometry.dimms - 1)
        s += dbits
        rank = (pa >> s) & (geometry.ranks - 1)
        s += rbits
        bank = (pa >> s) & (geometry.banks - 1)
        return DramAddress(channel, dimm, rank, bank, row)
    channel = (pa >> 6) & (geometry.channels - 1)
    s = colbits + cbits  # bank field follows the column bits above the channel
    bank = (pa >> s) & (geometry.banks - 1)
    if geometry.banks > 1:
        bank = bank ^ ((pa >> (6 + cbits)) & 1)
    s += bbits
    rank = (pa >> s) & (geometry.ranks - 1)
    s += rbits
    dimm = (pa >> s) & (geometry.dimms - 1)
    return DramAddress(channel, dimm, rank, bank, row)


def bank_id(addr: DramAddress, geometry: DramConfig = DramConfig()):
    return ((addr.channel * geometry.dimms + addr.dimm) * geometry.ranks + addr.rank) \
        * geometry.banks + addr.bank


def prm_row_range(prm_base: int, prm_size: int, geometry: DramConfig = DramConfig()) -> tuple[int, int]:
    """First and last DRAM row touched by the reserved range."""
    if prm_size <= 0:
        raise ValueError("PRM size must be positive")
    s = row_shift(geometry)
    return prm_base >> s, (prm_base + prm_size - 1) >> s


class DramState:
    """Per-bank open-row buffers."""

    def __init__(self, geometry: DramConfig = DramConfig()):
        self.geometry = geometry
        self.open_rows: dict[int, int] = {}
        self.hits = 0
        self.conflicts = 0

    def locate(self, pa: int) -> tuple[int, int]:
        a = dram_map(pa, self.geometry)
        return bank_id(a, self.geometry), a.row

    def access(self, pa: int, rng=None, sigma: float = 0.0) -> tuple[str, int]:
        """Returns ("hit" | "conflict", latency) and leaves pa's row open."""
        bank, row = self.locate(pa)
        g = self.geometry
        if self.open_rows.get(bank) == row:
            outcome, base = "hit", g.latency_hit
            self.hits += 1
        else:
            outcome, base = "conflict", g.latency_conflict
            self.open_rows[bank] = row
            self.conflicts += 1
        if rng is not None and sigma > 0:
            base = max(1, int(round(base + rng.gauss(0.0, sigma))))
        return outcome, base

    def open_row(self, pa: int) -> None:
        """Open pa's row without a timed access (background traffic)."""
        bank, row = self.locate(pa)
        self.open_rows[bank] = row

    def is_open(self, pa: int) -> bool:
        bank, row = self.locate(pa)
        return self.open_rows.get(bank) == row


def find_row_pair(target_pa: int, attacker_pages, geometry: DramConfig = DramConfig(),
                  page_size: int = 4096, line_size: int = 64) -> tuple[int, int]:
    """Pick attacker addresses ``p`` (same bank and row as the target, other
    64B chunk) and ``p_prime`` (same bank, different row).

    ``attacker_pages`` are physical page base addresses owned by the attacker.
    """
    tgt = dram_map(target_pa, geometry)
    tgt_bank = bank_id(tgt, geometry)
    tgt_chunk = target_pa // line_size
    p = p_prime = None
    for base in attacker_pages:
        for pa in range(base, base + page_size, line_size):
            a = dram_map(pa, geometry)
            if bank_id(a, geometry) != tgt_bank:
                continue
            if a.row == tgt.row:
                if p is None and pa // line_size != tgt_chunk:
                    p = pa
            elif p_prime is None:
                p_prime = pa
            if p is not None and p_prime is not None:
                return p, p_prime
    missing = [n for n, v in (("same-row", p), ("other-row", p_prime)) if v is None]
    raise RowPairNotFound(f"no {' or '.join(missing)} address in bank of {target_pa:#x}")
