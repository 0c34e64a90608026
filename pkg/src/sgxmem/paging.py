"""Page tables, translation and asynchronous enclave exits.

A single-level table (virtual page -> PTE) stands in for the 4-level walk;
the walk costs one configured latency.  Accessed and dirty flags are only
ever set by a walk, so any translation served by a TLB leaves them alone.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .config import SimConfig
from .tlb import TlbState


class AccessKind(enum.Enum):
    CODE_FETCH = "fetch"
    DATA_READ = "read"
    DATA_WRITE = "write"

    @property
    def is_code(self) -> bool:
        return self is AccessKind.CODE_FETCH


class PageFault(Exception):
    def __init__(self, vpn: int, reason: str):
        super().__init__(f"page fault on vpn {vpn:#x} ({reason})")
        self.vpn = vpn
        self.reason = reason


class UnmappedPage(KeyError):
    pass


class LayoutError(ValueError):
    pass


class PageTableEntry:
    __slots__ = ("phys_page", "present", "accessed", "dirty", "nx", "reserved_fault", "global_")

    def __init__(self, phys_page: int, nx: bool = False, global_: bool = False):
        self.phys_page = phys_page
        self.present = True
        self.accessed = False
        self.dirty = False
        self.nx = nx
        self.reserved_fault = False
        self.global_ = global_

    def bits(self) -> int:
        """Architectural view: present bit 0, accessed bit 5, dirty bit 6,
        a reserved bit 51 when trapped, NX bit 63, frame in bits 12-50."""
        v = self.phys_page << 12
        v |= int(self.present) | int(self.accessed) << 5 | int(self.dirty) << 6
        v |= int(self.global_) << 8
        v |= int(self.reserved_fault) << 51 | int(self.nx) << 63
        return v

    def __repr__(self):
        flags = "".join(c for c, on in (("P", self.present), ("A", self.accessed), ("D", self.dirty),
                                         ("X", self.nx), ("R", self.reserved_fault)) if on)
        return f"PTE({self.phys_page:#x} {flags})"


class AddressSpace:
    def __init__(self, pcid: int, elrange: tuple[int, int] | None, prm: tuple[int, int],
                 page_size: int = 4096, name: str = ""):
        self.pcid = pcid
        self.elrange = elrange
        self.prm = prm
        self.page_size = page_size
        self.page_shift = page_size.bit_length() - 1
        self.name = name or f"pcid{pcid}"
        self.mapping: dict[int, PageTableEntry] = {}
        self.aex_count = 0

    @property
    def is_enclave(self) -> bool:
        return self.elrange is not None

    def in_elrange(self, vpn: int) -> bool:
        if self.elrange is None:
            return False
        base, length = self.elrange
        va = vpn << self.page_shift
        return base <= va < base + length

    def in_prm(self, ppn: int) -> bool:
        base, length = self.prm
        pa = ppn << self.page_shift
        return base <= pa < base + length

    def map_page(self, vpn: int, ppn: int, nx: bool = False, global_: bool = False) -> PageTableEntry:
        if self.in_elrange(vpn) != self.in_prm(ppn):
            where = "inside" if self.in_elrange(vpn) else "outside"
            raise LayoutError(f"vpn {vpn:#x} ({where} ELRANGE) cannot map frame {ppn:#x}")
        if vpn in self.mapping:
            raise LayoutError(f"vpn {vpn:#x} already mapped")
        pte = self.mapping[vpn] = PageTableEntry(ppn, nx=nx, global_=global_)
        return pte

    def pte(self, vpn: int) -> PageTableEntry:
        try:
            return self.mapping[vpn]
        except KeyError:
            raise UnmappedPage(f"vpn {vpn:#x} not mapped in {self.name}") from None

    def physical(self, va: int) -> int:
        """Translate without side effects (page-table read by the OS)."""
        pte = self.pte(va >> self.page_shift)
        return (pte.phys_page << self.page_shift) | (va & (self.page_size - 1))


@dataclass
class Translation:
    va: int
    pa: int
    tlb_level: str  # "l1", "l2" or "walk"
    latency: int
    accessed_set: bool = False
    dirty_set: bool = False

    @property
    def walked(self) -> bool:
        return self.tlb_level == "walk"


def translate(space: AddressSpace, va: int, kind: AccessKind, tlb: TlbState,
              config: SimConfig) -> Translation:
    """Translate ``va``; raises PageFault when the walk hits a trap."""
    shift = space.page_shift
    vpn = va >> shift
    offset = va & (space.page_size - 1)
    code = kind is AccessKind.CODE_FETCH
    level, ppn = tlb.lookup(vpn, space.pcid, code)
    if level == "l1":
        return Translation(va, (ppn << shift) | offset, "l1", 0)
    if level == "l2":
        return Translation(va, (ppn << shift) | offset, "l2", config.tlb.l2_hit_latency)
    pte = space.pte(vpn)
    if not pte.present:
        raise PageFault(vpn, "not-present")
    if pte.reserved_fault:
        raise PageFault(vpn, "reserved-bit")
    if pte.nx and code:
        raise PageFault(vpn, "nx")
    a_set = not pte.accessed
    pte.accessed = True
    d_set = False
    if kind is AccessKind.DATA_WRITE and not pte.dirty:
        pte.dirty = True
        d_set = True
    tlb.fill(vpn, space.pcid, pte.phys_page, code, pte.global_)
    return Translation(va, (pte.phys_page << shift) | offset, "walk",
                       config.costs.page_walk, a_set, d_set)


def read_and_reset_flags(space: AddressSpace, pages, which: str = "accessed"):
    """Read the accessed/dirty flags of ``pages`` (virtual page numbers) and
    clear the requested ones.  TLB contents are left untouched.

    Returns a list of ``(vpn, accessed_was_set, dirty_was_set)`` in the order
    given.
    """
    if which not in ("accessed", "dirty", "both"):
        raise ValueError(f"unknown flag selector {which!r}")
    out = []
    for vpn in pages:
        pte = space.pte(vpn)
        out.append((vpn, pte.accessed, pte.dirty))
        if which in ("accessed", "both"):
            pte.accessed = False
        if which in ("dirty", "both"):
            pte.dirty = False
    return out


TRAPS = ("clear_present", "set_reserved", "set_nx")


def set_pte_trap(space: AddressSpace, vpn: int, trap: str) -> None:
    pte = space.pte(vpn)
    if trap == "clear_present":
        pte.present = False
    elif trap == "set_reserved":
        pte.reserved_fault = True
    elif trap == "set_nx":
        pte.nx = True
    else:
        raise ValueError(f"unknown trap {trap!r}")


def clear_pte_trap(space: AddressSpace, vpn: int, trap: str) -> None:
    pte = space.pte(vpn)
    if trap == "clear_present":
        pte.present = True
    elif trap == "set_reserved":
        pte.reserved_fault = False
    elif trap == "set_nx":
        pte.nx = False
    else:
        raise ValueError(f"unknown trap {trap!r}")


AEX_REASONS = ("page_fault", "ipi_shootdown", "other")


def aex(space: AddressSpace, tlb: TlbState, reason: str, config: SimConfig) -> int:
    """Asynchronous exit of the enclave owning ``space``; returns its cost.

    The TLB loses either every entry or, with selective flushing, the
    entries of the enclave's PCID and global entries.
    """
    if reason not in AEX_REASONS:
        raise ValueError(f"unknown AEX reason {reason!r}")
    space.aex_count += 1
    if config.pcid_selective_flush:
        tlb.flush("pcid", space.pcid)
    else:
        tlb.flush("all")
    costs = config.costs
    if reason == "page_fault":
        return costs.page_fault_cost
    if reason == "ipi_shootdown":
        return costs.shootdown_cost
    return costs.other_aex_cost
