"""Set-associative multi-level TLBs (split L1 iTLB/dTLB, unified L2)."""
from __future__ import annotations

from .config import Geometry, TlbConfig

ITLB, DTLB, L2TLB = "itlb", "dtlb", "l2"
LEVEL_KINDS = (ITLB, DTLB, L2TLB)


def tlb_set_index(vpn: int, kind: str, config: TlbConfig = TlbConfig()) -> int:
    """Set index of a virtual page number.

    Low page-number bits select the set: bits 12-15 of the address for the
    16-set dTLB, bits 12-14 for the 8-set iTLB, bits 12-18 for the 128-set L2.
    """
    return vpn & (_geometry(config, kind).sets - 1)


def _geometry(config: TlbConfig, kind: str) -> Geometry:
    if kind == ITLB:
        return config.itlb
    if kind == DTLB:
        return config.dtlb
    if kind == L2TLB:
        return config.l2
    raise ValueError(f"unknown TLB level {kind!r}")


def build_tlb_eviction_set(target_vpn: int, kind: str, count: int | None = None,
                           config: TlbConfig = TlbConfig(), base_vpn: int = 0,
                           exclude=()) -> list[int]:
    """Pages that share ``target_vpn``'s set at level ``kind``.

    The pages are the first ``count`` congruent page numbers at or above
    ``base_vpn`` (stride = number of sets), skipping anything in ``exclude``.
    """
    geo = _geometry(config, kind)
    if count is None:
        count = geo.ways
    if count < geo.ways:
        raise ValueError(f"eviction set needs at least {geo.ways} pages, got {count}")
    stride = geo.sets
    want = tlb_set_index(target_vpn, kind, config)
    vpn = base_vpn + ((want - base_vpn) % stride)
    out = []
    excluded = set(exclude)
    while len(out) < count:
        if vpn not in excluded:
            out.append(vpn)
        vpn += stride
    return out


class TlbLevel:
    """One set-associative level.  Each set is a list ordered LRU -> MRU of
    ``[vpn, pcid, ppn, global]`` entries."""

    __slots__ = ("name", "geometry", "mask", "ways", "sets", "replacement", "rng")

    def __init__(self, name: str, geometry: Geometry, replacement: str = "lru", rng=None):
        self.name = name
        self.geometry = geometry
        self.mask = geometry.sets - 1
        self.ways = geometry.ways
        self.sets = [[] for _ in range(geometry.sets)]
        self.replacement = replacement
        self.rng = rng

    def lookup(self, vpn: int, pcid: int):
        ways = self.sets[vpn & self.mask]
        for i, e in enumerate(ways):
            if e[0] == vpn and (e[1] == pcid or e[3]):
                if i != len(ways) - 1:
                    ways.append(ways.pop(i))
                return e
        return None

    def contains(self, vpn: int, pcid: int) -> bool:
        return any(e[0] == vpn and (e[1] == pcid or e[3]) for e in self.sets[vpn & self.mask])

    def insert(self, vpn: int, pcid: int, ppn: int, glob: bool = False):
        """Insert or refresh an entry; returns the evicted entry, if any."""
        ways = self.sets[vpn & self.mask]
        for i, e in enumerate(ways):
            if e[0] == vpn and e[1] == pcid:
                ways.pop(i)
                ways.append([vpn, pcid, ppn, glob])
                return None
        victim = None
        if len(ways) >= self.ways:
            if self.replacement == "random" and self.rng is not None:
                victim = ways.pop(self.rng.randbelow(len(ways)))
            else:
                victim = ways.pop(0)
        ways.append([vpn, pcid, ppn, glob])
        return victim

    def invalidate(self, vpn: int, pcid: int) -> bool:
        ways = self.sets[vpn & self.mask]
        for i, e in enumerate(ways):
            if e[0] == vpn and e[1] == pcid:
                ways.pop(i)
                return True
        return False

    def flush(self, pcid: int | None = None) -> int:
        """Drop every entry (pcid=None) or the entries of one PCID plus globals."""
        dropped = 0
        for idx, ways in enumerate(self.sets):
            if not ways:
                continue
            if pcid is None:
                dropped += len(ways)
                self.sets[idx] = []
            else:
                keep = [e for e in ways if e[1] != pcid and not e[3]]
                dropped += len(ways) - len(keep)
                self.sets[idx] = keep
        return dropped

    def resident(self) -> int:
        return sum(len(w) for w in self.sets)

    def entries(self):
        for ways in self.sets:
            yield from ways


class TlbState:
    """iTLB + dTLB + unified L2 TLB for one (or two, if shared) logical cores."""

    def __init__(self, config: TlbConfig = TlbConfig(), rng=None):
        self.config = config
        self.itlb = TlbLevel(ITLB, config.itlb, config.replacement, rng)
        self.dtlb = TlbLevel(DTLB, config.dtlb, config.replacement, rng)
        self.l2 = TlbLevel(L2TLB, config.l2, config.replacement, rng)

    def level(self, kind: str) -> TlbLevel:
        return {ITLB: self.itlb, DTLB: self.dtlb, L2TLB: self.l2}[kind]

    def lookup(self, vpn: int, pcid: int, code: bool):
        """Return ``(hit_level, ppn)``; hit_level is "l1", "l2" or None.

        An L2 hit refills the L1 level it missed in.
        """
        l1 = self.itlb if code else self.dtlb
        e = l1.lookup(vpn, pcid)
        if e is not None:
            return "l1", e[2]
        e = self.l2.lookup(vpn, pcid)
        if e is not None:
            l1.insert(vpn, pcid, e[2], e[3])
            return "l2", e[2]
        return None, None

    def fill(self, vpn: int, pcid: int, ppn: int, code: bool, glob: bool = False) -> None:
        (self.itlb if code else self.dtlb).insert(vpn, pcid, ppn, glob)
        self.l2.insert(vpn, pcid, ppn, glob)

    def flush(self, scope: str = "all", pcid: int | None = None) -> int:
        if scope == "all":
            target = None
        elif scope == "pcid":
            if pcid is None:
                raise ValueError("pcid flush needs a pcid")
            target = pcid
        else:
            raise ValueError(f"unknown flush scope {scope!r}")
        return sum(lvl.flush(target) for lvl in (self.itlb, self.dtlb, self.l2))

    def invalidate_page(self, vpn: int, pcid: int) -> None:
        for lvl in (self.itlb, self.dtlb, self.l2):
            lvl.invalidate(vpn, pcid)

    def holds(self, vpn: int, pcid: int) -> bool:
        return any(lvl.contains(vpn, pcid) for lvl in (self.itlb, self.dtlb, self.l2))
