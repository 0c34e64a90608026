"""L1i/L1d/L2 per physical core plus a shared, optionally inclusive, LLC.

Lines are tracked by line number (physical address >> 6).  Sets are plain
lists ordered LRU -> MRU; the LLC keeps only the sets that were touched.
"""
from __future__ import annotations

from .config import CacheConfig, Geometry

LINE_SHIFT = 6

# Representative complex-addressing slice functions (parity of the masked
# physical address); bit i of the slice id uses mask i.
_SLICE_MASKS = (
    sum(1 << b for b in (6, 10, 12, 14, 16, 17, 18, 20, 22, 24, 25, 26, 27, 28, 30, 32, 33)),
    sum(1 << b for b in (7, 11, 13, 15, 17, 19, 20, 21, 22, 23, 24, 26, 28, 29, 31, 33)),
    sum(1 << b for b in (8, 12, 13, 16, 19, 22, 23, 26, 27, 30, 31)),
)


def slice_hash(pa: int, config: CacheConfig = CacheConfig()) -> int:
    if config.llc_slices == 1 or config.slice_hash == "none":
        return 0
    nbits = config.llc_slices.bit_length() - 1
    if nbits > len(_SLICE_MASKS):
        raise ValueError(f"xor slice hash supports at most {1 << len(_SLICE_MASKS)} slices")
    s = 0
    for i in range(nbits):
        s |= (bin(pa & _SLICE_MASKS[i]).count("1") & 1) << i
    return s


def llc_set_of(pa: int, config: CacheConfig = CacheConfig()) -> tuple[int, int]:
    """(slice, set-within-slice) of a physical address.

    With one slice the set is bits 6..18 of the address for 8192 sets.
    Works elementwise on numpy integer arrays when slicing is disabled.
    """
    per_slice = config.l3.sets // config.llc_slices
    line = pa >> LINE_SHIFT
    if config.llc_slices == 1 or config.slice_hash == "none":
        return 0 * line, line & (per_slice - 1)
    return slice_hash(pa, config), line & (per_slice - 1)


class CacheLevel:
    __slots__ = ("name", "geometry", "mask", "ways", "sets", "sparse")

    def __init__(self, name: str, geometry: Geometry, sparse: bool = False):
        self.name = name
        self.geometry = geometry
        self.mask = geometry.sets - 1
        self.ways = geometry.ways
        self.sparse = sparse
        self.sets = {} if sparse else [[] for _ in range(geometry.sets)]

    def _ways(self, index: int, create: bool = True):
        if self.sparse:
            ways = self.sets.get(index)
            if ways is None and create:
                ways = self.sets[index] = []
            return ways
        return self.sets[index]

    def lookup(self, index: int, line: int) -> bool:
        ways = self._ways(index, create=False)
        if not ways:
            return False
        try:
            i = ways.index(line)
        except ValueError:
            return False
        if i != len(ways) - 1:
            ways.append(ways.pop(i))
        return True

    def contains(self, index: int, line: int) -> bool:
        ways = self._ways(index, create=False)
        return bool(ways) and line in ways

    def insert(self, index: int, line: int):
        """Insert as MRU; returns the evicted line or None."""
        ways = self._ways(index)
        if line in ways:
            ways.remove(line)
            ways.append(line)
            return None
        victim = ways.pop(0) if len(ways) >= self.ways else None
        ways.append(line)
        return victim

    def remove(self, index: int, line: int) -> bool:
        ways = self._ways(index, create=False)
        if ways and line in ways:
            ways.remove(line)
            return True
        return False

    def resident(self) -> int:
        sets = self.sets.values() if self.sparse else self.sets
        return sum(len(w) for w in sets)

    def set_contents(self, index: int) -> list[int]:
        return list(self._ways(index, create=False) or [])


class PrivateCaches:
    __slots__ = ("l1i", "l1d", "l2")

    def __init__(self, config: CacheConfig):
        self.l1i = CacheLevel("l1i", config.l1i) if config.l1i else None
        self.l1d = CacheLevel("l1d", config.l1d) if config.l1d else None
        self.l2 = CacheLevel("l2", config.l2) if config.l2 else None


class CacheHierarchy:
    def __init__(self, config: CacheConfig = CacheConfig()):
        self.config = config
        self.cores: dict[int, PrivateCaches] = {}
        self.l3 = CacheLevel("l3", config.l3, sparse=True)
        self._per_slice = config.l3.sets // config.llc_slices
        self._sliced = config.llc_slices > 1 and config.slice_hash != "none"

    def core(self, core_id: int) -> PrivateCaches:
        c = self.cores.get(core_id)
        if c is None:
            c = self.cores[core_id] = PrivateCaches(self.config)
        return c

    def llc_index(self, line: int) -> int:
        if not self._sliced:
            return line & (self._per_slice - 1)
        s = slice_hash(line << LINE_SHIFT, self.config)
        return s * self._per_slice + (line & (self._per_slice - 1))

    def _fill_llc(self, line: int) -> None:
        evicted = self.l3.insert(self.llc_index(line), line)
        if evicted is not None and self.config.inclusive:
            self._back_invalidate(evicted)

    def _back_invalidate(self, line: int) -> None:
        for pc in self.cores.values():
            for lvl in (pc.l1i, pc.l1d, pc.l2):
                if lvl is not None:
                    lvl.remove(line & lvl.mask, line)

    def access(self, core_id: int, pa: int, code: bool = False) -> tuple[str, int]:
        """Access one physical address; returns (level, cache latency).

        level is "l1", "l2", "l3" or "mem"; for "mem" the returned latency
        covers the lookups only and the caller adds the DRAM latency.
        """
        cfg = self.config
        line = pa >> LINE_SHIFT
        pc = self.core(core_id)
        l1 = pc.l1i if code else pc.l1d
        if l1 is not None and l1.lookup(line & l1.mask, line):
            return "l1", cfg.l1_latency
        l2 = pc.l2
        if l2 is not None and l2.lookup(line & l2.mask, line):
            if l1 is not None:
                l1.insert(line & l1.mask, line)
            return "l2", cfg.l2_latency
        if self.l3.lookup(self.llc_index(line), line):
            level = "l3"
        else:
            level = "mem"
            self._fill_llc(line)
            if cfg.prefetcher:
                self._fill_llc(line + 1)
        if l2 is not None:
            l2.insert(line & l2.mask, line)
        if l1 is not None:
            l1.insert(line & l1.mask, line)
        return level, cfg.l3_latency

    def llc_touch(self, pa: int) -> bool:
        """Access a line at the LLC only (cross-core eviction-set traffic).

        Returns True on hit; a miss fills the line, back-invalidating whatever
        it displaced.
        """
        line = pa >> LINE_SHIFT
        if self.l3.lookup(self.llc_index(line), line):
            return True
        self._fill_llc(line)
        return False

    def flush_line(self, pa: int) -> None:
        line = pa >> LINE_SHIFT
        self.l3.remove(self.llc_index(line), line)
        self._back_invalidate(line)

    def cached(self, pa: int, core_id: int | None = None) -> str | None:
        """Highest level holding the line (for tests and audits)."""
        line = pa >> LINE_SHIFT
        cores = [self.cores[core_id]] if core_id is not None and core_id in self.cores else (
            [] if core_id is not None else list(self.cores.values()))
        for pc in cores:
            for name in ("l1i", "l1d", "l2"):
                lvl = getattr(pc, name)
                if lvl is not None and lvl.contains(line & lvl.mask, line):
                    return name
        if self.l3.contains(self.llc_index(line), line):
            return "l3"
        return None


class EvictionSet:
    """Attacker lines congruent in one LLC set, primed and probed in
    alternating directions so LRU never cascades into self-eviction."""

    def __init__(self, hierarchy: CacheHierarchy, addresses: list[int]):
        if len(addresses) < hierarchy.config.l3.ways:
            raise ValueError("eviction set smaller than LLC associativity")
        idx = {hierarchy.llc_index(a >> LINE_SHIFT) for a in addresses}
        if len(idx) != 1:
            raise ValueError("eviction set addresses map to different LLC sets")
        self.hierarchy = hierarchy
        self.addresses = list(addresses)
        self.set_index = idx.pop()
        self._forward = True

    def prime(self) -> list[int]:
        """Fill the set; returns the addresses that missed."""
        self._forward = True
        missed = [a for a in self.addresses if not self.hierarchy.llc_touch(a)]
        return missed

    def probe(self) -> list[int]:
        """Re-access in reverse order of the previous pass; returns the
        addresses that missed (each miss implies a foreign line entered the
        set since the previous pass).  Probing also re-primes."""
        order = reversed(self.addresses) if self._forward else iter(self.addresses)
        self._forward = not self._forward
        return [a for a in order if not self.hierarchy.llc_touch(a)]


def prime(evset: EvictionSet) -> None:
    evset.prime()


def probe(evset: EvictionSet) -> int:
    return len(evset.probe())
