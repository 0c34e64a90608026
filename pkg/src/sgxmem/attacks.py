"""Attack strategies: page faults, accessed-flag monitoring (B/T/HT-SPM),
LLC Prime+Probe, DRAM row-buffer probing, cache-DRAM and TLB probing.

Strategies only use what an OS-level or co-tenant adversary has: PTE reads
and writes on the victim's address space, IPIs, their own memory accesses
and shared micro-architectural state.  Recovery functions take observation
traces only.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

from .cache import LINE_SHIFT, EvictionSet
from .dram import bank_id, dram_map, find_row_pair
from .engine import BackgroundInterrupts  # noqa: F401  (re-export)
from .engine import AttackStrategy, EventLog, Machine, PreconditionError, run_scenario
from .paging import AccessKind, clear_pte_trap, read_and_reset_flags, set_pte_trap
from .rng import SplitMix64
from .tlb import DTLB, ITLB, L2TLB, build_tlb_eviction_set, tlb_set_index

NEVER = 1 << 62


# -- timers ------------------------------------------------------------------

class SmuggledClock:
    """Cycle counter shared from a helper thread: reads carry bounded
    gaussian jitter and occasionally repeat the previous value."""

    def __init__(self, sigma: float = 4.0, stale_prob: float = 0.002, rng=None):
        self.sigma = sigma
        self.stale_prob = stale_prob
        self.rng = rng
        self.last: int | None = None

    def read(self, true_cycle: int) -> int:
        rng = self.rng
        if self.last is not None and rng is not None and self.stale_prob > 0 \
                and rng.random() < self.stale_prob:
            return self.last
        v = true_cycle
        if rng is not None and self.sigma > 0:
            e = rng.gauss(0.0, self.sigma)
            lim = 3 * self.sigma
            v = true_cycle + int(round(max(-lim, min(lim, e))))
        self.last = v
        return v


def smuggled_clock_read(clock: SmuggledClock, true_cycle: int) -> int:
    return clock.read(true_cycle)


# -- classifiers ---------------------------------------------------------------

@dataclass
class ThresholdClassifier:
    """``value > threshold`` selects the high class."""
    threshold: float
    low: object = 0
    high: object = 1

    @classmethod
    def fit(cls, low_values, high_values, low=0, high=1):
        lo = list(low_values)
        hi = list(high_values)
        if not lo or not hi:
            raise ValueError("calibration needs samples of both classes")
        m_lo, m_hi = sum(lo) / len(lo), sum(hi) / len(hi)
        if m_lo >= m_hi:
            raise ValueError("calibration classes are not ordered low < high")
        return cls((m_lo + m_hi) / 2.0, low, high)

    def __call__(self, v):
        return self.high if v > self.threshold else self.low


@dataclass
class NearestCentroid:
    centroids: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, samples: dict):
        cents = {}
        for label, vecs in samples.items():
            vecs = [list(v) for v in vecs]
            if not vecs:
                raise ValueError(f"no samples for class {label!r}")
            n = len(vecs[0])
            cents[label] = [sum(v[i] for v in vecs) / len(vecs) for i in range(n)]
        return cls(cents)

    def __call__(self, vec):
        vec = list(vec)

        def dist(label):
            c = self.centroids[label]
            return sum((a - b) ** 2 for a, b in zip(vec, c))
        return min(sorted(self.centroids, key=str), key=dist)


# -- decoding helpers ----------------------------------------------------------

def segment_counts(items, is_marker):
    """Split a trace at marker items.

    Returns ``(interior, tail)``: ``interior[k]`` counts the items after the
    k-th marker up to and including the (k+1)-th; ``tail`` counts the items
    after the last marker.  Items before the first marker are ignored.
    """
    idx = [i for i, it in enumerate(items) if is_marker(it)]
    if not idx:
        return [], None
    interior = [b - a for a, b in zip(idx, idx[1:])]
    return interior, len(items) - 1 - idx[-1]


@dataclass
class SegmentDecoder:
    """Per-bit decision from interior segment values and the tail value."""
    interior: ThresholdClassifier
    tail: ThresholdClassifier

    def decode(self, interior_values, tail_value) -> str:
        if tail_value is None:
            return ""
        bits = [str(self.interior(v)) for v in interior_values]
        bits.append(str(self.tail(tail_value)))
        return "".join(bits)


def fit_segment_decoder(samples) -> SegmentDecoder:
    """``samples`` is a list of (known_bits, interior_values, tail_value)."""
    lo_i, hi_i, lo_t, hi_t = [], [], [], []
    for bits, interior, tail in samples:
        if len(interior) != len(bits) - 1:
            raise ValueError("calibration trace does not match its key length")
        for b, v in zip(bits, interior):
            (hi_i if b == "1" else lo_i).append(v)
        (hi_t if bits[-1] == "1" else lo_t).append(tail)
    return SegmentDecoder(ThresholdClassifier.fit(lo_i, hi_i), ThresholdClassifier.fit(lo_t, hi_t))


CALIBRATION_KEYS = ("0110", "1001")


def calibrate(config, make_victim, make_attack, extract, keys=CALIBRATION_KEYS, seed=0x0CA1):
    """Run the attack against attacker-chosen keys and fit a decoder.

    ``extract(attack)`` maps a finished attack to (interior, tail).
    """
    samples = []
    for i, k in enumerate(keys):
        att = make_attack()
        run_scenario(config, make_victim(k), [att], seed=seed + i, baseline=False)
        interior, tail = extract(att)
        samples.append((k, interior, tail))
    return fit_segment_decoder(samples)


# -- page-fault attack -----------------------------------------------------------

class PageFaultAttack(AttackStrategy):
    """Traps every monitored page; on a fault it releases the faulting page
    and re-traps the others, so each entry to a monitored page faults once."""

    name = "page_fault"
    period = NEVER

    def __init__(self, monitored_pages, trap: str = "clear_present"):
        super().__init__()
        self.monitored = [va >> 12 for va in monitored_pages]
        self.trap = trap
        self._open: int | None = None

    def first_fire(self):
        return NEVER

    def install(self, machine):
        space = machine.victim_space
        for vpn in self.monitored:
            set_pte_trap(space, vpn, self.trap)
        if self.monitored:
            machine.fault_hooks.append(self)

    def on_fault(self, machine, vpn, now):
        if vpn not in self.monitored:
            return
        space = machine.victim_space
        self.observations.append((now, vpn))
        clear_pte_trap(space, vpn, self.trap)
        if self._open is not None and self._open != vpn:
            set_pte_trap(space, self._open, self.trap)
        self._open = vpn

    def trace(self) -> list[int]:
        return [vpn for _, vpn in self.observations]


def page_fault_attack(monitored_pages, trap: str = "clear_present") -> PageFaultAttack:
    return PageFaultAttack(monitored_pages, trap)


# -- B-SPM -----------------------------------------------------------------------

class BSPMAttack(AttackStrategy):
    """Polls the trigger page's accessed flag; when set, shoots down the
    victim TLB and records the set of monitored pages touched since the last
    inspection."""

    name = "bspm"

    def __init__(self, monitored_pages, trigger_page, inspection_period: int = 184):
        super().__init__()
        self.monitored = [va >> 12 for va in monitored_pages]
        self.trigger = trigger_page >> 12
        if self.trigger not in self.monitored:
            self.monitored.append(self.trigger)
        self.period = inspection_period

    def install(self, machine):
        read_and_reset_flags(machine.victim_space, self.monitored, "accessed")

    def probe(self, machine, now):
        space = machine.victim_space
        if not space.pte(self.trigger).accessed:
            return
        machine.interrupt_victim("ipi_shootdown", self.actor.id)
        self._collect(machine, now)

    def _collect(self, machine, now):
        flags = read_and_reset_flags(machine.victim_space, self.monitored, "accessed")
        seen = frozenset(vpn for vpn, a, _ in flags if a)
        if seen:
            self.observations.append((now, seen))

    def finish(self, machine, end):
        self._collect(machine, end)

    def trace(self) -> list[frozenset]:
        return [s for _, s in self.observations]

    def operation_sets(self, n_ops: int | None = None) -> list[frozenset]:
        """Page sets per trigger-delimited operation.  The inspection at a
        trigger reports the pages of the operation before it; the final
        inspection reports the last one."""
        out = []
        for k, (_, s) in enumerate(self.observations):
            if k == 0 and self.trigger in s:
                continue
            out.append(frozenset(s - {self.trigger}))
        if n_ops is not None:
            out = out[:n_ops] + [frozenset()] * max(0, n_ops - len(out))
        return out


def bspm_attack(monitored_pages, trigger_page, inspection_period: int = 184) -> BSPMAttack:
    return BSPMAttack(monitored_pages, trigger_page, inspection_period)


# -- T-SPM -----------------------------------------------------------------------

class TSPMAttack(AttackStrategy):
    """Times the execution between accessed-flag reference points.

    ``mode="cycle"``: a detection happens when both alpha and beta are
    marked; durations are the gaps between consecutive detections plus the
    gap from the last detection to the end of the enclave call.

    ``mode="pair"``: alpha marks a start, beta the matching end; durations
    are end minus start.

    With ``flush`` each detection is followed, after ``settle`` cycles, by a
    TLB shootdown and a flag reset so the next visit is walked again.
    Without it the flags are reset immediately (the victim's own enclave
    transitions flush the TLB).
    """

    name = "tspm"

    def __init__(self, alpha_page, beta_page, settle: int | None = None, period: int = 184,
                 flush: bool = True, mode: str = "cycle", settle_ns: float = 2000.0):
        super().__init__()
        if mode not in ("cycle", "pair"):
            raise ValueError(f"unknown T-SPM mode {mode!r}")
        self.alpha = alpha_page >> 12
        self.beta = beta_page >> 12
        self.settle = settle
        self.settle_ns = settle_ns
        self.period = period
        self.flush = flush
        self.mode = mode
        self.detections: list[int] = []
        self.durations: list[int] = []
        self._start: int | None = None
        self._pending: int | None = None
        self.end: int | None = None

    def install(self, machine):
        if self.settle is None:
            self.settle = int(round(self.settle_ns * machine.config.cycles_per_ns))
        read_and_reset_flags(machine.victim_space, [self.alpha, self.beta], "accessed")

    def next_fire(self, now):
        if self._pending is not None:
            return self._pending
        return now + self.period

    def probe(self, machine, now):
        space = machine.victim_space
        if self._pending is not None:
            if now >= self._pending:
                machine.interrupt_victim("ipi_shootdown", self.actor.id)
                read_and_reset_flags(space, [self.alpha, self.beta], "accessed")
                self._pending = None
                self.skip_idle = True
            return
        a = space.pte(self.alpha).accessed
        b = space.pte(self.beta).accessed
        if self.mode == "pair":
            if a and self._start is None:
                self._start = now
                read_and_reset_flags(space, [self.alpha], "accessed")
            if b and self._start is not None:
                self.durations.append(now - self._start)
                self.observations.append((self._start, now))
                self._start = None
                read_and_reset_flags(space, [self.alpha, self.beta], "accessed")
            return
        if a and b:
            if self.detections:
                self.durations.append(now - self.detections[-1])
            self.detections.append(now)
            self.observations.append(now)
            if self.flush:
                self._pending = now + self.settle
                self.skip_idle = False
            else:
                read_and_reset_flags(space, [self.alpha, self.beta], "accessed")

    def finish(self, machine, end):
        self.end = end
        if self.mode == "pair" and self._start is not None:
            # one last poll closes an interval that ended with the victim
            self.probe(machine, end)

    def segments(self):
        """(interior durations, tail duration) for cycle mode."""
        if not self.detections:
            return [], None
        return list(self.durations), self.end - self.detections[-1]


def tspm_attack(alpha_page, beta_page, settle_delay=None, period: int = 184, **kw) -> TSPMAttack:
    return TSPMAttack(alpha_page, beta_page, settle_delay, period, **kw)


# -- HT-SPM ----------------------------------------------------------------------

class _AttackerPages:
    """Attacker-owned (non-enclave) virtual pages for TLB eviction."""

    def __init__(self, machine, base_vpn: int, name: str):
        self.machine = machine
        self.space = machine.new_space(name, enclave=False)
        self.base_vpn = base_vpn
        self.mapped: set[int] = set()

    def ensure(self, vpns):
        for v in vpns:
            if v not in self.mapped:
                self.machine.map(self.space, v << self.space.page_shift)
                self.mapped.add(v)


class TlbEvictor:
    """Zigzag walks over per-set TLB eviction sets from a sibling thread."""

    def __init__(self, machine, actor, pages: _AttackerPages):
        self.machine = machine
        self.actor = actor
        self.pages = pages
        self.sets: list[tuple[str, list[int]]] = []
        self._forward: list[bool] = []

    def add(self, kind: str, evset: list[int]):
        self.pages.ensure(evset)
        self.sets.append((kind, evset))
        self._forward.append(True)

    def walk(self, i: int) -> int:
        """Access eviction set i; returns how many accesses missed the
        first-level TLB (self-miss count)."""
        kind, evset = self.sets[i]
        fwd = self._forward[i]
        self._forward[i] = not fwd
        order = evset if fwd else evset[::-1]
        akind = AccessKind.CODE_FETCH if kind == ITLB else AccessKind.DATA_READ
        m = self.machine
        shift = self.pages.space.page_shift
        misses = 0
        for vpn in order:
            tr = m.translate_only(self.actor, self.pages.space, vpn << shift, akind)
            if tr.tlb_level != "l1":
                misses += 1
        return misses


class HTSPMCleaner(AttackStrategy):
    """Sibling-thread TLB cleaner: evicts the monitored pages' translations
    so the victim re-walks (and re-marks) them without any interrupt."""

    name = "htspm_cleaner"
    colocated = True

    def __init__(self, data_pages, code_pages=(), clean_period: int = 4978, base_vpn: int = 0x7000000):
        super().__init__()
        self.data_vpns = [va >> 12 for va in data_pages]
        self.code_vpns = [va >> 12 for va in code_pages]
        self.period = clean_period
        self.base_vpn = base_vpn
        self.evictor: TlbEvictor | None = None

    def first_fire(self):
        return self.period if self.period < NEVER else NEVER

    def install(self, machine):
        cfg = machine.config
        if not cfg.hyperthreading or not cfg.tlb.shared_across_logical_cores:
            raise PreconditionError("HT-SPM needs a sibling thread sharing the victim's TLB")
        pages = _AttackerPages(machine, self.base_vpn, "htspm")
        ev = self.evictor = TlbEvictor(machine, self.actor, pages)
        tcfg = cfg.tlb
        used = set()
        exclude = set(self.data_vpns) | set(self.code_vpns)
        for vpn in self.data_vpns:
            s = tlb_set_index(vpn, DTLB, tcfg)
            if ("d", s) not in used:
                used.add(("d", s))
                ev.add(DTLB, build_tlb_eviction_set(vpn, DTLB, config=tcfg, base_vpn=self.base_vpn,
                                                    exclude=exclude))
        for vpn in self.code_vpns:
            s = tlb_set_index(vpn, ITLB, tcfg)
            if ("i", s) not in used:
                used.add(("i", s))
                ev.add(ITLB, build_tlb_eviction_set(vpn, ITLB, config=tcfg, base_vpn=self.base_vpn,
                                                    exclude=exclude))
        for vpn in self.data_vpns + self.code_vpns:
            s = tlb_set_index(vpn, L2TLB, tcfg)
            if ("l2", s) not in used:
                used.add(("l2", s))
                ev.add(L2TLB, build_tlb_eviction_set(vpn, L2TLB, config=tcfg,
                                                     base_vpn=self.base_vpn + (1 << 16), exclude=exclude))

    def probe(self, machine, now):
        for i in range(len(self.evictor.sets)):
            self.evictor.walk(i)


class HTSPMCollector(AttackStrategy):
    """Sibling-thread collector: reads and clears accessed flags of the
    monitored pages at a fixed rate; no interrupts."""

    name = "htspm_collector"
    colocated = True

    def __init__(self, data_pages, trigger_page, collect_period: int = 128):
        super().__init__()
        self.data_vpns = [va >> 12 for va in data_pages]
        self.trigger = trigger_page >> 12
        self.period = collect_period

    def install(self, machine):
        cfg = machine.config
        if not cfg.hyperthreading:
            raise PreconditionError("HT-SPM needs HyperThreading")
        read_and_reset_flags(machine.victim_space, [self.trigger] + self.data_vpns, "accessed")

    def probe(self, machine, now):
        flags = read_and_reset_flags(machine.victim_space, [self.trigger] + self.data_vpns, "accessed")
        seen = frozenset(v for v, a, _ in flags if a)
        if seen:
            self.observations.append((now, seen))

    def finish(self, machine, end):
        self.probe(machine, end)

    def word_sets(self) -> list[tuple[int, frozenset]]:
        return split_by_trigger(self.observations, self.trigger)


def split_by_trigger(observations, trigger_vpn: int) -> list[tuple[int, frozenset]]:
    """Group timed page-set observations into per-operation (start, pages);
    an operation starts at each observation containing the trigger page."""
    out: list[tuple[int, set]] = []
    for t, s in observations:
        if trigger_vpn in s:
            out.append((t, set(s - {trigger_vpn})))
        elif out:
            out[-1][1].update(s)
    return [(t, frozenset(x)) for t, x in out]


def htspm_attack(data_pages, trigger_page, clean_period: int = 4978, collect_period: int = 128,
                 code_pages=None):
    """Cleaner and collector actors for one HT-SPM run."""
    code = [trigger_page] if code_pages is None else list(code_pages)
    return [HTSPMCleaner(data_pages, code, clean_period), HTSPMCollector(data_pages, trigger_page, collect_period)]


# -- LLC Prime+Probe -------------------------------------------------------------

def congruent_lines(machine, target_pa: int, count: int, base_frame_hint: int = 0x1000,
                    in_prm: bool = False, space=None, base_va: int = 0x10000000) -> list[int]:
    """Map ``count`` attacker pages whose line at ``target_pa``'s page offset
    falls in the same LLC set; returns those physical line addresses.

    The adversary controls page allocation, so frames are picked to share
    the target's set-index bits above the page offset.
    """
    cfg = machine.config
    shift = cfg.page_shift
    idx_bits = (cfg.cache.l3.sets // cfg.cache.llc_slices).bit_length() - 1 + LINE_SHIFT
    stride = 1 << max(0, idx_bits - shift)
    target_frame = target_pa >> shift
    offset = target_pa & ((1 << shift) - 1)
    lo, hi = machine.frame_range(in_prm)
    want_set = machine.caches.llc_index(target_pa >> LINE_SHIFT)
    out = []
    frame = lo + ((target_frame - lo) % stride) + base_frame_hint * stride
    va = base_va
    while len(out) < count:
        if frame >= hi:
            raise RuntimeError("ran out of congruent frames")
        pa = (frame << shift) | offset
        if frame != target_frame and machine.frame_free(frame) \
                and machine.caches.llc_index(pa >> LINE_SHIFT) == want_set:
            if space is not None:
                while (va >> shift) in space.mapping:
                    va += 1 << shift
                machine.map(space, va, frame=frame)
                va += 1 << shift
            else:
                machine.alloc_frame(in_prm, frame)
            out.append(pa)
        frame += stride
    return out


class PrimeProbeAttack(AttackStrategy):
    """Cross-core Prime+Probe on the LLC sets of two victim code lines."""

    name = "prime_probe"
    skip_idle = False

    def __init__(self, square_va: int, multiply_va: int, period: int = 1000, core: int = 1):
        super().__init__()
        self.square_va = square_va
        self.multiply_va = multiply_va
        self.period = period
        self.core = core
        self.sets: list[EvictionSet] = []

    def install(self, machine):
        space = machine.victim_space  # the OS knows the victim's frames
        ways = machine.config.cache.l3.ways
        for k, va in enumerate((self.square_va, self.multiply_va)):
            pa = space.physical(va)
            lines = congruent_lines(machine, pa, ways, base_frame_hint=4 + 64 * k)
            ev = EvictionSet(machine.caches, lines)
            ev.prime()
            self.sets.append(ev)

    def probe(self, machine, now):
        noise = machine.config.noise
        rng = machine.rng
        row = []
        for ev in self.sets:
            active = bool(ev.probe())
            if noise.enabled:
                if active and rng.random() < noise.llc_probe_miss_prob:
                    active = False
                elif not active and rng.random() < noise.llc_background_evict_prob:
                    active = True
            row.append(active)
        self.observations.append((now, row[0], row[1]))


def prime_probe_attack(square_va, multiply_va, period: int = 1000) -> PrimeProbeAttack:
    return PrimeProbeAttack(square_va, multiply_va, period)


def decode_square_multiply(observations, nbits: int | None = None, min_rounds: int = 3,
                           max_gap: int = 2) -> str:
    """Decode per-round (square_active, multiply_active) probe results.

    Active rounds separated by at most ``max_gap`` idle rounds form one
    burst, which bridges dropped probes.  Each burst whose square set was
    active in at least ``min_rounds`` rounds is one loop iteration; its bit
    is 1 when the multiply set was active in at least ``min_rounds`` rounds.
    """
    bursts = []
    cur = None
    idle = 0
    for o in observations:
        sq, mul = bool(o[1]), bool(o[2])
        if sq or mul:
            if cur is None or idle > max_gap:
                cur = [0, 0]
                bursts.append(cur)
            cur[0] += sq
            cur[1] += mul
            idle = 0
        else:
            idle += 1
    bits = "".join("1" if m >= min_rounds else "0" for s, m in bursts if s >= min_rounds)
    if nbits is not None:
        bits = bits[:nbits].ljust(nbits, "0")
    return bits


# -- DRAMA and cache-DRAM ------------------------------------------------------------

def attacker_row_pages(machine, target_pa: int, space, base_va: int = 0x20000000, extra_rows: int = 1):
    """Map attacker enclave pages covering ``target_pa``'s DRAM row and one
    other row of the same bank, then pick (p, p_prime)."""
    cfg = machine.config
    shift = cfg.page_shift
    geo = cfg.dram
    tgt = dram_map(target_pa, geo)
    tbank = bank_id(tgt, geo)
    from .dram import row_shift
    rs = row_shift(geo)
    region = 1 << (rs - shift)  # frames per row-span
    lo, hi = machine.frame_range(True)
    chosen = []
    va = base_va
    for row in [tgt.row] + [tgt.row + d for d in range(1, extra_rows + 1)] + [tgt.row - 1]:
        first = row * region
        for frame in range(first, first + region):
            if not lo <= frame < hi or not machine.frame_free(frame):
                continue
            base = frame << shift
            if any(bank_id(dram_map(pa, geo), geo) == tbank
                   for pa in range(base, base + (1 << shift), cfg.cache.line_size)):
                while (va >> shift) in space.mapping:
                    va += 1 << shift
                machine.map(space, va, frame=frame)
                chosen.append(base)
                va += 1 << shift
                break
    return find_row_pair(target_pa, chosen, geo, 1 << shift, cfg.cache.line_size)


class DramaAttack(AttackStrategy):
    """Alternates an access to p' (closing the row) and a timed access to p.

    A timed access whose latency falls inside the hit window means the row
    holding p (and d) was reopened in between.  Measurements use the
    smuggled clock.  ``truth`` records the real row-buffer outcome for
    evaluation only.
    """

    name = "drama"
    skip_idle = False

    def __init__(self, target_va: int, period: int = 400, window: tuple[float, float] | None = None,
                 core: int = 2, clock: SmuggledClock | None = None):
        super().__init__()
        self.target_va = target_va
        self.period = period
        self.window = window
        self.core = core
        self.clock = clock
        self.p = self.p_prime = None
        self.samples: list[int] = []
        self.truth: list[str] = []
        self.detections: list[int] = []
        self._phase = 0

    def install(self, machine):
        cfg = machine.config
        space = machine.new_space("drama", enclave=True, elrange=(0x20000000, 1 << 28))
        target_pa = machine.victim_space.physical(self.target_va)
        self.p, self.p_prime = attacker_row_pages(machine, target_pa, space)
        if self.clock is None:
            noise = cfg.noise
            if noise.enabled:
                self.clock = SmuggledClock(noise.clock_jitter_sigma, noise.clock_stale_prob, machine.rng)
            else:
                self.clock = SmuggledClock(0.0, 0.0, None)
        elif self.clock.rng is None and (self.clock.sigma > 0 or self.clock.stale_prob > 0):
            self.clock.rng = machine.rng
        if self.window is None:
            self.window = hit_window(cfg)

    def probe(self, machine, now):
        cfg = machine.config
        self._phase ^= 1
        if self._phase:
            machine.dram_touch(self.p_prime)
            return
        noise = cfg.noise
        if noise.enabled and machine.rng.random() < noise.dram_background_prob:
            # unrelated traffic to another row of the same bank
            machine.dram.open_row(self.p_prime ^ (1 << 30))
        t0 = self.clock.read(now)
        outcome, lat = machine.dram_touch(self.p)
        t1 = self.clock.read(now + cfg.cache.l3_latency + lat)
        measured = t1 - t0
        self.samples.append(measured)
        self.truth.append(outcome)
        lo, hi = self.window
        if lo <= measured <= hi:
            self.detections.append(now)
            self.observations.append((now, measured))


def hit_window(config, sigmas: float = 3.0) -> tuple[float, float]:
    """Row-hit latency window: hit mode plus or minus 3 combined sigma."""
    noise = config.noise
    centre = config.cache.l3_latency + config.dram.latency_hit
    if not noise.enabled:
        return centre, centre
    s = math.sqrt(noise.dram_sigma ** 2 + 2 * noise.clock_jitter_sigma ** 2)
    return centre - sigmas * s, centre + sigmas * s


def drama_attack(target_va, period: int = 400, clock: SmuggledClock | None = None, window=None) -> DramaAttack:
    return DramaAttack(target_va, period, window, clock=clock)


def drama_latency_histogram(config, n_probes: int = 100_000, seed: int = 0):
    """Time ``n_probes`` accesses to p, each preceded by an access to either
    another line of p's row or a line in a different row of the same bank.

    Returns (measured latencies, real row-buffer outcomes).  The outcomes
    are for scoring only.
    """
    machine = Machine(config, SplitMix64(seed), EventLog("aex"))
    space = machine.new_space("drama", enclave=True, elrange=(0x20000000, 1 << 28))
    same_row = machine.map(space, 0x2FFFF000) << config.page_shift
    p, p_prime = attacker_row_pages(machine, same_row, space)
    noise = config.noise
    rng = machine.rng
    if noise.enabled:
        clock = SmuggledClock(noise.clock_jitter_sigma, noise.clock_stale_prob, rng)
    else:
        clock = SmuggledClock(0.0, 0.0, None)
    l3 = config.cache.l3_latency
    now = 0
    samples, truth = [], []
    with machine.attacker_context():
        for _ in range(n_probes):
            machine.dram_touch(same_row if rng.random() < 0.5 else p_prime)
            if noise.enabled and rng.random() < noise.dram_background_prob:
                machine.dram.open_row(p_prime ^ (1 << 30))
            now += config.dram.latency_conflict + l3
            t0 = clock.read(now)
            outcome, lat = machine.dram_touch(p)
            now += l3 + lat
            samples.append(clock.read(now) - t0)
            truth.append(outcome)
    return samples, truth


def two_mode_threshold(samples, iters: int = 50) -> float:
    """Midpoint between the two cluster means of a 1-D sample (2-means,
    seeded at the 10th and 90th percentiles so rare outliers cannot claim
    a cluster)."""
    xs = sorted(samples)
    if not xs:
        raise ValueError("no samples")
    a, b = float(xs[len(xs) // 10]), float(xs[(9 * len(xs)) // 10])
    if a == b:
        return a
    for _ in range(iters):
        mid = (a + b) / 2
        k = bisect.bisect_right(xs, mid)
        left, right = xs[:k], xs[k:]
        na = sum(left) / len(left) if left else a
        nb = sum(right) / len(right) if right else b
        if na == a and nb == b:
            break
        a, b = na, nb
    return (a + b) / 2


class LlcEvictor(AttackStrategy):
    """Keeps one victim line out of the LLC (and, by inclusion, out of the
    victim's private caches) by re-priming its set."""

    name = "llc_evictor"
    skip_idle = False

    def __init__(self, target_va: int, period: int = 8000, core: int = 3):
        super().__init__()
        self.target_va = target_va
        self.period = period
        self.core = core
        self.evset: EvictionSet | None = None

    def install(self, machine):
        pa = machine.victim_space.physical(self.target_va)
        lines = congruent_lines(machine, pa, machine.config.cache.l3.ways, base_frame_hint=8)
        self.evset = EvictionSet(machine.caches, lines)
        self.evset.prime()

    def probe(self, machine, now):
        self.observations.append((now, len(self.evset.probe())))


def cache_dram_attack(d_va: int, llc_actor_period: int = 8000, dram_actor_period: int = 400):
    return [LlcEvictor(d_va, llc_actor_period), DramaAttack(d_va, dram_actor_period)]


# -- TLB probing ------------------------------------------------------------------

class TlbProbeAttack(AttackStrategy):
    """Sibling-thread Prime+Probe on dTLB (and optionally iTLB) sets.

    Each round reports the per-set count of the attacker's own first-level
    TLB misses, a stand-in for the miss performance counter.
    """

    name = "tlb_probe"
    colocated = True

    def __init__(self, dtlb_sets=range(16), itlb_sets=(), period: int = 400, base_vpn: int = 0x7800000):
        super().__init__()
        self.dtlb_sets = list(dtlb_sets)
        self.itlb_sets = list(itlb_sets)
        self.period = period
        self.base_vpn = base_vpn
        self.evictor: TlbEvictor | None = None

    def install(self, machine):
        if not machine.config.hyperthreading:
            raise PreconditionError("TLB probing needs a HyperThreading sibling")
        tcfg = machine.config.tlb
        pages = _AttackerPages(machine, self.base_vpn, "tlbprobe")
        ev = self.evictor = TlbEvictor(machine, self.actor, pages)
        for s in self.dtlb_sets:
            ev.add(DTLB, build_tlb_eviction_set(s, DTLB, config=tcfg, base_vpn=self.base_vpn))
        for s in self.itlb_sets:
            ev.add(ITLB, build_tlb_eviction_set(s, ITLB, config=tcfg, base_vpn=self.base_vpn + (1 << 12)))
        for i in range(len(ev.sets)):
            ev.walk(i)

    def probe(self, machine, now):
        counts = tuple(self.evictor.walk(i) for i in range(len(self.evictor.sets)))
        self.observations.append((now, counts))

    def finish(self, machine, end):
        # one last round catches the victim's final accesses
        self.probe(machine, end)

    def active_sets(self) -> list[tuple[int, ...]]:
        """Per non-empty round, the probed dTLB set numbers showing misses."""
        n = len(self.dtlb_sets)
        out = []
        for _, counts in self.observations:
            act = tuple(self.dtlb_sets[i] for i in range(n) if counts[i] > 0)
            if act:
                out.append(act)
        return out


def tlb_probe_attack(dtlb_sets=range(16), itlb_sets=(), period: int = 400) -> TlbProbeAttack:
    return TlbProbeAttack(dtlb_sets, itlb_sets, period)
