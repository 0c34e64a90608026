"""Deterministic interleaving of one victim and any number of attacker actors.

Time is logical (cycles).  The victim issues one step at a time; an attacker
fires at multiples of its probe period.  At equal cycles the lower actor id
goes first and the victim is always id 0.  Asynchronous exits suspend the
victim for their configured cost and are serialized.
"""
from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .cache import CacheHierarchy
from .config import SimConfig
from .dram import DramState
from .paging import AccessKind, AddressSpace, PageFault, aex, translate
from .rng import SplitMix64
from .tlb import TlbState

MEMORY_OPS = {"fetch": AccessKind.CODE_FETCH, "read": AccessKind.DATA_READ,
              "write": AccessKind.DATA_WRITE}
STEP_OPS = ("fetch", "read", "write", "compute", "clflush", "eenter", "eexit")


class SecretAccessError(RuntimeError):
    """An attacker code path touched victim ground truth."""


# depth of nested attacker callbacks currently on the stack (audit mode)
_attacker_depth = [0]


def attacker_active() -> bool:
    return _attacker_depth[0] > 0


def audit_secret_read(what: str = "secret") -> None:
    if _attacker_depth[0] > 0:
        raise SecretAccessError(f"attacker code read victim {what}")


class PreconditionError(RuntimeError):
    pass


class Step(NamedTuple):
    """One victim action: spend ``cycles`` computing, then perform ``op``.

    ``mark`` carries ground-truth annotations for the harness; attackers never
    see it.
    """
    op: str
    va: int = 0
    cycles: int = 0
    mark: object = None


@dataclass(frozen=True)
class Actor:
    id: int
    kind: str  # "victim" | "attacker"
    core: int = 0
    colocated: bool = False


class EventLog:
    """Append-only (cycle, actor, kind, payload) records in processing order."""

    def __init__(self, level: str = "all"):
        self.level = level
        self.records: list[tuple] = []
        self.counts: Counter = Counter()

    def add(self, cycle: int, actor: int, kind: str, payload=None, major: bool = False) -> None:
        self.counts[kind] += 1
        if self.level == "all" or (major and self.level == "aex"):
            self.records.append((cycle, actor, kind, payload))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, EventLog) and self.records == other.records

    def of_kind(self, kind: str) -> list[tuple]:
        return [r for r in self.records if r[2] == kind]


@dataclass
class AccessOutcome:
    va: int
    pa: int
    kind: AccessKind
    latency: int
    tlb_level: str
    cache_level: str
    dram: str | None = None
    accessed_set: bool = False
    dirty_set: bool = False

    @property
    def walked(self) -> bool:
        return self.tlb_level == "walk"


@dataclass
class SimResult:
    baseline_cycles: int
    attacked_cycles: int
    aex_count: int
    event_log: EventLog
    observations: dict
    accounting: dict = field(default_factory=dict)
    baseline_accounting: dict = field(default_factory=dict)
    attackers: list = field(default_factory=list)
    marks: list = field(default_factory=list)

    @property
    def slowdown(self) -> float:
        return self.attacked_cycles / self.baseline_cycles if self.baseline_cycles else 1.0

    @property
    def event_counts(self) -> dict:
        return dict(sorted(self.event_log.counts.items()))


class AttackStrategy:
    """Base class for attacker actors.

    Subclasses override :meth:`probe` (called at each scheduled firing) and
    optionally :meth:`install`, :meth:`on_fault` and :meth:`finish`.  With
    ``skip_idle`` a firing that would follow no victim progress is skipped;
    only set it for probes that are no-ops on an unchanged victim.
    """

    name = "attack"
    period = 1000
    colocated = False
    core = 1
    skip_idle = True

    def __init__(self):
        self.actor: Actor | None = None
        self.observations: list = []
        self._seen_steps = -1

    def install(self, machine: "Machine") -> None:
        pass

    def first_fire(self) -> int:
        return self.period

    def next_fire(self, now: int) -> int:
        return now + self.period

    def probe(self, machine: "Machine", now: int) -> None:
        pass

    def on_fault(self, machine: "Machine", vpn: int, now: int) -> None:
        pass

    def finish(self, machine: "Machine", end: int) -> None:
        pass


class BackgroundInterrupts(AttackStrategy):
    """Legitimate periodic interrupts on the victim core (timer ticks etc.).
    Added automatically when ``noise.interrupt_period`` is set."""

    name = "background_interrupts"
    skip_idle = False

    def __init__(self, period: int):
        super().__init__()
        self.period = period

    def probe(self, machine, now):
        # a tick landing inside an exit that is still being handled is absorbed
        if now >= machine.aex_busy_until:
            machine.interrupt_victim("other", self.actor.id)


def step_interleave(next_times: dict[int, int]) -> tuple[int, int]:
    """Globally next actor: earliest cycle, lower actor id on ties."""
    actor = min(next_times, key=lambda a: (next_times[a], a))
    return actor, next_times[actor]


def fire_schedule(periods: dict[int, int], victim_latency: int | None = None, horizon: int = 1000):
    """Merged firing order (cycle, actor) up to ``horizon`` for fixed-period
    actors; the victim (id 0) fires every ``victim_latency`` cycles."""
    nxt = dict(periods)
    per = dict(periods)
    if victim_latency:
        nxt[0] = per[0] = victim_latency
    out = []
    while True:
        actor, cycle = step_interleave(nxt)
        if cycle > horizon:
            return out
        out.append((cycle, actor))
        nxt[actor] = cycle + per[actor]


class Machine:
    """Shared memory system plus the victim's scheduling state."""

    VICTIM_PCID = 1

    def __init__(self, config: SimConfig, rng: SplitMix64, log: EventLog):
        self.config = config
        self.rng = rng
        self.log = log
        self.caches = CacheHierarchy(config.cache)
        self.dram = DramState(config.dram)
        self._tlbs: dict[tuple, TlbState] = {}
        self._used_frames: set[int] = set()
        self._next_pcid = self.VICTIM_PCID + 1
        self.victim = None
        self.victim_actor = Actor(0, "victim", core=0)
        self.victim_space: AddressSpace | None = None
        self.victim_in_enclave = True
        self.victim_next = 0
        self.victim_steps = 0
        self.aex_busy_until = 0
        self.aex_cycles = 0
        self.now = 0
        self.fault_hooks: list = []
        self._attacker_ctx = 0
        self.fault_cycles = 0

    # -- structures -------------------------------------------------------

    def tlb_for(self, actor: Actor) -> TlbState:
        shared = self.config.hyperthreading and self.config.tlb.shared_across_logical_cores
        logical = 1 if (actor.colocated and actor.kind == "attacker") else 0
        key = (actor.core, 0 if shared else logical)
        t = self._tlbs.get(key)
        if t is None:
            t = self._tlbs[key] = TlbState(self.config.tlb, self.rng)
        return t

    @property
    def victim_tlb(self) -> TlbState:
        return self.tlb_for(self.victim_actor)

    def new_space(self, name: str, enclave: bool, elrange: tuple[int, int] | None = None) -> AddressSpace:
        cfg = self.config
        if enclave and elrange is None:
            elrange = (0, 1 << 36)
        pcid = self.VICTIM_PCID if name == "victim" else self._next_pcid
        if name != "victim":
            self._next_pcid += 1
        return AddressSpace(pcid, elrange if enclave else None, (cfg.prm_base, cfg.prm_size),
                            cfg.page_size, name)

    def frame_range(self, in_prm: bool) -> tuple[int, int]:
        cfg = self.config
        shift = cfg.page_shift
        if in_prm:
            return cfg.prm_base >> shift, (cfg.prm_base + cfg.prm_size) >> shift
        # non-PRM frames are drawn from below the PRM
        return 1, cfg.prm_base >> shift

    def frame_free(self, frame: int) -> bool:
        return frame not in self._used_frames

    def alloc_frame(self, in_prm: bool, frame: int | None = None) -> int:
        lo, hi = self.frame_range(in_prm)
        if frame is not None:
            if not lo <= frame < hi:
                raise ValueError(f"frame {frame:#x} outside {'PRM' if in_prm else 'non-PRM'} range")
            if frame in self._used_frames:
                raise ValueError(f"frame {frame:#x} already allocated")
        else:
            while True:
                frame = lo + self.rng.randbelow(hi - lo)
                if frame not in self._used_frames:
                    break
        self._used_frames.add(frame)
        return frame

    def map(self, space: AddressSpace, va: int, frame: int | None = None, nx: bool = False) -> int:
        vpn = va >> space.page_shift
        in_prm = space.in_elrange(vpn)
        frame = self.alloc_frame(in_prm, frame)
        space.map_page(vpn, frame, nx=nx)
        return frame

    # -- accesses ---------------------------------------------------------

    def access(self, actor: Actor, space: AddressSpace, va: int, kind: AccessKind) -> AccessOutcome:
        cfg = self.config
        tr = translate(space, va, kind, self.tlb_for(actor), cfg)
        level, lat = self.caches.access(actor.core, tr.pa, kind is AccessKind.CODE_FETCH)
        dram = None
        if level == "mem":
            sigma = cfg.noise.dram_sigma if cfg.noise.enabled else 0.0
            dram, dlat = self.dram.access(tr.pa, self.rng, sigma)
            lat += dlat
        return AccessOutcome(va, tr.pa, kind, tr.latency + lat, tr.tlb_level, level, dram,
                             tr.accessed_set, tr.dirty_set)

    def translate_only(self, actor: Actor, space: AddressSpace, va: int, kind: AccessKind):
        """Translation without a data access (TLB-only probing traffic)."""
        return translate(space, va, kind, self.tlb_for(actor), self.config)

    def dram_touch(self, pa: int) -> tuple[str, int]:
        """A memory-level access that bypassed the caches (LLC miss traffic)."""
        cfg = self.config
        sigma = cfg.noise.dram_sigma if cfg.noise.enabled else 0.0
        return self.dram.access(pa, self.rng, sigma)

    # -- exits ------------------------------------------------------------

    def interrupt_victim(self, reason: str, actor_id: int) -> int:
        """Deliver an interrupt (e.g. a TLB shootdown IPI) to the victim core."""
        now = self.now
        if not self.victim_in_enclave:
            self.victim_tlb.flush("pcid", self.victim_space.pcid)
            self.log.add(now, actor_id, "interrupt", reason)
            return 0
        cost = aex(self.victim_space, self.victim_tlb, reason, self.config)
        start = max(now, self.aex_busy_until)
        self.aex_busy_until = start + cost
        self.victim_next += cost
        self.aex_cycles += cost
        self.log.add(now, actor_id, "aex", reason, major=True)
        return cost

    def _victim_fault(self, fault: PageFault, now: int) -> int:
        cost = aex(self.victim_space, self.victim_tlb, "page_fault", self.config)
        self.aex_cycles += cost
        self.aex_busy_until = max(now, self.aex_busy_until) + cost
        self.log.add(now, 0, "fault", (fault.vpn, fault.reason), major=True)
        self.log.add(now, 0, "aex", "page_fault", major=True)
        for hook_owner in self.fault_hooks:
            with self.attacker_context():
                hook_owner.on_fault(self, fault.vpn, now)
        return cost

    # -- audit ------------------------------------------------------------

    @contextlib.contextmanager
    def attacker_context(self):
        self._attacker_ctx += 1
        _attacker_depth[0] += 1
        try:
            yield
        finally:
            self._attacker_ctx -= 1
            _attacker_depth[0] -= 1

    @property
    def in_attacker_code(self) -> bool:
        return self._attacker_ctx > 0


def _jitter(machine: Machine, cycles: int) -> int:
    cfg = machine.config
    if not cycles or not cfg.noise.enabled or cfg.noise.compute_jitter <= 0:
        return cycles
    return max(0, int(round(cycles * (1.0 + machine.rng.gauss(0.0, cfg.noise.compute_jitter)))))


def _assign_actors(attackers) -> list[AttackStrategy]:
    out = []
    for i, a in enumerate(attackers, start=1):
        core = 0 if a.colocated else a.core
        a.actor = Actor(i, "attacker", core=core, colocated=a.colocated)
        out.append(a)
    return out


def simulate(config: SimConfig, victim, attackers: Iterable[AttackStrategy] = (), seed: int = 0):
    """One timeline.  Returns (machine, end_cycle, accounting, marks)."""
    log = EventLog(config.log_level)
    machine = Machine(config, SplitMix64(seed), log)
    attackers = list(attackers)
    noise = config.noise
    if noise.enabled and noise.interrupt_period > 0:
        attackers.append(BackgroundInterrupts(noise.interrupt_period))
    attackers = _assign_actors(attackers)
    space = machine.victim_space = machine.new_space("victim", enclave=True)
    machine.victim = victim
    victim.install(machine, space)
    machine.victim_in_enclave = victim.starts_in_enclave
    for a in attackers:
        if a.colocated and not config.hyperthreading:
            raise PreconditionError(f"{a.name} needs a HyperThreading sibling core")
        with machine.attacker_context():
            a.install(machine)
    vact = machine.victim_actor
    tlb = machine.victim_tlb
    steps = iter(victim.steps())
    pending = next(steps, None)
    if pending is None:
        raise ValueError("victim emitted no steps")
    compute = access_cycles = 0
    c = _jitter(machine, pending.cycles)
    compute += c
    machine.victim_next = c
    fires = [a.first_fire() for a in attackers]
    marks = []
    log = machine.log
    end = 0
    n_att = len(attackers)
    while pending is not None:
        # choose the globally next actor; the victim wins ties
        t_v = machine.victim_next
        best = -1
        best_t = t_v
        for i in range(n_att):
            if fires[i] < best_t:
                best_t = fires[i]
                best = i
        if best >= 0:
            a = attackers[best]
            machine.now = best_t
            if a.skip_idle and machine.victim_steps == a._seen_steps:
                # nothing changed since the last firing: jump to the first
                # multiple of the period at or after the victim's next step
                p = a.period
                nxt = -(-machine.victim_next // p) * p
                fires[best] = nxt if nxt > best_t else best_t + p
                continue
            a._seen_steps = machine.victim_steps
            with machine.attacker_context():
                a.probe(machine, best_t)
            fires[best] = a.next_fire(best_t)
            continue

        now = machine.now = t_v
        op = pending.op
        lat = 0
        kind = MEMORY_OPS.get(op)
        if kind is not None:
            try:
                out = machine.access(vact, space, pending.va, kind)
            except PageFault as pf:
                walk = config.costs.page_walk
                cost = machine._victim_fault(pf, now)
                access_cycles += walk
                machine.fault_cycles += walk
                machine.victim_next += walk + cost
                # retry the same access once the exit completes
                pending = pending._replace(cycles=0)
                continue
            lat = out.latency
            if log.level == "all":
                log.add(now, 0, op, (pending.va, out.tlb_level, out.cache_level, out.dram, lat))
            else:
                log.counts[op] += 1
            if out.tlb_level == "walk":
                log.counts["walk"] += 1
        elif op == "compute":
            log.add(now, 0, "compute", None)
        elif op == "clflush":
            pa = space.physical(pending.va)
            machine.caches.flush_line(pa)
            lat = config.cache.l1_latency
            log.add(now, 0, "clflush", pending.va)
        elif op in ("eenter", "eexit"):
            if config.pcid_selective_flush:
                tlb.flush("pcid", space.pcid)
            else:
                tlb.flush("all")
            machine.victim_in_enclave = op == "eenter"
            lat = config.costs.enclave_transition
            log.add(now, 0, op, None)
        else:
            raise ValueError(f"unknown victim op {op!r}")
        access_cycles += lat
        machine.victim_steps += 1
        if pending.mark is not None:
            marks.append((now, pending.mark))
        pending = next(steps, None)
        if pending is None:
            end = now + lat
            break
        c = _jitter(machine, pending.cycles)
        compute += c
        machine.victim_next = now + lat + c

    machine.now = end
    for a in attackers:
        with machine.attacker_context():
            a.finish(machine, end)
    accounting = {
        "compute_cycles": compute,
        "access_cycles": access_cycles,
        "aex_cycles": machine.aex_cycles,
        "total_cycles": end,
    }
    return machine, end, accounting, marks


def run_scenario(config: SimConfig, victim, attackers: Iterable[AttackStrategy] = (),
                 seed: int = 0, baseline: bool = True) -> SimResult:
    """Run victim with attackers; the baseline comes from an attacker-free
    run with the same seed."""
    config.validate()
    attackers = list(attackers)
    machine, end, acct, marks = simulate(config, victim, attackers, seed)
    if attackers and baseline:
        _, base_end, base_acct, _ = simulate(config, victim, (), seed)
    else:
        base_end, base_acct = end, acct
    return SimResult(
        baseline_cycles=base_end,
        attacked_cycles=end,
        aex_count=machine.victim_space.aex_count,
        event_log=machine.log,
        observations={a.name: a.observations for a in attackers},
        accounting=acct,
        baseline_accounting=base_acct,
        attackers=attackers,
        marks=marks,
    )
