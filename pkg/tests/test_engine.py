import pytest
from conftest import ListVictim, reads

from sgxmem.attacks import HTSPMCleaner, PageFaultAttack
from sgxmem.config import SimConfig
from sgxmem.engine import (AttackStrategy, PreconditionError, SecretAccessError, Step, fire_schedule,
                           run_scenario, simulate, step_interleave)
from sgxmem.victims import EddsaLayout, EddsaVictim

PAGES = [(0x400000, False), (0x401000, False)]


def ten_reads():
    return ListVictim(reads([0x400000, 0x401000] * 5), PAGES)


def test_no_attackers_no_interference(quiet):
    res = run_scenario(quiet, ten_reads(), [])
    assert res.attacked_cycles == res.baseline_cycles
    assert res.aex_count == 0
    assert res.slowdown == 1.0


def test_same_seed_identical_logs():
    cfg = SimConfig()
    a = run_scenario(cfg, ten_reads(), [], seed=3)
    b = run_scenario(cfg, ten_reads(), [], seed=3)
    assert a.event_log == b.event_log
    assert len(a.event_log) > 0


def test_page_fault_attack_costs_time(quiet):
    lay = EddsaLayout()
    att = PageFaultAttack(list(lay.pages.values()))
    res = run_scenario(quiet, EddsaVictim("1011", lay), [att])
    assert res.aex_count > 0
    assert res.attacked_cycles > res.baseline_cycles


def test_fire_schedule_merge():
    order = fire_schedule({1: 100}, victim_latency=40, horizon=160)
    assert order == [(40, 0), (80, 0), (100, 1), (120, 0), (160, 0)]


def test_fire_schedule_two_periods():
    order = fire_schedule({1: 132, 2: 7000}, horizon=7000)
    first2 = next(i for i, (_, a) in enumerate(order) if a == 2)
    assert sum(1 for _, a in order[:first2] if a == 1) == 53


def test_tie_break_lower_id():
    assert step_interleave({0: 10, 1: 10, 2: 5}) == (2, 5)
    assert step_interleave({0: 10, 1: 10}) == (0, 10)


@pytest.mark.parametrize("period", [132, 184, 482, 4978, 7000])
def test_preset_periods_accepted(quiet, period):
    class Tick(AttackStrategy):
        name = "tick"
        skip_idle = False

        def __init__(self, p):
            super().__init__()
            self.period = p

        def probe(self, machine, now):
            self.observations.append(now)

    t = Tick(period)
    victim = ListVictim(reads([0x400000] * 20, cycles=3000), PAGES)
    run_scenario(quiet, victim, [t])
    assert t.observations[:3] == [period, 2 * period, 3 * period]


def test_colocated_needs_hyperthreading():
    cfg = SimConfig(hyperthreading=False).noiseless()
    with pytest.raises(PreconditionError):
        run_scenario(cfg, ten_reads(), [HTSPMCleaner([0x400000])])


def test_empty_victim_rejected(quiet):
    with pytest.raises(ValueError):
        run_scenario(quiet, ListVictim([], PAGES), [])


def test_unknown_op_rejected(quiet):
    with pytest.raises(ValueError):
        run_scenario(quiet, ListVictim([Step("jump", 0, 1)], PAGES), [])


def test_attacker_cannot_read_secret(quiet):
    class Peek(AttackStrategy):
        name = "peek"
        period = 50

        def probe(self, machine, now):
            machine.victim.ground_truth()

    v = EddsaVictim("1")
    with pytest.raises(SecretAccessError):
        run_scenario(quiet, v, [Peek()])
    assert v.ground_truth() == "1"  # harness access is fine


def test_page_fault_retries_and_counts(quiet):
    att = PageFaultAttack([0x400000, 0x401000])
    res = run_scenario(quiet, ten_reads(), [att])
    assert att.trace() == [0x400, 0x401] * 5
    assert res.aex_count == 10
    assert res.event_counts["read"] == 10


def test_victim_marks_recorded(quiet):
    steps = [Step("read", 0x400000, 10, "a"), Step("read", 0x401000, 10, "b")]
    res = run_scenario(quiet, ListVictim(steps, PAGES), [])
    assert [m for _, m in res.marks] == ["a", "b"]
    assert res.marks[0][0] < res.marks[1][0]


def test_eexit_flushes_victim_tlb(quiet):
    steps = [Step("read", 0x400000, 10), Step("eexit", 0, 10), Step("eenter", 0, 10),
             Step("read", 0x400000, 10)]
    machine, *_ = simulate(quiet, ListVictim(steps, PAGES), [])
    walks = [r for r in machine.log.of_kind("read") if r[3][1] == "walk"]
    assert len(walks) == 2


def test_clflush_forces_dram(quiet):
    steps = []
    for _ in range(4):
        steps += [Step("read", 0x400040, 100), Step("clflush", 0x400040, 10)]
    machine, *_ = simulate(quiet, ListVictim(steps, PAGES), [])
    assert all(r[3][3] is not None for r in machine.log.of_kind("read"))


def test_compute_jitter_only_when_noisy():
    v = ListVictim(reads([0x400000] * 10, cycles=10_000), PAGES)
    quiet = run_scenario(SimConfig().noiseless(), v, [])
    noisy = run_scenario(SimConfig(), v, [], seed=1)
    assert quiet.baseline_cycles != noisy.baseline_cycles


def test_log_levels():
    cfg = SimConfig(log_level="none").noiseless()
    res = run_scenario(cfg, ten_reads(), [])
    assert len(res.event_log) == 0
    assert res.event_counts["read"] == 10


def test_background_interrupts_from_config():
    cfg = SimConfig().with_overrides({"noise": {"interrupt_period": 5000}})
    v = ListVictim(reads([0x400000] * 10, cycles=3000), PAGES)
    res = run_scenario(cfg, v, [])
    assert res.aex_count > 0
    assert res.event_counts["aex"] == res.aex_count
    quiet = run_scenario(cfg.noiseless(), v, [])
    assert quiet.aex_count == 0
