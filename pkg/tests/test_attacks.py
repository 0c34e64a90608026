import pytest
from conftest import ListVictim

from sgxmem import attacks as A
from sgxmem import victims as V
from sgxmem.config import SimConfig
from sgxmem.engine import Step, run_scenario
from sgxmem.rng import SplitMix64, derive_seed
from sgxmem.scenarios import random_key

QUIET = SimConfig().noiseless()


# -- clock and classifiers -------------------------------------------------------

def test_clock_exact_without_noise():
    c = A.SmuggledClock(0.0, 0.0, None)
    assert [c.read(t) for t in (5, 900, 12345)] == [5, 900, 12345]


def test_clock_stale_read_repeats_previous():
    c = A.SmuggledClock(0.0, 1.0, SplitMix64(1))
    first = c.read(100)
    assert c.read(5000) == first


def test_clock_monte_carlo_three_sigma():
    c = A.SmuggledClock(8.0, 0.0, SplitMix64(2024))
    errs = [A.smuggled_clock_read(c, 10_000) - 10_000 for _ in range(100_000)]
    within = sum(abs(e) <= 24 for e in errs) / len(errs)
    assert within >= 0.99
    mean = sum(errs) / len(errs)
    sd = (sum((e - mean) ** 2 for e in errs) / len(errs)) ** 0.5
    assert abs(mean) < 0.1 and 7.0 < sd < 8.5


def test_threshold_classifier():
    clf = A.ThresholdClassifier.fit([19_700, 19_800], [27_900, 28_000])
    assert clf(27_900) == 1 and clf(19_700) == 0
    with pytest.raises(ValueError):
        A.ThresholdClassifier.fit([5], [1])
    with pytest.raises(ValueError):
        A.ThresholdClassifier.fit([], [1])


def test_nearest_centroid():
    nc = A.NearestCentroid.fit({"a": [(0, 0), (2, 0)], "b": [(10, 10)]})
    assert nc((1, 1)) == "a" and nc((9, 8)) == "b"
    with pytest.raises(ValueError):
        A.NearestCentroid.fit({"a": []})


def test_segment_counts():
    items = [9, 1, 2, 1, 1, 2, 1, 3]
    interior, tail = A.segment_counts(items, lambda v: v == 1)
    assert interior == [2, 1, 2]
    assert tail == 1
    assert A.segment_counts([2, 3], lambda v: v == 1) == ([], None)


def test_segment_decoder_fit_rejects_mismatch():
    with pytest.raises(ValueError):
        A.fit_segment_decoder([("011", [1], 2)])


def test_two_mode_threshold():
    rng = SplitMix64(3)
    xs = [round(rng.gauss(200, 8)) for _ in range(5000)] + [round(rng.gauss(340, 8)) for _ in range(5000)]
    xs += [10_000, 0]  # outliers must not capture a cluster
    thr = A.two_mode_threshold(xs)
    assert 250 < thr < 290
    with pytest.raises(ValueError):
        A.two_mode_threshold([])


# -- page-level attacks on EdDSA -------------------------------------------------------

def test_page_fault_counts_and_decode():
    lay = V.EddsaLayout()
    att = A.PageFaultAttack(list(lay.pages.values()))
    run_scenario(QUIET, V.EddsaVictim("10", lay), [att])
    test_vpn = lay.pages["test_bit"] >> 12
    interior, tail = A.segment_counts(att.trace(), lambda v: v == test_vpn)
    assert len(interior) == 1 and tail is not None
    dec = A.calibrate(QUIET, lambda k: V.EddsaVictim(k, lay),
                      lambda: A.PageFaultAttack(list(lay.pages.values())),
                      lambda a: A.segment_counts(a.trace(), lambda v: v == test_vpn))
    assert dec.decode(interior, tail) == "10"


def test_page_fault_full_sequence_matches_collapsed_visits():
    lay = V.EddsaLayout()
    att = A.PageFaultAttack(list(lay.pages.values()))
    key = "1101"
    run_scenario(QUIET, V.EddsaVictim(key, lay), [att])
    visits = [s.va >> 12 for s in V.eddsa_scalar_mul(key, lay)]
    collapsed = [v for i, v in enumerate(visits) if i == 0 or visits[i - 1] != v]
    assert att.trace() == collapsed


def test_no_monitored_pages_empty_trace():
    att = A.PageFaultAttack([])
    res = run_scenario(QUIET, V.EddsaVictim("1"), [att])
    assert att.trace() == [] and res.aex_count == 0


def test_bspm_sets_differ_by_bit():
    lay = V.EddsaLayout()
    att = A.BSPMAttack(list(lay.pages.values()), lay.pages["helpers"])
    run_scenario(QUIET, V.EddsaVictim("10", lay), [att])
    assert att.trace()
    assert all(isinstance(s, frozenset) for s in att.trace())


def test_bspm_fewer_aex_than_page_faults():
    lay = V.EddsaLayout()
    key = random_key(5, 32)
    pf = A.PageFaultAttack(list(lay.pages.values()))
    bs = A.BSPMAttack(list(lay.pages.values()), lay.pages["helpers"])
    r_pf = run_scenario(QUIET, V.EddsaVictim(key, lay), [pf])
    r_bs = run_scenario(QUIET, V.EddsaVictim(key, lay), [bs])
    assert 0 < r_bs.aex_count < r_pf.aex_count


def test_bspm_idle_victim_appends_nothing():
    steps = [Step("compute", 0, 5000) for _ in range(5)]
    att = A.BSPMAttack([0x400000], 0x401000)
    run_scenario(QUIET, ListVictim(steps, [(0x400000, False), (0x401000, False)]), [att])
    assert att.observations == []


def test_bspm_operation_sets():
    att = A.BSPMAttack([0x1000, 0x2000], 0x3000)
    att.observations = [(1, frozenset({3, 1})), (2, frozenset({3, 2})), (3, frozenset({1}))]
    assert att.operation_sets(4) == [frozenset({2}), frozenset({1}), frozenset(), frozenset()]


def _tspm_decoder(lay):
    return A.calibrate(QUIET, lambda k: V.EddsaVictim(k, lay),
                       lambda: A.TSPMAttack(lay.pages["mul_point"], lay.pages["test_bit"]),
                       lambda a: a.segments())


def test_tspm_durations_by_bit():
    lay = V.EddsaLayout()
    att = A.TSPMAttack(lay.pages["mul_point"], lay.pages["test_bit"])
    run_scenario(QUIET, V.EddsaVictim("1001", lay), [att])
    interior, _ = att.segments()
    assert len(interior) == 3
    d1, d0, _ = interior
    assert d1 > d0
    # per-bit durations track the nominal 27,900 / 19,700 cycle costs
    assert abs(d1 - d0 - 8_200) < 1_500


def test_tspm_noiseless_key_sample():
    lay = V.EddsaLayout()
    dec = _tspm_decoder(lay)
    for i in range(100):
        key = SplitMix64(derive_seed(i, "tspm-sample")).bits(24)
        att = A.TSPMAttack(lay.pages["mul_point"], lay.pages["test_bit"])
        res = run_scenario(QUIET, V.EddsaVictim(key, lay), [att], seed=i, baseline=False)
        assert dec.decode(*att.segments()) == key
        assert res.aex_count <= 2 * len(key) + 1


def test_tspm_mode_validation():
    with pytest.raises(ValueError):
        A.TSPMAttack(0x1000, 0x2000, mode="other")


def test_multi_checkpoint_nearest_centroid():
    profiles = [(6000, 9000, 6000, 9000, 6000), (9000, 6000, 9000, 6000, 9000), (7500,) * 5]
    cfg = SimConfig()

    def vector(cls, seed):
        v = V.MultiCheckpointVictim(cls, profiles)
        atts = [A.TSPMAttack(a, b, flush=False, mode="pair") for a, b in v.checkpoint_pages()]
        run_scenario(cfg, v, atts, seed=seed, baseline=False)
        return [att.durations[0] for att in atts]

    training = {c: [vector(c, 100 + s) for s in range(3)] for c in range(3)}
    clf = A.NearestCentroid.fit(training)
    for c in range(3):
        for s in range(5):
            assert clf(vector(c, 500 + 10 * c + s)) == c


# -- HT-SPM --------------------------------------------------------------------------

def _hunspell_case(n_words=12):
    lay = V.DictionaryLayout.synthetic(300, 24, seed=9)
    words = lay.words[::25][:n_words]
    return lay, words, V.HunspellVictim(words, lay, seed=4)


def test_htspm_no_aex_and_exact_sets():
    lay, words, v = _hunspell_case()
    actors = A.htspm_attack(v.data_pages(), v.trigger_va)
    res = run_scenario(QUIET, v, actors)
    assert res.aex_count == 0
    sets = [s for _, s in actors[1].word_sets()]
    truth = [frozenset(lay.page_va(p) >> 12 for p in lay.page_list(w)) for w in words]
    assert sum(s == t for s, t in zip(sets, truth)) >= len(words) - 1


def test_htspm_without_cleaning_sees_first_visits_only():
    lay, words, v = _hunspell_case()
    actors = A.htspm_attack(v.data_pages(), v.trigger_va, clean_period=A.NEVER)
    run_scenario(QUIET, v, actors)
    # every page (trigger included) is reported once, at its first walk
    reported = [p for _, s in actors[1].observations for p in s]
    assert len(reported) == len(set(reported))
    visited = {lay.page_va(p) >> 12 for w in words for p in lay.page_list(w)}
    assert set(reported) == visited | {v.trigger_va >> 12}
    assert len(actors[1].word_sets()) == 1


def test_split_by_trigger():
    obs = [(1, frozenset({5})), (2, frozenset({9, 1})), (3, frozenset({2})), (4, frozenset({9}))]
    assert A.split_by_trigger(obs, 9) == [(2, frozenset({1, 2})), (4, frozenset())]


# -- Prime+Probe -------------------------------------------------------------------------

def test_prime_probe_noiseless_exact():
    key = random_key(1, 64)
    v = V.SquareMultiplyVictim(key)
    att = A.PrimeProbeAttack(v.square_va, v.multiply_va)
    run_scenario(QUIET, v, [att])
    assert A.decode_square_multiply(att.observations, len(key)) == key


def test_prime_probe_idle_rounds_clean():
    steps = [Step("compute", 0, 4000) for _ in range(5)]
    att = A.PrimeProbeAttack(0x800040, 0x801080)
    v = ListVictim(steps, [(0x800000, False), (0x801000, False)])
    run_scenario(QUIET, v, [att])
    assert att.observations and not any(o[1] or o[2] for o in att.observations)


def test_decode_square_multiply_bursts():
    rounds = [(0, 1, 0)] * 4 + [(0, 0, 0)] * 5 + [(0, 1, 0)] * 3 + [(0, 0, 1)] * 3 + [(0, 0, 0)] * 5
    assert A.decode_square_multiply(rounds) == "01"
    assert A.decode_square_multiply(rounds, nbits=4) == "0100"
    # a single dropped round inside a burst is bridged
    gappy = [(0, 1, 0)] * 2 + [(0, 0, 0)] + [(0, 1, 0)] * 2
    assert A.decode_square_multiply(gappy) == "0"


# -- DRAMA / TLB probing --------------------------------------------------------------------

D_VA = 0x700040
D_PAGES = [(0x700000, False)]


def _drama_run(steps):
    att = A.DramaAttack(D_VA, period=400)
    run_scenario(QUIET, ListVictim(steps, D_PAGES), [att], baseline=False)
    return att


def test_drama_row_hit_when_victim_touches_d():
    steps = []
    for _ in range(10):
        steps += [Step("read", D_VA, 700), Step("clflush", D_VA, 10)]
    att = _drama_run(steps)
    assert "hit" in att.truth
    assert att.detections


def test_drama_conflict_when_victim_silent():
    att = _drama_run([Step("compute", 0, 800) for _ in range(10)])
    assert att.truth and set(att.truth) == {"conflict"}
    assert att.detections == []


def test_hit_window():
    lo, hi = A.hit_window(QUIET)
    assert lo == hi == QUIET.cache.l3_latency + QUIET.dram.latency_hit
    lo, hi = A.hit_window(SimConfig())
    assert lo < 200 < hi < QUIET.cache.l3_latency + QUIET.dram.latency_conflict


def test_tlb_probe_sees_victim_set():
    page = 0x600000 + 5 * 4096  # dTLB set 5 (vpn 0x605)
    steps = [Step("read", page, 2000) for _ in range(6)]
    steps = [s for st in steps for s in (st, Step("eexit", 0, 10), Step("eenter", 0, 10))]
    att = A.TlbProbeAttack(period=400)
    run_scenario(QUIET, ListVictim(steps, [(page, False)]), [att])
    active = att.active_sets()
    assert active and all(5 in a for a in active)
    assert {s for a in active for s in a} == {5}
