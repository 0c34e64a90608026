"""Named experiments.  Each returns a report dict with a fixed schema:

    scenario, seed, config_digest, recovered_secret, bit_error_rate,
    coverage, precision, aex_count, slowdown, spatial_granularity_bytes,
    event_counts, details

Ground truth is only consulted here, for scoring, after the attack has
produced its recovery from the observation trace.
"""
from __future__ import annotations

import bisect
from collections import Counter

from . import attacks as A
from . import metrics as M
from . import victims as V
from .config import SimConfig
from .dram import prm_row_range
from .engine import run_scenario
from .rng import SplitMix64, derive_seed

MB = 1 << 20

# PRM placements of the testbed BIOS settings: (size, base)
PRM_LAYOUTS = ((32 * MB, 0x88000000), (64 * MB, 0x88000000), (128 * MB, 0x80000000))


class UnknownScenario(KeyError):
    pass


def _report(name, seed, config, rep: M.AttackReport | None = None, result=None, **details) -> dict:
    rep = rep or M.AttackReport()
    out = {"scenario": name, "seed": seed, "config_digest": config.digest()}
    out.update(rep.to_dict())
    out["event_counts"] = dict(sorted(result.event_counts.items())) if result is not None else {}
    out["details"] = details
    return out


def histogram(values, bin_width: int) -> list[tuple[int, int]]:
    """(bin_left, count) rows, sorted."""
    c = Counter((v // bin_width) * bin_width for v in values)
    return sorted(c.items())


def random_key(seed: int, nbits: int, label: str = "key") -> str:
    return SplitMix64(derive_seed(seed, label)).bits(nbits)


# -- EdDSA ------------------------------------------------------------------------

def _eddsa_attack(kind: str, layout: V.EddsaLayout):
    P = layout.pages
    test_vpn = P["test_bit"] >> 12
    monitored = list(P.values())
    if kind == "pf":
        return (lambda: A.PageFaultAttack(monitored),
                lambda a: A.segment_counts(a.trace(), lambda v: v == test_vpn), "page_faults")
    if kind == "bspm":
        return (lambda: A.BSPMAttack(monitored, P["helpers"]),
                lambda a: A.segment_counts(a.trace(), lambda s: test_vpn in s), "bt_spm")
    if kind == "tspm":
        return (lambda: A.TSPMAttack(P["mul_point"], P["test_bit"]), lambda a: a.segments(), "bt_spm")
    raise ValueError(kind)


def eddsa(kind: str, config: SimConfig, seed: int, nbits: int = 512, layout: V.EddsaLayout | None = None,
          key: str | None = None) -> dict:
    layout = layout or V.EddsaLayout()
    make, extract, vector = _eddsa_attack(kind, layout)
    decoder = A.calibrate(config, lambda k: V.EddsaVictim(k, layout), make, extract,
                          seed=derive_seed(seed, "calibration"))
    key = key or random_key(seed, nbits)
    att = make()
    res = run_scenario(config, V.EddsaVictim(key, layout), [att], seed=seed)
    interior, tail = extract(att)
    recovered = decoder.decode(interior, tail)
    rec = recovered[:len(key)].ljust(len(key), "0")
    rep = M.score_recovery(rec, key, aex_count=res.aex_count, attacked_cycles=res.attacked_cycles,
                           baseline_cycles=res.baseline_cycles,
                           granularity=M.spatial_accuracy(vector, config))
    rep.recovered_secret = recovered
    return _report(f"eddsa-{kind}", seed, config, rep, res, key_bits=len(key),
                   recovered_bits=len(recovered), exact=recovered == key,
                   aex_per_bit=res.aex_count / len(key),
                   slowdown_band=M.slowdown_band(res.slowdown),
                   aex_band=M.aex_band(res.aex_count, res.baseline_cycles))


# -- Hunspell ------------------------------------------------------------------------

def hunspell_words(layout: V.DictionaryLayout, n: int, seed: int) -> list[str]:
    rng = SplitMix64(derive_seed(seed, "words"))
    return [layout.words[rng.randbelow(len(layout.words))] for _ in range(n)]


def _word_truth(layout, words):
    return [frozenset(layout.page_va(p) >> 12 for p in layout.page_list(w)) for w in words]


def _partition_details(layout):
    pf = M.signature_partition(layout, "page_fault_sequence")
    bs = M.signature_partition(layout, "bspm_page_sets")
    return {"unique_page_fault": pf.unique_count, "unique_bspm": bs.unique_count,
            "groups_page_fault": {str(k): v for k, v in pf.histogram.items()},
            "groups_bspm": {str(k): v for k, v in bs.histogram.items()},
            "dictionary_words": len(layout.words)}


def identify_words(layout, sets) -> list[str | None]:
    """Map each recovered page set to a dictionary word when the set
    identifies exactly one word."""
    by_set = {}
    for w in layout.words:
        by_set.setdefault(frozenset(layout.page_va(p) >> 12 for p in layout.page_list(w)), []).append(w)
    out = []
    for s in sets:
        cands = by_set.get(s, [])
        out.append(cands[0] if len(cands) == 1 else None)
    return out


def hunspell(kind: str, config: SimConfig, seed: int, n_words: int = 100,
             layout: V.DictionaryLayout | None = None, clean_period: int = 4978,
             collect_period: int = 128, inspection_period: int = 184) -> dict:
    layout = layout or V.DictionaryLayout.synthetic(1000, 40, seed=42)
    words = hunspell_words(layout, n_words, seed)
    victim = V.HunspellVictim(words, layout, seed=derive_seed(seed, "gaps"))
    if kind == "bspm":
        att = A.BSPMAttack(victim.data_pages(), victim.trigger_va, inspection_period)
        res = run_scenario(config, victim, [att], seed=seed)
        sets = att.operation_sets(n_words)
        attack_aex = res.aex_count
    elif kind == "htspm":
        actors = A.htspm_attack(victim.data_pages(), victim.trigger_va, clean_period, collect_period)
        res = run_scenario(config, victim, actors, seed=seed)
        # scoring only: align each recovered window with the word running then
        starts = [c for c, m in res.marks if m[1] == "trigger"]
        sets = [frozenset()] * n_words
        for t, s in actors[1].word_sets():
            i = bisect.bisect_right(starts, t) - 1
            if 0 <= i < n_words and not sets[i]:
                sets[i] = s
        attack_aex = res.aex_count
    else:
        raise ValueError(kind)
    truth = _word_truth(layout, words)
    exact = sum(s == t for s, t in zip(sets, truth))
    recovered = identify_words(layout, sets)
    correct_words = sum(r == w for r, w in zip(recovered, words))
    rep = M.AttackReport(recovered_secret=[sorted(s) for s in sets], coverage=exact / n_words,
                         aex_count=attack_aex, slowdown=res.slowdown,
                         spatial_granularity_bytes=M.spatial_accuracy("bt_spm" if kind == "bspm" else "ht_spm",
                                                                      config))
    identified = sum(r is not None for r in recovered)
    rep.precision = correct_words / identified if identified else 0.0
    return _report(f"hunspell-{kind}", seed, config, rep, res, words=n_words, exact_sets=exact,
                   identified_words=identified, correct_words=correct_words, **_partition_details(layout))


# -- Bloom filter ---------------------------------------------------------------------

def bloom_queries(members, n: int, seed: int, label: str) -> tuple[list[int], list[bool]]:
    """Half members, half non-members (even numbers), shuffled."""
    rng = SplitMix64(derive_seed(seed, label))
    ms = set(members)
    qs = [members[rng.randbelow(len(members))] for _ in range(n // 2)]
    while len(qs) < n:
        x = 2 * rng.randbelow(10 ** 6) + 2
        if x not in ms:
            qs.append(x)
    rng.shuffle(qs)
    return qs, [q in ms for q in qs]


def _bloom_durations(config, bf, queries, seed, period):
    v = V.BloomVictim(queries, bf)
    att = A.TSPMAttack(v.code_va, v.exit_va, period=period, flush=False, mode="pair")
    res = run_scenario(config, v, [att], seed=seed)
    return att.durations, res


def bloom(config: SimConfig, seed: int, n_queries: int = 1000, n_members: int = 500, fill: float = 0.5,
          period: int = 132) -> dict:
    bf, members = V.BloomFilter.with_fill(n_members, fill)
    # profiling on attacker-chosen queries with known membership
    pq, plabels = bloom_queries(members, 400, seed, "profiling")
    pd, _ = _bloom_durations(config, bf, pq, derive_seed(seed, "profiling-run"), period)
    if len(pd) != len(pq):
        raise RuntimeError("profiling run lost queries")
    clf = A.ThresholdClassifier.fit([d for d, m in zip(pd, plabels) if not m],
                                    [d for d, m in zip(pd, plabels) if m])
    qs, labels = bloom_queries(members, n_queries, seed, "queries")
    durs, res = _bloom_durations(config, bf, qs, seed, period)
    pred = [clf(d) == 1 for d in durs]
    pred = pred[:len(labels)] + [False] * max(0, len(labels) - len(pred))
    cov_m, prec_m = M.coverage_precision(pred, labels, True)
    cov_n, prec_n = M.coverage_precision(pred, labels, False)
    rep = M.AttackReport(recovered_secret=[int(p) for p in pred], coverage=cov_m, precision=prec_m,
                         aex_count=res.aex_count, slowdown=res.slowdown,
                         spatial_granularity_bytes=M.spatial_accuracy("bt_spm", config))
    return _report("bloom-tspm", seed, config, rep, res, threshold=clf.threshold,
                   fill_ratio=bf.fill_ratio, measured=len(durs),
                   member_coverage=cov_m, member_precision=prec_m,
                   nonmember_coverage=cov_n, nonmember_precision=prec_n,
                   histogram=histogram(durs, 100))


# -- Prime+Probe on square-and-multiply --------------------------------------------------

def elgamal(config: SimConfig, seed: int, nbits: int = 403, period: int = 1000) -> dict:
    key = random_key(seed, nbits)
    v = V.SquareMultiplyVictim(key)
    att = A.PrimeProbeAttack(v.square_va, v.multiply_va, period)
    res = run_scenario(config, v, [att], seed=seed)
    recovered = A.decode_square_multiply(att.observations)
    rec = recovered[:nbits].ljust(nbits, "0")
    rep = M.score_recovery(rec, key, aex_count=res.aex_count, attacked_cycles=res.attacked_cycles,
                           baseline_cycles=res.baseline_cycles,
                           granularity=M.spatial_accuracy("l3_prime_probe", config))
    rep.recovered_secret = recovered
    return _report("elgamal-pp", seed, config, rep, res, key_bits=nbits, recovered_bits=len(recovered),
                   bit_errors=round(rep.bit_error_rate * nbits), rounds=len(att.observations))


# -- cache-DRAM on Gap ---------------------------------------------------------------

def gap(config: SimConfig, seed: int, invocations: int = 10_000, llc_period: int = 8000,
        dram_period: int = 400) -> dict:
    ops = V.random_gap_operands(invocations, derive_seed(seed, "operands"))
    v = V.GapVictim(ops)
    actors = A.cache_dram_attack(v.target_va, llc_period, dram_period)
    res = run_scenario(config, v, actors, seed=seed)
    detections = actors[1].detections
    # scoring only: which invocation was running at each detection
    entries = [c for c, m in res.marks if m[1] == "entry"]
    hit = [False] * invocations
    for d in detections:
        i = bisect.bisect_right(entries, d) - 1
        if i >= 0:
            hit[i] = True
    small = [V.is_small(a) and V.is_small(b) for a, b in ops]
    n_small = sum(small)
    tp = sum(h and s for h, s in zip(hit, small))
    fp = sum(h and not s for h, s in zip(hit, small))
    rep = M.AttackReport(recovered_secret=None, coverage=tp / n_small if n_small else 0.0,
                         precision=tp / (tp + fp) if tp + fp else 0.0, aex_count=res.aex_count,
                         slowdown=res.slowdown, spatial_granularity_bytes=M.spatial_accuracy("cache_dram", config))
    return _report("gap-cachedram", seed, config, rep, res, invocations=invocations,
                   small_branch=n_small, detected=tp,
                   false_positive_rate=fp / (invocations - n_small) if invocations > n_small else 0.0,
                   detection_events=len(detections), slowdown_band=M.slowdown_band(res.slowdown))


# -- DRAMA latency histogram ------------------------------------------------------------

def drama_hist(config: SimConfig, seed: int, n_probes: int = 100_000, bin_width: int = 4) -> dict:
    samples, truth = A.drama_latency_histogram(config, n_probes, seed)
    threshold = A.two_mode_threshold(samples)
    pred = ["hit" if x <= threshold else "conflict" for x in samples]
    accuracy = sum(p == t for p, t in zip(pred, truth)) / len(samples)
    cov, prec = M.coverage_precision(pred, truth, "hit")
    rep = M.AttackReport(coverage=cov, precision=prec, aex_count=0,
                         spatial_granularity_bytes=M.spatial_accuracy("drama", config))
    hits = [x for x, t in zip(samples, truth) if t == "hit"]
    conflicts = [x for x, t in zip(samples, truth) if t == "conflict"]
    return _report("drama-hist", seed, config, rep, None, probes=n_probes, threshold=threshold,
                   accuracy=accuracy, hit_mean=sum(hits) / max(1, len(hits)),
                   conflict_mean=sum(conflicts) / max(1, len(conflicts)),
                   histogram=histogram(samples, bin_width))


# -- TLB probing of a binary search ----------------------------------------------------

def _binsearch_partition(config, keys, seed, period, coarse):
    v = V.BinarySearchVictim(keys)
    att = A.TlbProbeAttack(period=period)
    res = run_scenario(config, v, [att], seed=seed)
    # scoring only: split rounds by query
    starts, seen = [], set()
    for c, m in res.marks:
        if m[0] not in seen:
            seen.add(m[0])
            starts.append(c)
    sig = [[] for _ in keys]
    for now, counts in att.observations:
        i = bisect.bisect_right(starts, now) - 1
        act = tuple(s for s, c in zip(att.dtlb_sets, counts) if c > 0)
        if act and 0 <= i < len(keys):
            sig[i].append(act)
    secrets = {}
    for k, s in zip(keys, sig):
        secrets[k] = frozenset(x for t in s for x in t) if coarse else tuple(s)
    groups = {}
    for k, s in secrets.items():
        groups.setdefault(s, set()).add(k)
    return {frozenset(g) for g in groups.values()}, res


def binsearch_oracle(keys, coarse: bool) -> set[frozenset]:
    groups = {}
    for k in keys:
        pages = V.binary_search_pages(k)
        groups.setdefault(frozenset(pages) if coarse else tuple(pages), set()).add(k)
    return {frozenset(g) for g in groups.values()}


def tlb_binsearch(config: SimConfig, seed: int, n_keys: int = 512, full_period: int = 400,
                  sampled_period: int = 7000) -> dict:
    rng = SplitMix64(derive_seed(seed, "keys"))
    keys = sorted({rng.randbelow(V.TABLE_LEN) for _ in range(n_keys)})
    full, res = _binsearch_partition(config, keys, seed, full_period, coarse=False)
    sampled, _ = _binsearch_partition(config, keys, seed, sampled_period, coarse=True)
    oracle_full = binsearch_oracle(keys, False)
    oracle_sampled = binsearch_oracle(keys, True)
    rep = M.AttackReport(aex_count=res.aex_count, slowdown=res.slowdown,
                         spatial_granularity_bytes=config.page_size)
    return _report("tlb-binsearch", seed, config, rep, res, keys=len(keys),
                   classes_full_rate=len(full), classes_sampled=len(sampled),
                   oracle_classes_full_rate=len(oracle_full), oracle_classes_sampled=len(oracle_sampled),
                   full_rate_matches_oracle=full == oracle_full,
                   sampled_matches_oracle=sampled == oracle_sampled)


# -- static tables --------------------------------------------------------------------

def granularity(config: SimConfig, seed: int) -> dict:
    rows = M.granularity_table(config)
    return _report("granularity-table", seed, config, None, None, rows=rows)


def rowrange_rows(config: SimConfig = SimConfig()) -> list[dict]:
    rows = []
    for size, base in PRM_LAYOUTS:
        lo, hi = prm_row_range(base, size, config.dram)
        rows.append({"prm_size": M.format_bytes(size),
                     "prm_range": f"0x{base:08X}~0x{base + size - 1:08X}",
                     "row_range": f"0x{lo:04X}~0x{hi:04X}"})
    return rows


def rowrange(config: SimConfig, seed: int) -> dict:
    return _report("rowrange-table", seed, config, None, None, rows=rowrange_rows(config))


SCENARIOS = {
    "eddsa-pf": lambda c, s: eddsa("pf", c, s),
    "eddsa-bspm": lambda c, s: eddsa("bspm", c, s),
    "eddsa-tspm": lambda c, s: eddsa("tspm", c, s),
    "hunspell-bspm": lambda c, s: hunspell("bspm", c, s),
    "hunspell-htspm": lambda c, s: hunspell("htspm", c, s),
    "bloom-tspm": bloom,
    "elgamal-pp": elgamal,
    "gap-cachedram": gap,
    "drama-hist": drama_hist,
    "tlb-binsearch": tlb_binsearch,
    "granularity-table": granularity,
    "rowrange-table": rowrange,
}


def run(name: str, config: SimConfig, seed: int = 0) -> dict:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(name) from None
    return fn(config, seed)
