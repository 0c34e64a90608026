import pytest

from sgxmem import scenarios as S
from sgxmem.config import SimConfig
from sgxmem.victims import DictionaryLayout

DEFAULT = SimConfig()


@pytest.mark.parametrize("kind", ["pf", "bspm", "tspm"])
def test_eddsa_short_key_under_noise(kind):
    rep = S.eddsa(kind, DEFAULT, 3, nbits=64)
    assert rep["bit_error_rate"] == 0
    assert rep["aex_count"] > 0
    assert rep["spatial_granularity_bytes"] == 4096


def test_eddsa_aex_bands():
    pf = S.eddsa("pf", DEFAULT.noiseless(), 3, nbits=64)
    ts = S.eddsa("tspm", DEFAULT.noiseless(), 3, nbits=64)
    assert pf["slowdown"] > ts["slowdown"] > 1.0
    assert pf["details"]["aex_band"] == "high"


def test_hunspell_bspm_exact():
    rep = S.hunspell("bspm", DEFAULT, 3, n_words=30)
    assert rep["details"]["exact_sets"] == 30
    assert rep["aex_count"] >= 30


def test_hunspell_partition_details():
    rep = S.hunspell("htspm", DEFAULT, 3, n_words=10)
    d = rep["details"]
    assert d["unique_page_fault"] >= d["unique_bspm"]
    assert d["dictionary_words"] == 1000
    assert rep["aex_count"] == 0


def test_identify_words():
    lay = DictionaryLayout.synthetic(100, 20, seed=1)
    w = lay.words[0]
    s = frozenset(lay.page_va(p) >> 12 for p in lay.page_list(w))
    got = S.identify_words(lay, [s, frozenset({0})])
    assert got[1] is None
    assert got[0] in (w, None)


def test_tlb_binsearch_partitions():
    rep = S.tlb_binsearch(DEFAULT.noiseless(), 3, n_keys=96)
    d = rep["details"]
    assert d["full_rate_matches_oracle"] and d["sampled_matches_oracle"]
    assert d["classes_sampled"] < d["classes_full_rate"]
    assert rep["aex_count"] == 0


def test_binsearch_oracle_all_keys():
    keys = range(16384)
    fine = S.binsearch_oracle(keys, coarse=False)
    coarse = S.binsearch_oracle(keys, coarse=True)
    assert len(coarse) < len(fine)
    assert sum(len(b) for b in fine) == 16384


def test_rowrange_rows():
    assert [r["row_range"] for r in S.rowrange_rows()] == ["0x1100~0x113F", "0x1100~0x117F", "0x1000~0x10FF"]


def test_random_key_deterministic():
    assert S.random_key(1, 32) == S.random_key(1, 32)
    assert S.random_key(1, 32) != S.random_key(2, 32)


def test_bloom_queries_balanced():
    members = list(range(1, 200, 2))
    qs, labels = S.bloom_queries(members, 100, 1, "q")
    assert len(qs) == 100 and sum(labels) == 50
