import pytest

from sgxmem.config import SimConfig
from sgxmem.paging import (AccessKind, AddressSpace, LayoutError, PageFault, UnmappedPage, aex,
                           clear_pte_trap, read_and_reset_flags, set_pte_trap, translate)
from sgxmem.tlb import TlbState

CFG = SimConfig()
PRM = (CFG.prm_base, CFG.prm_size)
PRM_PPN = CFG.prm_base >> 12
R, W, X = AccessKind.DATA_READ, AccessKind.DATA_WRITE, AccessKind.CODE_FETCH


def enclave(n=8, base_vpn=0x400, nx=False):
    sp = AddressSpace(1, (0, 1 << 36), PRM, name="victim")
    for i in range(n):
        sp.map_page(base_vpn + i, PRM_PPN + i, nx=nx)
    return sp


def test_first_access_walks_and_sets_accessed():
    sp, tlb = enclave(), TlbState()
    tr = translate(sp, 0x401000, R, tlb, CFG)
    assert tr.walked and tr.accessed_set
    assert sp.pte(0x401).accessed


def test_tlb_hit_does_not_set_accessed():
    sp, tlb = enclave(), TlbState()
    translate(sp, 0x401000, R, tlb, CFG)
    sp.pte(0x401).accessed = False
    tr = translate(sp, 0x401010, R, tlb, CFG)
    assert tr.tlb_level == "l1"
    assert not sp.pte(0x401).accessed


def test_offset_preserved():
    sp, tlb = enclave(), TlbState()
    tr = translate(sp, 0x402ABC, R, tlb, CFG)
    assert tr.pa & 0xFFF == 0xABC
    assert tr.pa >> 12 == PRM_PPN + 2


def test_not_present_faults():
    sp, tlb = enclave(), TlbState()
    set_pte_trap(sp, 0x403, "clear_present")
    with pytest.raises(PageFault) as ei:
        translate(sp, 0x403000, R, tlb, CFG)
    assert ei.value.vpn == 0x403 and ei.value.reason == "not-present"


def test_nx_faults_only_on_fetch():
    sp, tlb = enclave(), TlbState()
    set_pte_trap(sp, 0x404, "set_nx")
    with pytest.raises(PageFault):
        translate(sp, 0x404000, X, tlb, CFG)
    assert translate(sp, 0x404000, R, tlb, CFG).walked


def test_reserved_trap_and_removal():
    sp, tlb = enclave(), TlbState()
    set_pte_trap(sp, 0x405, "set_reserved")
    with pytest.raises(PageFault):
        translate(sp, 0x405000, W, tlb, CFG)
    clear_pte_trap(sp, 0x405, "set_reserved")
    tr = translate(sp, 0x405000, R, tlb, CFG)
    assert tr.walked and sp.pte(0x405).accessed


def test_unknown_trap():
    with pytest.raises(ValueError):
        set_pte_trap(enclave(), 0x400, "bogus")


def test_read_and_reset_reports_walked_pages():
    sp, tlb = enclave(), TlbState()
    translate(sp, 0x400000, R, tlb, CFG)
    translate(sp, 0x401000, R, tlb, CFG)
    flags = read_and_reset_flags(sp, [0x400, 0x401, 0x402])
    assert [(v, a) for v, a, _ in flags] == [(0x400, True), (0x401, True), (0x402, False)]
    assert not sp.pte(0x400).accessed


def test_read_and_reset_hides_tlb_hits():
    sp, tlb = enclave(), TlbState()
    translate(sp, 0x400000, R, tlb, CFG)
    read_and_reset_flags(sp, [0x400])
    translate(sp, 0x400000, R, tlb, CFG)
    assert read_and_reset_flags(sp, [0x400]) == [(0x400, False, False)]


def test_read_and_reset_keeps_tlb():
    sp, tlb = enclave(), TlbState()
    translate(sp, 0x400000, R, tlb, CFG)
    read_and_reset_flags(sp, [0x400])
    assert tlb.holds(0x400, 1)


def test_dirty_on_write_after_flush():
    sp, tlb = enclave(), TlbState()
    tr = translate(sp, 0x402000, W, tlb, CFG)
    assert tr.dirty_set
    assert read_and_reset_flags(sp, [0x402], "both") == [(0x402, True, True)]
    assert not sp.pte(0x402).dirty


def test_read_and_reset_errors():
    sp = enclave()
    with pytest.raises(UnmappedPage):
        read_and_reset_flags(sp, [0x999])
    with pytest.raises(ValueError):
        read_and_reset_flags(sp, [0x400], "present")


def test_layout_rules():
    sp = AddressSpace(1, (0, 1 << 20), PRM)
    with pytest.raises(LayoutError):
        sp.map_page(0x10, 0x100)  # enclave page outside PRM
    with pytest.raises(LayoutError):
        sp.map_page(0x1000, PRM_PPN)  # non-enclave page inside PRM
    sp.map_page(0x10, PRM_PPN)
    with pytest.raises(LayoutError):
        sp.map_page(0x10, PRM_PPN + 1)


def test_aex_full_flush_without_selective():
    cfg = SimConfig(pcid_selective_flush=False)
    sp, tlb = enclave(), TlbState()
    translate(sp, 0x400000, R, tlb, cfg)
    tlb.fill(0x900, 9, 0x10, code=False)
    cost = aex(sp, tlb, "page_fault", cfg)
    assert cost == cfg.costs.page_fault_cost
    assert not tlb.holds(0x400, 1) and not tlb.holds(0x900, 9)


def test_aex_selective_keeps_other_pcids():
    sp, tlb = enclave(), TlbState()
    tlb.fill(0x900, 9, 0x10, code=False)
    translate(sp, 0x400000, R, tlb, CFG)
    aex(sp, tlb, "ipi_shootdown", CFG)
    assert tlb.holds(0x900, 9) and not tlb.holds(0x400, 1)


def test_shootdown_makes_flags_observable_again():
    sp, tlb = enclave(), TlbState()
    translate(sp, 0x400000, R, tlb, CFG)
    read_and_reset_flags(sp, [0x400])
    aex(sp, tlb, "ipi_shootdown", CFG)
    translate(sp, 0x400000, R, tlb, CFG)
    assert sp.pte(0x400).accessed


def test_aex_counts_and_costs():
    sp, tlb = enclave(), TlbState()
    aex(sp, tlb, "ipi_shootdown", CFG)
    aex(sp, tlb, "other", CFG)
    assert sp.aex_count == 2
    assert CFG.costs.shootdown_cost < CFG.costs.page_fault_cost
    with pytest.raises(ValueError):
        aex(sp, tlb, "bogus", CFG)


def test_pte_bits_layout():
    sp = enclave()
    pte = sp.pte(0x400)
    pte.accessed = pte.dirty = True
    b = pte.bits()
    assert b & 1 and b >> 5 & 1 and b >> 6 & 1
    assert b >> 12 & ((1 << 39) - 1) == PRM_PPN


def test_fault_completeness_small_trace():
    """With every page trapped, faults replay the true page-visit order."""
    sp, tlb = enclave(), TlbState()
    pages = [0x400 + i for i in range(8)]
    visits = [0, 3, 3, 1, 7, 0, 0, 2, 5, 3]
    for v in pages:
        set_pte_trap(sp, v, "clear_present")
    seen, open_page = [], None
    for i in visits:
        va = pages[i] << 12
        while True:
            try:
                translate(sp, va, R, tlb, CFG)
                break
            except PageFault as pf:
                seen.append(pf.vpn - 0x400)
                clear_pte_trap(sp, pf.vpn, "clear_present")
                if open_page is not None:
                    set_pte_trap(sp, open_page, "clear_present")
                    tlb.invalidate_page(open_page, sp.pcid)
                open_page = pf.vpn
    collapsed = [v for k, v in enumerate(visits) if k == 0 or visits[k - 1] != v]
    assert seen == collapsed
