"""Scoring of attack runs, signature partitions and the spatial granularity
of each attack vector."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

from .config import SimConfig

KB = 1 << 10
MB = 1 << 20


class LengthMismatch(ValueError):
    pass


class UnknownVector(KeyError):
    pass


# -- spatial granularity -----------------------------------------------------------

VECTORS = (
    "l1_prime_probe",
    "l2_prime_probe",
    "l3_prime_probe",
    "page_faults",
    "bt_spm",
    "ht_spm",
    "drama",
    "cache_dram",
)

VECTOR_LABELS = {
    "l1_prime_probe": "i/dCache Prime+Probe",
    "l2_prime_probe": "L2 Cache Prime+Probe",
    "l3_prime_probe": "L3 Cache Prime+Probe",
    "page_faults": "page faults",
    "bt_spm": "B/T-SPM",
    "ht_spm": "HT-SPM",
    "drama": "cross-enclave DRAMA",
    "cache_dram": "cache-DRAM",
}

# DRAMA resolves the 1KB slice of a page that one (channel, bank) cell holds
DRAMA_CELLS_PER_ROW_SLICE = 8


def spatial_accuracy(vector: str, config: SimConfig = SimConfig()) -> int:
    """Bytes of enclave memory one observable unit of ``vector`` stands for."""
    cache = config.cache
    if vector == "l1_prime_probe":
        return config.prm_size // (cache.l1i or cache.l1d).sets
    if vector == "l2_prime_probe":
        return config.prm_size // cache.l2.sets
    if vector == "l3_prime_probe":
        return config.prm_size // cache.l3.sets
    if vector in ("page_faults", "bt_spm", "ht_spm"):
        return config.page_size
    if vector == "drama":
        return config.dram.row_size // DRAMA_CELLS_PER_ROW_SLICE
    if vector == "cache_dram":
        return cache.line_size
    raise UnknownVector(vector)


def format_bytes(n: int) -> str:
    if n >= MB and n % MB == 0:
        return f"{n // MB}MB"
    if n >= KB and n % KB == 0:
        return f"{n // KB}KB"
    return f"{n}B"


def granularity_table(config: SimConfig = SimConfig()) -> list[dict]:
    return [{"vector": VECTOR_LABELS[v], "id": v, "accuracy_bytes": spatial_accuracy(v, config),
             "accuracy": format_bytes(spatial_accuracy(v, config))} for v in VECTORS]


# -- signature partitions ---------------------------------------------------------

CHANNELS = ("page_fault_sequence", "bspm_page_sets")


def collapse_runs(seq) -> tuple:
    """Drop consecutive duplicates: a page-fault trace only shows page changes."""
    out = []
    for x in seq:
        if not out or out[-1] != x:
            out.append(x)
    return tuple(out)


def signature(pages, channel: str):
    if channel == "page_fault_sequence":
        return collapse_runs(pages)
    if channel == "bspm_page_sets":
        return frozenset(pages)
    raise ValueError(f"unknown channel {channel!r}")


@dataclass
class SignaturePartition:
    groups: dict = field(default_factory=dict)  # signature -> frozenset of secrets

    @property
    def histogram(self) -> dict[int, int]:
        """group size -> number of secrets in groups of that size"""
        h = Counter()
        for members in self.groups.values():
            h[len(members)] += len(members)
        return dict(sorted(h.items()))

    @property
    def n_secrets(self) -> int:
        return sum(len(m) for m in self.groups.values())

    @property
    def unique_count(self) -> int:
        return sum(1 for m in self.groups.values() if len(m) == 1)

    @property
    def unique_fraction(self) -> float:
        n = self.n_secrets
        return self.unique_count / n if n else 0.0

    def blocks(self) -> set[frozenset]:
        return set(self.groups.values())

    def refines(self, other: "SignaturePartition") -> bool:
        """Every block of self lies inside one block of ``other``."""
        owner = {s: i for i, block in enumerate(other.blocks()) for s in block}
        for block in self.blocks():
            ids = {owner.get(s) for s in block}
            if len(ids) != 1 or None in ids:
                return False
        return True


def signature_partition(page_lists: dict, channel: str) -> SignaturePartition:
    """Group secrets (e.g. words) by identical observable signature.

    ``page_lists`` maps each secret to the ordered list of pages its
    execution touches (a ``DictionaryLayout`` provides ``page_list``).
    """
    if hasattr(page_lists, "page_list") and hasattr(page_lists, "words"):
        page_lists = {w: page_lists.page_list(w) for w in page_lists.words}
    groups = defaultdict(set)
    for secret, pages in page_lists.items():
        groups[signature(pages, channel)].add(secret)
    return SignaturePartition({k: frozenset(v) for k, v in groups.items()})


# -- recovery scoring ------------------------------------------------------------

@dataclass
class AttackReport:
    recovered_secret: object = None
    bit_error_rate: float | None = None
    coverage: float | None = None
    precision: float | None = None
    aex_count: int = 0
    slowdown: float | None = None
    spatial_granularity_bytes: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def bit_error_rate(recovered, truth) -> float:
    if len(recovered) != len(truth):
        raise LengthMismatch(f"recovered length {len(recovered)} != truth length {len(truth)}")
    if not truth:
        return 0.0
    return sum(a != b for a, b in zip(recovered, truth)) / len(truth)


def coverage_precision(predicted, actual, positive=True) -> tuple[float, float]:
    """Coverage (recall) and precision of ``positive`` labels."""
    if len(predicted) != len(actual):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(actual)} labels")
    tp = sum(p == positive and a == positive for p, a in zip(predicted, actual))
    fn = sum(p != positive and a == positive for p, a in zip(predicted, actual))
    fp = sum(p == positive and a != positive for p, a in zip(predicted, actual))
    cov = tp / (tp + fn) if tp + fn else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    return cov, prec


def score_recovery(recovered=None, truth=None, predicted=None, actual=None, positive=True,
                   aex_count: int = 0, attacked_cycles: int | None = None,
                   baseline_cycles: int | None = None, granularity: int | None = None) -> AttackReport:
    rep = AttackReport(recovered_secret=recovered, aex_count=aex_count,
                       spatial_granularity_bytes=granularity)
    if recovered is not None and truth is not None:
        rep.bit_error_rate = bit_error_rate(recovered, truth)
    if predicted is not None and actual is not None:
        rep.coverage, rep.precision = coverage_precision(predicted, actual, positive)
    if attacked_cycles is not None and baseline_cycles:
        rep.slowdown = attacked_cycles / baseline_cycles
    return rep


# -- qualitative bands -------------------------------------------------------------

def slowdown_band(slowdown: float) -> str:
    if slowdown < 1.05:
        return "minimal"
    if slowdown < 2.0:
        return "modest"
    return "high"


def aex_band(aex_count: int, victim_cycles: int) -> str:
    """none: no exits; modest: under 100 exits per million victim cycles."""
    if aex_count == 0:
        return "none"
    rate = aex_count * 1e6 / max(1, victim_cycles)
    return "modest" if rate < 100 else "high"
