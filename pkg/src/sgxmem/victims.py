"""Secret-parameterized victim programs.

Each victim is a pure generator of :class:`~sgxmem.engine.Step` records.  The
secret is only reachable through :meth:`VictimProgram.ground_truth`, which
raises when called from attacker code.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .engine import Step, audit_secret_read
from .rng import SplitMix64

LINE = 64
PAGE = 4096


class VictimProgram:
    name = "victim"
    starts_in_enclave = True

    def __init__(self, secret):
        self._secret = secret

    def ground_truth(self):
        audit_secret_read(f"{self.name} secret")
        return self._secret

    @property
    def secret(self):
        return self.ground_truth()

    def pages(self) -> list[tuple[int, bool]]:
        """(virtual page address, nx) pairs the victim needs mapped."""
        raise NotImplementedError

    def install(self, machine, space) -> None:
        for va, nx in self.pages():
            machine.map(space, va, nx=nx)

    def steps(self):
        raise NotImplementedError


def _spread(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


# -- EdDSA scalar multiplication -------------------------------------------

EDDSA_REGIONS = ("mul_point", "dup_add", "helpers", "test_bit")


def _default_dup() -> list[str]:
    return ["dup_add"] + ["helpers", "dup_add"] * 22 + ["mul_point", "test_bit", "mul_point"]


def _default_add() -> list[str]:
    return ["dup_add"] + ["helpers", "dup_add"] * 19 + ["helpers", "mul_point"]


@dataclass(frozen=True)
class EddsaLayout:
    """Monitored code pages and the per-bit page-visit patterns.

    ``dup_pattern`` runs for every key bit and must contain exactly one
    ``test_bit`` visit; ``add_pattern`` runs additionally for 1-bits.
    ``dup_cycles``/``add_cycles`` are the nominal per-pattern costs; the
    per-visit compute is spread evenly after subtracting an L1 hit per visit.
    """
    pages: dict = field(default_factory=lambda: {
        "mul_point": 0xE7000, "dup_add": 0xE8000, "helpers": 0xF0000, "test_bit": 0xF1000})
    dup_pattern: tuple = field(default_factory=lambda: tuple(_default_dup()))
    add_pattern: tuple = field(default_factory=lambda: tuple(_default_add()))
    dup_cycles: int = 19_700
    add_cycles: int = 8_200
    visit_latency: int = 4

    def __post_init__(self):
        if set(self.pages) != set(EDDSA_REGIONS):
            raise ValueError(f"layout pages must be exactly {EDDSA_REGIONS}")
        if list(self.dup_pattern).count("test_bit") != 1 or "test_bit" in self.add_pattern:
            raise ValueError("test_bit must appear once per bit, in the dup pattern only")
        for pat in (self.dup_pattern, self.add_pattern):
            for r in pat:
                if r not in self.pages:
                    raise ValueError(f"unknown region {r!r} in visit pattern")

    def page_of(self, region: str) -> int:
        return self.pages[region]


class EddsaVictim(VictimProgram):
    """Double-and-add over the key bits, most significant first."""

    name = "eddsa"

    def __init__(self, key_bits: str, layout: EddsaLayout | None = None):
        if not key_bits:
            raise ValueError("empty key")
        if len(key_bits) > 512:
            raise ValueError("key longer than 512 bits")
        if set(key_bits) - {"0", "1"}:
            raise ValueError("key must be a bit string")
        super().__init__(key_bits)
        self.layout = layout or EddsaLayout()
        self.nbits = len(key_bits)

    def pages(self):
        return [(va, False) for va in sorted(self.layout.pages.values())]

    def _block(self, pattern, total, bit_index, part):
        lay = self.layout
        costs = _spread(max(0, total - lay.visit_latency * len(pattern)), len(pattern))
        for i, (region, c) in enumerate(zip(pattern, costs)):
            va = lay.pages[region] + (i * LINE) % PAGE
            yield Step("fetch", va, c, (bit_index, part, region))

    def steps(self):
        lay = self.layout
        for j, bit in enumerate(self._secret):
            yield from self._block(lay.dup_pattern, lay.dup_cycles, j, "dup")
            if bit == "1":
                yield from self._block(lay.add_pattern, lay.add_cycles, j, "add")


def eddsa_scalar_mul(key_bits: str, layout: EddsaLayout | None = None) -> list[Step]:
    """Access stream of the scalar multiplication for ``key_bits``."""
    return list(EddsaVictim(key_bits, layout).steps())


def eddsa_visit_counts(key_bits: str, layout: EddsaLayout | None = None) -> list[int]:
    lay = layout or EddsaLayout()
    return [len(lay.dup_pattern) + (len(lay.add_pattern) if b == "1" else 0) for b in key_bits]


# -- Hunspell-like dictionary lookup ----------------------------------------

def _word_hash(word: str, buckets: int) -> int:
    h = 0
    for ch in word.encode():
        h = (h * 31 + ch) & 0xFFFFFFFF
    return h % buckets


class DictionaryLayout:
    """Hash table with chained buckets whose nodes are scattered over
    ``n_pages`` data pages.

    A lookup of word ``w`` visits the page holding its bucket head, then the
    page of every chain node up to and including ``w``'s node.  The layout is
    a deterministic function of (words, n_pages, buckets, seed).
    """

    def __init__(self, words, n_pages: int = 40, buckets: int | None = None, seed: int = 42,
                 base_va: int = 0x400000, table_pages: int = 1):
        words = list(dict.fromkeys(words))
        if not words:
            raise ValueError("empty dictionary")
        if n_pages < table_pages + 1:
            raise ValueError("need at least one node page besides the bucket table")
        self.words = words
        self.n_pages = n_pages
        self.buckets = buckets or max(1, len(words) // 4)
        self.seed = seed
        self.base_va = base_va
        self.table_pages = table_pages
        rng = SplitMix64(seed)
        self.chains: list[list[str]] = [[] for _ in range(self.buckets)]
        for w in words:
            self.chains[_word_hash(w, self.buckets)].append(w)
        node_pages = list(range(table_pages, n_pages))
        self.node_page: dict[str, int] = {}
        for chain in self.chains:
            for w in chain:
                self.node_page[w] = node_pages[rng.randbelow(len(node_pages))]
        self._lists = {}
        for b, chain in enumerate(self.chains):
            head = b * table_pages // self.buckets
            walk = [head]
            for w in chain:
                walk.append(self.node_page[w])
                self._lists[w] = list(walk)

    @classmethod
    def synthetic(cls, n_words: int = 1000, n_pages: int = 40, seed: int = 42, **kw):
        rng = SplitMix64(seed ^ 0x5EED)
        alphabet = "abcdefghijklmnopqrstuvwxyz"
        words = set()
        while len(words) < n_words:
            n = 3 + rng.randbelow(8)
            words.add("".join(alphabet[rng.randbelow(26)] for _ in range(n)))
        return cls(sorted(words), n_pages=n_pages, seed=seed, **kw)

    def page_va(self, page: int) -> int:
        return self.base_va + page * PAGE

    def bucket_of(self, word: str) -> int:
        return _word_hash(word, self.buckets)

    def page_list(self, word: str) -> list[int]:
        """Ordered page indices visited when looking ``word`` up."""
        if word in self._lists:
            return list(self._lists[word])
        b = self.bucket_of(word)
        head = b * self.table_pages // self.buckets
        return [head] + [self.node_page[w] for w in self.chains[b]]

    def node_va(self, word: str, page: int) -> int:
        slot = (sum(word.encode()) * 7) % (PAGE // LINE)
        return self.page_va(page) + slot * LINE

    def to_dict(self) -> dict:
        return {"kind": "dictionary", "words": self.words, "n_pages": self.n_pages,
                "buckets": self.buckets, "seed": self.seed, "base_va": self.base_va,
                "table_pages": self.table_pages}


class HunspellVictim(VictimProgram):
    """Spell-checks a list of words: an inter-word gap, the trigger code
    page, some preparation (normalising and hashing the word), then the
    bucket walk."""

    name = "hunspell"

    def __init__(self, words, layout: DictionaryLayout, trigger_va: int = 0x300000,
                 node_cycles: int = 60, gap_range: tuple[int, int] = (3000, 9000), seed: int = 0,
                 prep_cycles: int = 600):
        super().__init__(list(words))
        self.layout = layout
        self.trigger_va = trigger_va
        self.node_cycles = node_cycles
        self.prep_cycles = prep_cycles
        self.gap_range = gap_range
        self.seed = seed

    def pages(self):
        out = [(self.trigger_va, False)]
        out += [(self.layout.page_va(p), True) for p in range(self.layout.n_pages)]
        return out

    def data_pages(self) -> list[int]:
        return [self.layout.page_va(p) for p in range(self.layout.n_pages)]

    def steps(self):
        rng = SplitMix64(self.seed)
        lo, hi = self.gap_range
        lay = self.layout
        for i, w in enumerate(self._secret):
            gap = lo + rng.randbelow(hi - lo + 1)
            yield Step("fetch", self.trigger_va, gap, (i, "trigger"))
            for j, p in enumerate(lay.page_list(w)):
                wait = self.node_cycles + (0 if j else self.prep_cycles)
                yield Step("read", lay.node_va(w, p), wait, (i, "node", p))


def hunspell_lookup(word: str, layout: DictionaryLayout, trigger_va: int = 0x300000) -> list[Step]:
    steps = [Step("fetch", trigger_va, 0, "trigger")]
    steps += [Step("read", layout.node_va(word, p), 0, ("node", p)) for p in layout.page_list(word)]
    return steps


# -- Bloom filter -----------------------------------------------------------

class BloomFilter:
    """Bit array probed by ``n_hashes`` independent hash functions."""

    def __init__(self, members, m_bits: int = 1 << 14, n_hashes: int = 10, seed: int = 1):
        self.m_bits = m_bits
        self.n_hashes = n_hashes
        self.seed = seed
        self.bits = bytearray(m_bits)
        for x in members:
            for pos in self.positions(x):
                self.bits[pos] = 1

    def positions(self, x: int) -> list[int]:
        out = []
        for i in range(self.n_hashes):
            r = SplitMix64((self.seed * 0x9E3779B97F4A7C15 + x * 0xBF58476D1CE4E5B9 + i) & (2**64 - 1))
            out.append(r.next_u64() % self.m_bits)
        return out

    @property
    def fill_ratio(self) -> float:
        return sum(self.bits) / self.m_bits

    def hashes_run(self, x: int) -> int:
        """Hash functions executed before the early exit (or all of them)."""
        for k, pos in enumerate(self.positions(x), start=1):
            if not self.bits[pos]:
                return k
        return self.n_hashes

    def contains(self, x: int) -> bool:
        return all(self.bits[p] for p in self.positions(x))

    @classmethod
    def with_fill(cls, n_members: int, fill: float = 0.5, n_hashes: int = 10, seed: int = 1, **kw):
        """Size the bit array so inserting ``n_members`` yields about ``fill``."""
        import math
        m = int(round(-n_members * n_hashes / math.log(1.0 - fill)))
        members = list(range(1, 2 * n_members, 2))
        return cls(members, m_bits=m, n_hashes=n_hashes, seed=seed, **kw), members


def expected_hashes(fill: float, n_hashes: int = 10) -> float:
    """Expected hash count for a random non-member: sum_i fill^(i-1)."""
    return sum(fill ** (i - 1) for i in range(1, n_hashes + 1))


class BloomVictim(VictimProgram):
    """Enclave call per query: all hashing on one code page, then the exit
    page.  The secret is the query list."""

    name = "bloom"
    starts_in_enclave = False

    def __init__(self, queries, bloom: BloomFilter, code_va: int = 0x500000, exit_va: int = 0x501000,
                 hash_cost: int = 400, fixed_cost: int = 300, gap: int = 3000):
        super().__init__(list(queries))
        self.bloom = bloom
        self.code_va = code_va
        self.exit_va = exit_va
        self.hash_cost = hash_cost
        self.fixed_cost = fixed_cost
        self.gap = gap

    def pages(self):
        return [(self.code_va, False), (self.exit_va, False)]

    def steps(self):
        for qi, x in enumerate(self._secret):
            yield Step("eenter", 0, self.gap, (qi, "enter"))
            yield Step("fetch", self.code_va, 0, (qi, "start"))
            k = self.bloom.hashes_run(x)
            for i in range(k):
                yield Step("fetch", self.code_va + LINE * (1 + i % 8), self.hash_cost, (qi, "hash", i))
            yield Step("fetch", self.exit_va, self.fixed_cost, (qi, "exit", k))
            yield Step("eexit", 0, 50, (qi, "leave"))


def bloom_query(x: int, bloom: BloomFilter, code_va: int = 0x500000, exit_va: int = 0x501000,
                hash_cost: int = 400) -> list[Step]:
    steps = [Step("fetch", code_va, 0, "start")]
    for i in range(bloom.hashes_run(x)):
        steps.append(Step("fetch", code_va + LINE * (1 + i % 8), hash_cost, ("hash", i)))
    steps.append(Step("fetch", exit_va, 0, "exit"))
    return steps


# -- Binary search over 16 pages ---------------------------------------------

TABLE_LEN = 16384
INTS_PER_PAGE = 1024


def binary_search_indices(key: int, n: int = TABLE_LEN) -> list[int]:
    """Midpoints probed by a standard binary search for ``key`` in 0..n-1."""
    if not 0 <= key < n:
        raise ValueError(f"key {key} outside [0, {n})")
    lo, hi = 0, n - 1
    out = []
    while lo <= hi:
        mid = (lo + hi) // 2
        out.append(mid)
        if mid == key:
            break
        if mid < key:
            lo = mid + 1
        else:
            hi = mid - 1
    return out


def binary_search_pages(key: int) -> list[int]:
    return [i // INTS_PER_PAGE for i in binary_search_indices(key)]


class BinarySearchVictim(VictimProgram):
    name = "binsearch"

    def __init__(self, keys, table_va: int = 0x600000, code_va: int = 0x5F0000, probe_cycles: int = 1000,
                 query_gap: int = 8000):
        if isinstance(keys, int):
            keys = [keys]
        super().__init__(list(keys))
        self.table_va = table_va
        self.code_va = code_va
        self.probe_cycles = probe_cycles
        self.query_gap = query_gap

    def pages(self):
        return [(self.code_va, False)] + [(self.table_va + p * PAGE, True) for p in range(16)]

    def steps(self):
        for qi, key in enumerate(self._secret):
            for j, mid in enumerate(binary_search_indices(key)):
                wait = self.probe_cycles + (self.query_gap if qi and not j else 0)
                yield Step("read", self.table_va + 4 * mid, wait, (qi, mid // INTS_PER_PAGE))


def binary_search(key: int, table_va: int = 0x600000) -> list[Step]:
    return [Step("read", table_va + 4 * m, 0, m // INTS_PER_PAGE) for m in binary_search_indices(key)]


# -- Gap SumInt ---------------------------------------------------------------

SMALL_LIMIT = 1 << 29


def is_small(v: int) -> bool:
    return -SMALL_LIMIT <= v < SMALL_LIMIT


class GapVictim(VictimProgram):
    """SumInt invoked periodically; the small-integer branch executes the
    target code line, the other path a different line on another page."""

    name = "gap"

    def __init__(self, operands, code_va: int = 0x700000, target_offset: int = 0x8C0,
                 alt_va: int = 0x701000, interval: int = 17_000, body_cycles: int = 40):
        super().__init__(list(operands))
        self.code_va = code_va
        self.target_va = code_va + target_offset
        self.alt_va = alt_va
        self.interval = interval
        self.body_cycles = body_cycles

    def pages(self):
        return [(self.code_va, False), (self.alt_va, False)]

    def steps(self):
        prev_len = 0
        for i, (a, b) in enumerate(self._secret):
            wait = self.interval - prev_len if i else self.interval
            yield Step("fetch", self.code_va, max(0, wait), (i, "entry"))
            if is_small(a) and is_small(b):
                yield Step("fetch", self.target_va, self.body_cycles, (i, "small"))
            else:
                yield Step("fetch", self.alt_va, self.body_cycles, (i, "large"))
            prev_len = 2 * self.body_cycles


def gap_sumint(a: int, b: int, code_va: int = 0x700000, target_offset: int = 0x8C0,
               alt_va: int = 0x701000) -> list[Step]:
    steps = [Step("fetch", code_va, 0, "entry")]
    if is_small(a) and is_small(b):
        steps.append(Step("fetch", code_va + target_offset, 0, "small"))
    else:
        steps.append(Step("fetch", alt_va, 0, "large"))
    return steps


def random_gap_operands(n: int, seed: int, p_small: float = 0.5):
    rng = SplitMix64(seed)
    out = []
    for _ in range(n):
        if rng.random() < p_small:
            out.append((rng.randbelow(SMALL_LIMIT), rng.randbelow(SMALL_LIMIT)))
        else:
            out.append((SMALL_LIMIT + rng.randbelow(1 << 40), rng.randbelow(SMALL_LIMIT)))
    return out


# -- Square-and-multiply exponentiation ---------------------------------------

class SquareMultiplyVictim(VictimProgram):
    """Left-to-right square-and-multiply; the square and multiply routines
    sit on distinct code lines that are re-fetched while they run."""

    name = "elgamal"

    def __init__(self, key_bits: str, square_va: int = 0x800040, multiply_va: int = 0x801080,
                 loop_va: int = 0x800000, square_cycles: int = 6000, multiply_cycles: int = 6000,
                 loop_gap: int = 10000, fetch_every: int = 500):
        if not key_bits:
            raise ValueError("empty key")
        super().__init__(key_bits)
        self.square_va = square_va
        self.multiply_va = multiply_va
        self.loop_va = loop_va
        self.square_cycles = square_cycles
        self.multiply_cycles = multiply_cycles
        self.loop_gap = loop_gap
        self.fetch_every = fetch_every

    def pages(self):
        pages = {self.loop_va & ~(PAGE - 1), self.square_va & ~(PAGE - 1), self.multiply_va & ~(PAGE - 1)}
        return [(p, False) for p in sorted(pages)]

    def _routine(self, va, total, j, part):
        n = max(1, total // self.fetch_every)
        for i in range(n):
            yield Step("fetch", va, self.fetch_every if i else 0, (j, part))

    def steps(self):
        for j, bit in enumerate(self._secret):
            yield Step("fetch", self.loop_va, self.loop_gap, (j, "loop"))
            yield from self._routine(self.square_va, self.square_cycles, j, "square")
            if bit == "1":
                yield from self._routine(self.multiply_va, self.multiply_cycles, j, "multiply")


# -- Multi-checkpoint timing victim -------------------------------------------

class MultiCheckpointVictim(VictimProgram):
    """A secret class selects one of several timing profiles; each profile
    gives the time spent between five (alpha, beta) checkpoint page pairs."""

    name = "multicheckpoint"

    def __init__(self, secret_class: int, profiles, base_va: int = 0x900000, lead_in: int = 2000):
        profiles = [tuple(p) for p in profiles]
        if not 0 <= secret_class < len(profiles):
            raise ValueError("secret class out of range")
        super().__init__(secret_class)
        self.profiles = profiles
        self.base_va = base_va
        self.lead_in = lead_in
        self.n_checkpoints = len(profiles[0])

    def checkpoint_pages(self) -> list[tuple[int, int]]:
        return [(self.base_va + 2 * i * PAGE, self.base_va + (2 * i + 1) * PAGE)
                for i in range(self.n_checkpoints)]

    def pages(self):
        return [(va, False) for pair in self.checkpoint_pages() for va in pair]

    def steps(self):
        prof = self.profiles[self._secret]
        for i, ((a, b), dur) in enumerate(zip(self.checkpoint_pages(), prof)):
            yield Step("fetch", a, self.lead_in, (i, "alpha"))
            yield Step("fetch", b, dur, (i, "beta"))


# -- layout files ---------------------------------------------------------------

def load_layout(path):
    """Read a victim layout (YAML or JSON).

    ``kind: eddsa`` accepts ``pages``, ``dup_pattern``, ``add_pattern``,
    ``dup_cycles``, ``add_cycles``; ``kind: dictionary`` accepts the
    :class:`DictionaryLayout` constructor arguments (``words`` or
    ``synthetic_words``).
    """
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict) or "kind" not in data:
        raise ValueError("layout file needs a 'kind' field")
    return layout_from_dict(data)


def layout_from_dict(data: dict):
    data = dict(data)
    kind = data.pop("kind")
    if kind == "eddsa":
        kw = {}
        if "pages" in data:
            kw["pages"] = {k: int(v) for k, v in data["pages"].items()}
        for key in ("dup_pattern", "add_pattern"):
            if key in data:
                kw[key] = tuple(data[key])
        for key in ("dup_cycles", "add_cycles"):
            if key in data:
                kw[key] = int(data[key])
        return EddsaLayout(**kw)
    if kind == "dictionary":
        if "synthetic_words" in data:
            n = int(data.pop("synthetic_words"))
            return DictionaryLayout.synthetic(n, **data)
        return DictionaryLayout(**data)
    raise ValueError(f"unknown layout kind {kind!r}")
