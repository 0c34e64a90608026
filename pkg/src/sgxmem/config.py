"""Machine model configuration.

Defaults reproduce the Skylake i7-6700 testbed (TLB, cache and DRAM
geometries).  Latencies and AEX costs are free parameters; results in this
package only depend on their ordering, never on absolute values.

Config files are YAML (or JSON) mappings with a ``schema_version`` key and any
subset of the fields below, nested the same way as the dataclasses::

    schema_version: 1
    noise:
      enabled: false
    costs:
      page_fault_cost: 20000
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    sets: int
    ways: int

    @property
    def entries(self) -> int:
        return self.sets * self.ways


@dataclass(frozen=True)
class TlbConfig:
    itlb: Geometry = Geometry(8, 8)
    dtlb: Geometry = Geometry(16, 4)
    l2: Geometry = Geometry(128, 12)
    # False models the static per-logical-core partitioning alternative
    shared_across_logical_cores: bool = True
    replacement: str = "lru"  # or "random"
    l2_hit_latency: int = 7


@dataclass(frozen=True)
class CacheConfig:
    l1i: Geometry | None = Geometry(64, 8)
    l1d: Geometry | None = Geometry(64, 8)
    l2: Geometry | None = Geometry(1024, 4)
    l3: Geometry = Geometry(8192, 16)
    line_size: int = 64
    llc_slices: int = 1
    slice_hash: str = "none"  # "none" | "xor"
    inclusive: bool = True
    prefetcher: bool = False
    l1_latency: int = 4
    l2_latency: int = 12
    l3_latency: int = 40


@dataclass(frozen=True)
class DramConfig:
    channels: int = 2
    dimms: int = 1
    ranks: int = 2
    banks: int = 16
    rows: int = 1 << 15
    row_size: int = 8192
    mapping: str = "default"  # "default" | "linear"
    latency_hit: int = 160
    latency_conflict: int = 300

    @property
    def total_banks(self) -> int:
        return self.channels * self.dimms * self.ranks * self.banks

    @property
    def capacity(self) -> int:
        return self.total_banks * self.rows * self.row_size


@dataclass(frozen=True)
class Costs:
    page_walk: int = 100
    page_fault_cost: int = 15000
    shootdown_cost: int = 8000
    other_aex_cost: int = 8000
    enclave_transition: int = 0


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = True
    dram_sigma: float = 8.0
    clock_jitter_sigma: float = 4.0
    clock_stale_prob: float = 0.002
    # relative sigma applied to every victim compute interval
    compute_jitter: float = 0.02
    # per probe and monitored set: a third party displaces one line
    llc_background_evict_prob: float = 0.01
    # per probe and monitored set: a real miss read back as a hit
    llc_probe_miss_prob: float = 0.02
    # per DRAM probe: unrelated traffic opens another row in the bank
    dram_background_prob: float = 0.05
    # cycles between legitimate interrupts hitting the victim; 0 disables
    interrupt_period: int = 0


@dataclass(frozen=True)
class SimConfig:
    page_size: int = 4096
    cycles_per_ns: float = 3.4
    tlb: TlbConfig = field(default_factory=TlbConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    dram: DramConfig = field(default_factory=DramConfig)
    costs: Costs = field(default_factory=Costs)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    prm_base: int = 0x80000000
    prm_size: int = 128 << 20
    pcid_selective_flush: bool = True
    hyperthreading: bool = True
    log_level: str = "all"  # "all" | "aex" | "none"

    @property
    def page_shift(self) -> int:
        return self.page_size.bit_length() - 1

    @property
    def phys_size(self) -> int:
        return self.dram.capacity

    @property
    def noisy(self) -> bool:
        return self.noise.enabled

    def validate(self) -> "SimConfig":
        def pow2(name, v):
            if v <= 0 or v & (v - 1):
                raise ConfigError(f"{name} must be a power of two, got {v}")

        pow2("page_size", self.page_size)
        for name in ("itlb", "dtlb", "l2"):
            pow2(f"tlb.{name}.sets", getattr(self.tlb, name).sets)
        for name in ("l1i", "l1d", "l2", "l3"):
            g = getattr(self.cache, name)
            if g is not None:
                pow2(f"cache.{name}.sets", g.sets)
        pow2("cache.line_size", self.cache.line_size)
        pow2("cache.llc_slices", self.cache.llc_slices)
        if self.cache.l3.sets % self.cache.llc_slices:
            raise ConfigError("llc sets must divide evenly across slices")
        for name in ("channels", "dimms", "ranks", "banks", "rows", "row_size"):
            pow2(f"dram.{name}", getattr(self.dram, name))
        if self.tlb.replacement not in ("lru", "random"):
            raise ConfigError(f"unknown TLB replacement {self.tlb.replacement!r}")
        if self.cache.slice_hash not in ("none", "xor"):
            raise ConfigError(f"unknown slice hash {self.cache.slice_hash!r}")
        if self.dram.mapping not in ("default", "linear"):
            raise ConfigError(f"unknown DRAM mapping {self.dram.mapping!r}")
        if self.log_level not in ("all", "aex", "none"):
            raise ConfigError(f"unknown log level {self.log_level!r}")
        if self.prm_size <= 0 or self.prm_base % self.page_size or self.prm_size % self.page_size:
            raise ConfigError("PRM must be a positive, page-aligned range")
        if self.prm_base < 0 or self.prm_base + self.prm_size > self.phys_size:
            raise ConfigError(
                f"PRM [{self.prm_base:#x}, {self.prm_base + self.prm_size:#x}) "
                f"outside physical range [0, {self.phys_size:#x})")
        return self

    def with_overrides(self, overrides: dict) -> "SimConfig":
        return from_dict(_deep_merge(to_dict(self), overrides))

    def noiseless(self) -> "SimConfig":
        return dataclasses.replace(self, noise=dataclasses.replace(self.noise, enabled=False))

    def digest(self) -> str:
        blob = json.dumps(to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def testbed() -> SimConfig:
    """The i7-6700 testbed preset (also the default)."""
    return SimConfig()


PRESETS = {"testbed": testbed}


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if k == "schema_version":
            continue
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data):
    if data is None:
        return None
    if not dataclasses.is_dataclass(cls):
        return data
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in data.items():
        if k not in hints:
            raise ConfigError(f"unknown field {k!r} for {cls.__name__}")
        default = getattr(cls(), k) if k not in _GEOMETRY_FIELDS.get(cls, ()) else None
        if k in _GEOMETRY_FIELDS.get(cls, ()):
            kwargs[k] = None if v is None else Geometry(int(v["sets"]), int(v["ways"]))
        elif dataclasses.is_dataclass(default):
            kwargs[k] = _build(type(default), v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


_GEOMETRY_FIELDS = {
    TlbConfig: ("itlb", "dtlb", "l2"),
    CacheConfig: ("l1i", "l1d", "l2", "l3"),
}


def from_dict(data: dict) -> SimConfig:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    data = {k: v for k, v in data.items() if k != "schema_version"}
    try:
        cfg = _build(SimConfig, data)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return cfg.validate()


def load(path) -> dict:
    """Read a YAML or JSON config file into a plain mapping (not yet merged)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config {path}: schema_version must be {SCHEMA_VERSION}")
    return data
