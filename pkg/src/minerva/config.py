"""Run configuration and the flat ``key = value`` config file format.

Keys are dotted, ``<section>.<field>`` with further dots folded into
underscores, so ``cache.meta.enabled`` sets ``CacheSettings.meta_enabled``
and ``net.latency.mean_ms`` sets ``NetSettings.latency_mean_ms``.
Lines starting with ``#`` or ``;`` are comments.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cache import CacheConfig
from .coordinator import GprConfig, Strategy
from .dhtnet import PLACEMENTS, LatencyDistribution, Network
from .errors import InvalidArgument
from .executor import WriteCost


@dataclass
class NetSettings:
    peers: int = 8
    seed: int = 0
    latency_kind: str = "exponential"
    latency_value_ms: float = 50.0  # constant
    latency_mean_ms: float = 50.0  # exponential
    latency_mu: float = 3.5  # lognormal, of log(ms)
    latency_sigma: float = 0.5
    latency_samples: str = ""  # empirical, comma separated ms
    bytes_per_ms: float = 12_500.0  # 100 Mbit/s
    connect_timeout_ms: float = 1_000.0
    compute_ms_per_record: float = 0.01
    executor_peers: int | None = None  # first n peers run executors; None = all
    placement: str = "round_robin"
    replication: int = 1
    foreman: int = 0  # peer index issuing queries
    mode: str = "virtual"

    def latency(self) -> LatencyDistribution:
        kind = self.latency_kind
        if kind == "constant":
            return LatencyDistribution.constant(self.latency_value_ms)
        if kind == "exponential":
            return LatencyDistribution.exponential(self.latency_mean_ms)
        if kind == "lognormal":
            return LatencyDistribution.lognormal(self.latency_mu, self.latency_sigma)
        if kind == "empirical":
            vals = [float(x) for x in self.latency_samples.split(",") if x.strip()]
            return LatencyDistribution.empirical(vals)
        raise InvalidArgument(f"unknown latency kind {kind!r}")


@dataclass
class ChunkSettings:
    size: int = 1024 * 1024


@dataclass
class MerkleSettings:
    fanout: int = 8
    shape: str = "standard"


@dataclass
class CacheSettings:
    meta_enabled: bool = True
    peer_enabled: bool = True
    capacity: int = 4096
    ttl_ms: float = 600_000.0


@dataclass
class SchedulerSettings:
    strategy: str = "load_balance"
    max_providers: int = 3


@dataclass
class GprSettings:
    enabled: bool = False
    alpha_bytes: int = 4 * 1024 * 1024
    delta_ms: float = 150.0


@dataclass
class FlattenSettings:
    pool_size: int | None = None  # None = unbounded parallelism


@dataclass
class WriteSettings:
    hash_ms_per_block: float = 0.5
    publish_ms: float = 200.0
    oversize: str = "reject"


@dataclass
class CatalogSettings:
    path: str = ""


@dataclass
class MinervaConfig:
    net: NetSettings = field(default_factory=NetSettings)
    chunk: ChunkSettings = field(default_factory=ChunkSettings)
    merkle: MerkleSettings = field(default_factory=MerkleSettings)
    cache: CacheSettings = field(default_factory=CacheSettings)
    scheduler: SchedulerSettings = field(default_factory=SchedulerSettings)
    gpr: GprSettings = field(default_factory=GprSettings)
    flatten: FlattenSettings = field(default_factory=FlattenSettings)
    write: WriteSettings = field(default_factory=WriteSettings)
    catalog: CatalogSettings = field(default_factory=CatalogSettings)

    def validate(self) -> "MinervaConfig":
        if self.net.peers < 1:
            raise InvalidArgument("net.peers must be >= 1")
        if self.net.placement not in PLACEMENTS:
            raise InvalidArgument(f"net.placement must be one of {PLACEMENTS}")
        if not 0 <= self.net.foreman < self.net.peers:
            raise InvalidArgument("net.foreman must index an existing peer")
        if self.net.bytes_per_ms <= 0:
            raise InvalidArgument("net.bytes_per_ms must be > 0")
        if self.net.mode not in ("virtual", "wallclock"):
            raise InvalidArgument("net.mode must be virtual or wallclock")
        if self.merkle.shape not in ("standard", "fat"):
            raise InvalidArgument("merkle.shape must be standard or fat")
        if self.merkle.fanout < 2:
            raise InvalidArgument("merkle.fanout must be >= 2")
        if self.chunk.size < 1:
            raise InvalidArgument("chunk.size must be >= 1")
        if self.scheduler.strategy not in {s.value for s in Strategy}:
            raise InvalidArgument(f"scheduler.strategy must be one of {[s.value for s in Strategy]}")
        if self.scheduler.max_providers < 1:
            raise InvalidArgument("scheduler.max_providers must be >= 1")
        if self.write.oversize not in ("reject", "oversize"):
            raise InvalidArgument("write.oversize must be reject or oversize")
        self.net.latency()
        self.cache_config()
        self.gpr_config()
        return self

    def cache_config(self) -> CacheConfig:
        return CacheConfig(self.cache.capacity, self.cache.ttl_ms)

    def gpr_config(self) -> GprConfig:
        return GprConfig(self.gpr.alpha_bytes, self.gpr.delta_ms)

    def write_cost(self) -> WriteCost:
        return WriteCost(self.write.hash_ms_per_block, self.write.publish_ms)

    def build_network(self) -> Network:
        n = self.net
        return Network.create(n.peers, n.latency(), n.seed, executor_peers=n.executor_peers,
                              compute_cost=n.compute_ms_per_record, bytes_per_ms=n.bytes_per_ms,
                              connect_timeout_ms=n.connect_timeout_ms, mode=n.mode)

    def set(self, key: str, value) -> None:
        """Set one dotted key; string values are converted to the field type."""
        section, _, rest = key.strip().lower().partition(".")
        name = rest.replace(".", "_")
        target = getattr(self, section, None)
        if not rest or not dataclasses.is_dataclass(target):
            raise InvalidArgument(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(target))
        if name not in hints:
            raise InvalidArgument(f"unknown config key {key!r}")
        setattr(target, name, _convert(hints[name], value, key) if isinstance(value, str) else value)

    def items(self):
        """Flat (dotted key, value) pairs, for display."""
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                yield f"{sec.name}.{f.name}", getattr(obj, f.name)


def _convert(tp, raw: str, key: str):
    raw = raw.strip().strip('"').strip("'")
    args = typing.get_args(tp)
    if type(None) in args:
        if raw.lower() in ("", "none", "null"):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise InvalidArgument(f"bad value {raw!r} for {key}") from None
    return raw


def parse_config(text: str, base: MinervaConfig | None = None) -> MinervaConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[minerva]\n" + text)
    except configparser.Error as exc:
        raise InvalidArgument(f"unreadable config: {exc}") from None
    cfg = base or MinervaConfig()
    for key, value in cp["minerva"].items():
        cfg.set(key, value)
    return cfg.validate()


def load_config(path: str | Path) -> MinervaConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: MinervaConfig) -> str:
    lines = []
    for key, value in cfg.items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
