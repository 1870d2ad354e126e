"""Decentralized SQL over a simulated content-addressed network."""

from .cache import CacheConfig, MinervaCache, TTLCache
from .chunkstore import BlockStore, Chunk, ContentId, chunk_bytes
from .config import MinervaConfig, load_config, parse_config
from .coordinator import Strategy, flatten, gpr_resolve, select_providers
from .dhtnet import LatencyDistribution, Network, publish_object, put_object
from .merkle import MerkleTree, Shape, build_fat_tree, build_standard_tree, build_tree
from .queryfront import QueryStats, Session, plan_query, run_query
from .sql import parse_query

__all__ = [
    "BlockStore", "CacheConfig", "Chunk", "ContentId", "LatencyDistribution", "MerkleTree",
    "MinervaCache", "MinervaConfig", "Network", "QueryStats", "Session", "Shape", "Strategy",
    "TTLCache", "build_fat_tree", "build_standard_tree", "build_tree", "chunk_bytes", "flatten",
    "gpr_resolve", "load_config", "parse_config", "parse_query", "plan_query",
    "publish_object", "put_object", "run_query", "select_providers",
]
