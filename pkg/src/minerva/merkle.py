"""Standard k-ary and fat (three level) Merkle trees over chunk lists."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .chunkstore import Chunk, ContentId
from .errors import IntegrityError, InvalidArgument


class Shape(str, enum.Enum):
    STANDARD = "standard"
    FAT = "fat"


class MerkleNode(NamedTuple):
    cid: ContentId
    children: tuple[ContentId, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class MerkleTree:
    root: ContentId
    nodes: dict[ContentId, MerkleNode] = field(repr=False)
    shape: Shape
    fanout: int
    leaf_count: int
    height: int
    total_nodes: int
    size: int = 0
    # internal-node digests computed to produce this tree
    hash_ops: int = 0

    def leaves(self) -> list[ContentId]:
        return list(_iter_leaves(self.nodes, self.root))

    def levels(self) -> list[list[ContentId]]:
        """Node cids by depth, root first (positional, duplicates kept)."""
        out = [[self.root]]
        while True:
            nxt = [c for cid in out[-1] for c in self.nodes[cid].children]
            if not nxt:
                return out
            out.append(nxt)

    def leaf_parents(self) -> set[ContentId]:
        """Nodes whose children are leaves by construction (fat trees only)."""
        if self.shape is not Shape.FAT or self.leaf_count == 0:
            return set()
        levels = self.levels()
        return set(levels[-2]) if len(levels) >= 2 else set()


def _iter_leaves(nodes, root):
    stack = [root]
    while stack:
        cid = stack.pop()
        node = nodes.get(cid)
        if node is None:
            raise IntegrityError(f"dangling reference to {cid}")
        if node.is_leaf:
            yield cid
        else:
            stack.extend(reversed(node.children))


# Fat-index nodes carry a tag byte so they never share a cid with a standard
# node over the same children; their records mark the children as leaves.
_FAT_TAG = b"\x01"


def hash_children(children: Sequence[ContentId], shape: Shape = Shape.STANDARD) -> ContentId:
    body = b"".join(children)
    return ContentId.of(_FAT_TAG + body if shape is Shape.FAT else body)


def _group(cids: Sequence[ContentId], k: int, nodes: dict, tag: bytes = b"") -> list[ContentId]:
    parents = []
    of, new = ContentId.of, tuple.__new__
    for i in range(0, len(cids), k):
        kids = tuple(cids[i:i + k])
        cid = of(tag + b"".join(kids))
        nodes[cid] = new(MerkleNode, (cid, kids))  # equal cids imply equal children
        parents.append(cid)
    return parents


def tree_height(n: int, k: int) -> int:
    """ceil(log_k n) + 1, computed with integers."""
    if n < 1 or k < 2:
        raise InvalidArgument("need n >= 1 and k >= 2")
    h, cap = 1, 1
    while cap < n:
        cap *= k
        h += 1
    return h


def _leaf_ids(chunks) -> list[ContentId]:
    if not chunks:
        raise InvalidArgument("at least one chunk required")
    return [c.cid if isinstance(c, Chunk) else c for c in chunks]


def _chunk_size(chunks) -> int:
    return sum(c.size for c in chunks if isinstance(c, Chunk))


def build_standard_tree(chunks: Sequence[Chunk], k: int) -> MerkleTree:
    """Leftmost-greedy k-ary tree; every leaf sits at the same depth."""
    if k < 2:
        raise InvalidArgument("fanout k must be >= 2")
    leaves = _leaf_ids(chunks)
    new = tuple.__new__
    nodes = {cid: new(MerkleNode, (cid, ())) for cid in leaves}
    level = leaves
    total = len(level)
    height = 1
    while len(level) > 1:
        level = _group(level, k, nodes)
        total += len(level)
        height += 1
    return MerkleTree(level[0], nodes, Shape.STANDARD, k, len(leaves), height,
                      total, _chunk_size(chunks), hash_ops=total - len(leaves))


def _fat_from_leaves(leaves: list[ContentId], k: int, size: int) -> MerkleTree:
    new = tuple.__new__
    nodes = {cid: new(MerkleNode, (cid, ())) for cid in leaves}
    n = len(leaves)
    if n <= k:
        root = hash_children(leaves, Shape.FAT)
        nodes[root] = MerkleNode(root, tuple(leaves))
        return MerkleTree(root, nodes, Shape.FAT, k, n, 2, 1 + n, size, hash_ops=1)
    middle = _group(leaves, k, nodes, _FAT_TAG)
    root = hash_children(middle, Shape.FAT)
    nodes[root] = MerkleNode(root, tuple(middle))
    return MerkleTree(root, nodes, Shape.FAT, k, n, 3, 1 + len(middle) + n, size,
                      hash_ops=len(middle) + 1)


def build_fat_tree(chunks: Sequence[Chunk], k: int) -> MerkleTree:
    if k < 2:
        raise InvalidArgument("fanout k must be >= 2")
    return _fat_from_leaves(_leaf_ids(chunks), k, _chunk_size(chunks))


def build_tree(chunks: Sequence[Chunk], k: int, shape: Shape | str = Shape.STANDARD) -> MerkleTree:
    shape = Shape(shape)
    if shape is Shape.FAT:
        return build_fat_tree(chunks, k)
    return build_standard_tree(chunks, k)


def perfect_tree_node_count(n: int, k: int) -> int:
    """(k**H - 1) / (k - 1) for a perfect tree with ``n`` leaves."""
    if k < 2 or n < 1:
        raise InvalidArgument("need n >= 1 and k >= 2")
    h = tree_height(n, k)
    if k ** (h - 1) != n:
        raise InvalidArgument(f"{n} leaves do not form a perfect {k}-ary tree")
    return (k ** h - 1) // (k - 1)


def approx_node_count(n: int, k: int) -> float:
    return k * n / (k - 1)


def convert_to_fmt(tree: MerkleTree) -> MerkleTree:
    """Regroup the leaves of a standard tree under one middle layer.

    Leaves are not rehashed; only the ceil(N/k) middle nodes and the new root are.
    """
    if tree.shape is not Shape.STANDARD:
        raise IntegrityError("convert_to_fmt expects a standard tree")
    if tree.root not in tree.nodes:
        raise IntegrityError(f"root {tree.root} missing from node map")
    leaves = list(_iter_leaves(tree.nodes, tree.root))
    if len(leaves) != tree.leaf_count:
        raise IntegrityError(f"tree declares {tree.leaf_count} leaves but has {len(leaves)}")
    return _fat_from_leaves(leaves, tree.fanout, tree.size)


def verify_tree(tree: MerkleTree) -> bool:
    seen = set()
    stack = [tree.root]
    while stack:
        cid = stack.pop()
        if cid in seen:
            continue
        seen.add(cid)
        node = tree.nodes.get(cid)
        if node is None or node.cid != cid:
            return False
        if node.children:
            if hash_children(node.children, tree.shape) != cid:
                return False
            stack.extend(node.children)
    return True
