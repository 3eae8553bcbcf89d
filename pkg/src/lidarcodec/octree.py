"""Breadth-first octree occupancy serialization.

Octant layout (normative for the bitstream): at every level the child index
is ``x_bit << 2 | y_bit << 1 | z_bit``, children listed in ascending octant
order.  Level 1 is the root; level ``l`` nodes are cubes of side
``2 ** (L - l + 1)`` grid cells.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptTreeError, EmptyFrameError, OutOfVolumeError

PAD_SYMBOL = 0
MAX_DEPTH = 21  # 3 * 21 bits fit a signed 64-bit Morton key

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)
_BITS = ((np.arange(256)[:, None] >> np.arange(8)[None, :]) & 1).astype(bool)


def popcount(symbols) -> np.ndarray:
    return _POPCOUNT[np.asarray(symbols, dtype=np.int64)]


def morton_encode(grid: np.ndarray, depth: int) -> np.ndarray:
    g = np.asarray(grid, dtype=np.int64)
    code = np.zeros(len(g), dtype=np.int64)
    for bit in range(depth - 1, -1, -1):
        octant = (((g[:, 0] >> bit) & 1) << 2) | (((g[:, 1] >> bit) & 1) << 1) | ((g[:, 2] >> bit) & 1)
        code = (code << 3) | octant
    return code


def morton_decode(code: np.ndarray, depth: int) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    out = np.zeros((len(code), 3), dtype=np.int64)
    for bit in range(depth):
        octant = (code >> (3 * bit)) & 7
        out[:, 0] |= ((octant >> 2) & 1) << bit
        out[:, 1] |= ((octant >> 1) & 1) << bit
        out[:, 2] |= (octant & 1) << bit
    return out


@dataclass
class OctreeLevels:
    """Per-level occupancy sequences plus the parent links that index them.

    ``keys[l]`` is the Morton prefix of every node at level ``l + 1``
    (0-based list index); ``parents[l]`` is the index of each node's parent
    in the previous level (-1 for the root).
    """

    depth: int
    levels: list[np.ndarray]
    keys: list[np.ndarray] = field(repr=False)
    parents: list[np.ndarray] = field(repr=False)
    duplicates: int = 0

    def level(self, l: int) -> np.ndarray:
        return self.levels[l - 1]

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.levels]

    @property
    def num_nodes(self) -> int:
        return sum(self.sizes)


def build_octree(points, depth: int) -> OctreeLevels:
    """Integer grid points -> breadth-first occupancy levels (duplicates merged)."""
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}]")
    g = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    if len(g) == 0:
        raise EmptyFrameError("cannot build an octree from zero points")
    if g.min() < 0 or g.max() > (1 << depth) - 1:
        bad = int(np.sum(np.any((g < 0) | (g > (1 << depth) - 1), axis=1)))
        raise OutOfVolumeError(f"{bad} coordinate(s) outside [0, 2^{depth} - 1]", bad)
    codes = np.unique(morton_encode(g, depth))
    duplicates = len(g) - len(codes)

    # child keys of level l nodes are the level l+1 keys; leaves are the codes
    child_keys = codes
    levels: list[np.ndarray] = [None] * depth
    keys: list[np.ndarray] = [None] * depth
    parents: list[np.ndarray] = [None] * depth
    for l in range(depth, 0, -1):
        node_of_child = child_keys >> 3
        starts = np.flatnonzero(np.r_[True, node_of_child[1:] != node_of_child[:-1]])
        occ = np.bitwise_or.reduceat(np.left_shift(1, child_keys & 7), starts)
        levels[l - 1] = occ.astype(np.int64)
        keys[l - 1] = node_of_child[starts]
        if l < depth:
            parents[l] = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(child_keys)]))
        child_keys = keys[l - 1]
    parents[0] = np.full(1, -1, dtype=np.int64)
    return OctreeLevels(depth=depth, levels=levels, keys=keys, parents=parents,
                        duplicates=duplicates)


def expand_level(keys: np.ndarray, occupancy: np.ndarray):
    """Children of one level: (child keys, parent index per child)."""
    occ = np.asarray(occupancy, dtype=np.int64)
    if occ.size and (occ.min() < 1 or occ.max() > 255):
        raise CorruptTreeError("occupancy symbols must lie in [1, 255]")
    bits = _BITS[occ]
    child = (np.asarray(keys, dtype=np.int64)[:, None] << 3) | np.arange(8)[None, :]
    parent = np.broadcast_to(np.arange(len(occ))[:, None], bits.shape)
    return child[bits], parent[bits]


def tree_from_levels(levels, depth: int) -> OctreeLevels:
    """Rebuild keys/parents from raw sequences, validating child counts."""
    if len(levels) != depth:
        raise CorruptTreeError(f"expected {depth} levels, got {len(levels)}")
    seqs = [np.asarray(s, dtype=np.int64) for s in levels]
    if len(seqs[0]) != 1:
        raise CorruptTreeError("level 1 must hold exactly the root")
    keys = [np.zeros(1, dtype=np.int64)]
    parents = [np.full(1, -1, dtype=np.int64)]
    for l in range(1, depth):
        child, parent = expand_level(keys[-1], seqs[l - 1])
        if len(child) != len(seqs[l]):
            raise CorruptTreeError(
                f"level {l + 1} holds {len(seqs[l])} nodes, parents announce {len(child)}")
        keys.append(child)
        parents.append(parent)
    expand_level(keys[-1], seqs[-1])
    return OctreeLevels(depth=depth, levels=seqs, keys=keys, parents=parents)


def reconstruct_points(tree: OctreeLevels) -> np.ndarray:
    """Leaf voxels of a tree as integer triples, in Morton order."""
    t = tree_from_levels(tree.levels, tree.depth)
    leaves, _ = expand_level(t.keys[-1], t.levels[-1])
    return morton_decode(leaves, tree.depth)


@dataclass
class NodeContext:
    """Decoder-visible context of every node on one level (arrays, row per node)."""

    level: int
    octant: np.ndarray
    ancestors: np.ndarray   # (n, G), nearest generation first, PAD_SYMBOL above root
    coords: np.ndarray      # (n, 3) node centers in [-1, 1]

    def __len__(self):
        return len(self.octant)

    def take(self, sl) -> "NodeContext":
        return NodeContext(self.level, self.octant[sl], self.ancestors[sl], self.coords[sl])


def level_context(keys: list[np.ndarray], parents: list[np.ndarray],
                  levels: list[np.ndarray], l: int, depth: int, generations: int = 3) -> NodeContext:
    """Context for level ``l`` using only levels ``< l`` (what the decoder holds)."""
    k = keys[l - 1]
    n = len(k)
    octant = (k & 7) if l > 1 else np.zeros(n, dtype=np.int64)
    anc = np.full((n, generations), PAD_SYMBOL, dtype=np.int64)
    idx = np.arange(n)
    cur = l
    for g in range(generations):
        if cur == 1:
            break
        idx = parents[cur - 1][idx]  # index into level cur - 1
        cur -= 1
        anc[:, g] = levels[cur - 1][idx]
    # node center in grid units, then mapped by the root cube to [-1, 1]
    side = 1 << (depth - l + 1)
    origin = morton_decode(k, l - 1) * side if l > 1 else np.zeros((n, 3), dtype=np.int64)
    center = origin + side / 2.0
    coords = center / float(1 << depth) * 2.0 - 1.0
    return NodeContext(level=l, octant=octant.astype(np.int64), ancestors=anc, coords=coords)


def node_contexts(tree: OctreeLevels, l: int, generations: int = 3) -> NodeContext:
    if not 1 <= l <= tree.depth:
        raise ValueError(f"level {l} outside [1, {tree.depth}]")
    return level_context(tree.keys, tree.parents, tree.levels, l, tree.depth, generations)


@dataclass
class Window:
    level: int
    index: int          # 1-based window index within the level
    start: int          # 0-based offset of the first node in the level sequence
    symbols: np.ndarray | None
    context: NodeContext

    def __len__(self):
        return len(self.context)


def window_bounds(n: int, window: int) -> list[tuple[int, int]]:
    if window < 1:
        raise ValueError("window size must be >= 1")
    return [(s, min(s + window, n)) for s in range(0, n, window)]


def window_partition(sequence, window: int, context: NodeContext | None = None,
                     level: int = 0) -> list[Window]:
    seq = None if sequence is None else np.asarray(sequence)
    n = len(seq) if seq is not None else len(context)
    out = []
    for m, (a, b) in enumerate(window_bounds(n, window), start=1):
        ctx = context.take(slice(a, b)) if context is not None else None
        out.append(Window(level=level, index=m, start=a,
                          symbols=None if seq is None else seq[a:b], context=ctx))
    return out
