import numpy as np
import pytest

from lidarcodec import octree as O
from lidarcodec.errors import CorruptTreeError, EmptyFrameError, OutOfVolumeError


def naive_levels(points, depth):
    """Recursive reference serializer: breadth-first, octants ascending."""
    pts = {tuple(p) for p in np.asarray(points).tolist()}
    nodes = [(0, 0, 0)]
    out = []
    for l in range(1, depth + 1):
        shift = depth - l
        occ, nxt = [], []
        for (x, y, z) in nodes:
            code = 0
            for o in range(8):
                cx, cy, cz = 2 * x + (o >> 2 & 1), 2 * y + (o >> 1 & 1), 2 * z + (o & 1)
                if any((px >> shift) == cx and (py >> shift) == cy and (pz >> shift) == cz
                       for px, py, pz in pts):
                    code |= 1 << o
                    nxt.append((cx, cy, cz))
            occ.append(code)
        out.append(occ)
        nodes = nxt
    return out


def test_single_point():
    t = O.build_octree([[0, 0, 0]], 1)
    assert [s.tolist() for s in t.levels] == [[1]]
    t = O.build_octree([[1, 1, 1]], 2)
    assert [s.tolist() for s in t.levels] == [[1], [128]]


def test_corners_fill_root():
    corners = [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    assert O.build_octree(corners, 1).levels[0].tolist() == [255]


def test_matches_naive_serializer():
    rng = np.random.default_rng(0)
    pts = rng.integers(0, 16, size=(40, 3))
    t = O.build_octree(pts, 4)
    assert [s.tolist() for s in t.levels] == naive_levels(pts, 4)


def test_round_trip_and_duplicates():
    rng = np.random.default_rng(1)
    pts = rng.integers(0, 1 << 12, size=(5000, 3))
    pts = np.vstack([pts, pts[:10]])
    t = O.build_octree(pts, 12)
    assert t.duplicates == 10
    back = O.reconstruct_points(t)
    assert len(back) == 5000
    assert {tuple(p) for p in back.tolist()} == {tuple(p) for p in pts.tolist()}
    sizes = t.sizes
    assert sizes[0] == 1 and all(a <= b for a, b in zip(sizes, sizes[1:]))
    for l in range(1, 12):
        assert O.popcount(t.level(l)).sum() == sizes[l]


def test_errors():
    with pytest.raises(EmptyFrameError):
        O.build_octree(np.zeros((0, 3)), 4)
    with pytest.raises(OutOfVolumeError):
        O.build_octree([[16, 0, 0]], 4)
    with pytest.raises(CorruptTreeError):
        O.tree_from_levels([np.array([3]), np.array([1])], 2)
    with pytest.raises(CorruptTreeError):
        O.tree_from_levels([np.array([1]), np.array([0])], 2)


def test_contexts_use_only_coarser_levels():
    rng = np.random.default_rng(2)
    t = O.build_octree(rng.integers(0, 256, size=(300, 3)), 8)
    ctx = O.node_contexts(t, 5)
    assert ctx.ancestors.shape == (len(t.level(5)), 3)
    assert np.all(np.abs(ctx.coords) < 1)
    # scrambling level >= 5 symbols cannot change the level-5 context
    levels = [s.copy() for s in t.levels]
    for l in range(4, 8):
        levels[l][:] = 255
    again = O.level_context(t.keys, t.parents, levels, 5, 8)
    assert np.array_equal(again.ancestors, ctx.ancestors)
    root = O.node_contexts(t, 1)
    assert root.ancestors.tolist() == [[0, 0, 0]] and root.octant.tolist() == [0]


def test_ancestors_nearest_first():
    t = O.build_octree([[5, 3, 6]], 3)
    ctx = O.node_contexts(t, 3)
    assert ctx.ancestors.tolist() == [[t.level(2)[0], t.level(1)[0], 0]]


def test_window_partition():
    assert O.window_bounds(5, 2) == [(0, 2), (2, 4), (4, 5)]
    ws = O.window_partition(np.arange(1, 6), 2)
    assert [len(w.symbols) for w in ws] == [2, 2, 1]
    assert [w.index for w in ws] == [1, 2, 3]
