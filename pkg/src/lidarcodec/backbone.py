"""Non-causal inter-level context aggregator.

Each window is tokenized from its ancestors, octant and level, enriched by a
gated EdgeConv over a k-NN graph of node centers, then refined by
bidirectional attention.  Nothing here reads a current-level symbol except
the optional fully-causal channel used by the baseline mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import engine as E
from .model import MASK_SYMBOL, Model
from .octree import NodeContext


@dataclass
class Counters:
    backbone: int = 0
    predictor: int = 0


def _sq_dist(c: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    d2 = np.zeros(np.broadcast(rows, cols).shape)
    for axis in range(3):
        diff = c[rows, axis] - c[cols, axis]
        d2 += diff * diff
    return d2


def knn_graph(coords: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``min(k, n)`` nearest nodes (self included) per row.

    Squared Euclidean distance; ties at the cut-off go to the lower index.
    The neighbor order inside a row is ascending index (max-pooling does not
    care about order, only about membership).
    """
    c = np.asarray(coords, dtype=np.float64)
    n = len(c)
    k = min(k, n)
    if k == n:
        return np.broadcast_to(np.arange(n), (n, n)).copy()
    if n <= 256:
        return _knn_dense(c, k)
    # candidate search, then exact tie resolution on recomputed distances
    m = min(n, 4 * k)
    _, cand = cKDTree(c).query(c, k=m)
    cand = np.sort(cand, axis=1)
    rows = np.arange(n)[:, None]
    d2 = _sq_dist(c, rows, cand)
    order = np.argsort(d2, axis=1, kind="stable")
    srt = np.take_along_axis(d2, order, axis=1)
    out = np.sort(np.take_along_axis(cand, order[:, :k], axis=1), axis=1)
    if m < n:
        # a tie group reaching the last candidate may continue outside the set
        unsafe = np.flatnonzero(srt[:, k - 1] * (1 + 1e-9) + 1e-300 >= srt[:, -1])
        for r in unsafe:
            d = _sq_dist(c, np.full(n, r), np.arange(n))
            out[r] = np.sort(np.lexsort((np.arange(n), d))[:k])
    return out


def _knn_dense(c: np.ndarray, k: int) -> np.ndarray:
    n = len(c)
    d2 = np.zeros((n, n))
    for axis in range(3):
        diff = c[:, axis, None] - c[None, :, axis]
        d2 += diff * diff
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1:k]
    below = d2 < kth
    tie = d2 == kth
    need = k - below.sum(axis=1, keepdims=True)
    take = below | (tie & (np.cumsum(tie, axis=1) <= need))
    return np.nonzero(take)[1].reshape(n, k)


def knn_bruteforce(coords, k):
    """O(n^2 log n) reference: sort every row by (distance, index)."""
    c = [tuple(map(float, row)) for row in coords]
    out = []
    for i, ci in enumerate(c):
        d = sorted((sum((a - b) ** 2 for a, b in zip(ci, cj)), j) for j, cj in enumerate(c))
        out.append(sorted(j for _, j in d[:min(k, len(c))]))
    return np.array(out, dtype=np.int64)


def _mlp(model, prefix, x, exact=False):
    h = E.silu(E.affine(x, model[prefix + ".w1"], model[prefix + ".b1"], exact))
    return E.affine(h, model[prefix + ".w2"], model[prefix + ".b2"], exact)


def tokenize(model: Model, ctx: NodeContext, causal_symbols=None) -> E.Tensor:
    """Concatenate ancestor, octant and level embeddings per node.

    ``causal_symbols`` (fully-causal baseline only) adds an embedding of each
    node's own symbol, or of the mask placeholder where it is not decoded yet.
    """
    cfg = model.cfg
    anc = np.asarray(ctx.ancestors)
    if anc.shape[1] != cfg.generations:
        raise IndexError(f"context carries {anc.shape[1]} generations, model expects "
                         f"{cfg.generations}")
    if not 1 <= ctx.level <= cfg.max_level:
        raise IndexError(f"level {ctx.level} outside [1, {cfg.max_level}]")
    parts = [E.embed(model["bb.anc_table"], anc[:, g]) for g in range(cfg.generations)]
    parts.append(E.embed(model["bb.oct_table"], ctx.octant))
    parts.append(E.embed(model["bb.lvl_table"], np.full(len(ctx), ctx.level)))
    tok = E.concat(parts, axis=-1)
    if causal_symbols is not None:
        sym = np.where(np.asarray(causal_symbols) > 0, causal_symbols, MASK_SYMBOL)
        tok = E.add(tok, E.embed(model["bb.causal_table"], sym))
    return tok


def gpe(model: Model, tokens: E.Tensor, coords: np.ndarray, neighbors=None) -> E.Tensor:
    """Graph positional encoding: fuse coordinates, gated EdgeConv, max-pool."""
    e1 = E.add(_mlp(model, "bb.tok", tokens), _mlp(model, "bb.pos", np.asarray(coords)))
    if neighbors is None:
        neighbors = knn_graph(coords, model.cfg.knn)
    n, k = neighbors.shape
    d = model.cfg.embed_dim
    nb = E.gather_rows(e1, neighbors)                       # (n, k, d)
    center = E.gather_rows(e1, np.repeat(np.arange(n)[:, None], k, axis=1))
    edge = _mlp(model, "bb.edge", E.concat([center, E.sub(nb, center)], axis=-1))
    gated = E.mul(edge, E.silu(E.affine(edge, model["bb.gate.w"], model["bb.gate.b"])))
    msg = E.affine(gated, model["bb.agg.w"], model["bb.agg.b"])
    assert msg.shape == (n, k, d)
    return E.max_over(msg, axis=1)


def _take0(x: E.Tensor, i: int) -> E.Tensor:
    def bw(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        E._acc(x, gx)
    return E._make(x.data[i], (x,), bw, "take")


def attention_layer(model: Model, A: E.Tensor, i: int, weights_out=None) -> E.Tensor:
    cfg = model.cfg
    n, d = A.shape
    H = cfg.heads
    dh = d // H
    qkv = E.affine(A, model[f"bb.att{i}.wqkv"], model[f"bb.att{i}.bqkv"])
    qkv = E.transpose(E.reshape(qkv, (n, 3, H, dh)), (1, 2, 0, 3))   # (3, H, n, dh)
    q, k, v = (_take0(qkv, j) for j in range(3))
    scores = E.mul(E.matmul(q, E.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    att = E.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(att.data)
    ctx = E.reshape(E.transpose(E.matmul(att, v), (1, 0, 2)), (n, d))
    mha = E.affine(ctx, model[f"bb.att{i}.wo"], model[f"bb.att{i}.bo"])
    A1 = E.layer_norm(E.add(A, mha), model[f"bb.att{i}.ln1.g"], model[f"bb.att{i}.ln1.b"])
    ff = _mlp(model, f"bb.att{i}.ff", A1)
    return E.layer_norm(E.add(A1, ff), model[f"bb.att{i}.ln2.g"], model[f"bb.att{i}.ln2.b"])


def attention_stack(model: Model, A: E.Tensor, layers: int | None = None,
                    weights_out=None) -> E.Tensor:
    for i in range(model.cfg.layers if layers is None else layers):
        A = attention_layer(model, A, i, weights_out)
    return A


def run_backbone(model: Model, ctx: NodeContext, counters: Counters | None = None,
                 causal_symbols=None) -> E.Tensor:
    """Inter-level context features for one window (one invocation)."""
    if counters is not None:
        counters.backbone += 1
    tok = tokenize(model, ctx, causal_symbols)
    return attention_stack(model, gpe(model, tok, ctx.coords))
