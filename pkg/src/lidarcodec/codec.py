"""Frame encoder/decoder.

Bitstream (little-endian)::

    magic "OCTZ", u8 version
    u8 depth, u8 direct_levels, u8 mode, u8 flags (bit 0: fully-causal)
    u32 stages (0 = autoregressive), u32 window
    3 x f64 scale, 3 x f64 offset
    u64 input point count, u64 leaf count
    u64 model digest, u64 intrinsics digest (0 when unused)
    u32 payload length
    payload (one range-coder stream)
    u32 CRC32 of everything above

Levels ``1..direct_levels`` are coded with a flat table.  Each later level is
coded stage by stage; within a stage, windows ascend and positions ascend.
Encoder and decoder run the very same routine (:func:`_code_tree`); the only
difference is whether symbols come from the tree or from the range decoder.
"""
from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .backbone import Counters, run_backbone
from .errors import (ConfigMismatchError, CorruptTreeError, EmptyFrameError, FormatError,
                     InvalidPointError)
from .geometry import (MODE_CODES, MODES, QuantizationParams, SensorIntrinsics, dequantize,
                       fit_quantization, forward_transform, inverse_transform, quantize)
from .model import Model
from .octree import (MAX_DEPTH, build_octree, expand_level, level_context, morton_decode,
                     window_bounds)
from .predictor import LevelPredictor, PredictorArrays
from .rangecoder import (PRECISION, UNIFORM_CDF, RangeDecoder, RangeEncoder, quantize_pmf)

MAGIC = b"OCTZ"
VERSION = 1
DEFAULT_WINDOW = 1024
DEFAULT_DIRECT_LEVELS = 2
FLAG_FULLY_CAUSAL = 1

_HEAD = struct.Struct("<4sBBBBBII3d3dQQQQI")


@dataclass(frozen=True)
class Header:
    depth: int
    stages: int
    window: int
    mode: str
    quant: QuantizationParams
    point_count: int
    leaf_count: int
    model_digest: int
    intrinsics_digest: int = 0
    direct_levels: int = DEFAULT_DIRECT_LEVELS
    fully_causal: bool = False

    def pack(self, payload_len: int) -> bytes:
        return _HEAD.pack(MAGIC, VERSION, self.depth, self.direct_levels, MODE_CODES[self.mode],
                          FLAG_FULLY_CAUSAL if self.fully_causal else 0, self.stages, self.window,
                          *self.quant.scale, *self.quant.offset, self.point_count,
                          self.leaf_count, self.model_digest, self.intrinsics_digest, payload_len)

    @classmethod
    def unpack(cls, blob: bytes) -> tuple["Header", bytes]:
        if len(blob) < _HEAD.size + 4:
            raise FormatError("bitstream shorter than its header")
        if blob[:4] != MAGIC:
            raise FormatError("bad magic: not a bitstream")
        (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
        if zlib.crc32(blob[:-4]) != crc:
            raise FormatError("bitstream checksum mismatch (corrupt or truncated)")
        (_, version, depth, direct, mode, flags, stages, window, *rest) = _HEAD.unpack_from(blob)
        if version != VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        scale, offset = rest[0:3], rest[3:6]
        points, leaves, mdig, idig, plen = rest[6:]
        if mode >= len(MODES) or not 1 <= depth <= MAX_DEPTH or window < 1:
            raise FormatError("header fields out of range")
        if _HEAD.size + plen + 4 != len(blob):
            raise FormatError("payload length disagrees with the file size")
        try:
            quant = QuantizationParams(depth, scale, offset)
        except ValueError as exc:
            raise FormatError(str(exc)) from None
        hdr = cls(depth=depth, stages=stages, window=window, mode=MODES[mode], quant=quant,
                  point_count=points, leaf_count=leaves, model_digest=mdig,
                  intrinsics_digest=idig, direct_levels=direct,
                  fully_causal=bool(flags & FLAG_FULLY_CAUSAL))
        return hdr, blob[_HEAD.size:_HEAD.size + plen]


def pack_stream(header: Header, payload: bytes) -> bytes:
    body = header.pack(len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


@dataclass
class FrameStats:
    point_count: int = 0
    leaf_count: int = 0
    rejected: int = 0
    duplicates: int = 0
    payload_bytes: int = 0
    total_bytes: int = 0
    windows: int = 0
    backbone_invocations: int = 0
    predictor_invocations: int = 0
    ideal_bits: float = 0.0
    level_bits: list = field(default_factory=list)     # ideal bits per level
    level_nodes: list = field(default_factory=list)
    encode_time: float = 0.0
    decode_time: float = 0.0
    backbone_time: float = 0.0
    predictor_time: float = 0.0
    coder_time: float = 0.0

    @property
    def bpp(self) -> float:
        return 8.0 * self.payload_bytes / self.point_count if self.point_count else 0.0

    @property
    def ideal_bpp(self) -> float:
        return self.ideal_bits / self.point_count if self.point_count else 0.0

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["bpp"] = self.bpp
        d["ideal_bpp"] = self.ideal_bpp
        return d


@dataclass
class DecodedFrame:
    grid: np.ndarray          # unique integer grid points, Morton order
    points: np.ndarray        # grid points mapped back to Cartesian space
    header: Header
    stats: FrameStats


# --- shared level coder --------------------------------------------------------

class _SymbolIO:
    """Encode known symbols, or decode them, behind one interface."""

    def __init__(self, encoder: RangeEncoder | None = None, decoder: RangeDecoder | None = None):
        self.enc, self.dec = encoder, decoder
        self.ideal = 0.0

    def code(self, cdfs: np.ndarray, symbols: np.ndarray | None) -> np.ndarray:
        cdfs = np.atleast_2d(cdfs)
        if self.enc is not None:
            for row, s in zip(cdfs, symbols.tolist()):
                self.enc.encode(row, s)
            out = symbols
        else:
            out = np.fromiter((self.dec.decode(row.tolist()) for row in cdfs), dtype=np.int64,
                              count=len(cdfs))
        freq = cdfs[np.arange(len(out)), out] - cdfs[np.arange(len(out)), out - 1]
        self.ideal += float(np.sum(PRECISION - np.log2(freq)))
        return out


def _code_tree(model: Model | None, hdr: Header, io: _SymbolIO, stats: FrameStats,
               levels_in: list[np.ndarray] | None):
    """Walk the tree level by level, coding (or decoding) every occupancy symbol."""
    depth, W, S = hdr.depth, hdr.window, hdr.stages
    gens = model.cfg.generations if model is not None else 1
    counters = Counters()
    keys = [np.zeros(1, dtype=np.int64)]
    parents = [np.full(1, -1, dtype=np.int64)]
    levels: list[np.ndarray] = []
    for l in range(1, depth + 1):
        n = len(keys[-1])
        if n > max(hdr.leaf_count, 1):
            raise CorruptTreeError(f"level {l} holds {n} nodes, more than the leaf count")
        truth = levels_in[l - 1] if levels_in is not None else None
        before = io.ideal
        if l <= hdr.direct_levels or model is None:
            t0 = time.perf_counter()
            sym = io.code(np.broadcast_to(UNIFORM_CDF, (n, UNIFORM_CDF.size)), truth)
            stats.coder_time += time.perf_counter() - t0
        else:
            ctx = level_context(keys, parents, levels, l, depth, gens)
            bounds = window_bounds(n, W)
            stats.windows += len(bounds)
            if hdr.fully_causal:
                sym = _code_level_fully_causal(model, ctx, bounds, S, truth, io, counters, stats)
            else:
                sym = _code_level(model, ctx, bounds, S, truth, io, counters, stats)
        stats.level_bits.append(io.ideal - before)
        stats.level_nodes.append(n)
        levels.append(sym)
        if l < depth:
            try:
                child, parent = expand_level(keys[-1], sym)
            except CorruptTreeError:
                raise
            keys.append(child)
            parents.append(parent)
    stats.backbone_invocations += counters.backbone
    stats.predictor_invocations += counters.predictor
    stats.ideal_bits = io.ideal
    return levels, keys


def _window_matrix(flat: np.ndarray | None, bounds, T: int) -> np.ndarray:
    m = np.zeros((len(bounds), T), dtype=np.int64)
    if flat is not None:
        for w, (a, b) in enumerate(bounds):
            m[w, :b - a] = flat[a:b]
    return m


def _emit(io, probs, rows, starts, truth, decoded, stats):
    t0 = time.perf_counter()
    w, i = rows
    cdfs = quantize_pmf(probs)
    want = None if truth is None else truth[starts[w] + i]
    decoded[w, i] = io.code(cdfs, want)
    stats.coder_time += time.perf_counter() - t0


def _code_level(model, ctx, bounds, S, truth, io, counters, stats):
    t0 = time.perf_counter()
    arrays = PredictorArrays(model)
    with E.no_grad():
        proj = [arrays.project(run_backbone(model, ctx.take(slice(a, b)), counters).data)
                for a, b in bounds]
    stats.backbone_time += time.perf_counter() - t0
    lp = LevelPredictor(model, proj, S, counters)
    starts = np.array([a for a, _ in bounds])
    decoded = _window_matrix(None, bounds, lp.T)
    autoregressive = S == 0 or S >= lp.T
    for s in range(1, lp.num_stages + 1):
        t1 = time.perf_counter()
        rows, probs = lp.step(s, decoded) if autoregressive else lp.stage(s, decoded)
        stats.predictor_time += time.perf_counter() - t1
        _emit(io, probs, rows, starts, truth, decoded, stats)
    return np.concatenate([decoded[w, :b - a] for w, (a, b) in enumerate(bounds)])


def _code_level_fully_causal(model, ctx, bounds, S, truth, io, counters, stats):
    """Baseline: the backbone sees decoded current-level symbols and reruns every stage."""
    arrays = PredictorArrays(model)
    T = max(b - a for a, b in bounds)
    starts = np.array([a for a, _ in bounds])
    decoded = _window_matrix(None, bounds, T)
    n_stages = T if S == 0 else min(S, T)
    for s in range(1, n_stages + 1):
        t0 = time.perf_counter()
        with E.no_grad():
            proj = [arrays.project(run_backbone(model, ctx.take(slice(a, b)), counters,
                                                causal_symbols=decoded[w, :b - a]).data)
                    for w, (a, b) in enumerate(bounds)]
        stats.backbone_time += time.perf_counter() - t0
        t1 = time.perf_counter()
        rows, probs = LevelPredictor(model, proj, S, counters).stage(s, decoded)
        stats.predictor_time += time.perf_counter() - t1
        _emit(io, probs, rows, starts, truth, decoded, stats)
    return np.concatenate([decoded[w, :b - a] for w, (a, b) in enumerate(bounds)])


# --- public API ------------------------------------------------------------------

def prepare_frame(points, mode: str, depth: int, intrinsics: SensorIntrinsics | None = None,
                  quant: QuantizationParams | None = None):
    """Cartesian points -> (grid points, quantization, rejected count)."""
    if mode not in MODES:
        raise FormatError(f"unknown preprocessing mode {mode!r}")
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}]")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidPointError("points must be an (n, 3) array")
    if len(pts) == 0:
        raise EmptyFrameError("frame holds no points")
    if not np.all(np.isfinite(pts)):
        raise InvalidPointError("points must be finite")
    coords, keep = forward_transform(pts, mode, intrinsics)
    coords = coords[keep]
    if len(coords) == 0:
        raise EmptyFrameError("no point survives preprocessing")
    if quant is None:
        quant = fit_quantization(coords, depth, mode, intrinsics)
    return quantize(coords, quant), quant, int((~keep).sum())


def encode_frame(points, model: Model | None, *, stages: int = 1, window: int = DEFAULT_WINDOW,
                 depth: int = 12, mode: str = "cartesian",
                 intrinsics: SensorIntrinsics | None = None,
                 quant: QuantizationParams | None = None,
                 direct_levels: int = DEFAULT_DIRECT_LEVELS,
                 fully_causal: bool = False) -> tuple[bytes, FrameStats]:
    """Compress one frame.  ``model=None`` codes every level with the flat table."""
    t0 = time.perf_counter()
    if stages < 0 or window < 1:
        raise ValueError("stages must be >= 0 and window >= 1")
    grid, quant, rejected = prepare_frame(points, mode, depth, intrinsics, quant)
    tree = build_octree(grid, depth)
    hdr = Header(depth=depth, stages=stages, window=window, mode=mode, quant=quant,
                 point_count=len(points), leaf_count=int(len(grid) - tree.duplicates),
                 model_digest=model.digest if model is not None else 0,
                 intrinsics_digest=intrinsics.digest() if (mode == "cylbeam" and intrinsics) else 0,
                 direct_levels=direct_levels, fully_causal=fully_causal)
    stats = FrameStats(point_count=len(points), leaf_count=hdr.leaf_count, rejected=rejected,
                       duplicates=tree.duplicates)
    io = _SymbolIO(encoder=RangeEncoder())
    _code_tree(model, hdr, io, stats, tree.levels)
    payload = io.enc.finish()
    blob = pack_stream(hdr, payload)
    stats.payload_bytes = len(payload)
    stats.total_bytes = len(blob)
    stats.encode_time = time.perf_counter() - t0
    return blob, stats


def encode_frame_fully_causal(points, model: Model, **kw) -> tuple[bytes, FrameStats]:
    return encode_frame(points, model, fully_causal=True, **kw)


def read_header(blob: bytes) -> Header:
    return Header.unpack(bytes(blob))[0]


def decode_frame(blob: bytes, model: Model | None,
                 intrinsics: SensorIntrinsics | None = None) -> DecodedFrame:
    t0 = time.perf_counter()
    hdr, payload = Header.unpack(bytes(blob))
    digest = model.digest if model is not None else 0
    if hdr.model_digest != digest:
        raise ConfigMismatchError(
            f"bitstream expects model {hdr.model_digest:016x}, loaded {digest:016x}")
    if hdr.mode == "cylbeam":
        if intrinsics is None:
            raise FormatError("cylbeam bitstream requires sensor intrinsics to decode")
        if hdr.intrinsics_digest and intrinsics.digest() != hdr.intrinsics_digest:
            raise ConfigMismatchError("sensor intrinsics differ from the encoder's")
    stats = FrameStats(point_count=hdr.point_count, leaf_count=hdr.leaf_count,
                       payload_bytes=len(payload), total_bytes=len(blob))
    dec = RangeDecoder(payload)
    io = _SymbolIO(decoder=dec)
    levels, keys = _code_tree(model, hdr, io, stats, None)
    dec.finish()
    leaves, _ = expand_level(keys[-1], levels[-1])
    if len(leaves) != hdr.leaf_count:
        raise CorruptTreeError(f"decoded {len(leaves)} leaves, header announces {hdr.leaf_count}")
    grid = morton_decode(leaves, hdr.depth)
    points = inverse_transform(dequantize(grid, hdr.quant), hdr.mode, intrinsics)
    stats.decode_time = time.perf_counter() - t0
    return DecodedFrame(grid=grid, points=points, header=hdr, stats=stats)


def quantized_reference(points, mode: str, depth: int,
                        intrinsics: SensorIntrinsics | None = None) -> np.ndarray:
    """Unique grid points of a frame in Morton order (what a decode must return)."""
    grid, _, _ = prepare_frame(points, mode, depth, intrinsics)
    tree = build_octree(grid, depth)
    leaves, _ = expand_level(tree.keys[-1], tree.levels[-1])
    return morton_decode(leaves, depth)


def expected_backbone_calls(level_sizes, window: int, direct_levels: int, stages: int = 1,
                            fully_causal: bool = False) -> int:
    """Invocation count implied by the level sizes (neural levels only)."""
    per = sum(-(-n // window) for n in level_sizes[direct_levels:])
    if not fully_causal:
        return per
    total = 0
    for n in level_sizes[direct_levels:]:
        T = min(n, window)
        s_eff = T if stages == 0 else min(stages, T)
        total += s_eff * -(-n // window)
    return total
