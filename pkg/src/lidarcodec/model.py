"""Model configuration, parameter store and checkpoint container.

Checkpoint layout (all little-endian)::

    b"LCKP"  u16 version
    u32 n    config JSON (n bytes, sorted keys, UTF-8)
    u32 count
    count x { u16 len, name, u8 ndim, ndim x u32 dims, f64 values }
    u64 digest   blake2b-64 of every preceding byte

The digest identifies the model inside bitstream headers.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .engine import Parameter, Tensor
from .errors import ConfigMismatchError, FormatError

CKPT_MAGIC = b"LCKP"
CKPT_VERSION = 1
VOCAB = 256          # occupancy symbols 0..255, 0 = padding
MASK_SYMBOL = 256    # placeholder for undecoded nodes in fully-causal mode
NUM_CLASSES = 255


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    layers: int = 3
    heads: int = 4
    ffn_dim: int = 256
    knn: int = 8
    generations: int = 3
    anc_dim: int = 32
    oct_dim: int = 16
    lvl_dim: int = 16
    max_level: int = 24
    pred_dim: int = 32
    head_hidden: int = 64

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.knn < 1 or self.generations < 1:
            raise ValueError("knn and generations must be >= 1")

    @property
    def token_dim(self) -> int:
        return self.generations * self.anc_dim + self.oct_dim + self.lvl_dim

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, t, p = cfg.embed_dim, cfg.token_dim, cfg.pred_dim
    s = {
        "bb.anc_table": (VOCAB, cfg.anc_dim),
        "bb.oct_table": (8, cfg.oct_dim),
        "bb.lvl_table": (cfg.max_level + 1, cfg.lvl_dim),
        "bb.causal_table": (VOCAB + 1, t),
        "bb.tok.w1": (t, d), "bb.tok.b1": (d,), "bb.tok.w2": (d, d), "bb.tok.b2": (d,),
        "bb.pos.w1": (3, d), "bb.pos.b1": (d,), "bb.pos.w2": (d, d), "bb.pos.b2": (d,),
        "bb.edge.w1": (2 * d, d), "bb.edge.b1": (d,), "bb.edge.w2": (d, d), "bb.edge.b2": (d,),
        "bb.gate.w": (d, d), "bb.gate.b": (d,),
        "bb.agg.w": (d, d), "bb.agg.b": (d,),
    }
    for i in range(cfg.layers):
        s.update({
            f"bb.att{i}.wqkv": (d, 3 * d), f"bb.att{i}.bqkv": (3 * d,),
            f"bb.att{i}.wo": (d, d), f"bb.att{i}.bo": (d,),
            f"bb.att{i}.ln1.g": (d,), f"bb.att{i}.ln1.b": (d,),
            f"bb.att{i}.ff.w1": (d, cfg.ffn_dim), f"bb.att{i}.ff.b1": (cfg.ffn_dim,),
            f"bb.att{i}.ff.w2": (cfg.ffn_dim, d), f"bb.att{i}.ff.b2": (d,),
            f"bb.att{i}.ln2.g": (d,), f"bb.att{i}.ln2.b": (d,),
        })
    s.update({
        "pr.in.w": (d, p), "pr.in.b": (p,),
        "pr.sib_table": (VOCAB, p),
        "pr.decay.w": (p, p), "pr.decay.b": (p,),
        "pr.gain.w": (p, p), "pr.gain.b": (p,),
        "pr.out.w": (p, p), "pr.out.b": (p,),
        "pr.head.w1": (p, cfg.head_hidden), "pr.head.b1": (cfg.head_hidden,),
        "pr.head.w2": (cfg.head_hidden, NUM_CLASSES), "pr.head.b2": (NUM_CLASSES,),
    })
    return s


def _init_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name == "bb.causal_table":
        return np.zeros(shape)
    if name.endswith(".g"):
        return np.ones(shape)
    if name == "pr.decay.b":
        return np.full(shape, 2.0)  # start with long memory, sigmoid(2) ~ 0.88
    if len(shape) == 1:
        return np.zeros(shape)
    if "table" in name:
        return rng.normal(0.0, 0.5, size=shape)
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)


class Model:
    """Named parameters for backbone (``bb.*``) and predictor (``pr.*``)."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._digest = None

    @classmethod
    def create(cls, cfg: ModelConfig | None = None, seed: int = 0) -> "Model":
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        params = {name: Parameter(_init_value(name, shape, rng), name)
                  for name, shape in _shapes(cfg).items()}
        return cls(cfg, params)

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def parameters(self, prefix: str = "") -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def touch(self):
        """Invalidate the cached digest after weights change."""
        self._digest = None

    def to_bytes(self) -> bytes:
        cfg = self.cfg.to_json().encode()
        out = bytearray(CKPT_MAGIC)
        out += struct.pack("<HI", CKPT_VERSION, len(cfg)) + cfg
        out += struct.pack("<I", len(self.params))
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data, dtype="<f8")
            raw = name.encode()
            out += struct.pack("<H", len(raw)) + raw
            out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes()
        out += struct.pack("<Q", _hash64(bytes(out)))
        return bytes(out)

    @property
    def digest(self) -> int:
        if self._digest is None:
            self._digest = struct.unpack("<Q", self.to_bytes()[-8:])[0]
        return self._digest

    @classmethod
    def from_bytes(cls, blob: bytes, expected: ModelConfig | None = None) -> "Model":
        if len(blob) < 22 or blob[:4] != CKPT_MAGIC:
            raise FormatError("not a checkpoint file")
        body, tail = blob[:-8], blob[-8:]
        if struct.unpack("<Q", tail)[0] != _hash64(body):
            raise FormatError("checkpoint digest mismatch (corrupt file)")
        version, n = struct.unpack_from("<HI", blob, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 10
        try:
            cfg = ModelConfig.from_dict(json.loads(blob[pos:pos + n]))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"bad checkpoint config: {exc}") from None
        if expected is not None and cfg != expected:
            raise ConfigMismatchError("checkpoint config differs from the requested model")
        pos += n
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shapes = _shapes(cfg)
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            if shapes.get(name) != tuple(shape):
                raise ConfigMismatchError(f"parameter {name} has shape {shape}, config expects "
                                          f"{shapes.get(name)}")
            params[name] = Parameter(arr.astype(np.float64), name)
        if pos != len(body) or set(params) != set(shapes):
            raise FormatError("checkpoint parameter table incomplete")
        return cls(cfg, params)


def _hash64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def save_checkpoint(model: Model, path) -> int:
    blob = model.to_bytes()
    Path(path).write_bytes(blob)
    return struct.unpack("<Q", blob[-8:])[0]


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    return Model.from_bytes(blob, expected)
