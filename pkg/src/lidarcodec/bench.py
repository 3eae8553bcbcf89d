"""Stage / depth / mode sweeps with per-cell round-trip verification."""
from __future__ import annotations

import csv
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codec import DEFAULT_WINDOW, decode_frame, encode_frame, quantized_reference
from .errors import CodecError
from .geometry import SensorIntrinsics
from .metrics import PEAK_KITTI, d1_psnr, report_psnr
from .model import Model


@dataclass
class BenchRow:
    frame: str
    mode: str
    stages: int
    depth: int
    fully_causal: bool
    points: int
    bpp: float = 0.0
    ideal_bpp: float = 0.0
    d1_psnr: float = 0.0
    encode_time: float = 0.0
    decode_time: float = 0.0
    backbone_invocations: int = 0
    predictor_invocations: int = 0
    lossless: bool = False
    error: str = ""


@dataclass
class BenchReport:
    rows: list[BenchRow]
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.lossless for r in self.rows)

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": [asdict(r) for r in self.rows]}, indent=2)

    def write_csv(self, path):
        names = list(BenchRow.__dataclass_fields__)
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in self.rows:
                w.writerow(asdict(r))

    def write(self, prefix):
        """Write ``<prefix>.csv`` and ``<prefix>.json``."""
        prefix = Path(prefix)
        self.write_csv(prefix.with_suffix(".csv"))
        prefix.with_suffix(".json").write_text(self.to_json())


def run_cell(points, name, model_blob, mode, S, L, window, intrinsics, fully_causal, peak):
    model = Model.from_bytes(model_blob) if model_blob is not None else None
    row = BenchRow(frame=name, mode=mode, stages=S, depth=L, fully_causal=fully_causal,
                   points=len(points))
    try:
        blob, st = encode_frame(points, model, stages=S, window=window, depth=L, mode=mode,
                                intrinsics=intrinsics, fully_causal=fully_causal)
        dec = decode_frame(blob, model, intrinsics)
        ref = quantized_reference(points, mode, L, intrinsics)
        row.lossless = bool(np.array_equal(ref, dec.grid))
        if not row.lossless:
            row.error = "decoded grid differs from the quantized input"
        row.bpp, row.ideal_bpp = st.bpp, st.ideal_bpp
        row.encode_time, row.decode_time = st.encode_time, dec.stats.decode_time
        row.backbone_invocations = st.backbone_invocations
        row.predictor_invocations = st.predictor_invocations
        row.d1_psnr = report_psnr(d1_psnr(points, dec.points, peak))
    except CodecError as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def run_bench(corpus, model: Model | None, modes=("cartesian",), stage_set=(1, 2, 4, 8, 16, 0),
              depths=(12,), window: int = DEFAULT_WINDOW,
              intrinsics: SensorIntrinsics | None = None, fully_causal=(False,),
              workers: int = 1, peak: float = PEAK_KITTI) -> BenchReport:
    """Sweep every (frame, mode, S, L, causal-mode) cell.

    ``corpus`` is a list of ``(name, points)`` pairs or bare arrays.
    """
    frames = [c if isinstance(c, tuple) else (f"frame{i}", c) for i, c in enumerate(corpus)]
    blob = model.to_bytes() if model is not None else None
    cells = [(pts, name, blob, mode, S, L, window, intrinsics, fc, peak)
             for name, pts in frames for mode in modes for L in depths
             for fc in fully_causal for S in stage_set]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, *zip(*cells)))
    else:
        rows = [run_cell(*c) for c in cells]
    meta = {"machine": platform.platform(), "python": platform.python_version(),
            "model_digest": f"{model.digest:016x}" if model is not None else None,
            "model_config": json.loads(model.cfg.to_json()) if model is not None else None,
            "window": window, "peak": peak, "workers": workers,
            "wall_time": time.perf_counter() - t0}
    return BenchReport(rows=rows, meta=meta)
