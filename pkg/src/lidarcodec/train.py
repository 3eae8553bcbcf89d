"""Joint training of backbone and stage-scalable predictor.

Each step draws a batch of windows and one stage count ``S`` from the
configured set (uniformly), runs the backbone once per window and the
predictor once per stage, and minimizes the code length in bits.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .backbone import Counters, run_backbone
from .codec import DEFAULT_DIRECT_LEVELS, prepare_frame
from .errors import NumericError
from .geometry import SensorIntrinsics
from .model import Model, save_checkpoint
from .octree import NodeContext, build_octree, node_contexts, window_partition
from .predictor import effective_stages, predictor_loss

CLAMP_EPS = 1e-12


@dataclass
class TrainConfig:
    lr: float = 5e-4
    steps: int = 200
    batch_windows: int = 4
    stage_set: tuple = (1, 2, 4, 0)     # 0 stands for S = W (autoregressive)
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    window: int = 1024
    depth: int = 12
    mode: str = "cartesian"
    direct_levels: int = DEFAULT_DIRECT_LEVELS

    def __post_init__(self):
        self.stage_set = tuple(int(s) for s in self.stage_set)
        if not self.stage_set:
            raise ValueError("stage set must not be empty")
        if any(s < 0 or s > self.window for s in self.stage_set):
            raise ValueError(f"stage counts must lie in [1, {self.window}] or be 0 (= W)")


@dataclass
class TrainWindow:
    context: NodeContext
    symbols: np.ndarray


@dataclass
class StepResult:
    step: int
    stages: int
    loss_bits: float          # mean bits per symbol
    symbols: int
    coverage: float           # share of positions 2..n that received a sibling embedding
    grad_norm: float
    seconds: float
    aborted: bool = False
    error: str = ""


@dataclass
class CrossEntropy:
    bits: float
    clamped: int = 0


def cross_entropy_loss(probs, symbols) -> CrossEntropy:
    """Mean ``-log2 p(o_i)``; zero probabilities are clamped to 1e-12 and counted."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    s = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if len(s) != len(p):
        raise ValueError("one distribution per symbol expected")
    if s.size and (s.min() < 1 or s.max() > p.shape[1]):
        raise ValueError("symbols must lie in [1, 255]")
    q = p[np.arange(len(s)), s - 1]
    low = q < CLAMP_EPS
    return CrossEntropy(bits=float(np.mean(-np.log2(np.maximum(q, CLAMP_EPS)))),
                        clamped=int(low.sum()))


def frame_windows(points, cfg: TrainConfig, generations: int,
                  intrinsics: SensorIntrinsics | None = None) -> list[TrainWindow]:
    """Every neural-coded window of one frame, with ground-truth symbols."""
    grid, _, _ = prepare_frame(points, cfg.mode, cfg.depth, intrinsics)
    tree = build_octree(grid, cfg.depth)
    out = []
    for l in range(cfg.direct_levels + 1, cfg.depth + 1):
        ctx = node_contexts(tree, l, generations)
        for w in window_partition(tree.level(l), cfg.window, ctx, l):
            out.append(TrainWindow(w.context, w.symbols))
    return out


def build_corpus(frames, cfg: TrainConfig, generations: int,
                 intrinsics: SensorIntrinsics | None = None) -> list[TrainWindow]:
    corpus = []
    for pts in frames:
        corpus.extend(frame_windows(pts, cfg, generations, intrinsics))
    return corpus


def _window_loss(model, win: TrainWindow, S: int, counters=None, only_stage=None,
                 causal_symbols=None):
    A = run_backbone(model, win.context, counters, causal_symbols=causal_symbols)
    return predictor_loss(model, A, win.symbols, S, only_stage)


def train_step(model: Model, opt: E.AdamW, batch: list[TrainWindow], S: int,
               cfg: TrainConfig, step: int = 0, counters: Counters | None = None) -> StepResult:
    t0 = time.perf_counter()
    opt.zero_grad()
    total, count, covered, slots = None, 0, 0, 0
    try:
        for win in batch:
            bits, n, cov = _window_loss(model, win, S, counters)
            total = bits if total is None else E.add(total, bits)
            count += n
            covered += cov
            slots += max(len(win.symbols) - 1, 0)
        loss = E.mul(total, 1.0 / count)
        if not math.isfinite(float(loss.data)):
            raise NumericError("non-finite loss")
        E.backward(loss)
        norm = E.clip_grad_norm(opt.params, cfg.grad_clip)
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm")
    except NumericError as exc:
        opt.zero_grad()
        return StepResult(step, S, math.nan, count, 0.0, math.nan,
                          time.perf_counter() - t0, aborted=True, error=str(exc))
    opt.step()
    model.touch()
    return StepResult(step, S, float(loss.data), count, covered / max(slots, 1), norm,
                      time.perf_counter() - t0)


def train(model: Model, corpus: list[TrainWindow], cfg: TrainConfig, log_path=None,
          checkpoint_path=None, params=None) -> list[StepResult]:
    """Run ``cfg.steps`` optimizer steps; returns one record per step."""
    if not corpus:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = E.AdamW(params if params is not None else model.parameters(), lr=cfg.lr,
                  weight_decay=cfg.weight_decay)
    log = open(log_path, "a") if log_path else None
    history = []
    try:
        for step in range(1, cfg.steps + 1):
            S = int(rng.choice(cfg.stage_set))
            pick = rng.choice(len(corpus), size=min(cfg.batch_windows, len(corpus)),
                              replace=False)
            res = train_step(model, opt, [corpus[i] for i in pick], S, cfg, step)
            history.append(res)
            if log:
                log.write(json.dumps({"step": step, "S": S, "loss_bits": res.loss_bits,
                                      "wall_time": res.seconds, "aborted": res.aborted}) + "\n")
                log.flush()
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path)
    finally:
        if log:
            log.close()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return history


def fine_tune_causal(model: Model, corpus: list[TrainWindow], cfg: TrainConfig,
                     stages: int = 4, log_path=None) -> list[StepResult]:
    """Train only the masked symbol channel of the fully-causal baseline.

    All other weights stay frozen, so the post-causal model is unaffected.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    opt = E.AdamW([model["bb.causal_table"]], lr=cfg.lr, weight_decay=0.0)
    history = []
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        opt.zero_grad()
        pick = rng.choice(len(corpus), size=min(cfg.batch_windows, len(corpus)), replace=False)
        total, count = None, 0
        for i in pick:
            win = corpus[i]
            n = len(win.symbols)
            s_eff = effective_stages(n, stages)
            s = int(rng.integers(1, s_eff + 1))
            stage = np.arange(n) % s_eff + 1
            known = np.where(stage < s, win.symbols, 0)
            bits, m, _ = _window_loss(model, win, stages, only_stage=s, causal_symbols=known)
            total = bits if total is None else E.add(total, bits)
            count += m
        loss = E.mul(total, 1.0 / count)
        E.backward(loss)
        for p in model.parameters():
            if p is not model["bb.causal_table"]:
                p.grad = None
        norm = E.clip_grad_norm(opt.params, cfg.grad_clip)
        opt.step()
        model.touch()
        history.append(StepResult(step, stages, float(loss.data), count, 0.0, norm,
                                  time.perf_counter() - t0))
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps({"step": step, "S": stages, "loss_bits": float(loss.data),
                                     "wall_time": history[-1].seconds, "causal": True}) + "\n")
    return history


def evaluate_bits(model: Model, corpus: list[TrainWindow], S: int) -> float:
    """Mean model code length (bits/symbol) over a corpus under stage count ``S``."""
    total, count = 0.0, 0
    with E.no_grad():
        for win in corpus:
            bits, n, _ = _window_loss(model, win, S)
            total += float(bits.data)
            count += n
    return total / count


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def write_log(records: list[StepResult], path):
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")
