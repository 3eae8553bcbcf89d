"""Stage-scalable causal predictor.

A window of ``n`` nodes is split into ``S`` interleaved stages
(stage ``s`` holds positions ``s, s + S, s + 2S, ...``, 1-based).  At stage
``s`` a node sees the shared backbone feature plus, when its left sibling was
decoded in an earlier stage, that sibling's symbol embedding.  A diagonal
selective scan then mixes the window left to right and a small head emits a
255-way distribution (index ``j`` is symbol ``j + 1``).

Inference code paths use :func:`engine.exact_affine` inside the scan so a
step-by-step replay reproduces the batch scan bit for bit.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .errors import SyncError, UsageError
from .model import Model


@dataclass
class StagePlan:
    n: int
    stages: int
    positions: list[np.ndarray]      # 1-based positions per stage
    notes: list[str] = field(default_factory=list)

    def stage_of(self) -> np.ndarray:
        """Stage number (1-based) of every position 1..n."""
        return (np.arange(self.n) % self.stages) + 1


def decompose_stages(n: int, S: int) -> StagePlan:
    """Uniform interleaved partition; ``S = 0`` means autoregressive (S = n)."""
    if n < 1:
        raise ValueError("window must hold at least one node")
    if S < 0:
        raise ValueError("stage count must be >= 0")
    notes = []
    if S == 0:
        S = n
    elif S > n:
        notes.append(f"stage count {S} clamped to window length {n}")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
        S = n
    pos = [np.arange(s, n + 1, S) for s in range(1, S + 1)]
    return StagePlan(n=n, stages=S, positions=pos, notes=notes)


def effective_stages(n: int, S: int) -> int:
    return n if S == 0 or S > n else S


def sibling_indicator(n: int, S: int, s: int) -> np.ndarray:
    """Boolean per position (0-based array): left sibling decoded before stage ``s``."""
    S = effective_stages(n, S)
    stage = (np.arange(n) % S) + 1
    ind = np.zeros(n, dtype=bool)
    ind[1:] = stage[:-1] < s
    return ind


# --- weights as raw arrays ----------------------------------------------------

class PredictorArrays:
    """Plain-array view of the predictor weights for inference."""

    def __init__(self, model: Model):
        g = lambda k: model[k].data
        self.w_in, self.b_in = g("pr.in.w"), g("pr.in.b")
        self.sib = g("pr.sib_table")
        self.w_dec, self.b_dec = g("pr.decay.w"), g("pr.decay.b")
        self.w_gain, self.b_gain = g("pr.gain.w"), g("pr.gain.b")
        self.w_out, self.b_out = g("pr.out.w"), g("pr.out.b")
        self.w_h1, self.b_h1 = g("pr.head.w1"), g("pr.head.b1")
        self.w_h2, self.b_h2 = g("pr.head.w2"), g("pr.head.b2")
        self.dim = self.w_in.shape[1]

    def project(self, A: np.ndarray) -> np.ndarray:
        return A @ self.w_in + self.b_in

    def gates(self, f: np.ndarray):
        dec = E.sigmoid_np(E.exact_affine(f, self.w_dec, self.b_dec))
        gain = E.sigmoid_np(E.exact_affine(f, self.w_gain, self.b_gain))
        return dec, gain * f

    def readout(self, h: np.ndarray, f: np.ndarray) -> np.ndarray:
        return E.exact_affine(h, self.w_out, self.b_out) + f

    def distribution(self, feat: np.ndarray) -> np.ndarray:
        z = E.silu_np(feat @ self.w_h1 + self.b_h1) @ self.w_h2 + self.b_h2
        if not np.all(np.isfinite(z)):
            from .errors import NumericError
            raise NumericError("non-finite logits")
        return E.softmax_np(z, axis=-1)


def project_context(model: Model, A) -> np.ndarray:
    A = A.data if isinstance(A, E.Tensor) else np.asarray(A)
    return PredictorArrays(model).project(A)


def elastic_causal_embed(model: Model, a: np.ndarray, decoded: np.ndarray, S: int, s: int) -> np.ndarray:
    """Fused features for stage ``s``: ``a_i`` plus the left sibling's embedding
    when that sibling belongs to an earlier stage.

    ``decoded`` holds symbols 1..255 for decoded positions and 0 elsewhere.
    """
    n = len(a)
    ind = sibling_indicator(n, S, s)
    prev = np.zeros(n, dtype=np.int64)
    prev[1:] = np.asarray(decoded)[:-1]
    if np.any(prev[ind] == 0):
        raise SyncError("sibling referenced by the stage plan is not decoded")
    f = np.array(a, dtype=np.float64, copy=True)
    if ind.any():
        f[ind] = f[ind] + model["pr.sib_table"].data[prev[ind]]
    return f


def ssm_scan(model: Model, f: np.ndarray) -> np.ndarray:
    """Batch selective scan over axis -2; returns refined features."""
    W = PredictorArrays(model)
    dec, inp = W.gates(f)
    return W.readout(E.scan_np(dec, inp), f)


@dataclass
class ScanState:
    h: np.ndarray
    cursor: int = 0


def new_scan_state(model: Model, batch: tuple[int, ...] = ()) -> ScanState:
    return ScanState(h=np.zeros(batch + (model.cfg.pred_dim,)))


def ssm_step(model: Model, state: ScanState, f_t: np.ndarray, t: int | None = None,
             arrays: PredictorArrays | None = None):
    """One recurrence step; returns ``(new_state, out_t)``."""
    if t is not None and t != state.cursor + 1:
        raise UsageError(f"scan state is at step {state.cursor}, asked for step {t}")
    W = arrays or PredictorArrays(model)
    dec, inp = W.gates(f_t)
    h = dec * state.h + inp
    return ScanState(h=h, cursor=state.cursor + 1), W.readout(h, f_t)


def predict_distribution(model: Model, feat: np.ndarray) -> np.ndarray:
    return PredictorArrays(model).distribution(np.asarray(feat, dtype=np.float64))


def predict_stage(model: Model, a: np.ndarray, decoded: np.ndarray, S: int, s: int,
                  counters=None):
    """Distributions for every position of stage ``s`` in one window.

    ``a`` is the projected backbone output (computed once per window and never
    recomputed here).  Returns ``(positions, probs)`` with 1-based positions.
    """
    lp = LevelPredictor(model, [np.asarray(a)], S, counters=counters)
    dec = np.asarray(decoded, dtype=np.int64)[None, :]
    if effective_stages(len(a), S) == len(a) and S != 1:
        # autoregressive plans use the step path, as the codec does
        for t in range(1, s):
            lp.step(t, dec)
        rows, probs = lp.step(s, dec)
    else:
        for t in range(1, s):
            lp.advance(t, dec)
        rows, probs = lp.stage(s, dec)
    return rows[1] + 1, probs


class LevelPredictor:
    """Predictor state for all windows of one octree level.

    Windows are independent; batching them only shares numpy calls.  Both
    encoder and decoder drive this class through the same sequence of calls.
    """

    def __init__(self, model: Model, projected: list[np.ndarray], S: int, counters=None):
        self.W = PredictorArrays(model)
        self.lengths = np.array([len(a) for a in projected])
        self.S_req = S
        self.counters = counters
        nw, T, p = len(projected), int(self.lengths.max()), self.W.dim
        self.a = np.zeros((nw, T, p))
        for w, a in enumerate(projected):
            self.a[w, :len(a)] = a
        self.T = T
        self.valid = np.arange(T)[None, :] < self.lengths[:, None]
        self.S = np.array([effective_stages(n, S) for n in self.lengths])
        self.stage_of = (np.arange(T)[None, :] % self.S[:, None]) + 1
        self.f = self.a.copy()
        self.dec = None
        self.inp = None
        self.h = None
        self.ind = np.zeros((nw, T), dtype=bool)
        self.num_stages = int(self.S.max())
        self.state = None

    # -- multi-stage path -------------------------------------------------
    def _refresh(self, s: int, decoded: np.ndarray):
        """Bring fused features and gates up to stage ``s``; return first changed column."""
        ind = np.zeros_like(self.ind)
        ind[:, 1:] = self.stage_of[:, :-1] < s
        ind &= self.valid
        if self.dec is None:
            self.dec, self.inp = self.W.gates(self.f)
            changed_from = 0
        else:
            changed_from = self.T
        new = ind & ~self.ind
        if new.any():
            w, i = np.nonzero(new)
            prev = decoded[w, i - 1]
            if np.any(prev <= 0):
                raise SyncError("sibling referenced by the stage plan is not decoded")
            self.f[w, i] = self.a[w, i] + self.W.sib[prev]
            d, u = self.W.gates(self.f[w, i])
            self.dec[w, i] = d
            self.inp[w, i] = u
            changed_from = min(changed_from, int(i.min()))
        self.ind = ind
        return changed_from

    def _scan_from(self, t0: int):
        if self.h is None:
            self.h = np.empty_like(self.a)
            t0 = 0
        if t0 >= self.T:
            return
        h0 = self.h[:, t0 - 1] if t0 > 0 else None
        self.h[:, t0:] = E.scan_np(self.dec[:, t0:], self.inp[:, t0:], h0)

    def advance(self, s: int, decoded: np.ndarray):
        """Replay stage ``s`` bookkeeping without producing distributions."""
        self._scan_from(self._refresh(s, decoded))

    def stage(self, s: int, decoded: np.ndarray):
        """Distributions for stage ``s`` of every window that has one.

        Returns ``((window_idx, position0), probs)`` in canonical coder order:
        windows ascending, positions ascending within a window.
        """
        self._scan_from(self._refresh(s, decoded))
        sel = (self.stage_of == s) & self.valid
        w, i = np.nonzero(sel)
        if self.counters is not None:
            self.counters.predictor += int(np.count_nonzero(sel.any(axis=1)))
        feat = self.W.readout(self.h[w, i], self.f[w, i])
        return (w, i), self.W.distribution(feat)

    # -- autoregressive step path ------------------------------------------
    def step(self, t: int, decoded: np.ndarray):
        """Step ``t`` (1-based) of the recurrence for every window longer than t-1."""
        nw = len(self.lengths)
        if self.state is None:
            self.state = ScanState(h=np.zeros((nw, self.W.dim)))
        if t != self.state.cursor + 1:
            raise UsageError(f"scan state is at step {self.state.cursor}, asked for step {t}")
        w = np.flatnonzero(self.lengths >= t)
        i = t - 1
        f = self.a[w, i].copy()
        if t > 1:
            prev = decoded[w, i - 1]
            if np.any(prev <= 0):
                raise SyncError("previous symbol missing in autoregressive step")
            f = f + self.W.sib[prev]
        dec, inp = self.W.gates(f)
        h = self.state.h
        h[w] = dec * h[w] + inp
        self.state.cursor = t
        if self.counters is not None:
            self.counters.predictor += len(w)
        feat = self.W.readout(h[w], f)
        return (w, np.full(len(w), i)), self.W.distribution(feat)


# --- training graph -------------------------------------------------------------

def predictor_loss(model: Model, A: E.Tensor, symbols: np.ndarray, S: int,
                   only_stage: int | None = None):
    """Summed code length (bits) of one window under stage count ``S``.

    Teacher forcing: earlier-stage siblings use the ground-truth symbols,
    which is exactly what a decoder holds.  Returns
    ``(bits_tensor, count, embedded_positions)``; with ``only_stage`` the
    loss covers that stage's positions alone.
    """
    sym = np.asarray(symbols, dtype=np.int64)
    n = len(sym)
    S_eff = effective_stages(n, S)
    a = E.affine(A, model["pr.in.w"], model["pr.in.b"])
    prev = np.zeros(n, dtype=np.int64)
    prev[1:] = sym[:-1]
    sib = E.embed(model["pr.sib_table"], prev)
    if S_eff == n and n > 1:
        # all stages see every earlier sibling: one causal scan covers them
        passes = [(sibling_indicator(n, n, n), np.arange(n))]
    else:
        passes = [(sibling_indicator(n, S_eff, s), np.arange(s - 1, n, S_eff))
                  for s in range(1, S_eff + 1)]
    if only_stage is not None:
        passes = [(sibling_indicator(n, S_eff, only_stage), np.arange(only_stage - 1, n, S_eff))]
    total = None
    covered = 0
    for ind, rows in passes:
        f = E.add(a, E.mul(sib, ind[:, None].astype(np.float64)))
        dec = E.sigmoid(E.affine(f, model["pr.decay.w"], model["pr.decay.b"]))
        gain = E.sigmoid(E.affine(f, model["pr.gain.w"], model["pr.gain.b"]))
        H = E.scan(dec, E.mul(gain, f))
        out = E.add(E.affine(H, model["pr.out.w"], model["pr.out.b"]), f)
        feat = E.gather_rows(out, rows)
        hid = E.silu(E.affine(feat, model["pr.head.w1"], model["pr.head.b1"]))
        logp = E.log_softmax(E.affine(hid, model["pr.head.w2"], model["pr.head.b2"]))
        nll = E.mul(E.sum_all(E.pick(logp, sym[rows] - 1)), -1.0 / np.log(2.0))
        total = nll if total is None else E.add(total, nll)
        covered += int(ind[rows].sum())
    return total, sum(len(r) for _, r in passes), covered
