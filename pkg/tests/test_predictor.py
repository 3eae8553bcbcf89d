import warnings

import numpy as np
import pytest

from lidarcodec import predictor as P
from lidarcodec.errors import NumericError, SyncError, UsageError

from helpers import TINY, tiny_model

rng = np.random.default_rng(5)


def test_stage_examples():
    assert [s.tolist() for s in P.decompose_stages(6, 1).positions] == [[1, 2, 3, 4, 5, 6]]
    assert [s.tolist() for s in P.decompose_stages(6, 6).positions] == [[i] for i in range(1, 7)]
    assert [s.tolist() for s in P.decompose_stages(7, 3).positions] == [[1, 4, 7], [2, 5], [3, 6]]
    assert P.decompose_stages(5, 0).stages == 5


def test_stage_clamp_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        plan = P.decompose_stages(3, 8)
    assert plan.stages == 3 and plan.notes and w


@pytest.mark.parametrize("n", [1, 2, 7, 64, 129])
def test_stages_partition(n):
    for S in range(1, n + 1, max(1, n // 9)):
        pos = np.concatenate(P.decompose_stages(n, S).positions)
        assert sorted(pos.tolist()) == list(range(1, n + 1))
        assert all(np.all(np.diff(p) > 0) for p in P.decompose_stages(n, S).positions)


def test_elastic_embedding_rules():
    m = tiny_model()
    a = rng.normal(size=(4, TINY.pred_dim))
    dec = np.array([7, 0, 9, 0])
    assert np.array_equal(P.elastic_causal_embed(m, a, np.zeros(4, int), 2, 1), a)
    f = P.elastic_causal_embed(m, a, dec, 2, 2)
    sib = m["pr.sib_table"].data
    assert np.array_equal(f[[0, 2]], a[[0, 2]])
    assert np.array_equal(f[1], a[1] + sib[7]) and np.array_equal(f[3], a[3] + sib[9])
    with pytest.raises(SyncError):
        P.elastic_causal_embed(m, a, np.zeros(4, int), 2, 2)


def test_scan_length_one():
    m = tiny_model()
    f = rng.normal(size=(1, TINY.pred_dim))
    W = P.PredictorArrays(m)
    dec, inp = W.gates(f)
    assert np.array_equal(P.ssm_scan(m, f), W.readout(inp, f))


def test_scan_is_causal():
    m = tiny_model()
    f = rng.normal(size=(20, TINY.pred_dim))
    out = P.ssm_scan(m, f)
    g = f.copy()
    g[12:] = rng.normal(size=(8, TINY.pred_dim))
    assert np.array_equal(P.ssm_scan(m, g)[:12], out[:12])


def test_step_replay_equals_scan():
    m = tiny_model()
    for n in (1, 5, 33):
        f = rng.normal(size=(n, TINY.pred_dim))
        ref = P.ssm_scan(m, f)
        st = P.new_scan_state(m)
        for t in range(n):
            st, out = P.ssm_step(m, st, f[t], t + 1)
            assert np.array_equal(out, ref[t])


def test_step_cursor_check():
    m = tiny_model()
    st = P.new_scan_state(m)
    with pytest.raises(UsageError):
        P.ssm_step(m, st, np.zeros(TINY.pred_dim), 2)


def test_zero_head_is_uniform():
    m = tiny_model()
    m["pr.head.w2"].data[:] = 0
    m["pr.head.b2"].data[:] = 0
    p = P.predict_distribution(m, rng.normal(size=(3, TINY.pred_dim)))
    assert np.allclose(p, 1 / 255, atol=1e-15)


def test_distributions_normalized():
    m = tiny_model()
    p = P.predict_distribution(m, rng.normal(size=(1000, TINY.pred_dim)))
    assert p.shape == (1000, 255) and np.all(p > 0)
    assert np.all(np.abs(p.sum(-1) - 1) < 1e-12)


def test_nonfinite_logits_raise():
    m = tiny_model()
    m["pr.head.b2"].data[0] = np.inf
    with pytest.raises(NumericError):
        P.predict_distribution(m, np.zeros((1, TINY.pred_dim)))


def _decode_window(m, a, sym, S):
    n = len(sym)
    dec = np.zeros(n, dtype=np.int64)
    probs = np.zeros((n, 255))
    plan = P.decompose_stages(n, S) if S else P.decompose_stages(n, 0)
    for s, pos in enumerate(plan.positions, start=1):
        got, p = P.predict_stage(m, a, dec, S, s)
        assert got.tolist() == pos.tolist()
        probs[pos - 1] = p
        dec[pos - 1] = sym[pos - 1]
    return probs


@pytest.mark.parametrize("S", [1, 2, 3, 0])
def test_predict_stage_matches_training_graph(S):
    from lidarcodec import engine as E
    m = tiny_model()
    n = 11
    A = rng.normal(size=(n, TINY.embed_dim))
    sym = rng.integers(1, 256, n)
    probs = _decode_window(m, P.project_context(m, A), sym, S)
    bits, count, _ = P.predictor_loss(m, E.Tensor(A), sym, S)
    assert count == n
    ref = -np.log2(probs[np.arange(n), sym - 1]).sum()
    assert abs(float(bits.data) - ref) < 1e-9 * ref


def test_level_predictor_matches_single_windows():
    m = tiny_model()
    lens = [16, 16, 9]
    proj = [rng.normal(size=(n, TINY.pred_dim)) for n in lens]
    syms = [rng.integers(1, 256, n) for n in lens]
    lp = P.LevelPredictor(m, proj, 4)
    dec = np.zeros((3, 16), dtype=np.int64)
    for s in range(1, 5):
        (w, i), p = lp.stage(s, dec)
        for k in range(3):
            sel = w == k
            pos, ref = P.predict_stage(m, proj[k], dec[k, :lens[k]], 4, s)
            assert (i[sel] + 1).tolist() == pos.tolist()
            assert np.allclose(p[sel], ref, rtol=0, atol=1e-14)
        dec[w, i] = np.concatenate(syms)[np.r_[0, 16, 32][w] + i]


def test_coverage_counter_full_window():
    from lidarcodec import engine as E
    m = tiny_model()
    _, _, cov = P.predictor_loss(m, E.Tensor(rng.normal(size=(9, TINY.embed_dim))),
                                 rng.integers(1, 256, 9), 0)
    assert cov == 8
