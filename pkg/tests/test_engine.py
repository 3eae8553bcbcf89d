import numpy as np
import pytest

from lidarcodec import engine as E
from lidarcodec.errors import NumericError, UsageError

from helpers import gradcheck

rng = np.random.default_rng(7)


def T(*shape, scale=1.0):
    return E.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def test_softmax_uniform_and_normalized():
    assert np.allclose(E.softmax_np(np.zeros(3)), 1 / 3)
    p = E.softmax_np(rng.normal(size=(50, 255)) * 10)
    assert np.all(np.abs(p.sum(-1) - 1) < 1e-12)


def test_silu_zero():
    assert E.silu(E.Tensor([0.0])).data[0] == 0.0


def test_sigmoid_extremes_are_finite():
    s = E.sigmoid_np(np.array([-1000.0, 0.0, 1000.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_layer_norm_moments():
    y = E.layer_norm_np(rng.normal(size=(20, 16)) * 5 + 3)
    assert np.all(np.abs(y.mean(-1)) < 1e-9)
    assert np.all(np.abs(y.var(-1) - 1) < 1e-9)


def test_neighbor_max_singleton_is_identity():
    x = rng.normal(size=(5, 4))
    out = E.neighbor_max(x, np.arange(5)[:, None])
    assert np.array_equal(out.data, x)


def test_embed_rejects_out_of_range():
    with pytest.raises(IndexError):
        E.embed(np.zeros((4, 2)), [4])


def test_nonfinite_trips():
    with pytest.raises(NumericError):
        E.mul(E.Tensor([1e308]), 1e10)


def test_backward_sum_and_square():
    x = T(4, 3)
    E.backward(E.sum_all(x))
    assert np.array_equal(x.grad, np.ones((4, 3)))
    x = T(4, 3)
    E.backward(E.mul(E.sum_all(E.mul(x, x)), 0.5))
    assert np.allclose(x.grad, x.data)


def test_backward_requires_scalar_graph():
    with pytest.raises(UsageError):
        E.backward(E.Tensor(1.0))
    with pytest.raises(UsageError):
        E.backward(T(3))


def test_no_grad_records_nothing():
    x = T(3)
    with E.no_grad():
        y = E.mul(x, 2.0)
    assert not y.requires_grad


def test_exact_affine_is_row_independent():
    w = rng.normal(size=(16, 16))
    x = rng.normal(size=(300, 16))
    full = E.exact_affine(x, w)
    for r in (0, 17, 299):
        assert np.array_equal(E.exact_affine(x[r:r + 1], w)[0], full[r])
        assert np.array_equal(E.exact_affine(x[r], w), full[r])


@pytest.mark.parametrize("seed", range(3))
def test_mlp_gradcheck(seed):
    r = np.random.default_rng(seed)
    x = E.Tensor(r.normal(size=(6, 5)))
    ws = [E.Tensor(r.normal(size=s) / 2) for s in [(5, 7), (7,), (7, 7), (7,), (7, 1), (1,)]]

    def f(x, w1, b1, w2, b2, w3, b3):
        h = E.silu(E.affine(x, w1, b1))
        h = E.silu(E.affine(h, w2, b2))
        return E.sum_all(E.affine(h, w3, b3))
    assert gradcheck(f, [x] + ws) < 1e-4


def test_adamw_zero_grad_no_decay_is_noop():
    p = E.Parameter(np.ones(3), "p")
    p.grad = np.zeros(3)
    E.AdamW([p], weight_decay=0.0).step()
    assert np.array_equal(p.data, np.ones(3))


def test_adamw_first_step_moves_by_lr():
    p = E.Parameter(np.array([2.0]), "p")
    p.grad = np.array([0.3])
    opt = E.AdamW([p], lr=5e-4, weight_decay=0.0)
    opt.step()
    assert abs((2.0 - p.data[0]) - 5e-4) < 1e-8


def test_adamw_decay_is_decoupled():
    p = E.Parameter(np.array([2.0]), "p")
    p.grad = np.array([0.0])
    E.AdamW([p], lr=0.1, weight_decay=0.01).step()
    assert abs(p.data[0] - 2.0 * (1 - 0.1 * 0.01)) < 1e-15


def test_adamw_default_lr():
    assert E.AdamW([]).lr == 5e-4


def test_clip_grad_norm():
    a = E.Parameter(np.zeros(2), "a")
    a.grad = np.array([3.0, 4.0])
    n = E.clip_grad_norm([a], 1.0)
    assert n == 5.0 and abs(np.linalg.norm(a.grad) - 1.0) < 1e-9
