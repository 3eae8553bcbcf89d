"""Shared oracles for the test suite."""
import numpy as np

from lidarcodec import engine as E
from lidarcodec.model import Model, ModelConfig

TINY = ModelConfig(embed_dim=8, layers=1, heads=2, ffn_dim=16, knn=4, anc_dim=4, oct_dim=2,
                   lvl_dim=2, pred_dim=4, head_hidden=8)
SMALL = ModelConfig(embed_dim=16, layers=1, heads=2, ffn_dim=32, knn=8, anc_dim=8, oct_dim=4,
                    lvl_dim=4, pred_dim=8, head_hidden=16)


def rel_error(analytic, numeric):
    """Max absolute gap scaled by the largest numeric entry."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(float(np.max(np.abs(numeric), initial=0.0)),
                float(np.max(np.abs(analytic), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def gradcheck(fn, inputs, h=1e-5, entries=None, rng=None):
    """Central differences against ``backward`` for every input tensor.

    ``fn(*inputs)`` must return a scalar Tensor.  ``entries`` limits the
    number of probed coordinates per input (random subset).  Returns the
    worst relative error.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    E.backward(fn(*inputs))
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if entries is not None and flat.size > entries:
            idx = rng.choice(flat.size, entries, replace=False)
        num = np.empty(len(idx))
        with E.no_grad():
            for j, k in enumerate(idx):
                old = flat[k]
                flat[k] = old + h
                up = float(fn(*inputs).data)
                flat[k] = old - h
                dn = float(fn(*inputs).data)
                flat[k] = old
                num[j] = (up - dn) / (2 * h)
        ana = np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)
        worst = max(worst, rel_error(ana[idx], num))
    return worst


def random_cloud(rng, n, spread=10.0):
    return rng.normal(size=(n, 3)) * spread


def tiny_model(seed=0, cfg=TINY):
    return Model.create(cfg, seed)
