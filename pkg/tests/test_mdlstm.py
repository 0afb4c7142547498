import math

import numpy as np
import pytest

from fullpage.mdlstm import MDLSTM, mdlstm_param_count
from fullpage.numeric_core import DimensionError, grad_check

from conftest import randomize


@pytest.mark.parametrize("n, count", [(12, 8880), (16, 15680), (24, 35040), (30, 54600)])
def test_param_count_matches_table(n, count):
    assert mdlstm_param_count(n, n) == count
    assert MDLSTM("l", n, n).n_params == count


def test_zero_parameters_give_zero_output(rng):
    layer = MDLSTM("l", 3, 4)
    for v in layer.params.values():
        v[...] = 0
    y = layer.forward(rng.normal(size=(2, 3, 5, 6)).astype(np.float32))
    assert y.shape == (2, 4, 5, 6)
    assert not y.any()


def _scalar_lstm(x, w, b, n_hidden):
    """One LSTM step with zero previous state, written with plain floats."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    out = []
    for k in range(n_hidden):
        pre = [sum(w[g * n_hidden + k][i] * x[i] for i in range(len(x))) + b[g * n_hidden + k]
               for g in range(5)]
        i_gate, o_gate, cand = sig(pre[0]), sig(pre[3]), math.tanh(pre[4])
        c = i_gate * cand
        out.append(o_gate * math.tanh(c))
    return out


def test_single_cell_equals_four_scalar_lstms(rng):
    n_in, nh = 3, 4
    layer = MDLSTM("l", n_in, nh, dtype=np.float64)
    w = rng.normal(size=(5 * nh, n_in))
    b = rng.normal(size=5 * nh)
    layer.params["l.w"][...] = w
    layer.params["l.b"][...] = b
    layer.params["l.u"][...] = rng.normal(size=layer.params["l.u"].shape)
    x = rng.normal(size=n_in)
    y = layer.forward(x.reshape(1, n_in, 1, 1))[0, :, 0, 0]
    expected = 4 * np.array(_scalar_lstm(x.tolist(), w.tolist(), b.tolist(), nh))
    np.testing.assert_allclose(y, expected, rtol=1e-12)


def test_backward_finite_differences(rng):
    layer = MDLSTM("l", 2, 3, dtype=np.float64)
    randomize(layer.params, rng)
    x = rng.normal(size=(1, 2, 3, 4))
    weights = rng.normal(size=(1, 3, 3, 4))

    def f():
        return float((layer.forward(x) * weights).sum())

    f()
    dx = layer.backward(weights)
    err = grad_check(f, list(layer.params.values()) + [x], list(layer.grads.values()) + [dx])
    assert err < 1e-4


def test_zero_output_gradient_gives_zero_param_grads(rng):
    layer = MDLSTM("l", 2, 3, dtype=np.float64)
    randomize(layer.params, rng)
    y = layer.forward(rng.normal(size=(2, 2, 3, 3)))
    layer.backward(np.zeros_like(y))
    assert all(not g.any() for g in layer.grads.values())


def test_gradient_at_zero_weights(rng):
    layer = MDLSTM("l", 2, 2, dtype=np.float64)
    for v in layer.params.values():
        v[...] = 0
    x = rng.normal(size=(1, 2, 3, 3))

    def f():
        return float(layer.forward(x).sum())

    y = layer.forward(x)
    layer.backward(np.ones_like(y))
    assert grad_check(f, list(layer.params.values()), list(layer.grads.values())) < 1e-4


def test_direction_order_does_not_matter(rng):
    layer = MDLSTM("l", 2, 3, dtype=np.float64)
    randomize(layer.params, rng)
    x = rng.normal(size=(1, 2, 4, 5))
    y = layer.forward(x)
    perm = [2, 0, 3, 1]
    # relabelling directions must keep each direction's own scan, so permute
    # only among directions with equal flips: compare via explicit sum instead
    parts = []
    for d in range(4):
        single = MDLSTM("s", 2, 3, dtype=np.float64)
        for k in layer.params:
            single.params["s" + k[1:]][...] = 0
            single.params["s" + k[1:]][d] = layer.params[k][d]
        # zero weights in other directions produce zero output there
        parts.append(single.forward(x))
    np.testing.assert_allclose(sum(parts[d] for d in perm), y, atol=1e-12)


def test_horizontal_mirror_symmetry(rng):
    layer = MDLSTM("l", 2, 3, dtype=np.float64)
    randomize(layer.params, rng)
    mirrored = MDLSTM("m", 2, 3, dtype=np.float64)
    for k, v in layer.params.items():
        mirrored.params["m" + k[1:]][...] = v[[1, 0, 3, 2]]
    x = rng.normal(size=(1, 2, 4, 5))
    np.testing.assert_allclose(mirrored.forward(x[..., ::-1]), layer.forward(x)[..., ::-1],
                               atol=1e-12)


def test_feature_mismatch_raises():
    with pytest.raises(DimensionError):
        MDLSTM("l", 3, 2).forward(np.zeros((1, 2, 3, 3), dtype=np.float32))
