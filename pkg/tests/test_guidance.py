"""Recurrent guidance paths: forecasting head and two-pass imputer."""
import math

import numpy as np

from gridcast import tensor as T
from gridcast.guidance import ImputationGuide, PredictionGuide
from gridcast.tensor import Parameter, Tensor

from fd import assert_grads_close, numeric_grad


def test_prediction_guide_shape():
    guide = PredictionGuide(2, hidden=5, horizon=3, rng=np.random.default_rng(0),
                            dtype=np.float64)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 6, 4, 2)))
    assert guide(x).shape == (2, 3, 4, 2)


def test_prediction_guide_nodes_share_weights():
    """Permuting nodes permutes the output: nodes are exchangeable."""
    guide = PredictionGuide(1, hidden=4, horizon=2, rng=np.random.default_rng(2),
                            dtype=np.float64)
    x = np.random.default_rng(3).normal(size=(1, 5, 3, 1))
    perm = np.array([2, 0, 1])
    out = guide(Tensor(x)).data
    out_perm = guide(Tensor(x[:, :, perm])).data
    np.testing.assert_allclose(out_perm, out[:, :, perm], rtol=1e-10)


def test_prediction_guide_reads_last_horizon_states():
    guide = PredictionGuide(1, hidden=3, horizon=2, rng=np.random.default_rng(4),
                            dtype=np.float64)
    x = Tensor(np.random.default_rng(5).normal(size=(1, 6, 2, 1)))
    out = guide(x).data
    states = guide.rnn(T.reshape(T.transpose(x, (0, 2, 1, 3)), (2, 6, 1)))
    want = guide.head(states[:, 4:, :]).data  # [2 nodes, 2, 1]
    np.testing.assert_allclose(out[0, :, :, 0], want[:, :, 0].T, rtol=1e-12)


def make_imputer(channels=1, hidden=4, seed=6):
    return ImputationGuide(channels, hidden, np.random.default_rng(seed),
                           dtype=np.float64)


def test_imputer_observed_positions_pass_through_exactly():
    guide = make_imputer(channels=2)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 8, 3, 2))
    for trial in range(10):
        mask = (rng.random(x.shape) > 0.6).astype(np.float64)
        out = guide(Tensor(x), mask).data
        np.testing.assert_array_equal(out[mask == 1.0], x[mask == 1.0])


def test_imputer_full_mask_is_identity():
    guide = make_imputer()
    x = np.random.default_rng(8).normal(size=(1, 5, 2, 1))
    out = guide(Tensor(x), np.ones_like(x)).data
    np.testing.assert_array_equal(out, x)


def test_imputer_empty_mask_zero_heads_gives_bias_constant():
    guide = make_imputer()
    guide.bwd_head.weight.data[:] = 0.0
    guide.bwd_head.bias.data[:] = 0.375
    x = np.random.default_rng(9).normal(size=(1, 4, 2, 1))
    out = guide(Tensor(x), np.zeros_like(x)).data
    np.testing.assert_allclose(out, 0.375)


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _cell_ref(p, x, h):
    """Scalar GRU step mirroring the documented gate equations."""
    z = _sig(x * p["wz"] + h * p["uz"] + p["bz"])
    r = _sig(x * p["wr"] + h * p["ur"] + p["br"])
    n = math.tanh(x * p["wn"] + (r * h) * p["un"] + p["bn"])
    return z * h + (1.0 - z) * n


def _set_cell(cell, p):
    cell.w_in.data[:] = [[p["wz"], p["wr"], p["wn"]]]
    cell.b_in.data[:] = [p["bz"], p["br"], p["bn"]]
    cell.u_gates.data[:] = [[p["uz"], p["ur"]]]
    cell.u_cand.data[:] = [[p["un"]]]


def test_imputer_matches_scalar_hand_trace():
    """Three steps, middle hidden: independent recurrence of both passes."""
    pf = dict(wz=0.4, wr=-0.2, wn=0.7, uz=0.3, ur=0.1, un=-0.5,
              bz=0.05, br=-0.05, bn=0.1)
    pb = dict(wz=-0.3, wr=0.25, wn=0.6, uz=0.2, ur=-0.4, un=0.35,
              bz=0.0, br=0.1, bn=-0.05)
    hf, bf = (0.9, 0.2), (-0.8, 0.15)   # (weight, bias) of the two heads

    guide = make_imputer(channels=1, hidden=1)
    _set_cell(guide.fwd_cell, pf)
    _set_cell(guide.bwd_cell, pb)
    guide.fwd_head.weight.data[:] = [[hf[0]]]
    guide.fwd_head.bias.data[:] = [hf[1]]
    guide.bwd_head.weight.data[:] = [[bf[0]]]
    guide.bwd_head.bias.data[:] = [bf[1]]

    xs = [0.5, -1.0, 1.5]
    ms = [1.0, 0.0, 1.0]

    # forward pass: estimate from state, fill hidden slots, feed the cell
    h = 0.0
    fwd = []
    for x, m in zip(xs, ms):
        est = h * hf[0] + hf[1]
        val = m * x + (1 - m) * est
        fwd.append(val)
        h = _cell_ref(pf, val, h)
    # backward pass over the forward-refined values
    h = 0.0
    out = [0.0] * 3
    for t in (2, 1, 0):
        est = h * bf[0] + bf[1]
        out[t] = ms[t] * xs[t] + (1 - ms[t]) * est
        h = _cell_ref(pb, fwd[t], h)

    x_arr = np.array(xs).reshape(1, 3, 1, 1)
    m_arr = np.array(ms).reshape(1, 3, 1, 1)
    got = guide(Tensor(x_arr), m_arr).data[0, :, 0, 0]
    np.testing.assert_allclose(got, out, rtol=1e-12)
    assert got[1] != xs[1]  # the hidden slot was actually replaced


def test_imputer_gradients():
    guide = make_imputer(channels=1, hidden=3)
    rng = np.random.default_rng(10)
    x = Parameter(rng.normal(size=(1, 4, 2, 1)), dtype=np.float64)
    # hidden-before-hidden pairs exist, so the forward pass influences the
    # backward estimates (the only route by which it reaches the output)
    mask = np.ones(x.shape)
    mask[0, :, 0, 0] = [0.0, 1.0, 0.0, 1.0]
    mask[0, :, 1, 0] = [1.0, 0.0, 0.0, 1.0]
    w = rng.normal(size=x.shape)
    T.sum_(T.mul(guide(x, mask), w)).backward()
    num = numeric_grad(lambda: T.sum_(T.mul(guide(Tensor(x.data), mask), w)).item(),
                       x.data)
    assert_grads_close(x.grad, num, rtol=1e-6, atol=1e-9, label="imputer x")
    # both directions trained: forward cell feeds the backward pass
    assert guide.fwd_cell.w_in.grad is not None
    assert np.abs(guide.fwd_cell.w_in.grad).sum() > 0
    num_f = numeric_grad(lambda: T.sum_(T.mul(guide(Tensor(x.data), mask), w)).item(),
                         guide.fwd_cell.w_in.data)
    assert_grads_close(guide.fwd_cell.w_in.grad, num_f, rtol=1e-6, atol=1e-9,
                       label="imputer fwd cell")


def test_prediction_guide_gradients():
    guide = PredictionGuide(1, hidden=3, horizon=2, rng=np.random.default_rng(11),
                            dtype=np.float64)
    x = Parameter(np.random.default_rng(12).normal(size=(1, 4, 2, 1)),
                  dtype=np.float64)
    w = np.random.default_rng(13).normal(size=(1, 2, 2, 1))
    T.sum_(T.mul(guide(x), w)).backward()
    num = numeric_grad(lambda: T.sum_(T.mul(guide(Tensor(x.data)), w)).item(), x.data)
    assert_grads_close(x.grad, num, rtol=1e-6, atol=1e-9, label="pred guide x")
