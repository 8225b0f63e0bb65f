import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdcrlearn.autodiff import Tape, Tensor, backward, grad_check, ops
from tdcrlearn.nn import (
    GRU_GATES, LSTM_GATES, MLP, GRUCell, LSTMCell, LayerNorm, Normalizer, RNNCell,
    StackedRNN, StackedRnnConfig, dropout_apply, gru_cell_step, layer_norm, lstm_cell_step,
    rnn_cell_step,
)

mpmath.mp.dps = 40


def msig(x):
    return 1 / (1 + mpmath.exp(-x))


def const_params(gates, shapes, value):
    return {g: Tensor(np.full(shapes[g], value), requires_grad=True) for g in gates}


def gru_composite(p, x, h):
    """The same GRU math assembled from primitive ops (oracle for the fused op)."""
    xh = ops.concat([x, h], axis=-1)
    z = ops.sigmoid(ops.add(ops.matmul(xh, p["W_z"]), p["b_z"]))
    r = ops.sigmoid(ops.add(ops.matmul(xh, p["W_r"]), p["b_r"]))
    hn = ops.add(ops.matmul(h, p["U_n"]), p["c_n"])
    n = ops.tanh(ops.add(ops.add(ops.matmul(x, p["W_n"]), p["b_n"]), ops.mul(r, hn)))
    return ops.add(ops.mul(ops.sub(1.0, z), n), ops.mul(z, h))


def lstm_composite(p, x, h, c):
    xh = ops.concat([x, h], axis=-1)
    gate = {k: ops.add(ops.matmul(xh, p[f"W_{k}"]), p[f"b_{k}"]) for k in "ifgo"}
    c2 = ops.add(ops.mul(ops.sigmoid(gate["f"]), c),
                 ops.mul(ops.sigmoid(gate["i"]), ops.tanh(gate["g"])))
    return ops.mul(ops.sigmoid(gate["o"]), ops.tanh(c2)), c2


def test_gru_zero_params():
    cell = GRUCell(3, 2, np.random.default_rng(0))
    for t in cell.parameters():
        t.data[...] = 0.0
    h = gru_cell_step(cell._params, np.array([0.4, -1.0, 2.0]), np.zeros(2))
    np.testing.assert_array_equal(h.data, np.zeros((1, 2)))


def test_gru_one_dim_oracle():
    shapes = {g: (2, 1) if g in ("W_z", "W_r") else (1, 1) if g in ("W_n", "U_n") else (1,)
              for g in GRU_GATES}
    p = {g: Tensor(np.full(shapes[g], 0.0 if g.startswith(("b", "c")) else 1.0)) for g in GRU_GATES}
    h = gru_cell_step(p, np.array([1.0]), np.array([0.0]))
    z = msig(1)
    expected = (1 - z) * mpmath.tanh(1)
    assert abs(h.item() - float(expected)) < 1e-12
    assert h.item() == pytest.approx(0.20482, abs=5e-6)


def test_lstm_one_dim_oracle():
    shapes = {g: (2, 1) if g.startswith("W") else (1,) for g in LSTM_GATES}
    p = {g: Tensor(np.full(shapes[g], 1.0 if g.startswith("W") else 0.0)) for g in LSTM_GATES}
    h, c = lstm_cell_step(p, np.array([1.0]), np.array([0.0]), np.array([0.0]))
    c_exp = msig(1) * mpmath.tanh(1)
    h_exp = msig(1) * mpmath.tanh(c_exp)
    assert abs(c.item() - float(c_exp)) < 1e-12
    assert abs(h.item() - float(h_exp)) < 1e-12


def test_rnn_zero_weights():
    cell = RNNCell(3, 4, np.random.default_rng(0))
    for t in cell.parameters():
        t.data[...] = 0.0
    h = rnn_cell_step(cell._params, np.ones(3), np.ones(4))
    np.testing.assert_array_equal(h.data, np.zeros((1, 4)))


def test_cell_dim_mismatch():
    cell = GRUCell(3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        gru_cell_step(cell._params, np.ones(4), np.zeros(2))
    lcell = LSTMCell(3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        lstm_cell_step(lcell._params, np.ones(3), np.zeros(2), np.zeros(3))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fused_gru_matches_composite(seed):
    rng = np.random.default_rng(seed)
    cell = GRUCell(4, 3, rng)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    h = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = rng.normal(size=(5, 3))
    grads = []
    for fn in (lambda: gru_cell_step(cell._params, x, h), lambda: gru_composite(cell._params, x, h)):
        for t in [x, h, *cell.parameters()]:
            t.grad = None
        with Tape():
            out = fn()
            backward(ops.sum(ops.mul(out, w)))
        grads.append((out.data.copy(), [t.grad.copy() for t in [x, h, *cell.parameters()]]))
    np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=1e-13, atol=1e-14)
    for a, b in zip(grads[0][1], grads[1][1]):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)


def test_fused_lstm_matches_composite():
    rng = np.random.default_rng(7)
    cell = LSTMCell(3, 4, rng)
    x, h, c = (Tensor(rng.normal(size=(2, n)), requires_grad=True) for n in (3, 4, 4))
    w1, w2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    res = []
    for fn in (lambda: lstm_cell_step(cell._params, x, h, c), lambda: lstm_composite(cell._params, x, h, c)):
        for t in [x, h, c, *cell.parameters()]:
            t.grad = None
        with Tape():
            h2, c2 = fn()
            backward(ops.add(ops.sum(ops.mul(h2, w1)), ops.sum(ops.mul(c2, w2))))
        res.append([t.grad.copy() for t in [x, h, c, *cell.parameters()]] + [h2.data, c2.data])
    for a, b in zip(*res):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)


@pytest.mark.parametrize("cls", [GRUCell, LSTMCell, RNNCell])
def test_cell_gradcheck(cls):
    rng = np.random.default_rng(11)
    cell = cls(3, 4, rng)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True, name="x")
    state = cell.zero_state(2)
    h0 = Tensor(rng.normal(size=(2, 4)) * 0.5, requires_grad=True, name="h")
    state = (h0, Tensor(rng.normal(size=(2, 4)))) if cls is LSTMCell else h0
    w = rng.normal(size=(2, 4))
    cell._name_params()

    def build():
        h, _ = cell.step(x, state)
        return ops.sum(ops.mul(h, w))

    rep = grad_check(build, [x, h0, *cell.parameters()])
    assert rep.max_rel_err < 1e-5, rep.per_param


def test_layer_norm_cases():
    ln = LayerNorm(4)
    np.testing.assert_allclose(ln(np.full((1, 4), 3.0)).data, 0.0, atol=1e-12)
    y = layer_norm(Tensor(np.ones(2)), Tensor(np.zeros(2)), Tensor([[1.0, 3.0]]), eps=1e-12)
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], rtol=1e-10)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    s = Tensor(rng.normal(size=5), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    w = rng.normal(size=(3, 5))
    rep = grad_check(lambda: ops.sum(ops.mul(ops.tanh(layer_norm(s, b, x)), w)), [x, s, b])
    assert rep.max_rel_err < 1e-5


def test_dropout_modes():
    x = Tensor(np.arange(5.0))
    rng = np.random.default_rng(0)
    assert dropout_apply(0.0, x, rng, True) is x
    assert dropout_apply(0.5, x, rng, False) is x
    with pytest.raises(ValueError):
        dropout_apply(1.0, x, rng, True)


def test_dropout_preserves_mean():
    y = dropout_apply(0.3, Tensor(np.ones(100_000)), np.random.default_rng(1), True)
    assert abs(y.data.mean() - 1.0) < 0.01
    assert set(np.unique(y.data)) <= {0.0, 1.0 / 0.7}


def test_stacked_shapes_and_determinism():
    cfg = StackedRnnConfig("gru", layers=4, hidden=32, dropout=0.3)
    net = StackedRNN(cfg, 7, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 7))
    states = net.zero_state(2)
    out, new = net.forward(x, states, training=False)
    out2, _ = net.forward(x, states, training=False)
    assert out.shape == (2, 32) and len(new) == 4
    assert all(s.shape == (2, 32) for s in new)
    np.testing.assert_array_equal(out.data, out2.data)
    with pytest.raises(ValueError, match="hidden states"):
        net.forward(x, states[:3])


def test_one_layer_stack_equals_cell_plus_layernorm():
    rng = np.random.default_rng(4)
    net = StackedRNN(StackedRnnConfig("gru", layers=1, hidden=5), 3, rng)
    params = net.named_parameters()
    for k in ("layer0.ln_scale", "layer0.ln_shift"):
        params[k].data = rng.normal(size=5)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
    out, (h2,) = net.forward(x, [Tensor(h)])
    cellp = {g: params[f"layer0.{g}"] for g in GRU_GATES}
    h_ref = gru_cell_step(cellp, x, h)
    y_ref = ops.tanh(layer_norm(params["layer0.ln_scale"], params["layer0.ln_shift"], h_ref))
    np.testing.assert_array_equal(h2.data, h_ref.data)
    np.testing.assert_allclose(out.data, y_ref.data, rtol=1e-14)


def test_stack_canonical_names():
    net = StackedRNN(StackedRnnConfig("gru", layers=2, hidden=3), 2, np.random.default_rng(0))
    names = list(net.named_parameters("dyn."))
    assert "dyn.layer0.W_z" in names and "dyn.layer1.ln_shift" in names


@pytest.mark.parametrize("kind", ["gru", "lstm", "rnn"])
def test_stacked_gradcheck(kind):
    rng = np.random.default_rng(5)
    net = StackedRNN(StackedRnnConfig(kind, layers=4, hidden=3), 2, rng)
    net._name_params()
    xs = [rng.normal(size=(2, 2)) for _ in range(3)]
    w = rng.normal(size=(2, 3))

    def build():
        states = net.zero_state(2)
        total = None
        for x in xs:
            out, states = net.forward(x, states)
            term = ops.sum(ops.mul(out, w))
            total = term if total is None else ops.add(total, term)
        return total

    rep = grad_check(build, net.parameters())
    assert rep.max_rel_err < 1e-5, rep.per_param


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["gru", "lstm", "rnn"]), st.integers(0, 1000))
def test_long_stepping_stays_finite(kind, seed):
    rng = np.random.default_rng(seed)
    net = StackedRNN(StackedRnnConfig(kind, layers=2, hidden=4), 3, rng)
    states = net.zero_state(1)
    for _ in range(200):
        out, states = net.forward(rng.uniform(-5, 5, size=(1, 3)), states)
    assert np.isfinite(out.data).all()
    assert np.abs(out.data).max() <= 1.0


def test_mlp_forward_shape():
    mlp = MLP(6, 8, 4, 0.0, np.random.default_rng(0))
    assert mlp.forward(np.ones((3, 6))).shape == (3, 8)
    assert len(mlp.named_parameters()) == 16


def test_normalizer_round_trip_and_stats():
    rng = np.random.default_rng(0)
    data = rng.normal(loc=[1.0, -3.0, 5.0], scale=[0.1, 2.0, 1.0], size=(5000, 3))
    data[:, 2] = 5.0
    nrm = Normalizer.fit(data)
    assert nrm.std[2] == 1.0
    np.testing.assert_allclose(nrm.normalize(nrm.mean), 0.0)
    o = rng.normal(size=3)
    np.testing.assert_allclose(nrm.denormalize(nrm.normalize(o)), o, atol=1e-12)
    z = nrm.normalize(data)
    np.testing.assert_allclose(z[:, :2].mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[:, :2].std(0), 1.0, rtol=1e-12)
    back = Normalizer.from_state(nrm.state_dict())
    np.testing.assert_array_equal(back.mean, nrm.mean)
    zt = nrm.normalize(Tensor(o[None]))
    np.testing.assert_allclose(zt.data[0], nrm.normalize(o))
