import numpy as np
import pytest

from tinykws import kernels
from tinykws.kernels import (DimensionError, RnnState, avg_pool_global, conv2d_forward, depthwise_forward,
                             ds_as_conv, ds_conv_forward, fc_forward, fold_batchnorm, gru_step,
                             init_weights, lstm_step, model_forward, model_logits, softmax)
from tinykws.model import ShapeError, builtin_model, parse_model_dsl

from . import oracles

N_CASES = 100
TOL = 1e-10


def _rng(i):
    return np.random.default_rng(1000 + i)


# -- fully connected ---------------------------------------------------------------

def test_fc_identity():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(fc_forward(x, np.eye(3), np.zeros(3)), x)
    np.testing.assert_array_equal(fc_forward(x, np.eye(3), np.zeros(3), True), [1, 0, 3])


@pytest.mark.parametrize("i", range(N_CASES))
def test_fc_oracle(i):
    rng = _rng(i)
    n, m = rng.integers(1, 9, size=2)
    W, b, x = rng.normal(size=(n, m)), rng.normal(size=n), rng.normal(size=m)
    relu = bool(i % 2)
    assert np.max(np.abs(fc_forward(x, W, b, relu) - oracles.fc(x, W, b, relu))) < TOL


def test_fc_dim_mismatch():
    with pytest.raises(DimensionError):
        fc_forward(np.ones(3), np.ones((2, 4)), np.ones(2))


# -- convolutions ------------------------------------------------------------------

def test_conv_trivial_cases():
    x = np.random.default_rng(0).normal(size=(5, 4, 1))
    np.testing.assert_array_equal(conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), relu_=False), x)
    y = conv2d_forward(np.ones((5, 5, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))
    assert y.shape == (3, 3, 1) and np.all(y == 9)


@pytest.mark.parametrize("i", range(N_CASES))
def test_conv_oracle(i):
    rng = _rng(i)
    T, F, C, O = rng.integers(3, 8), rng.integers(3, 7), rng.integers(1, 3), rng.integers(1, 4)
    kt, kf = rng.integers(1, min(T, 4) + 1), rng.integers(1, min(F, 4) + 1)
    st, sf = rng.integers(1, 3, size=2)
    padding = "same" if i % 2 else "valid"
    x, K, b = rng.normal(size=(T, F, C)), rng.normal(size=(kt, kf, C, O)), rng.normal(size=O)
    got = conv2d_forward(x, K, b, (st, sf), padding, relu_=bool(i % 3))
    want = oracles.conv2d(x, K, b, st, sf, padding, relu=bool(i % 3))
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < TOL


def test_conv_8x8x2_three_filters():
    rng = np.random.default_rng(7)
    x, K, b = rng.normal(size=(8, 8, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    np.testing.assert_allclose(conv2d_forward(x, K, b), oracles.conv2d(x, K, b, 1, 1, "valid"),
                               atol=TOL, rtol=0)


def test_ds_identity():
    x = np.random.default_rng(1).uniform(0, 1, size=(4, 5, 3))
    dw = np.zeros((1, 1, 3)) + 1.0
    y = ds_conv_forward(x, dw, np.eye(3), np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(y, x)


@pytest.mark.parametrize("i", range(N_CASES))
def test_ds_conv_oracle_and_dense_equivalent(i):
    rng = _rng(i)
    T, F, C, O = rng.integers(2, 7), rng.integers(2, 7), rng.integers(1, 5), rng.integers(1, 5)
    k, s = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    x = rng.normal(size=(T, F, C))
    dw, dwb = rng.normal(size=(k, k, C)), rng.normal(size=C)
    pw, pwb = rng.normal(size=(C, O)), rng.normal(size=O)
    got = ds_conv_forward(x, dw, pw, dwb, pwb, s)
    assert np.max(np.abs(got - oracles.ds_conv(x, dw, pw, dwb, pwb, s))) < TOL
    K, b = ds_as_conv(dw, pw, dwb, pwb)
    dense = conv2d_forward(x, K, b, (s, s), "same")
    assert np.max(np.abs(got - dense)) < TOL
    mid = depthwise_forward(x, dw, dwb, s)
    assert np.max(np.abs(mid - oracles.depthwise(x, dw, dwb, s))) < TOL


def test_ds_conv_6x6x4():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 6, 4))
    dw, dwb, pw, pwb = rng.normal(size=(3, 3, 4)), rng.normal(size=4), rng.normal(size=(4, 4)), rng.normal(size=4)
    np.testing.assert_allclose(ds_conv_forward(x, dw, pw, dwb, pwb, 1),
                               oracles.ds_conv(x, dw, pw, dwb, pwb, 1), atol=TOL, rtol=0)


# -- pooling --------------------------------------------------------------------------

def test_avg_pool_trivial():
    np.testing.assert_array_equal(avg_pool_global(np.full((3, 4, 2), 2.5)), [2.5, 2.5])
    v = np.array([[[1.0, -2.0, 3.0]]])
    np.testing.assert_array_equal(avg_pool_global(v), [1.0, -2.0, 3.0])
    with pytest.raises(DimensionError):
        avg_pool_global(np.zeros((0, 3, 2)))


@pytest.mark.parametrize("i", range(N_CASES))
def test_avg_pool_oracle(i):
    rng = _rng(i)
    x = rng.normal(size=tuple(rng.integers(1, 7, size=3)))
    assert np.max(np.abs(avg_pool_global(x) - oracles.avg_pool(x))) < TOL


# -- recurrent cells ---------------------------------------------------------------------

def test_gru_trivial():
    h = gru_step(np.ones(3), np.zeros(4), np.zeros((12, 7)), np.zeros(12))
    np.testing.assert_array_equal(h, 0)
    rng = np.random.default_rng(0)
    b = np.zeros(12)
    b[:4] = 1e3  # update gate pinned open: carry
    h_prev = rng.uniform(-1, 1, 4)
    np.testing.assert_allclose(gru_step(rng.normal(size=3), h_prev, rng.normal(size=(12, 7)), b), h_prev,
                               atol=1e-12)


@pytest.mark.parametrize("i", range(N_CASES))
def test_gru_oracle(i):
    rng = _rng(i)
    n, m = rng.integers(1, 6), rng.integers(1, 6)
    W, b = rng.normal(size=(3 * n, m + n)), rng.normal(size=3 * n)
    x, h = rng.normal(size=m), rng.uniform(-1, 1, n)
    assert np.max(np.abs(gru_step(x, h, W, b) - oracles.gru_step(list(x), list(h), W, b))) < 1e-12


def test_lstm_trivial():
    h, c = lstm_step(np.ones(2), RnnState(np.zeros(3), np.zeros(3)), np.zeros((12, 5)), np.zeros(12))
    assert not h.any() and not c.any()
    rng = np.random.default_rng(1)
    b = np.zeros(12)
    b[:3], b[3:6] = -1e3, 1e3  # input gate shut, forget gate open
    c_prev = rng.normal(size=3)
    _, c = lstm_step(rng.normal(size=2), RnnState(rng.normal(size=3), c_prev), rng.normal(size=(12, 5)), b)
    np.testing.assert_allclose(c, c_prev, atol=1e-12)


@pytest.mark.parametrize("i", range(N_CASES))
def test_lstm_oracle(i):
    rng = _rng(i)
    n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    variant = i % 3  # basic, peephole, peephole + projection
    p = int(rng.integers(1, n + 1)) if variant == 2 else n
    W, b = rng.normal(size=(4 * n, m + p)), rng.normal(size=4 * n)
    peep = rng.normal(size=(3, n)) if variant else None
    P = rng.normal(size=(p, n)) if variant == 2 else None
    x, h, c = rng.normal(size=m), rng.uniform(-1, 1, p), rng.normal(size=n)
    got_h, got_c = lstm_step(x, RnnState(h, c), W, b, peep, P)
    want_h, want_c = oracles.lstm_step(list(x), list(h), list(c), W, b, peep, P)
    assert np.max(np.abs(got_h - want_h)) < 1e-12
    assert np.max(np.abs(got_c - want_c)) < 1e-12


def test_lstm_3_cell_peephole_projection():
    rng = np.random.default_rng(3)
    W, b, peep, P = rng.normal(size=(12, 6)), rng.normal(size=12), rng.normal(size=(3, 3)), rng.normal(size=(2, 3))
    x, h, c = rng.normal(size=4), rng.normal(size=2), rng.normal(size=3)
    got = lstm_step(x, RnnState(h, c), W, b, peep, P)
    want = oracles.lstm_step(list(x), list(h), list(c), W, b, peep, P)
    np.testing.assert_allclose(got[0], want[0], atol=1e-12, rtol=0)
    np.testing.assert_allclose(got[1], want[1], atol=1e-12, rtol=0)


def test_recurrent_states_stay_bounded():
    rng = np.random.default_rng(5)
    n, m, p = 8, 4, 3
    Wg, bg = rng.normal(size=(3 * n, m + n)), rng.normal(size=3 * n)
    Wl, bl = rng.normal(size=(4 * n, m + p)), rng.normal(size=4 * n)
    peep, P = rng.normal(size=(3, n)), rng.normal(size=(p, n))
    h, state = np.zeros(n), RnnState(np.zeros(p), np.zeros(n))
    bound = np.abs(P).sum(axis=1).max()  # |P m|_inf with |m| <= 1
    for _ in range(10_000):
        x = rng.normal(size=m) * 3
        h = gru_step(x, h, Wg, bg)
        state = RnnState(*lstm_step(x, state, Wl, bl, peep, P))
        assert np.all(np.abs(h) <= 1.0)
        assert np.all(np.abs(state.h) <= bound + 1e-12)
    assert np.all(np.isfinite(state.c))


# -- batch norm folding -----------------------------------------------------------------

def test_fold_identity_and_scale():
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
    W2, b2 = fold_batchnorm(W, b, np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), eps=0)
    np.testing.assert_array_equal(W2, W)
    np.testing.assert_array_equal(b2, b)
    W3, _ = fold_batchnorm(W, b, np.full(4, 2.0), np.zeros(4), np.zeros(4), np.ones(4), eps=0)
    np.testing.assert_array_equal(W3, 2 * W)
    with pytest.raises(ValueError):
        fold_batchnorm(W, b, np.ones(4), np.zeros(4), np.zeros(4), -np.ones(4))


@pytest.mark.parametrize("i", range(N_CASES))
def test_fold_matches_conv_then_bn(i):
    rng = _rng(i)
    x = rng.normal(size=(6, 5, 2))
    W, b = rng.normal(size=(3, 2, 2, 3)), rng.normal(size=3)
    gamma, beta, mean = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    var, eps = rng.uniform(0.1, 2, 3), 1e-3
    pre = conv2d_forward(x, W, b, relu_=False)
    unfolded = gamma * (pre - mean) / np.sqrt(var + eps) + beta
    folded = conv2d_forward(x, *fold_batchnorm(W, b, gamma, beta, mean, var, eps), relu_=False)
    assert np.all(np.abs(folded - unfolded) <= 1e-8 * (1 + np.abs(unfolded)))
    Wf, bf = rng.normal(size=(3, 4)), rng.normal(size=3)
    v = rng.normal(size=4)
    fc_un = gamma * (Wf @ v + bf - mean) / np.sqrt(var + eps) + beta
    W2, b2 = fold_batchnorm(Wf, bf, gamma, beta, mean, var, eps)
    assert np.all(np.abs(W2 @ v + b2 - fc_un) <= 1e-8 * (1 + np.abs(fc_un)))


# -- whole models ----------------------------------------------------------------------------

def test_softmax_simplex():
    p = softmax(np.array([1000.0, 0.0, -1000.0]))
    assert abs(p.sum() - 1) < 1e-12 and p[0] == 1.0
    v = np.random.default_rng(0).normal(size=12)
    np.testing.assert_allclose(softmax(v), oracles.softmax(list(v)), atol=1e-15)


@pytest.mark.parametrize("name", ["dnn_s", "cnn_s", "basic_lstm_s", "lstm_s", "gru_s", "crnn_s", "dscnn_s"])
def test_model_forward_simplex_and_deterministic(name):
    model = builtin_model(name)
    w = init_weights(model, seed=1)
    x = np.random.default_rng(2).normal(size=model.input_shape[:2])
    p = model_forward(model, x, w)
    assert p.shape == (12,)
    assert abs(float(p.sum()) - 1) < 1e-6 and p.min() >= 0 and p.max() <= 1
    assert np.array_equal(p, model_forward(model, x, w))


def test_handcrafted_dnn_picks_class_3():
    model = parse_model_dsl("FC(4)", "DNN", (2, 2))
    w = {"0/W": np.eye(4), "0/b": np.zeros(4), "1/W": np.zeros((12, 4)), "1/b": np.zeros(12)}
    w["1/W"][3] = 1.0
    assert int(np.argmax(model_forward(model, np.ones((2, 2)), w))) == 3


def test_cnn_matches_layer_oracles():
    model = parse_model_dsl("C(3,3,2,1,1)-C(2,2,2,2,1)-L(5)-FC(6)", "CNN", (7, 6))
    w = init_weights(model, seed=4, dtype=np.float64)
    x = np.random.default_rng(4).normal(size=(7, 6))
    h = oracles.conv2d(x[:, :, None], w["0/W"], w["0/b"], 1, 1, "valid")
    h = oracles.conv2d(h, w["1/W"], w["1/b"], 2, 1, "valid")
    h = oracles.fc(h.reshape(-1), w["2/W"], w["2/b"], relu=False)
    h = oracles.fc(h, w["3/W"], w["3/b"], relu=True)
    logits = oracles.fc(h, w["4/W"], w["4/b"], relu=False)
    got = model_logits(model, x, w, dtype=np.float64)
    assert np.max(np.abs(got - logits)) < TOL
    np.testing.assert_allclose(model_forward(model, x, w, dtype=np.float64), oracles.softmax(list(logits)),
                               atol=TOL)


def test_recurrent_model_matches_step_oracle():
    model = parse_model_dsl("C(2,3,3,1,2)-GRU(4)-GRU(3)", "CRNN", (6, 7))
    w = init_weights(model, seed=9, dtype=np.float64)
    x = np.random.default_rng(9).normal(size=(6, 7))
    seq = oracles.conv2d(x[:, :, None], w["0/W"], w["0/b"], 1, 2, "valid")
    seq = seq.reshape(seq.shape[0], -1)
    h1, outs = [0.0] * 4, []
    for f_t in seq:
        h1 = oracles.gru_step(list(f_t), h1, w["1/W"], w["1/b"])
        outs.append(h1)
    h2 = [0.0] * 3
    for f_t in outs:
        h2 = oracles.gru_step(f_t, h2, w["2/W"], w["2/b"])
    logits = oracles.fc(h2, w["3/W"], w["3/b"], relu=False)
    assert np.max(np.abs(model_logits(model, x, w, dtype=np.float64) - logits)) < TOL


def test_shape_errors_name_the_layer():
    model = builtin_model("dnn_s")
    w = init_weights(model)
    w["1/W"] = w["1/W"][:, :10]
    with pytest.raises(ShapeError, match="FullyConnected"):
        model_forward(model, np.zeros((25, 10)), w)
    with pytest.raises(ShapeError):
        model_forward(model, np.zeros((49, 10)), init_weights(model))


def test_init_weights_seeded_uniform():
    model = builtin_model("gru_s")
    a, b = init_weights(model, 3), init_weights(model, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.abs(v).max() <= 0.5 and v.dtype == np.float32 for v in a.values())
    assert set(a) == set(kernels.weight_shapes(model))
