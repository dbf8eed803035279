import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajsst.errors import BadMagicError, ConfigError, FormatError, ShapeError, TruncatedFileError, UnsupportedVersionError
from trajsst.nn import Adam, GradCheckError, Linear, Parameter, Tensor, grad_check, no_grad
from trajsst.nn import functional as F
from trajsst.nn.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from trajsst.nn.gradcheck import relative_error
from trajsst.nn.tensor import (
    add,
    dropout,
    gelu,
    getitem,
    matmul,
    mean_all,
    mul,
    relu,
    reshape,
    roll,
    sigmoid,
    sum_all,
    take,
    tanh,
    transpose,
)

SEEDS = range(20)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def projected(out_fn, rng, scale=1e-3):
    """Scalar loss sum(out * R) with a fixed random R, so every output matters.

    The loss is kept small: some gradients are exactly zero (a key bias under
    softmax shift invariance) and finite-difference roundoff grows with |loss|,
    while the relative error is floored at 1e-8.
    """
    shape = out_fn().shape
    r = Tensor(rng.normal(0.0, scale, size=shape))
    return lambda: sum_all(mul(out_fn(), r))


def check(out_fn, params, rng, tol):
    report = grad_check(projected(out_fn, rng), params, tolerance=tol, max_coords=None)
    assert report.passed, str(report)
    return report


# --- examples ---------------------------------------------------------------


def test_linear_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(F.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
    b = Tensor(np.array([1.0, -2.0]))
    y = F.linear(Tensor(np.zeros((4, 3))), Tensor(np.ones((3, 2))), b)
    assert np.array_equal(y.data, np.tile(b.data, (4, 1)))


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        F.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    y = F.layer_norm(Tensor(np.full((2, 4), 3.0)), one, zero)
    assert np.array_equal(y.data, np.zeros((2, 4)))
    y = F.layer_norm(Tensor(np.array([[-1.0, 1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(y.data, [[-1.0, 1.0]], atol=1e-10)
    with pytest.raises(ShapeError):
        F.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_softmax_examples():
    assert np.array_equal(F.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        y = F.softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)


def attention_params(rng, d, scale=0.5):
    return [leaf(rng, d, 3 * d, scale=scale), leaf(rng, 3 * d, scale=scale),
            leaf(rng, d, d, scale=scale), leaf(rng, d, scale=scale)]


def test_attention_single_token_is_projected_value():
    rng = np.random.default_rng(0)
    d = 8
    wqkv, bqkv, wo, bo = attention_params(rng, d)
    x = rng.normal(size=(1, d))
    y = F.multi_head_self_attention(Tensor(x), wqkv, bqkv, wo, bo, heads=2).data
    v = x @ wqkv.data[:, 2 * d :] + bqkv.data[2 * d :]
    assert np.allclose(y, v @ wo.data + bo.data, atol=1e-12)


def test_attention_identical_tokens_give_identical_rows():
    rng = np.random.default_rng(1)
    wqkv, bqkv, wo, bo = attention_params(rng, 8)
    x = np.tile(rng.normal(size=(1, 8)), (5, 1))
    y = F.multi_head_self_attention(Tensor(x), wqkv, bqkv, wo, bo, heads=4).data
    assert np.array_equal(y, np.tile(y[:1], (5, 1)))


def attention_oracle(x, wqkv, bqkv, wo, bo, heads, bias=None):
    """Per-head loop, written independently of the fused op."""
    t, d = x.shape
    dh = d // heads
    q, k, v = np.split(x @ wqkv + bqkv, 3, axis=1)
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if bias is not None:
            logits = logits + bias[h]
        a = np.exp(logits - logits.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        outs.append(a @ v[:, sl])
    return np.concatenate(outs, axis=1) @ wo + bo


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_per_head_oracle(seed):
    rng = np.random.default_rng(seed)
    wqkv, bqkv, wo, bo = attention_params(rng, 8)
    x = rng.normal(size=(6, 8))
    bias = rng.normal(size=(2, 6, 6))
    got = F.multi_head_self_attention(Tensor(x), wqkv, bqkv, wo, bo, 2, Tensor(bias)).data
    want = attention_oracle(x, wqkv.data, bqkv.data, wo.data, bo.data, 2, bias)
    assert np.allclose(got, want, atol=1e-12)


def test_attention_rejects_indivisible_heads():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        F.multi_head_self_attention(Tensor(np.zeros((2, 6))), *attention_params(rng, 6), heads=4)


def test_mse_examples():
    p = Tensor(np.array([[0.0, 0.0]]), requires_grad=True)
    assert F.mse_loss(p, np.array([[3.0, 4.0]])).item() == 12.5
    assert F.mse_loss(Tensor(np.ones((3, 2))), np.ones((3, 2))).item() == 0.0
    rng = np.random.default_rng(0)
    pred = leaf(rng, 5, 2)
    target = rng.normal(size=(5, 2))
    F.mse_loss(pred, target).backward()
    assert np.allclose(pred.grad, 2 * (pred.data - target) / 10, atol=1e-15)
    with pytest.raises(ShapeError):
        F.mse_loss(pred, np.zeros((5, 3)))


def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return out


@pytest.mark.parametrize("stride, pad, k", [(1, 0, 3), (2, 3, 7), (2, 1, 3), (3, 2, 5)])
def test_conv2d_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    assert np.allclose(got, conv_oracle(x, w, b, stride, pad), atol=1e-12)


def lstm_oracle(x, wx, wh, b):
    def sig(z):
        return 1 / (1 + np.exp(-z))

    hsz = wh.shape[0]
    h = np.zeros((x.shape[0], hsz))
    c = np.zeros_like(h)
    for t in range(x.shape[1]):
        z = x[:, t] @ wx + h @ wh + b
        i, f, g, o = (z[:, k * hsz : (k + 1) * hsz] for k in range(4))
        c = sig(f) * c + sig(i) * np.tanh(g)
        h = sig(o) * np.tanh(c)
    return h


def test_lstm_matches_step_oracle():
    rng = np.random.default_rng(3)
    x, wx, wh, b = rng.normal(size=(2, 7, 3)), rng.normal(size=(3, 16)), rng.normal(size=(4, 16)), rng.normal(size=16)
    got = F.lstm(Tensor(x), Tensor(wx), Tensor(wh), Tensor(b)).data
    assert np.allclose(got, lstm_oracle(x, wx, wh, b), atol=1e-12)


# --- gradient checks over >= 20 seeds -----------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_linear(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
    check(lambda: F.linear(x, w, b), [x, w, b], rng, 1e-7)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    check(lambda: F.layer_norm(x, g, b), [x, g, b], rng, 1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_and_mse(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 5)
    check(lambda: F.softmax(x), [x], rng, 1e-4)
    p, t = leaf(rng, 4, 2), rng.normal(size=(4, 2))
    report = grad_check(lambda: F.mse_loss(p, t), [p], tolerance=1e-6, max_coords=None)
    assert report.passed, str(report)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_attention(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 4, 8)
    params = attention_params(rng, 8)
    bias = leaf(rng, 2, 4, 4)
    check(lambda: F.multi_head_self_attention(x, *params, heads=2, bias=bias), [x, *params, bias], rng, 1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng, 2, 2, 6, 6), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    stride, pad = (1, 0) if seed % 2 else (2, 1)
    check(lambda: F.conv2d(x, w, b, stride, pad), [x, w, b], rng, 1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_lstm_ten_steps(seed):
    rng = np.random.default_rng(seed)
    x, wx, wh, b = leaf(rng, 2, 10, 3), leaf(rng, 3, 16, scale=0.5), leaf(rng, 4, 16, scale=0.5), leaf(rng, 16)
    check(lambda: F.lstm(x, wx, wh, b), [x, wx, wh, b], rng, 1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise_and_structural(seed):
    rng = np.random.default_rng(seed)
    a, b, c = leaf(rng, 3, 4), leaf(rng, 4), leaf(rng, 4, 2)
    table, idx = leaf(rng, 5, 3), np.array([0, 2, 2, 4, 0])
    ops = [
        lambda: add(a, b),
        lambda: mul(a, b),
        lambda: mul(a, 2.5),
        lambda: matmul(a, c),
        lambda: reshape(transpose(a, (1, 0)), (2, 6)),
        lambda: roll(a, (1, -1), (0, 1)),
        lambda: getitem(a, (slice(1, None), 2)),
        lambda: getitem(a, np.array([0, 0, 2])),
        lambda: take(table, idx),
        lambda: sigmoid(a),
        lambda: tanh(a),
        lambda: gelu(a),
        lambda: relu(a),
        lambda: a - b,
        lambda: mean_all(a),
    ]
    for op in ops:
        check(op, [a, b, c, table], rng, 1e-6)


def test_grad_dropout_with_fixed_mask():
    rng = np.random.default_rng(0)
    x = leaf(rng, 4, 5)

    def out():
        return dropout(x, 0.3, np.random.default_rng(7), training=True)

    check(out, [x], rng, 1e-7)
    assert dropout(x, 0.3, None, training=False) is x


def test_shared_node_gradients_accumulate():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = mul(x, x)
    sum_all(add(y, x)).backward()
    assert np.array_equal(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad


# --- the checker itself ---------------------------------------------------


def flipped_linear(x, w):
    def backward(g):
        return -(g @ w.data.T), -(x.data.T @ g)

    return Tensor.from_op(x.data @ w.data, (x, w), backward)


def test_sign_flipped_backward_is_caught():
    rng = np.random.default_rng(0)
    x, w = leaf(rng, 3, 4), leaf(rng, 4, 2)
    report = grad_check(projected(lambda: flipped_linear(x, w), rng), [x, w], max_coords=None)
    assert not report.passed
    assert report.worst == pytest.approx(2.0)


def test_grad_check_requires_float64_and_finite_loss():
    x32 = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(GradCheckError, match="float64"):
        grad_check(lambda: sum_all(x32), [x32])
    x = Tensor(np.array([np.inf, 1.0]), requires_grad=True)
    with pytest.raises(GradCheckError, match="non-finite"):
        grad_check(lambda: sum_all(x), [x])


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2e-9, 0.0) == pytest.approx(0.2)


# --- invariants -------------------------------------------------------------

rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 12)),
              elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(rows)
def test_softmax_rows_normalized(x):
    y = F.softmax(Tensor(x)).data
    assert (y >= 0).all()
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(rows)
def test_layer_norm_standardizes_rows(x):
    # output variance is var / (var + eps); non-degenerate means var >= 1e4 * eps
    keep = x.var(axis=-1) >= 1e4 * 1e-5
    if not keep.any():
        return
    x = x[keep]
    d = x.shape[-1]
    y = F.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-6
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-4


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameter():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(5):
        p.grad = np.zeros(2)
        opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_constant_gradient_step_tends_to_lr_sign():
    p = Parameter(np.zeros(3))
    opt = Adam([p], lr=0.01)
    g = np.array([3.0, -0.5, 1e-3])
    for _ in range(200):
        before = p.data.copy()
        p.grad = g.copy()
        opt.step()
    assert np.allclose(p.data - before, -0.01 * np.sign(g), rtol=1e-4)
    assert np.array_equal(p.grad, np.zeros(3))


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = Parameter(rng.normal(size=(4, 3)))
        opt = Adam([p], lr=0.05)
        for _ in range(10):
            p.grad = rng.normal(size=(4, 3))
            opt.step()
        return p.data

    assert run().tobytes() == run().tobytes()


# --- modules and checkpoints ------------------------------------------------


def test_state_dict_round_trip_and_mismatch():
    rng = np.random.default_rng(0)
    a, b = Linear(3, 2, rng), Linear(3, 2, rng)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    with pytest.raises(ShapeError):
        Linear(4, 2, rng).load_state_dict(a.state_dict())
    with pytest.raises(KeyError):
        Linear(3, 2, rng, bias=False).load_state_dict(a.state_dict())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    state = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(4, np.float32),
             "scalarish": np.array([1.5], np.float32), "ünï": rng.random((2, 2, 2)).astype(np.float32)}
    path = tmp_path / "m.tckp"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        assert back[k].tobytes() == state[k].tobytes() and back[k].shape == state[k].shape
    assert encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_corruption_raises_typed_errors():
    buf = encode_checkpoint({"w": np.ones((2, 3), np.float32)})
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"NOPE" + buf[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    for cut in (2, 10, len(buf) - 1):
        with pytest.raises(TruncatedFileError):
            decode_checkpoint(buf[:cut])
    bad_name = buf[:14] + b"\xff" + buf[15:]
    with pytest.raises(FormatError, match="utf-8"):
        decode_checkpoint(bad_name)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_mutated_checkpoints_raise_only_format_errors(data):
    buf = bytearray(encode_checkpoint({"a.weight": np.ones((2, 3), np.float32), "b": np.zeros(4, np.float32)}))
    for _ in range(data.draw(st.integers(1, 4))):
        buf[data.draw(st.integers(0, len(buf) - 1))] = data.draw(st.integers(0, 255))
    try:
        decode_checkpoint(bytes(buf))
    except FormatError:
        pass
