"""Fused differentiable ops with hand-written backward passes."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, add, matmul, mul, reshape, transpose, unbroadcast


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W + b over the last axis of ``x``; W is [in, out]."""
    if x.shape[-1] != weight.shape[0] or weight.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    y = x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    y = y.reshape(*lead, weight.shape[1])

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(y, parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return Tensor.from_op(y, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over every scalar entry of (pred - target)^2."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    loss = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def backward(g):
        return (g * 2.0 * diff / n,)

    return Tensor.from_op(loss, (pred,), backward)


def multi_head_self_attention(
    x: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor | None,
    w_out: Tensor,
    b_out: Tensor | None,
    heads: int,
    bias=None,
) -> Tensor:
    """Scaled dot-product self-attention over the token axis (-2).

    ``x`` is [..., T, d]. ``bias`` (Tensor or array) is added to the logits and
    must broadcast to [..., heads, T, T].
    """
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"feature dim {d} not divisible by {heads} heads")
    if w_qkv.shape != (d, 3 * d):
        raise ShapeError(f"attention: input {x.shape} vs qkv weight {w_qkv.shape}")
    lead, t = x.shape[:-2], x.shape[-2]
    dh = d // heads
    qkv = linear(x, w_qkv, b_qkv)
    nl = len(lead)
    # [..., T, 3, h, dh] -> [3, ..., h, T, dh]
    qkv = reshape(qkv, (*lead, t, 3, heads, dh))
    axes = (nl + 1, *range(nl), nl + 2, nl, nl + 3)
    qkv = transpose(qkv, axes)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = matmul(mul(q, dh**-0.5), transpose(k, (*range(nl + 1), nl + 2, nl + 1)))
    if bias is not None:
        logits = add(logits, bias)
    attn = softmax(logits)
    out = matmul(attn, v)  # [..., h, T, dh]
    out = transpose(out, (*range(nl), nl + 1, nl, nl + 2))
    out = reshape(out, (*lead, t, d))
    return linear(out, w_out, b_out)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            col[:, :, i, j] = img[:, :, i:i_max:stride, j:j_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1), oh, ow


def _col2im(col: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int):
    n, c, h, w = shape
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1), dtype=col.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j]
    return img[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: [N, C, H, W], weight: [O, C, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n = x.shape[0]
    o, c, kh, kw = weight.shape
    col, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(o, -1)
    y = col @ wmat.T
    if bias is not None:
        y = y + bias.data
    y = y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ col).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = _col2im(g2 @ wmat, x.shape, kh, kw, stride, pad, oh, ow)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.ascontiguousarray(y), parents, backward)


# ---------------------------------------------------------------------------
# recurrent
# ---------------------------------------------------------------------------


def _sig(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def lstm(x: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor) -> Tensor:
    """Single-layer LSTM from zero state; returns the final hidden state.

    x: [B, T, F]; w_x: [F, 4H]; w_h: [H, 4H]; bias: [4H]. Gate order along
    the 4H axis is input, forget, cell candidate, output.
    """
    b, steps, f = x.shape
    hsz = w_h.shape[0]
    if w_x.shape != (f, 4 * hsz) or w_h.shape != (hsz, 4 * hsz) or bias.shape != (4 * hsz,):
        raise ShapeError(
            f"lstm: input {x.shape}, w_x {w_x.shape}, w_h {w_h.shape}, bias {bias.shape}"
        )
    dt = x.dtype
    xw = (x.data.reshape(-1, f) @ w_x.data).reshape(b, steps, 4 * hsz) + bias.data
    h = np.zeros((b, hsz), dtype=dt)
    c = np.zeros((b, hsz), dtype=dt)
    hs, cs, gates = [h], [c], []
    for t in range(steps):
        z = xw[:, t] + h @ w_h.data
        i = _sig(z[:, :hsz])
        fg = _sig(z[:, hsz : 2 * hsz])
        gg = np.tanh(z[:, 2 * hsz : 3 * hsz])
        o = _sig(z[:, 3 * hsz :])
        c = fg * c + i * gg
        h = o * np.tanh(c)
        gates.append((i, fg, gg, o))
        hs.append(h)
        cs.append(c)

    def backward(gh_last):
        gxw = np.empty((b, steps, 4 * hsz), dtype=dt)
        gwh = np.zeros_like(w_h.data)
        gh = gh_last
        gc = np.zeros((b, hsz), dtype=dt)
        for t in range(steps - 1, -1, -1):
            i, fg, gg, o = gates[t]
            tc = np.tanh(cs[t + 1])
            go = gh * tc
            gc = gc + gh * o * (1 - tc * tc)
            gi = gc * gg
            gf = gc * cs[t]
            ggc = gc * i
            dz = np.concatenate(
                [gi * i * (1 - i), gf * fg * (1 - fg), ggc * (1 - gg * gg), go * o * (1 - o)],
                axis=1,
            )
            gxw[:, t] = dz
            gwh += hs[t].T @ dz
            gh = dz @ w_h.data.T
            gc = gc * fg
        gxw2 = gxw.reshape(-1, 4 * hsz)
        gx = (gxw2 @ w_x.data.T).reshape(x.shape)
        gwx = x.data.reshape(-1, f).T @ gxw2
        return gx, gwx, gwh, gxw2.sum(axis=0)

    return Tensor.from_op(h, (x, w_x, w_h, bias), backward)
