"""Differentiable building blocks: linear maps, resampling convolutions,
bidirectional LSTM, layer normalization, multi-head self-attention,
positional encoding and dropout.

All operations take channel-first tensors: axis 0 is the feature axis and
any trailing axes are treated as independent positions/batch entries, so
the same kernels serve both the per-segment and the batched paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, LayoutError, ShapeError
from .tensor import (
    RngState,
    Tensor,
    _accumulate,
    _result,
    add,
    add_const,
    add_vec,
    apply_weights,
    inner_contract,
    matmul,
    moveaxis,
    mul_scalar,
    prelu,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
)

# Test hook: names a backward rule to corrupt, used to prove that the
# gradient checker actually detects broken gradients.
_grad_fault: str | None = None


def set_grad_fault(name: str | None):
    global _grad_fault
    _grad_fault = name


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """out[:, ...] = w @ x[:, ...] + b, contracting the feature axis."""
    if w.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {w.shape}")
    if x.ndim < 1 or x.shape[0] != w.shape[1]:
        raise ShapeError(
            f"linear: input axis 0 has size {x.shape[0] if x.ndim else 0}, "
            f"weight expects {w.shape[1]}"
        )
    out = matmul(w, x)
    if _grad_fault == "linear" and out._backward is not None:
        inner = out._backward

        def corrupted(g):
            inner(g * 1.001)

        out._backward = corrupted
    if b is not None:
        out = add_vec(out, b, axis=0)
    return out


# -- resampling convolutions -------------------------------------------------


def conv1d(
    x: Tensor,
    kernel: Tensor,
    stride: int,
    transposed: bool = False,
    bias: Tensor | None = None,
) -> Tensor:
    """1-D convolution along axis 1 with kernel size = kernel.shape[-1].

    A 2-D kernel [D, k] is depthwise (one filter per channel); a 3-D kernel
    [D_out, D_in, k] is dense.  Non-transposed output length is A // stride
    (A must divide; taps past the end read zeros when k > stride).
    Transposed output length is A * stride.
    """
    if stride <= 0:
        raise ConfigError(f"conv1d: stride must be positive, got {stride}")
    if x.ndim < 2:
        raise ShapeError(f"conv1d: input must have at least 2 axes, got {x.shape}")
    if kernel.ndim == 2:
        depthwise = True
        channels, ksize = kernel.shape
        if channels != x.shape[0]:
            raise ShapeError(
                f"conv1d: depthwise kernel channels {channels} != input channels {x.shape[0]}"
            )
    elif kernel.ndim == 3:
        depthwise = False
        out_ch, in_ch, ksize = kernel.shape
        if in_ch != x.shape[0]:
            raise ShapeError(
                f"conv1d: kernel input channels {in_ch} != input channels {x.shape[0]}"
            )
    else:
        raise ShapeError(f"conv1d: kernel must be 2-D or 3-D, got {kernel.shape}")

    length = x.shape[1]
    if not transposed and length % stride != 0:
        raise LayoutError(
            f"conv1d: axis length {length} is not divisible by stride {stride}"
        )

    if transposed:
        out = _conv_transposed(x, kernel, stride, ksize, depthwise)
    else:
        out = _conv_forward(x, kernel, stride, ksize, depthwise)
    if bias is not None:
        out = add_vec(out, bias, axis=0)
    return out


def _tap_view(vec: np.ndarray, ndim: int) -> np.ndarray:
    return vec.reshape((vec.shape[0],) + (1,) * (ndim - 1))


def _conv_forward(x: Tensor, kernel: Tensor, stride, ksize, depthwise) -> Tensor:
    xd, kd = x.data, kernel.data
    length = xd.shape[1]
    out_len = length // stride
    out_ch = kd.shape[0]
    out = np.zeros((out_ch, out_len) + xd.shape[2:], dtype=xd.dtype)
    for t in range(ksize):
        xs = xd[:, t::stride]
        n = min(out_len, xs.shape[1])
        if n <= 0:
            break
        piece = xs[:, :n]
        if depthwise:
            out[:, :n] += _tap_view(kd[:, t], xd.ndim) * piece
        else:
            out[:, :n] += np.tensordot(kd[:, :, t], piece, axes=([1], [0]))

    def backward(g):
        rest = tuple(range(1, xd.ndim))
        dk = np.zeros_like(kd) if kernel.requires_grad else None
        dx = np.zeros_like(xd) if x.requires_grad else None
        for t in range(ksize):
            n = min(out_len, (length - t + stride - 1) // stride)
            if n <= 0:
                break
            gs = g[:, :n]
            xs = xd[:, t::stride][:, :n]
            if dk is not None:
                if depthwise:
                    dk[:, t] += (gs * xs).sum(axis=rest)
                else:
                    dk[:, :, t] += np.tensordot(gs, xs, axes=(rest, rest))
            if dx is not None:
                view = dx[:, t::stride]
                if depthwise:
                    view[:, :n] += _tap_view(kd[:, t], xd.ndim) * gs
                else:
                    view[:, :n] += np.tensordot(kd[:, :, t], gs, axes=([0], [0]))
        if dk is not None:
            _accumulate(kernel, dk, owned=True)
        if dx is not None:
            _accumulate(x, dx, owned=True)

    return _result(out, (x, kernel), backward)


def _conv_transposed(x: Tensor, kernel: Tensor, stride, ksize, depthwise) -> Tensor:
    xd, kd = x.data, kernel.data
    length = xd.shape[1]
    out_len = length * stride
    out_ch = kd.shape[0]
    out = np.zeros((out_ch, out_len) + xd.shape[2:], dtype=xd.dtype)
    for t in range(ksize):
        cnt = min(length, (out_len - t + stride - 1) // stride)
        if cnt <= 0:
            break
        piece = xd[:, :cnt]
        view = out[:, t::stride]
        if depthwise:
            view[:, :cnt] += _tap_view(kd[:, t], xd.ndim) * piece
        else:
            view[:, :cnt] += np.tensordot(kd[:, :, t], piece, axes=([1], [0]))

    def backward(g):
        rest = tuple(range(1, xd.ndim))
        dk = np.zeros_like(kd) if kernel.requires_grad else None
        dx = np.zeros_like(xd) if x.requires_grad else None
        for t in range(ksize):
            cnt = min(length, (out_len - t + stride - 1) // stride)
            if cnt <= 0:
                break
            gs = g[:, t::stride][:, :cnt]
            xs = xd[:, :cnt]
            if dk is not None:
                if depthwise:
                    dk[:, t] += (gs * xs).sum(axis=rest)
                else:
                    dk[:, :, t] += np.tensordot(gs, xs, axes=(rest, rest))
            if dx is not None:
                if depthwise:
                    dx[:, :cnt] += _tap_view(kd[:, t], xd.ndim) * gs
                else:
                    dx[:, :cnt] += np.tensordot(kd[:, :, t], gs, axes=([0], [0]))
        if dk is not None:
            _accumulate(kernel, dk, owned=True)
        if dx is not None:
            _accumulate(x, dx, owned=True)

    return _result(out, (x, kernel), backward)


# -- layer normalization -------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the channel axis (axis 0) at every remaining position."""
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[0]
    if gain.shape != (d,) or offset.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/offset must have shape ({d},), got {gain.shape}/{offset.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=0)
    xc = xd - mu
    var = np.mean(xc * xc, axis=0)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gview = _tap_view(gain.data, xd.ndim)
    out = gview * xhat + _tap_view(offset.data, xd.ndim)
    rest = tuple(range(1, xd.ndim))

    def backward(g):
        gh = g * gview
        m1 = gh.mean(axis=0)
        m2 = (gh * xhat).mean(axis=0)
        _accumulate(x, inv * (gh - m1 - xhat * m2), owned=True)
        _accumulate(gain, (g * xhat).sum(axis=rest))
        _accumulate(offset, g.sum(axis=rest))

    return _result(out.astype(xd.dtype, copy=False), (x, gain, offset), backward)


# -- bidirectional LSTM ----------------------------------------------------------


@dataclass
class LstmDirectionParams:
    """One direction of an LSTM: gates ordered (input, forget, cell, output)."""

    w_ih: Tensor  # [4H, D]
    w_hh: Tensor  # [4H, H]
    bias: Tensor  # [4H]


@dataclass
class BiLstmParams:
    fwd: LstmDirectionParams
    bwd: LstmDirectionParams

    @property
    def hidden(self) -> int:
        return self.fwd.w_hh.shape[1]

    def tensors(self):
        return (
            self.fwd.w_ih, self.fwd.w_hh, self.fwd.bias,
            self.bwd.w_ih, self.bwd.w_hh, self.bwd.bias,
        )


def _lstm_direction_forward(xd, w_ih, w_hh, b, reverse):
    """Run one direction over axis 1 of xd [D, K, ...]; returns outputs+caches."""
    hdim = w_hh.shape[1]
    steps = xd.shape[1]
    rest = xd.shape[2:]
    pre = np.tensordot(w_ih, xd, axes=([1], [0]))  # [4H, K, rest]
    bview = b.reshape((4 * hdim,) + (1,) * len(rest))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    h = np.zeros((hdim,) + rest, dtype=xd.dtype)
    c = np.zeros((hdim,) + rest, dtype=xd.dtype)
    outs = np.zeros((hdim, steps) + rest, dtype=xd.dtype)
    gates_cache = np.zeros((steps, 4 * hdim) + rest, dtype=xd.dtype)
    cprev_cache = np.zeros((steps, hdim) + rest, dtype=xd.dtype)
    hprev_cache = np.zeros((steps, hdim) + rest, dtype=xd.dtype)
    tanhc_cache = np.zeros((steps, hdim) + rest, dtype=xd.dtype)
    for t in order:
        z = pre[:, t] + np.tensordot(w_hh, h, axes=([1], [0])) + bview
        i = 1.0 / (1.0 + np.exp(-z[:hdim]))
        f = 1.0 / (1.0 + np.exp(-z[hdim:2 * hdim]))
        gg = np.tanh(z[2 * hdim:3 * hdim])
        o = 1.0 / (1.0 + np.exp(-z[3 * hdim:]))
        gates_cache[t, :hdim] = i
        gates_cache[t, hdim:2 * hdim] = f
        gates_cache[t, 2 * hdim:3 * hdim] = gg
        gates_cache[t, 3 * hdim:] = o
        cprev_cache[t] = c
        hprev_cache[t] = h
        c = f * c + i * gg
        tc = np.tanh(c)
        tanhc_cache[t] = tc
        h = o * tc
        outs[:, t] = h
    return outs, (gates_cache, cprev_cache, hprev_cache, tanhc_cache)


def _lstm_direction_backward(g_out, xd, w_ih, w_hh, caches, reverse):
    """BPTT for one direction; g_out is [H, K, ...]."""
    gates_cache, cprev_cache, hprev_cache, tanhc_cache = caches
    hdim = w_hh.shape[1]
    steps = xd.shape[1]
    rest = xd.shape[2:]
    rest_axes = tuple(range(1, 1 + len(rest)))
    order = range(steps) if reverse else range(steps - 1, -1, -1)
    dh = np.zeros((hdim,) + rest, dtype=xd.dtype)
    dc = np.zeros((hdim,) + rest, dtype=xd.dtype)
    dpre = np.zeros((4 * hdim, steps) + rest, dtype=xd.dtype)
    dw_hh = np.zeros_like(w_hh)
    for t in order:
        dh = dh + g_out[:, t]
        i = gates_cache[t, :hdim]
        f = gates_cache[t, hdim:2 * hdim]
        gg = gates_cache[t, 2 * hdim:3 * hdim]
        o = gates_cache[t, 3 * hdim:]
        tc = tanhc_cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * gg
        dgg = dc * i
        df = dc * cprev_cache[t]
        dc = dc * f
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dgg * (1.0 - gg * gg),
                do * o * (1.0 - o),
            ],
            axis=0,
        )
        dpre[:, t] = dz
        dw_hh += np.tensordot(dz, hprev_cache[t], axes=(rest_axes, rest_axes))
        dh = np.tensordot(w_hh, dz, axes=([0], [0]))
    full_axes = tuple(range(1, xd.ndim))
    dw_ih = np.tensordot(dpre, xd, axes=(full_axes, full_axes))
    db = dpre.sum(axis=(1,) + tuple(range(2, xd.ndim)))
    dx = np.tensordot(w_ih, dpre, axes=([0], [0]))
    return dx, dw_ih, dw_hh, db


def bilstm_layer(x: Tensor, params: BiLstmParams) -> Tensor:
    """Bidirectional LSTM over axis 1 of x [D, K, ...] -> [2H, K, ...].

    Zero initial state; forward and backward hidden streams concatenated
    along the feature axis.  Trailing axes are independent sequences.
    """
    if x.ndim < 2 or x.shape[1] < 1:
        raise ShapeError(f"bilstm_layer: need [D, K, ...] with K >= 1, got {x.shape}")
    din = x.shape[0]
    for direction in (params.fwd, params.bwd):
        hd = direction.w_hh.shape[1]
        if direction.w_ih.shape != (4 * hd, din):
            raise ShapeError(
                f"bilstm_layer: w_ih shape {direction.w_ih.shape} does not match "
                f"input dim {din} and hidden {hd}"
            )
        if direction.bias.shape != (4 * hd,):
            raise ShapeError(f"bilstm_layer: bias shape {direction.bias.shape} invalid")

    xd = x.data
    out_f, cache_f = _lstm_direction_forward(
        xd, params.fwd.w_ih.data, params.fwd.w_hh.data, params.fwd.bias.data, False
    )
    out_b, cache_b = _lstm_direction_forward(
        xd, params.bwd.w_ih.data, params.bwd.w_hh.data, params.bwd.bias.data, True
    )
    hdim = params.hidden
    out = np.concatenate([out_f, out_b], axis=0)

    def backward(g):
        dx_total = None
        for g_dir, direction, cache, rev in (
            (g[:hdim], params.fwd, cache_f, False),
            (g[hdim:], params.bwd, cache_b, True),
        ):
            dx, dw_ih, dw_hh, db = _lstm_direction_backward(
                g_dir, xd, direction.w_ih.data, direction.w_hh.data, cache, rev
            )
            if _grad_fault == "lstm":
                dw_ih = dw_ih * 1.001
            _accumulate(direction.w_ih, dw_ih)
            _accumulate(direction.w_hh, dw_hh)
            _accumulate(direction.bias, db)
            dx_total = dx if dx_total is None else dx_total + dx
        _accumulate(x, dx_total, owned=True)

    parents = (x,) + params.tensors()
    return _result(out, parents, backward)


# -- attention -------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Fused multi-head projections: head j owns rows [j*D/J, (j+1)*D/J)."""

    w_q: Tensor  # [D, D]
    b_q: Tensor  # [D]
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor  # [D, D]
    ln_gain: Tensor  # post-residual layer norm
    ln_offset: Tensor

    def tensors(self):
        return (
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v,
            self.w_out, self.ln_gain, self.ln_offset,
        )


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Softmax(q^T k / sqrt(D/J)) applied to v, per head, over axis 1.

    q, k, v are [D, S, ...]; trailing axes are independent sequences.
    Fused kernel: folds heads and trailing axes into a batch dimension and
    runs batched matmuls, keeping only the attention weights for backward.
    """
    d, s = q.shape[0], q.shape[1]
    if d % num_heads != 0:
        raise ConfigError(
            f"scaled_attention: feature dim {d} not divisible by {num_heads} heads"
        )
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(
            f"scaled_attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}"
        )
    head_dim = d // num_heads
    rest = q.shape[2:]
    batch = num_heads * int(np.prod(rest)) if rest else num_heads
    scale = 1.0 / np.sqrt(head_dim)

    def to_batch(arr):
        # [D, S, *rest] -> [J, dh, S, R] -> [J, R, S, dh] -> [J*R, S, dh]
        a = arr.reshape(num_heads, head_dim, s, -1)
        return np.ascontiguousarray(a.transpose(0, 3, 2, 1)).reshape(batch, s, head_dim)

    def from_batch(a):
        # inverse of to_batch
        a = a.reshape(num_heads, -1, s, head_dim).transpose(0, 3, 2, 1)
        return np.ascontiguousarray(a).reshape((d, s) + rest)

    qb = to_batch(q.data) * q.data.dtype.type(scale)
    kb = to_batch(k.data)
    vb = to_batch(v.data)

    weights = np.matmul(qb, kb.swapaxes(1, 2))  # [B, S(query), S(key)]
    weights -= weights.max(axis=2, keepdims=True)
    np.exp(weights, out=weights)
    weights /= weights.sum(axis=2, keepdims=True)
    out = from_batch(np.matmul(weights, vb))

    def backward(g):
        gb = to_batch(g)
        d_attn = np.matmul(gb, vb.swapaxes(1, 2))
        _accumulate(v, from_batch(np.matmul(weights.swapaxes(1, 2), gb)), owned=True)
        d_attn *= weights
        d_attn -= weights * d_attn.sum(axis=2, keepdims=True)
        _accumulate(
            q, from_batch(np.matmul(d_attn, kb)) * q.data.dtype.type(scale), owned=True
        )
        _accumulate(k, from_batch(np.matmul(d_attn.swapaxes(1, 2), qb)), owned=True)

    return _result(out, (q, k, v), backward)


def multi_head_attention(
    x: Tensor,
    params: AttentionParams,
    num_heads: int,
    dropout_rate: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
    eps: float = 1e-5,
) -> Tensor:
    """Scaled dot-product self-attention over axis 1 of x [D, S, ...].

    Computes per-head Q/K/V projections, softmax attention across the S
    axis, head concatenation and output projection, then the residual,
    dropout and layer normalization.  Trailing axes are independent
    sequences sharing the parameters.
    """
    d = x.shape[0]
    if d % num_heads != 0:
        raise ConfigError(
            f"multi_head_attention: feature dim {d} not divisible by {num_heads} heads"
        )
    q = add_vec(matmul(params.w_q, x), params.b_q, axis=0)
    k = add_vec(matmul(params.w_k, x), params.b_k, axis=0)
    v = add_vec(matmul(params.w_v, x), params.b_v, axis=0)
    ctx = scaled_attention(q, k, v, num_heads)
    proj = matmul(params.w_out, ctx)
    proj = dropout(proj, dropout_rate, rng, training)
    return layer_norm(add(x, proj), params.ln_gain, params.ln_offset, eps=eps)


@lru_cache(maxsize=32)
def _positional_table(length: int, dim: int, dtype_name: str) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)
    rows = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos[None, :] / np.power(10000.0, rows[:, None] / dim)
    table = np.zeros((dim, length), dtype=np.dtype(dtype_name))
    table[0::2] = np.sin(angle)
    table[1::2] = np.cos(angle)
    table.setflags(write=False)
    return table


def positional_encoding(length: int, dim: int, dtype=np.float32) -> Tensor:
    """Sinusoidal position table [dim, length]; even rows sine, odd cosine."""
    if dim % 2 != 0:
        raise ConfigError(f"positional_encoding: dim must be even, got {dim}")
    return Tensor(_positional_table(length, dim, np.dtype(dtype).name))


def dropout(
    x: Tensor, rate: float, rng: RngState | None, training: bool
) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout: training mode with rate > 0 requires an RngState")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))

    def backward(g):
        _accumulate(x, g * keep * scale)

    return _result(x.data * keep * scale, (x,), backward)
