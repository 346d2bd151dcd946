"""Neural building blocks on the autodiff core.

Layers are plain functions taking explicit parameter tensors, plus light
module classes that own their parameters and expose ``parameters()``.
All shapes are time-major: [T, D] for sequences.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeMismatch,
    Tensor,
    astensor,
    concat,
    gelu,
    matmul,
    mul,
    narrow,
    parameter,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
    tmean,
    transpose,
    tsum,
)


class TooShort(ValueError):
    pass


def linear(x, w, b=None):
    """Affine map x @ w + b for x: [N, din], w: [din, dout]."""
    x, w = astensor(x), astensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: {x.shape} @ {w.shape}")
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x = astensor(x)
    d = x.shape[-1]
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = mul(centered, power(var + eps, -0.5))
    if gain is not None:
        normed = mul(normed, gain)
    if bias is not None:
        normed = normed + bias
    return normed


def dropout(x, p, rng, train=True):
    """Inverted dropout: scales kept units by 1/(1-p) at train time."""
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, Tensor(keep))


def conv1d(x, kernel, stride=1, pad_same=False, groups=1):
    """Valid cross-correlation. x: [T, Cin], kernel: [k, Cin/groups, Cout].

    With pad_same zero-pads so that T' = ceil(T/stride).
    """
    x, kernel = astensor(x), astensor(kernel)
    k, cin_g, cout = kernel.shape
    t, cin = x.shape
    if cin_g * groups != cin:
        raise ShapeMismatch(f"conv1d: input {cin} channels, kernel expects {cin_g}*{groups}")
    if cout % groups:
        raise ShapeMismatch("conv1d: output channels not divisible by groups")

    if pad_same:
        total = max((int(np.ceil(t / stride)) - 1) * stride + k - t, 0)
        left = total // 2
        xd = np.zeros((t + total, cin))
        xd[left : left + t] = x.data
        x_pad_info = (left, t, total)
        t_eff = t + total
    else:
        if t < k:
            raise TooShort(f"conv1d: length {t} < kernel {k}")
        xd = x.data
        x_pad_info = None
        t_eff = t

    t_out = (t_eff - k) // stride + 1
    cout_g = cout // groups
    out_val = np.zeros((t_out, cout))
    # windows[t', j] = xd[t'*stride + j]
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    windows = xd[idx]  # [T', k, Cin]
    for g in range(groups):
        wg = windows[:, :, g * cin_g : (g + 1) * cin_g]
        kg = kernel.data[:, :, g * cout_g : (g + 1) * cout_g]
        out_val[:, g * cout_g : (g + 1) * cout_g] = np.einsum("tkc,kco->to", wg, kg)

    out = Tensor(out_val, x.requires_grad or kernel.requires_grad, (x, kernel))

    def bw(g_out):
        if kernel.requires_grad:
            dk = np.zeros_like(kernel.data)
            for g in range(groups):
                wg = windows[:, :, g * cin_g : (g + 1) * cin_g]
                dk[:, :, g * cout_g : (g + 1) * cout_g] = np.einsum(
                    "tkc,to->kco", wg, g_out[:, g * cout_g : (g + 1) * cout_g]
                )
            kernel._accumulate(dk)
        if x.requires_grad:
            dxd = np.zeros_like(xd)
            for g in range(groups):
                kg = kernel.data[:, :, g * cout_g : (g + 1) * cout_g]
                dwin = np.einsum("to,kco->tkc", g_out[:, g * cout_g : (g + 1) * cout_g], kg)
                np.add.at(dxd[:, g * cin_g : (g + 1) * cin_g], idx, dwin)
            if x_pad_info is not None:
                left, t0, _ = x_pad_info
                dxd = dxd[left : left + t0]
            x._accumulate(dxd)

    out._backward = bw
    return out


def scaled_dot_attention(q, k, v):
    """softmax(Q K^T / sqrt(d_k)) V for q: [Tq,dk], k: [Tk,dk], v: [Tk,dv]."""
    q, k, v = astensor(q), astensor(k), astensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"attention: d_k mismatch {q.shape} vs {k.shape}")
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


class MultiHeadAttention:
    """Self-attention with h heads over model dim d; per-head dim d/h."""

    def __init__(self, d_model, n_heads, rng, name="mha"):
        if d_model % n_heads:
            raise ShapeMismatch("model dim must divide by head count")
        self.d_model, self.n_heads = d_model, n_heads
        s = 1.0 / np.sqrt(d_model)
        def w(nm):
            return parameter(rng.normal(0.0, s, (d_model, d_model)), f"{name}.{nm}")
        self.wq, self.wk, self.wv, self.wo = w("wq"), w("wk"), w("wv"), w("wo")
        self.bo = parameter(np.zeros(d_model), f"{name}.bo")

    def parameters(self):
        return [self.wq, self.wk, self.wv, self.wo, self.bo]

    def __call__(self, x):
        dh = self.d_model // self.n_heads
        q, k, v = matmul(x, self.wq), matmul(x, self.wk), matmul(x, self.wv)
        heads = []
        for i in range(self.n_heads):
            qi = narrow(q, 1, i * dh, dh)
            ki = narrow(k, 1, i * dh, dh)
            vi = narrow(v, 1, i * dh, dh)
            heads.append(scaled_dot_attention(qi, ki, vi))
        return matmul(concat(heads, axis=1), self.wo) + self.bo


def lstm_cell(x_t, h_prev, c_prev, params):
    """One LSTM step.  params: dict with W_i/U_i/b_i for i,f,o,c gates.

    Gate nonlinearities are sigmoid; both cell nonlinearities are tanh.
    """
    def gate(nm, act):
        z = matmul(x_t, params[f"W_{nm}"]) + matmul(h_prev, params[f"U_{nm}"]) + params[f"b_{nm}"]
        return act(z)

    i_t = gate("i", sigmoid)
    f_t = gate("f", sigmoid)
    o_t = gate("o", sigmoid)
    c_t = mul(f_t, c_prev) + mul(i_t, gate("c", tanh))
    h_t = mul(o_t, tanh(c_t))
    return h_t, c_t


def init_lstm_params(d_in, d_hidden, rng, name="lstm"):
    s_in, s_h = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(d_hidden)
    params = {}
    for nm in "ifoc":
        params[f"W_{nm}"] = parameter(rng.normal(0.0, s_in, (d_in, d_hidden)), f"{name}.W_{nm}")
        params[f"U_{nm}"] = parameter(rng.normal(0.0, s_h, (d_hidden, d_hidden)), f"{name}.U_{nm}")
        params[f"b_{nm}"] = parameter(np.zeros(d_hidden), f"{name}.b_{nm}")
    return params


def lstm_run(xs, params, d_hidden, reverse=False):
    """Run an LSTM over xs: [T, d_in]; returns [T, d_hidden]."""
    t_len = xs.shape[0]
    h = Tensor(np.zeros((1, d_hidden)))
    c = Tensor(np.zeros((1, d_hidden)))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    outs = [None] * t_len
    for t in order:
        x_t = narrow(xs, 0, t, 1)
        h, c = lstm_cell(x_t, h, c, params)
        outs[t] = h
    return concat(outs, axis=0)


class BlstmLayer:
    """Bidirectional LSTM layer; output dim is 2*hidden."""

    def __init__(self, d_in, d_hidden, rng, name="blstm"):
        self.d_hidden = d_hidden
        self.fwd = init_lstm_params(d_in, d_hidden, rng, f"{name}.fwd")
        self.bwd = init_lstm_params(d_in, d_hidden, rng, f"{name}.bwd")

    def parameters(self):
        return list(self.fwd.values()) + list(self.bwd.values())

    def __call__(self, xs):
        f = lstm_run(xs, self.fwd, self.d_hidden)
        b = lstm_run(xs, self.bwd, self.d_hidden, reverse=True)
        return concat([f, b], axis=1)


class Linear:
    def __init__(self, d_in, d_out, rng, name="linear", bias=True):
        s = 1.0 / np.sqrt(d_in)
        self.w = parameter(rng.normal(0.0, s, (d_in, d_out)), f"{name}.w")
        self.b = parameter(np.zeros(d_out), f"{name}.b") if bias else None

    def parameters(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def __call__(self, x):
        return linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, d, name="ln"):
        self.gain = parameter(np.ones(d), f"{name}.gain")
        self.bias = parameter(np.zeros(d), f"{name}.bias")

    def parameters(self):
        return [self.gain, self.bias]

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


class FeedForward:
    """Position-wise feed-forward: linear -> activation -> linear."""

    def __init__(self, d_model, d_ff, rng, activation=relu, name="ff"):
        self.lin1 = Linear(d_model, d_ff, rng, f"{name}.lin1")
        self.lin2 = Linear(d_ff, d_model, rng, f"{name}.lin2")
        self.act = activation

    def parameters(self):
        return self.lin1.parameters() + self.lin2.parameters()

    def __call__(self, x):
        return self.lin2(self.act(self.lin1(x)))


class TransformerBlock:
    """Post-LN encoder block: self-attention and feed-forward sublayers.

    With two_ff=True a second feed-forward sublayer precedes the attention
    (sandwich layout used by the supervised baseline recipe).
    """

    def __init__(self, d_model, n_heads, d_ff, rng, activation=relu,
                 two_ff=False, name="block"):
        self.two_ff = two_ff
        self.ff_pre = FeedForward(d_model, d_ff, rng, activation, f"{name}.ff_pre") if two_ff else None
        self.ln_pre = LayerNorm(d_model, f"{name}.ln_pre") if two_ff else None
        self.mha = MultiHeadAttention(d_model, n_heads, rng, f"{name}.mha")
        self.ln1 = LayerNorm(d_model, f"{name}.ln1")
        self.ff = FeedForward(d_model, d_ff, rng, activation, f"{name}.ff")
        self.ln2 = LayerNorm(d_model, f"{name}.ln2")

    def parameters(self):
        ps = []
        if self.two_ff:
            ps += self.ff_pre.parameters() + self.ln_pre.parameters()
        return ps + self.mha.parameters() + self.ln1.parameters() + self.ff.parameters() + self.ln2.parameters()

    def __call__(self, x, drop_p=0.0, rng=None, train=False):
        def maybe_drop(t):
            return dropout(t, drop_p, rng, train) if rng is not None else t

        if self.two_ff:
            x = self.ln_pre(x + maybe_drop(self.ff_pre(x)))
        x = self.ln1(x + maybe_drop(self.mha(x)))
        x = self.ln2(x + maybe_drop(self.ff(x)))
        return x
