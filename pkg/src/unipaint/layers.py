"""Small parameter containers built on the autodiff tensor ops.

Spatial tensors are channels-last throughout: videos are ``[B, F, H, W, C]``.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import Tensor


class Module:
    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


def _param(data):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def _init(stream, shape, fan_in, zero=False):
    if zero:
        return _param(np.zeros(shape))
    return _param(stream.normal(shape) / math.sqrt(fan_in))


class Linear(Module):
    def __init__(self, d_in, d_out, stream, bias=True, zero=False):
        self.weight = _init(stream, (d_in, d_out), d_in, zero)
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Per-frame 3x3 (or kxk) convolution on ``[..., H, W, C]``."""

    def __init__(self, c_in, c_out, stream, k=3, stride=1, zero=False):
        self.weight = _init(stream, (k, k, c_in, c_out), k * k * c_in, zero)
        self.bias = _param(np.zeros(c_out))
        self._stride = stride
        self._pad = k // 2

    def __call__(self, x):
        lead = x.shape[:-3]
        h = x.reshape((-1,) + x.shape[-3:])
        h = T.conv2d(h, self.weight, self.bias, stride=self._stride, padding=self._pad)
        return h.reshape(lead + h.shape[1:])


class Conv3d(Module):
    def __init__(self, c_in, c_out, stream, k=3, stride=1):
        self.weight = _init(stream, (k, k, k, c_in, c_out), k ** 3 * c_in)
        self.bias = _param(np.zeros(c_out))
        self._stride = stride
        self._pad = k // 2

    def __call__(self, x):
        return T.conv3d(x, self.weight, self.bias, stride=self._stride, padding=self._pad)


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, dim, hidden, stream):
        self.fc1 = Linear(dim, hidden, stream)
        self.fc2 = Linear(hidden, dim, stream)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def sinusoid(positions, dim):
    """Fixed sinusoidal features ``[len(positions), dim]``."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(positions), 1))], axis=1)
    return emb


class Attention(Module):
    """Multi-head scaled dot-product attention over ``[S, L, C]`` sequences."""

    def __init__(self, dim, stream, ctx_dim=None, head_dim=16, zero_out=False):
        ctx_dim = dim if ctx_dim is None else ctx_dim
        self.q = Linear(dim, dim, stream, bias=False)
        self.kv = Linear(ctx_dim, 2 * dim, stream, bias=False)
        self.out = Linear(dim, dim, stream, zero=zero_out)
        heads = max(1, dim // head_dim)
        while dim % heads:
            heads -= 1
        self._heads = heads

    def __call__(self, x, ctx=None):
        ctx = x if ctx is None else ctx
        S, L, C = x.shape
        M = ctx.shape[1]
        h, dh = self._heads, C // self._heads
        q = self.q(x)
        kv = self.kv(ctx)
        k, v = kv[..., :C], kv[..., C:]

        def split(t, n, rows):
            return t.reshape(rows, n, h, dh).transpose(0, 2, 1, 3).reshape(rows * h, n, dh)

        if ctx.shape[0] != S:
            raise ValueError(f"context batch {ctx.shape[0]} does not match query batch {S}")
        qh, kh, vh = split(q, L, S), split(k, M, S), split(v, M, S)
        scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        att = T.softmax(scores, axis=-1) @ vh
        att = att.reshape(S, h, L, dh).transpose(0, 2, 1, 3).reshape(S, L, C)
        return self.out(att)


class ResBlock(Module):
    def __init__(self, c_in, c_out, temb_dim, stream):
        self.norm1 = LayerNorm(c_in)
        self.conv1 = Conv2d(c_in, c_out, stream)
        self.temb = Linear(temb_dim, c_out, stream)
        self.norm2 = LayerNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, stream)
        self.skip = Linear(c_in, c_out, stream) if c_in != c_out else None

    def __call__(self, x, temb):
        B = x.shape[0]
        h = self.conv1(T.silu(self.norm1(x)))
        h = h + self.temb(T.silu(temb)).reshape(B, 1, 1, 1, -1)
        h = self.conv2(T.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class SpatialAttention(Module):
    def __init__(self, dim, stream):
        self.norm = LayerNorm(dim)
        self.attn = Attention(dim, stream)

    def __call__(self, x):
        B, F, H, W, C = x.shape
        seq = x.reshape(B * F, H * W, C)
        seq = seq + self.attn(self.norm(seq))
        return seq.reshape(B, F, H, W, C)
