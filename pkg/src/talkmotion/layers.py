"""Transformer building blocks on top of the autodiff engine.

Parameters live in a flat ``dict[str, Tensor]``; every layer function takes
that dict and a name prefix.
"""

import numpy as np

from .tensor import (gelu, layer_norm, matmul, parameter, reshape, softmax,
                     swap_last, transpose)


def sinusoidal(positions, dim):
    """(len(positions), dim) table: sines in the first half, cosines in the second."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions * freqs
    out = np.zeros((positions.shape[0], dim))
    out[:, :half] = np.sin(ang)
    out[:, half:2 * half] = np.cos(ang)
    return out


class ParamBuilder:
    """Collects freshly initialized parameters under dotted names."""

    def __init__(self, rng):
        self.rng = rng
        self.params = {}

    def uniform(self, name, fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = parameter(self.rng.uniform(-bound, bound, size=shape))

    def normal(self, name, shape, scale=1.0):
        self.params[name] = parameter(self.rng.standard_normal(shape) * scale)

    def zeros(self, name, shape):
        self.params[name] = parameter(np.zeros(shape))

    def ones(self, name, shape):
        self.params[name] = parameter(np.ones(shape))

    def linear(self, name, d_in, d_out, zero=False):
        if zero:
            self.zeros(f"{name}.w", (d_in, d_out))
        else:
            self.uniform(f"{name}.w", d_in, (d_in, d_out))
        self.zeros(f"{name}.b", (d_out,))

    def norm(self, name, d):
        self.ones(f"{name}.g", (d,))
        self.zeros(f"{name}.b", (d,))

    def attention(self, name, d):
        for proj in ("q", "k", "v", "o"):
            self.linear(f"{name}.{proj}", d, d)

    def feed_forward(self, name, d, mult=4):
        self.linear(f"{name}.fc1", d, mult * d)
        self.linear(f"{name}.fc2", mult * d, d)

    def encoder_block(self, name, d):
        self.norm(f"{name}.ln1", d)
        self.attention(f"{name}.attn", d)
        self.norm(f"{name}.ln2", d)
        self.feed_forward(f"{name}.ff", d)

    def decoder_block(self, name, d):
        self.norm(f"{name}.ln1", d)
        self.attention(f"{name}.self", d)
        self.norm(f"{name}.ln2", d)
        self.norm(f"{name}.ln_mem", d)
        self.attention(f"{name}.cross", d)
        self.norm(f"{name}.ln3", d)
        self.feed_forward(f"{name}.ff", d)


def linear(p, name, x):
    return matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def norm(p, name, x):
    return layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def efficient_attention(q, k, v):
    """softmax_features(q) @ (softmax_positions(k)^T @ v).

    ``q`` is (..., n, dk), ``k`` is (..., m, dk), ``v`` is (..., m, dv). The
    n x m score matrix is never formed; the context is dk x dv.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    context = matmul(swap_last(softmax(k, axis=-2)), v)
    return matmul(softmax(q, axis=-1), context)


def _split_heads(x, heads):
    b, n, h = x.shape
    return transpose(reshape(x, (b, n, heads, h // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, heads, n, dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, heads * dk))


def multihead_attention(p, name, x, ctx, heads):
    """Efficient attention from queries ``x`` (B, n, H) to ``ctx`` (B, m, H)."""
    q = _split_heads(linear(p, f"{name}.q", x), heads)
    k = _split_heads(linear(p, f"{name}.k", ctx), heads)
    v = _split_heads(linear(p, f"{name}.v", ctx), heads)
    return linear(p, f"{name}.o", _merge_heads(efficient_attention(q, k, v)))


def feed_forward(p, name, x):
    return linear(p, f"{name}.fc2", gelu(linear(p, f"{name}.fc1", x)))


def encoder_block(p, name, x, heads):
    h = norm(p, f"{name}.ln1", x)
    x = x + multihead_attention(p, f"{name}.attn", h, h, heads)
    return x + feed_forward(p, f"{name}.ff", norm(p, f"{name}.ln2", x))


def decoder_block(p, name, x, memory, heads):
    h = norm(p, f"{name}.ln1", x)
    x = x + multihead_attention(p, f"{name}.self", h, h, heads)
    mem = norm(p, f"{name}.ln_mem", memory)
    x = x + multihead_attention(p, f"{name}.cross", norm(p, f"{name}.ln2", x), mem, heads)
    return x + feed_forward(p, f"{name}.ff", norm(p, f"{name}.ln3", x))

