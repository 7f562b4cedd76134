"""Masked multi-head self-attention encoder (post-norm, no positional encoding)."""
from dataclasses import dataclass

import numpy as np

from deformer import numerics as nx


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    n_layers: int = 6
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_ff <= 0 or self.n_layers < 0:
            raise ValueError(f"invalid transformer sizes: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


def init_linear(rng, fan_in, fan_out, prefix, bias=True):
    bound = 1.0 / np.sqrt(fan_in)
    params = {f"{prefix}.weight": nx.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                            requires_grad=True, name=f"{prefix}.weight")}
    if bias:
        params[f"{prefix}.bias"] = nx.Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.bias")
    return params


def linear(x, params, prefix):
    out = nx.matmul(x, params[f"{prefix}.weight"])
    bias = params.get(f"{prefix}.bias")
    return out if bias is None else nx.add(out, bias)


def init_stack_params(config, rng, prefix="encoder"):
    d, f = config.d_model, config.d_ff
    params = {}
    for i in range(config.n_layers):
        p = f"{prefix}.{i}"
        # Key bias shifts every score in a row equally, so softmax ignores it.
        params.update(init_linear(rng, d, d, f"{p}.attn.q"))
        params.update(init_linear(rng, d, d, f"{p}.attn.k", bias=False))
        params.update(init_linear(rng, d, d, f"{p}.attn.v"))
        params.update(init_linear(rng, d, d, f"{p}.attn.o"))
        params.update(init_linear(rng, d, f, f"{p}.ff1"))
        params.update(init_linear(rng, f, d, f"{p}.ff2"))
        for norm in ("norm1", "norm2"):
            params[f"{p}.{norm}.gain"] = nx.Tensor(np.ones(d), requires_grad=True, name=f"{p}.{norm}.gain")
            params[f"{p}.{norm}.bias"] = nx.Tensor(np.zeros(d), requires_grad=True, name=f"{p}.{norm}.bias")
    return params


def check_mask(mask, length):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length, length):
        raise nx.ShapeError(f"attention mask shape {mask.shape} does not match sequence length {length}")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ValueError(f"attention mask row {int(empty[0])} has no visible column")
    return mask


def _split_heads(x, n_heads):
    *lead, length, d = x.shape
    x = nx.reshape(x, (*lead, length, n_heads, d // n_heads))
    n = len(lead)
    return nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x):
    *lead, h, length, hd = x.shape
    n = len(lead)
    x = nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return nx.reshape(x, (*lead, length, h * hd))


def multi_head_attention(x, mask, params, prefix, n_heads, return_weights=False):
    """Self-attention where ``mask[r, c]`` True lets row ``r`` read row ``c``."""
    length = x.shape[-2]
    blocked = ~check_mask(mask, length)
    q = _split_heads(linear(x, params, f"{prefix}.q"), n_heads)
    k = _split_heads(linear(x, params, f"{prefix}.k"), n_heads)
    v = _split_heads(linear(x, params, f"{prefix}.v"), n_heads)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    weights = nx.softmax_rows(nx.masked_fill(scores, blocked))
    out = linear(_merge_heads(nx.matmul(weights, v)), params, f"{prefix}.o")
    if return_weights:
        return out, weights
    return out


def encoder_layer(x, mask, params, prefix, config, training=False, rng=None):
    keep = 1.0 - config.dropout_p
    a = multi_head_attention(x, mask, params, f"{prefix}.attn", config.n_heads)
    a = nx.dropout(a, keep, rng, training)
    x = nx.layer_norm_rows(nx.add(x, a), params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
    h = linear(nx.relu(linear(x, params, f"{prefix}.ff1")), params, f"{prefix}.ff2")
    h = nx.dropout(h, keep, rng, training)
    return nx.layer_norm_rows(nx.add(x, h), params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])


def encoder_stack(x, mask, config, params, prefix="encoder", training=False, rng=None):
    """Run ``config.n_layers`` post-norm layers; no positional signal is added."""
    check_mask(mask, x.shape[-2])
    for i in range(config.n_layers):
        x = encoder_layer(x, mask, params, f"{prefix}.{i}", config, training, rng)
    return x
