"""Point-wise transformer encoder block over the fused per-point feature.

Each sample point is treated as a sequence of length one: its fused input
``[PE(p) || delta || gamma]`` is projected to ``d_model`` and passed through
post-norm encoder layers (residual, LayerNorm, FFN, residual, LayerNorm).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .params import LayerNormParams, Linear, init_layernorm, init_linear


@dataclass
class GatLayer:
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    ffn1: Linear
    ffn2: Linear
    ln1: LayerNormParams
    ln2: LayerNormParams


@dataclass
class GatParams:
    proj: Linear
    layers: list
    n_head: int

    @property
    def d_model(self):
        return self.proj.fan_out


def init_gat(cfg, d_in, rng, dtype=np.float32):
    d = cfg.d_model
    layers = []
    for _ in range(cfg.num_layers):
        layers.append(
            GatLayer(
                q=init_linear(rng, d, d, dtype=dtype),
                k=init_linear(rng, d, d, dtype=dtype),
                v=init_linear(rng, d, d, dtype=dtype),
                o=init_linear(rng, d, d, dtype=dtype),
                ffn1=init_linear(rng, d, cfg.d_ffn, dtype=dtype),
                ffn2=init_linear(rng, cfg.d_ffn, d, dtype=dtype),
                ln1=init_layernorm(d, dtype),
                ln2=init_layernorm(d, dtype),
            )
        )
    proj = init_linear(rng, d_in, d, bias=cfg.proj_bias, dtype=dtype)
    return GatParams(proj=proj, layers=layers, n_head=cfg.n_head)


def fuse_parts(pe_p, delta, gamma, dims=(63, 76, 32)):
    """Validated ``[PE(p), delta, gamma]`` blocks of the fused input, unconcatenated.

    ``delta`` and ``gamma`` stay single (1, k) rows when not batch-shaped;
    layers consuming the parts apply them once per batch.
    """
    names = ("PE(p)", "delta", "gamma")
    parts = []
    for name, part, want in zip(names, (pe_p, delta, gamma), dims):
        part = dc.as_tensor(part)
        if part.shape[-1] != want:
            raise dc.DimensionError(f"fuse_inputs: {name} has width {part.shape[-1]}, expected {want}")
        parts.append(part)
    lead = parts[0].shape[:-1]
    for i in (1, 2):
        if parts[i].shape[:-1] != lead:
            if parts[i].data.size != dims[i]:
                raise dc.DimensionError(f"fuse_inputs: {names[i]} of shape {parts[i].shape} is neither "
                                        f"a single row nor batch-shaped like {lead}")
            parts[i] = parts[i].reshape((1,) * len(lead) + (dims[i],))
    return parts


def fuse_inputs(pe_p, delta, gamma, dims=(63, 76, 32)):
    """Concatenate ``[PE(p) || delta || gamma]`` along the last axis.

    Accepts tensors or arrays; ``delta`` and ``gamma`` may be single rows that
    are broadcast over the batch of ``pe_p``.
    """
    parts = fuse_parts(pe_p, delta, gamma, dims)
    lead = parts[0].shape[:-1]
    for i in (1, 2):
        if parts[i].shape[:-1] != lead:
            parts[i] = dc.expand(parts[i], lead + (dims[i],))
    return dc.concat(parts, axis=-1)


def project(x, params):
    """Input projection of the fused input, given whole or as ``fuse_parts`` blocks."""
    if isinstance(x, (list, tuple)):
        return dc.linear_cat(x, params.proj.weight, params.proj.bias)
    return dc.linear(x, params.proj.weight, params.proj.bias)


def _split_heads(t, n_head):
    b, s, d = t.shape
    return dc.transpose(t.reshape(b, s, n_head, d // n_head), (0, 2, 1, 3))


def mhsa(x, layer, n_head, return_weights=False):
    """Multi-head self-attention over ``x`` of shape (batch, seq, d_model).

    Only ``seq == 1`` is accepted: each point attends to itself alone, so the
    softmax weight is exactly one and the result equals the output
    projection of the value projection.
    """
    if x.ndim != 3:
        raise dc.DimensionError(f"mhsa expects (batch, seq, d_model), got {x.shape}")
    b, s, d = x.shape
    if s != 1:
        raise dc.DimensionError(f"mhsa runs point-wise; sequence length must be 1, got {s}")
    if d % n_head:
        raise dc.DimensionError(f"d_model={d} not divisible by {n_head} heads")
    dk = d // n_head
    q = _split_heads(dc.linear(x, layer.q.weight, layer.q.bias), n_head)
    k = _split_heads(dc.linear(x, layer.k.weight, layer.k.bias), n_head)
    v = _split_heads(dc.linear(x, layer.v.weight, layer.v.bias), n_head)
    scores = dc.mul(dc.bmm(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    weights = dc.softmax(scores, axis=-1)
    ctx = dc.bmm(weights, v)  # (b, h, s, dk)
    ctx = dc.transpose(ctx, (0, 2, 1, 3)).reshape(b, s, d)
    out = dc.linear(ctx, layer.o.weight, layer.o.bias)
    if return_weights:
        return out, weights
    return out


def ffn(x, layer):
    """``relu(x W1 + b1) W2 + b2``."""
    h = dc.linear(x, layer.ffn1.weight, layer.ffn1.bias, relu=True)
    return dc.linear(h, layer.ffn2.weight, layer.ffn2.bias)


def encoder_layer(x, layer, n_head):
    """One post-norm encoder layer on (batch, d_model) point features."""
    b, d = x.shape
    attn = mhsa(x.reshape(b, 1, d), layer, n_head).reshape(b, d)
    h = dc.layernorm(dc.add(x, attn), layer.ln1.gain, layer.ln1.bias)
    return dc.layernorm(dc.add(h, ffn(h, layer)), layer.ln2.gain, layer.ln2.bias)


def gat_forward(x_concat, params):
    """Project the fused input and run every encoder layer."""
    h = project(x_concat, params)
    for layer in params.layers:
        h = encoder_layer(h, layer, params.n_head)
    return h
