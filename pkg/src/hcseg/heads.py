"""Segmentation heads on the coarsest feature map.

* mask-query head: a plain pre-norm cross-attention decoder turns trainable
  queries into mask embeddings and class probabilities; masks are the sigmoid
  of inner products between projected features and mask embeddings.
* per-pixel head: a linear classifier with a row softmax.  Its weight columns
  act as class prototypes and their norm as an inverse temperature.

Tokens and pixels are stored as columns: features are (..., C, N) and queries
(C_q, N_m).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .decoding import CLASS, MASK, MaskStack
from .tensor import DimensionError, Tensor


@dataclass
class QueryDecoderParams:
    queries: Tensor
    mem_ln: tuple
    pos_proj: Tensor
    layers: list
    out_ln: tuple
    mask_embed_w: Tensor
    mask_embed_b: Tensor
    feature_w: Tensor
    feature_b: Tensor
    feature_pos_w: Tensor
    class_w: Tensor
    class_b: Tensor
    num_heads: int = 1
    pos_dim: int = 16

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def num_queries(self):
        return self.queries.shape[1]

    @property
    def num_classes(self):
        """K, not counting the no-object class."""
        return self.class_w.shape[0] - 1

    @classmethod
    def init(cls, c_in, num_classes, rng, num_queries=8, c_q=64, c_m=64, num_layers=4,
             num_heads=1, ffn_mult=2, pos_dim=16):
        if c_q % num_heads:
            raise ValueError("c_q must be divisible by num_heads")

        def lin(c_out, c_inp):
            return T.parameter(rng.normal(0.0, 1.0 / math.sqrt(c_inp), size=(c_out, c_inp)))

        def zeros(n):
            return T.parameter(np.zeros(n))

        def ln(n):
            return (T.parameter(np.ones(n)), T.parameter(np.zeros(n)))

        layers = []
        for _ in range(num_layers):
            layers.append({
                "ln1": ln(c_q),
                "wq": lin(c_q, c_q), "bq": zeros(c_q),
                "wk": lin(c_q, c_in), "bk": zeros(c_q),
                "wv": lin(c_q, c_in), "bv": zeros(c_q),
                "wo": lin(c_q, c_q), "bo": zeros(c_q),
                "ln2": ln(c_q),
                "w1": lin(ffn_mult * c_q, c_q), "b1": zeros(ffn_mult * c_q),
                "w2": lin(c_q, ffn_mult * c_q), "b2": zeros(c_q),
            })
        return cls(
            queries=T.parameter(rng.normal(0.0, 1.0, size=(c_q, num_queries))),
            mem_ln=ln(c_in),
            pos_proj=lin(c_in, pos_dim),
            layers=layers,
            out_ln=ln(c_q),
            mask_embed_w=lin(c_m, c_q), mask_embed_b=zeros(c_m),
            feature_w=lin(c_m, c_in), feature_b=zeros(c_m),
            feature_pos_w=lin(c_m, pos_dim),
            class_w=lin(num_classes + 1, c_q), class_b=zeros(num_classes + 1),
            num_heads=num_heads, pos_dim=pos_dim,
        )

    def named(self):
        out = {
            "queries": self.queries,
            "mem_ln.gain": self.mem_ln[0], "mem_ln.bias": self.mem_ln[1],
            "pos_proj": self.pos_proj,
            "out_ln.gain": self.out_ln[0], "out_ln.bias": self.out_ln[1],
            "mask_embed_w": self.mask_embed_w, "mask_embed_b": self.mask_embed_b,
            "feature_w": self.feature_w, "feature_b": self.feature_b,
            "feature_pos_w": self.feature_pos_w,
            "class_w": self.class_w, "class_b": self.class_b,
        }
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                if isinstance(v, tuple):
                    out[f"layer{i}.{k}.gain"], out[f"layer{i}.{k}.bias"] = v
                else:
                    out[f"layer{i}.{k}"] = v
        return out


@lru_cache(maxsize=None)
def positional_encoding(grid, dim=16):
    """Fixed 2-D sinusoidal encoding, (dim, h*w); half the channels per axis."""
    h, w = grid
    quarter = dim // 4
    freqs = 1.0 / (10.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    parts = []
    for coord in (yy.reshape(-1), xx.reshape(-1)):
        ang = np.outer(freqs * 4, coord)
        parts += [np.sin(ang), np.cos(ang)]
    pe = np.concatenate(parts, axis=0)
    out = np.zeros((dim, h * w))
    out[:pe.shape[0]] = pe
    out.flags.writeable = False
    return out


def _cross_attention(x, mem, keys_in, layer, num_heads):
    c_q = x.shape[-2]
    d = c_q // num_heads
    h = T.layer_norm(x, *layer["ln1"], axis=-2)
    q = T.conv_1x1(h, layer["wq"], layer["bq"])
    k = T.conv_1x1(keys_in, layer["wk"], layer["bk"])
    v = T.conv_1x1(mem, layer["wv"], layer["bv"])
    outs = []
    for head in range(num_heads):
        sl = slice(head * d, (head + 1) * d)
        qh = q[..., sl, :] if num_heads > 1 else q
        kh = k[..., sl, :] if num_heads > 1 else k
        vh = v[..., sl, :] if num_heads > 1 else v
        attn = T.softmax_rows(T.matmul(T.transpose(qh), kh), math.sqrt(d))   # (..., N_m, N)
        outs.append(T.matmul(vh, T.transpose(attn)))                          # (..., d, N_m)
    o = outs[0] if num_heads == 1 else T.concat(outs, axis=-2)
    return x + T.conv_1x1(o, layer["wo"], layer["bo"])


def _ffn(x, layer):
    h = T.layer_norm(x, *layer["ln2"], axis=-2)
    h = T.silu(T.conv_1x1(h, layer["w1"], layer["b1"]))
    return x + T.conv_1x1(h, layer["w2"], layer["b2"])


def query_decoder_forward(features, params: QueryDecoderParams, grid=None):
    """Decode trainable queries against coarse features.

    ``features`` is (..., C, N) with ``grid`` = (h, w), or (B, C, h, w).
    Returns (mask_embeds (..., C_m, N_m), class probabilities (..., N_m, K+1),
    feature embeddings (..., C_m, N)).
    """
    if features.ndim == 4:
        grid = tuple(features.shape[-2:])
        features = T.reshape(features, features.shape[:-2] + (grid[0] * grid[1],))
    mem = T.layer_norm(features, *params.mem_ln, axis=-2)
    if grid is not None:
        pe = Tensor(positional_encoding(tuple(grid), params.pos_dim))
        keys_in = mem + T.matmul(params.pos_proj, pe)
    else:
        pe = None
        keys_in = mem
    x = params.queries   # broadcasts against batched memory at the first residual
    for layer in params.layers:
        x = _cross_attention(x, mem, keys_in, layer, params.num_heads)
        x = _ffn(x, layer)
    x = T.layer_norm(x, *params.out_ln, axis=-2)
    mask_embeds = T.conv_1x1(x, params.mask_embed_w, params.mask_embed_b)
    logits = T.conv_1x1(x, params.class_w, params.class_b)          # (..., K+1, N_m)
    probs = T.softmax_rows(T.transpose(logits))
    feat = T.conv_1x1(mem, params.feature_w, params.feature_b)
    if pe is not None:
        feat = feat + T.matmul(params.feature_pos_w, pe)
    return mask_embeds, probs, feat


def mask_logits(feature_embeds, mask_embeds, grid=None) -> MaskStack:
    """Sigmoid of inner products between pixel embeddings and mask embeddings: (..., N, N_m)."""
    if feature_embeds.shape[-2] != mask_embeds.shape[-2]:
        raise DimensionError(f"embedding dims disagree: {feature_embeds.shape} vs {mask_embeds.shape}")
    values = T.sigmoid(T.matmul(T.transpose(feature_embeds), mask_embeds))
    n = values.shape[-2]
    return MaskStack(values, tuple(grid) if grid is not None else (n, 1), MASK)


def per_pixel_logits(features, w, grid=None) -> MaskStack:
    """Row softmax of f^T w: class probabilities (..., N, K).

    There is no separate temperature; the norm of ``w`` plays that role.
    """
    if features.shape[-2] != w.shape[0]:
        raise DimensionError(f"classifier expects {w.shape[0]} channels, features have {features.shape[-2]}")
    values = T.softmax_rows(T.matmul(T.transpose(features), w))
    n = values.shape[-2]
    return MaskStack(values, tuple(grid) if grid is not None else (n, 1), CLASS)


def postprocess_panoptic(P, decoded, void_label=None):
    """Per pixel, choose the non-empty query with the largest P[i, c_i] * M[j, i].

    ``P`` is (..., N_m, K+1) with the no-object class last; ``decoded`` is a
    MaskStack or array (..., N, N_m).  Returns (labels, instances, winner) as
    (..., N) integer arrays.  Pixels with no candidate query get ``void_label``
    (default K) and instance id -1.
    """
    P = P.data if isinstance(P, Tensor) else np.asarray(P)
    M = decoded.values.data if isinstance(decoded, MaskStack) else (
        decoded.data if isinstance(decoded, Tensor) else np.asarray(decoded))
    K = P.shape[-1] - 1
    if void_label is None:
        void_label = K
    cls = np.argmax(P, axis=-1)                                    # (..., N_m)
    conf = np.take_along_axis(P, cls[..., None], axis=-1)[..., 0]
    keep = cls != K
    score = np.where(keep[..., None, :], conf[..., None, :] * M, -np.inf)
    winner = np.argmax(score, axis=-1)                             # (..., N)
    has = keep.any(axis=-1)[..., None] & np.isfinite(np.take_along_axis(score, winner[..., None], -1)[..., 0])
    labels = np.where(has, np.take_along_axis(cls, winner, axis=-1), void_label)
    instances = np.where(has, winner, -1)
    return labels, instances, winner
