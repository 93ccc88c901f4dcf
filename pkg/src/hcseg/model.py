"""Full segmentation model: backbone with clustering hooks, a head, and assignment decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, BackboneParams, FeaturePyramid, forward_with_hooks, init_backbone
from .decoding import MaskStack, decode_full, hard_decode, upsample_to_image
from .heads import QueryDecoderParams, mask_logits, per_pixel_logits, query_decoder_forward
from .tensor import Tensor

HEADS = ("per-pixel", "mask-query")


@dataclass
class HeadConfig:
    kind: str = "per-pixel"
    num_classes: int = 4            # K, background included as a stuff class
    num_queries: int = 8            # N_m
    c_q: int = 64
    c_m: int = 64
    num_layers: int = 2
    num_heads: int = 1
    ffn_mult: int = 2
    pos_dim: int = 16

    def validate(self):
        if self.kind not in HEADS:
            raise ValueError(f"unknown head {self.kind!r}; choose from {HEADS}")
        if self.num_classes < 1 or self.num_queries < 1:
            raise ValueError("num_classes and num_queries must be positive")
        if self.c_q % self.num_heads:
            raise ValueError(f"c_q={self.c_q} is not divisible by num_heads={self.num_heads}")
        return self


@dataclass
class PerPixelParams:
    ln: tuple
    w: Tensor

    def named(self):
        return {"ln.gain": self.ln[0], "ln.bias": self.ln[1], "w": self.w}


@dataclass
class ModelParams:
    backbone: BackboneParams
    head: object

    def named(self):
        out = dict(self.backbone.named())
        out.update({f"head.{k}": v for k, v in self.head.named().items()})
        return out


@dataclass
class ModelOutput:
    pyramid: FeaturePyramid
    coarse: MaskStack               # head output at the coarsest grid
    decoded: MaskStack              # after the assignment chain, at the finest hooked grid
    full: MaskStack                 # nearest-upsampled to the input resolution
    probs: Tensor = None            # (B, N_m, K+1) for the mask-query head


def init_model(bcfg: BackboneConfig, hcfg: HeadConfig, seed=0) -> ModelParams:
    """Backbone draws and head draws come from separate seeded streams."""
    bcfg.validate()
    hcfg.validate()
    backbone = init_backbone(bcfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    c = bcfg.channels[-1]
    if hcfg.kind == "per-pixel":
        head = PerPixelParams((T.parameter(np.ones(c)), T.parameter(np.zeros(c))),
                              T.parameter(rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, hcfg.num_classes))))
    else:
        head = QueryDecoderParams.init(c, hcfg.num_classes, rng, num_queries=hcfg.num_queries,
                                       c_q=hcfg.c_q, c_m=hcfg.c_m, num_layers=hcfg.num_layers,
                                       num_heads=hcfg.num_heads, ffn_mult=hcfg.ffn_mult,
                                       pos_dim=hcfg.pos_dim)
    return ModelParams(backbone, head)


def scale_tensors(params: ModelParams):
    return [p.scale for _, p in sorted(params.backbone.clustering.items())]


def forward(images, params: ModelParams, bcfg: BackboneConfig, hcfg: HeadConfig, hard=False) -> ModelOutput:
    """Batched forward pass on (B, 3, H, W) images.

    ``hard=True`` decodes with hardened assignments (inference reading of the
    clustering); training always uses the soft chain.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    pyr = forward_with_hooks(x, params.backbone, bcfg)
    feats = pyr.final_features
    grid = pyr.final_grid
    B, C = feats.shape[:2]
    flat = T.reshape(feats, (B, C, grid[0] * grid[1]))
    probs = None
    if hcfg.kind == "per-pixel":
        h = T.layer_norm(flat, *params.head.ln, axis=-2)
        coarse = per_pixel_logits(h, params.head.w, grid)
    else:
        mask_embeds, probs, feat = query_decoder_forward(flat, params.head, grid)
        coarse = mask_logits(feat, mask_embeds, grid)
    coarse = MaskStack(coarse.values, grid, coarse.semantics, bcfg.num_stages + int(math.log2(bcfg.stem_stride)))
    chain = pyr.assignments
    decoded = (hard_decode if hard else decode_full)(chain, coarse) if chain else coarse
    full = upsample_to_image(decoded, pyr.image_shape)
    return ModelOutput(pyr, coarse, decoded, full, probs)


def predict_semantic(out: ModelOutput):
    """(B, H, W) argmax labels from a per-pixel model output."""
    v = out.full.values.data
    H, W = out.full.grid
    return np.argmax(v, axis=-1).reshape(v.shape[:-2] + (H, W))


def trainable(params: ModelParams):
    return {k: v for k, v in params.named().items() if v.requires_grad}


def decay_mask(named):
    """Weight decay on matrices and conv kernels only; queries, norms, biases and scales are exempt."""
    return {k: (v.ndim >= 2 and not k.endswith("queries")) for k, v in named.items()}
