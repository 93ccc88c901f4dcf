"""Small convolutional backbone that emits clustering hooks at its deepest downsamplings."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .clustering import (AssignmentMatrix, ClusteringModuleParams, compute_assignment_dense,
                         compute_assignment_local, project_features)
from .tensor import DimensionError, Tensor

ACTIVATIONS = {"silu": T.silu, "tanh": T.tanh}


@dataclass
class BackboneConfig:
    stem_stride: int = 2
    num_stages: int = 4
    channels: list = field(default_factory=lambda: [16, 24, 32, 48])
    blocks_per_stage: int = 1
    hierarchical_level: int = 3
    downsample_kind: str = "avg_pool2"
    c_f: int = 32
    activation: str = "silu"
    attention: str = "local"
    in_channels: int = 3
    scale_init: float = 0.1

    def validate(self):
        if self.stem_stride not in (1, 2):
            raise ValueError(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        if len(self.channels) != self.num_stages:
            raise ValueError(f"need one channel count per stage ({self.num_stages}), got {self.channels}")
        if not 0 <= self.hierarchical_level <= self.num_stages - 1:
            raise ValueError(f"hierarchical_level must lie in [0, {self.num_stages - 1}], "
                             f"got {self.hierarchical_level}")
        if self.downsample_kind not in ("avg_pool2", "strided_conv3"):
            raise ValueError(f"unknown downsample_kind {self.downsample_kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.attention not in ("local", "dense"):
            raise ValueError(f"unknown attention layout {self.attention!r}")
        return self

    @property
    def total_stride(self):
        return self.stem_stride * 2 ** self.num_stages

    def hooked_stages(self):
        """Indices of the downsampling layers that carry a clustering module."""
        return list(range(self.num_stages - self.hierarchical_level, self.num_stages))

    def grid_after(self, image_shape):
        H, W = image_shape
        return H // self.total_stride, W // self.total_stride


@dataclass
class HookedLevel:
    f_pre: Tensor
    f_post: Tensor
    assignment: AssignmentMatrix


@dataclass
class FeaturePyramid:
    levels: list
    final_features: Tensor
    image_shape: tuple

    @property
    def assignments(self):
        return [lv.assignment for lv in self.levels]

    @property
    def final_grid(self):
        return tuple(self.final_features.shape[-2:])


@dataclass
class BackboneParams:
    weights: dict
    clustering: dict

    def named(self):
        out = {f"backbone.{k}": v for k, v in self.weights.items()}
        for level, p in sorted(self.clustering.items()):
            out.update({f"cluster{level}.{k}": v for k, v in p.named().items()})
        return out


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _conv_init(rng, c_out, c_in):
    w = rng.normal(0.0, math.sqrt(2.0 / (9 * c_in)), size=(c_out, c_in, 3, 3))
    return T.parameter(w), T.parameter(np.zeros(c_out))


def init_backbone(cfg: BackboneConfig, seed=0) -> BackboneParams:
    """Initialise weights; backbone and per-level clustering draws use separate streams.

    The stream split keeps backbone weights identical across hierarchical levels.
    """
    cfg.validate()
    rng = _rng(seed, 0)
    weights = {}
    weights["stem.w"], weights["stem.b"] = _conv_init(rng, cfg.channels[0], cfg.in_channels)
    c_prev = cfg.channels[0]
    for s, c in enumerate(cfg.channels):
        for b in range(cfg.blocks_per_stage):
            weights[f"stage{s}.block{b}.w"], weights[f"stage{s}.block{b}.b"] = _conv_init(rng, c, c_prev)
            c_prev = c
        if cfg.downsample_kind == "strided_conv3":
            weights[f"stage{s}.down.w"], weights[f"stage{s}.down.b"] = _conv_init(rng, c, c)
    weights["final.w"], weights["final.b"] = _conv_init(rng, c_prev, c_prev)
    clustering = {}
    for s in cfg.hooked_stages():
        c = cfg.channels[s]
        clustering[s] = ClusteringModuleParams.init(c, c, cfg.c_f, _rng(seed, 1, s), cfg.scale_init)
    return BackboneParams(weights, clustering)


def forward_with_hooks(image, params: BackboneParams, cfg: BackboneConfig) -> FeaturePyramid:
    """Run the backbone on (3, H, W) or (B, 3, H, W) input and cluster at hooked layers.

    Levels in the returned pyramid are ordered finest first.  Each level index is
    log2 of the input-to-grid ratio of its pre-downsample map.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    H, W = x.shape[-2:]
    if H % cfg.total_stride or W % cfg.total_stride:
        raise DimensionError(f"input {H}x{W} is not divisible by total stride {cfg.total_stride}")
    act = ACTIVATIONS[cfg.activation]
    w = params.weights
    x = act(T.conv2d_3x3(x, w["stem.w"], w["stem.b"], stride=cfg.stem_stride))
    levels = []
    for s in range(cfg.num_stages):
        for b in range(cfg.blocks_per_stage):
            x = act(T.conv2d_3x3(x, w[f"stage{s}.block{b}.w"], w[f"stage{s}.block{b}.b"]))
        f_pre = x
        if cfg.downsample_kind == "strided_conv3":
            x = T.strided_downsample(x, "strided_conv3", w[f"stage{s}.down.w"], w[f"stage{s}.down.b"])
        else:
            x = T.strided_downsample(x, "avg_pool2")
        if s in params.clustering:
            levels.append(_cluster(f_pre, x, params.clustering[s], cfg, H))
    x = act(T.conv2d_3x3(x, w["final.w"], w["final.b"]))
    if single:
        x = T.reshape(x, x.shape[1:])
        levels = [_squeeze_level(lv) for lv in levels]
    return FeaturePyramid(levels, x, (H, W))


def _cluster(f_pre, f_post, cparams, cfg, image_h):
    fine = tuple(f_pre.shape[-2:])
    coarse = tuple(f_post.shape[-2:])
    level = int(round(math.log2(image_h / fine[0])))
    q, k = project_features(f_pre, f_post, cparams)
    if cfg.attention == "local":
        a = compute_assignment_local(q, k, cparams.scale, fine, coarse, level=level)
    else:
        a = compute_assignment_dense(q, k, cparams.scale, fine, coarse, level=level)
    return HookedLevel(f_pre, f_post, a)


def _squeeze_level(lv):
    a = lv.assignment
    sq = AssignmentMatrix(T.reshape(a.weights, a.weights.shape[1:]), a.layout, a.fine_shape,
                          a.coarse_shape, a.level, a.diagnostics)
    return HookedLevel(T.reshape(lv.f_pre, lv.f_pre.shape[1:]), T.reshape(lv.f_post, lv.f_post.shape[1:]), sq)


def count_parameters(params) -> int:
    """Number of trainable scalars in a Tensor, a mapping/sequence of them, or an object with ``named()``."""
    if params is None:
        return 0
    if isinstance(params, Tensor):
        return params.size if params.requires_grad else 0
    if hasattr(params, "named"):
        params = params.named()
    if isinstance(params, dict):
        params = params.values()
    return sum(count_parameters(p) for p in params)
