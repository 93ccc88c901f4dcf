"""Recover fine-grid masks by chaining assignment matrices onto coarse masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .clustering import WINDOW_OFFSETS, AssignmentMatrix, harden_assignment
from .tensor import DimensionError, Tensor

MASK = "mask"
CLASS = "class"


@dataclass
class MaskStack:
    """Per-pixel values at one grid: (..., N, N_m).

    ``semantics`` is ``"mask"`` for independent [0, 1] mask probabilities or
    ``"class"`` for rows on the simplex.
    """

    values: Tensor
    grid: tuple
    semantics: str = MASK
    level: int = 0

    @property
    def num_pixels(self):
        return self.values.shape[-2]


def window_apply(weights, m, coarse_shape):
    """Sparse product of windowed weights (..., N, 9) with coarse values (..., N_d, K)."""
    hd, wd = coarse_shape
    if m.shape[-2] != hd * wd:
        raise DimensionError(f"coarse values have {m.shape[-2]} rows, grid has {hd * wd}")
    if weights.shape[-2:] != (4 * hd * wd, 9):
        raise DimensionError(f"windowed weights shape {weights.shape} does not fit grid {coarse_shape}")
    K = m.shape[-1]
    lead = np.broadcast_shapes(weights.shape[:-2], m.shape[:-2])
    wd_ = np.broadcast_to(weights.data, lead + weights.shape[-2:]).reshape(lead + (hd, 2, wd, 2, 9))
    md = np.broadcast_to(m.data, lead + m.shape[-2:]).reshape(lead + (hd, wd, K))
    pad = [(0, 0)] * len(lead) + [(1, 1), (1, 1), (0, 0)]
    mp = np.pad(md, pad)
    out = np.zeros(lead + (hd, 2, wd, 2, K))
    for j, (dy, dx) in enumerate(WINDOW_OFFSETS):
        win = mp[..., 1 + dy:1 + dy + hd, 1 + dx:1 + dx + wd, :]
        out += wd_[..., j][..., None] * win[..., :, None, :, None, :]
    w_shape, m_shape = weights.shape, m.shape

    def bw(g):
        g = g.reshape(lead + (hd, 2, wd, 2, K))
        gw = np.empty_like(wd_) if weights.requires_grad else None
        gmp = np.zeros_like(mp) if m.requires_grad else None
        for j, (dy, dx) in enumerate(WINDOW_OFFSETS):
            win = mp[..., 1 + dy:1 + dy + hd, 1 + dx:1 + dx + wd, :]
            if gw is not None:
                gw[..., j] = (g * win[..., :, None, :, None, :]).sum(axis=-1)
            if gmp is not None:
                gmp[..., 1 + dy:1 + dy + hd, 1 + dx:1 + dx + wd, :] += \
                    (g * wd_[..., j][..., None]).sum(axis=(-4, -2))
        gw_out = None if gw is None else T._unbroadcast(gw.reshape(lead + (4 * hd * wd, 9)), w_shape)
        gm_out = None
        if gmp is not None:
            gm_out = T._unbroadcast(gmp[..., 1:-1, 1:-1, :].reshape(lead + (hd * wd, K)), m_shape)
        return gw_out, gm_out

    return Tensor._result(out.reshape(lead + (4 * hd * wd, K)), (weights, m), bw, "window_apply")


def decode_step(a: AssignmentMatrix, m: MaskStack) -> MaskStack:
    """One decoding step: fine values = A @ coarse values."""
    if a.num_coarse != m.num_pixels:
        raise DimensionError(f"assignment at level {a.level} has {a.num_coarse} prototypes, "
                             f"mask stack has {m.num_pixels} pixels")
    if a.layout == "dense":
        values = T.matmul(a.weights, m.values)
    else:
        values = window_apply(a.weights, m.values, tuple(a.coarse_shape))
    return MaskStack(values, tuple(a.fine_shape), m.semantics, a.level)


def _check_chain(assignments):
    for fine, coarse in zip(assignments, assignments[1:]):
        if tuple(fine.coarse_shape) != tuple(coarse.fine_shape) or coarse.level != fine.level + 1:
            raise DimensionError(f"assignment levels {fine.level} and {coarse.level} are not consecutive")


def decode_full(assignments, m: MaskStack) -> MaskStack:
    """Fold the assignment chain (ordered finest first) onto the coarsest stack."""
    assignments = list(assignments)
    _check_chain(assignments)
    for a in reversed(assignments):
        m = decode_step(a, m)
    return m


def hard_decode(assignments, m: MaskStack) -> MaskStack:
    """decode_full after hardening every level: values are copied from one ancestor."""
    return decode_full([harden_assignment(a) for a in assignments], m)


def upsample_values(values, grid, image_shape):
    """Nearest replication of (..., h*w, K) values to (..., H*W, K)."""
    h, w = grid
    H, W = image_shape
    if H % h or W % w:
        raise DimensionError(f"grid {grid} does not divide image shape {image_shape}")
    fy, fx = H // h, W // w
    if fy == 1 and fx == 1:
        return values
    K = values.shape[-1]
    lead = values.shape[:-2]
    vd = values.data.reshape(lead + (h, 1, w, 1, K))
    out = np.broadcast_to(vd, lead + (h, fy, w, fx, K)).reshape(lead + (H * W, K))

    def bw(g):
        return (g.reshape(lead + (h, fy, w, fx, K)).sum(axis=(-4, -2)).reshape(values.shape),)

    return Tensor._result(out, (values,), bw, "upsample_values")


def upsample_to_image(m: MaskStack, image_shape) -> MaskStack:
    """Cross the residual stride (no clustering module there) by nearest replication."""
    return MaskStack(upsample_values(m.values, tuple(m.grid), tuple(image_shape)),
                     tuple(image_shape), m.semantics, m.level)


def cluster_ids(assignments, image_shape=None, upto=None):
    """Hard cluster id of every finest-grid pixel after composing levels up to ``upto``.

    Clusters are the coarse pixels of assignment ``upto`` (index into the
    finest-first list; default: the deepest).  Returns an int array (..., H, W)
    at ``image_shape`` (default: the finest hooked grid).
    """
    from .clustering import hard_parent

    assignments = list(assignments)
    _check_chain(assignments)
    if upto is None:
        upto = len(assignments) - 1
    ids = hard_parent(assignments[0])
    for a in assignments[1:upto + 1]:
        parent = hard_parent(a)
        ids = np.take_along_axis(parent, ids, axis=-1)
    h, w = assignments[0].fine_shape
    ids = ids.reshape(ids.shape[:-1] + (h, w))
    if image_shape is not None:
        H, W = image_shape
        if H % h or W % w:
            raise DimensionError(f"grid {(h, w)} does not divide image shape {image_shape}")
        ids = ids.repeat(H // h, axis=-2).repeat(W // w, axis=-1)
    return ids
