"""Attention-based soft clustering between feature maps before and after downsampling.

Each fine pixel is softly assigned to coarse pixels (the cluster prototypes)
through a row softmax of cosine similarities divided by a trainable
temperature ``|s|``.  As ``|s|`` shrinks the soft assignment approaches the
hard argmax assignment.

Two layouts are provided:

* dense: a full ``N x N_d`` row-stochastic matrix (quadratic cost);
* windowed: every fine pixel only sees the 3x3 coarse neighbourhood of the
  coarse pixel covering its 2x2 window, stored as ``N x 9`` weights (linear
  cost).  Neighbours that fall off the coarse grid are dropped from the
  softmax rather than padded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

SCALE_FLOOR = 1e-4
WINDOW_OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


@dataclass
class ClusteringModuleParams:
    ln_q_gain: Tensor
    ln_q_bias: Tensor
    ln_k_gain: Tensor
    ln_k_bias: Tensor
    proj_q_w: Tensor
    proj_q_b: Tensor
    proj_k_w: Tensor
    proj_k_b: Tensor
    scale: Tensor

    @classmethod
    def init(cls, c_pre, c_post, c_f, rng, scale=0.1):
        def proj(c_in):
            return T.parameter(rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_f, c_in)))

        return cls(
            ln_q_gain=T.parameter(np.ones(c_pre)), ln_q_bias=T.parameter(np.zeros(c_pre)),
            ln_k_gain=T.parameter(np.ones(c_post)), ln_k_bias=T.parameter(np.zeros(c_post)),
            proj_q_w=proj(c_pre), proj_q_b=T.parameter(np.zeros(c_f)),
            proj_k_w=proj(c_post), proj_k_b=T.parameter(np.zeros(c_f)),
            scale=T.parameter(np.array(scale)),
        )

    def named(self):
        return dict(vars(self))


@dataclass
class AssignmentMatrix:
    """Row-stochastic map from fine pixels to coarse prototypes.

    ``weights`` is (..., N, N_d) for the dense layout and (..., N, 9) for the
    windowed layout, where slot j of a row is the coarse pixel at offset
    ``WINDOW_OFFSETS[j]`` from the row's parent.
    """

    weights: Tensor
    layout: str
    fine_shape: tuple
    coarse_shape: tuple
    level: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def num_fine(self):
        return self.weights.shape[-2]

    @property
    def num_coarse(self):
        return self.coarse_shape[0] * self.coarse_shape[1]

    def to_dense(self):
        """Dense (..., N, N_d) numpy copy of the weights."""
        w = self.weights.data
        if self.layout == "dense":
            return w.copy()
        index, valid = window_index(tuple(self.coarse_shape))
        out = np.zeros(w.shape[:-1] + (self.num_coarse,))
        lead = w.shape[:-2]
        flat_w = np.where(valid, w, 0.0).reshape((-1,) + w.shape[-2:])
        flat_o = out.reshape((-1,) + out.shape[-2:])
        rows = np.broadcast_to(np.arange(index.shape[0])[:, None], index.shape)
        for b in range(flat_w.shape[0]):
            np.add.at(flat_o[b], (rows, index), flat_w[b])
        return flat_o.reshape(lead + out.shape[-2:])

    def row_sums(self):
        return self.weights.data.sum(axis=-1)


@lru_cache(maxsize=None)
def window_index(coarse_shape):
    """Candidate coarse indices (N, 9) and in-bounds mask for a coarse grid.

    Out-of-bounds slots carry a clipped index and ``valid=False``.
    """
    hd, wd = coarse_shape
    h, w = 2 * hd, 2 * wd
    ys, xs = np.divmod(np.arange(h * w), w)
    py, px = ys // 2, xs // 2
    dy = np.array([o[0] for o in WINDOW_OFFSETS])
    dx = np.array([o[1] for o in WINDOW_OFFSETS])
    cy = py[:, None] + dy[None, :]
    cx = px[:, None] + dx[None, :]
    valid = (cy >= 0) & (cy < hd) & (cx >= 0) & (cx < wd)
    index = np.clip(cy, 0, hd - 1) * wd + np.clip(cx, 0, wd - 1)
    index.flags.writeable = False
    valid.flags.writeable = False
    return index, valid


def _check_grids(fine_shape, coarse_shape):
    fh, fw = fine_shape
    ch, cw = coarse_shape
    if fh != 2 * ch or fw != 2 * cw:
        raise DimensionError(f"fine grid {fine_shape} is not exactly twice coarse grid {coarse_shape}")


def project_features(f_pre, f_post, params, eps=1e-5):
    """Layer norm, 1x1 projection and unit-normalisation of both branches.

    ``f_pre`` is (..., C, N) or (..., C, H, W); ``f_post`` likewise at the
    coarse grid.  Returns unit-norm columns (..., C_F, N) and (..., C_F, N_d).
    """
    if f_pre.ndim >= 3 and f_pre.ndim == f_post.ndim and _is_grid_pair(f_pre, f_post):
        f_pre = T.reshape(f_pre, f_pre.shape[:-2] + (f_pre.shape[-2] * f_pre.shape[-1],))
        f_post = T.reshape(f_post, f_post.shape[:-2] + (f_post.shape[-2] * f_post.shape[-1],))
    n, nd = f_pre.shape[-1], f_post.shape[-1]
    if n != 4 * nd:
        raise DimensionError(f"fine pixel count {n} must be 4x coarse count {nd}")
    q = T.layer_norm(f_pre, params.ln_q_gain, params.ln_q_bias, eps=eps, axis=-2)
    k = T.layer_norm(f_post, params.ln_k_gain, params.ln_k_bias, eps=eps, axis=-2)
    q = T.conv_1x1(q, params.proj_q_w, params.proj_q_b)
    k = T.conv_1x1(k, params.proj_k_w, params.proj_k_b)
    return T.l2_normalize(q, axis=-2), T.l2_normalize(k, axis=-2)


def _is_grid_pair(f_pre, f_post):
    # (..., C, H, W) with (..., C', H/2, W/2)
    return (f_pre.shape[-2] == 2 * f_post.shape[-2] and f_pre.shape[-1] == 2 * f_post.shape[-1])


def effective_scale(scale):
    """|scale| floored at SCALE_FLOOR; returns (value or Tensor, clamped flag)."""
    if isinstance(scale, Tensor):
        clamped = abs(float(scale.data)) < SCALE_FLOOR
        return T.clamp_min(T.tabs(scale), SCALE_FLOOR), clamped
    s = abs(float(scale))
    return max(s, SCALE_FLOOR), s < SCALE_FLOOR


def _tempered_softmax(logits, scale, mask=None):
    s, clamped = effective_scale(scale)
    if isinstance(s, Tensor):
        return T.softmax_rows(logits / s, 1.0, mask=mask), clamped
    return T.softmax_rows(logits, s, mask=mask), clamped


def similarity_dense(q, k):
    """Gram matrix q^T k: (..., N, N_d)."""
    return T.matmul(T.transpose(q), k)


def compute_assignment_dense(q, k, scale, fine_shape=None, coarse_shape=None, level=0, mask=None):
    """Full soft assignment Softmax_row(q^T k / |s|).

    ``mask`` (N, N_d) restricts each row's softmax to the allowed prototypes;
    ``window_mask_dense`` gives the windowed layout's support.
    """
    if q.shape[-2] != k.shape[-2]:
        raise DimensionError(f"feature dims disagree: {q.shape} vs {k.shape}")
    n, nd = q.shape[-1], k.shape[-1]
    if fine_shape is None:
        fine_shape = (n, 1)
    if coarse_shape is None:
        coarse_shape = (nd, 1)
    weights, clamped = _tempered_softmax(similarity_dense(q, k), scale, mask=mask)
    return AssignmentMatrix(weights, "dense", tuple(fine_shape), tuple(coarse_shape), level,
                            {"scale_clamped": clamped})


def local_similarity(q, k, fine_shape, coarse_shape):
    """Cosine similarities of each fine pixel to its 9 window candidates: (..., N, 9).

    Out-of-bounds candidates get similarity 0 here; callers mask them.
    """
    _check_grids(fine_shape, coarse_shape)
    hd, wd = coarse_shape
    c = q.shape[-2]
    if k.shape[-2] != c:
        raise DimensionError(f"feature dims disagree: {q.shape} vs {k.shape}")
    if q.shape[-1] != 4 * hd * wd or k.shape[-1] != hd * wd:
        raise DimensionError("pixel counts do not match the grids")
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2])
    nl = len(lead)
    # q as (..., hd, wd, 4, c): the four fine children of each coarse cell
    qd = np.broadcast_to(q.data, lead + q.shape[-2:]).reshape(lead + (c, hd, 2, wd, 2))
    qd = np.ascontiguousarray(qd.transpose(tuple(range(nl)) + (nl + 1, nl + 3, nl + 2, nl + 4, nl)))
    qd = qd.reshape(lead + (hd, wd, 4, c))
    kd = np.broadcast_to(k.data, lead + k.shape[-2:]).reshape(lead + (c, hd, wd))
    kd = kd.transpose(tuple(range(nl)) + (nl + 1, nl + 2, nl))
    kp = np.pad(kd, [(0, 0)] * nl + [(1, 1), (1, 1), (0, 0)])
    # gathered candidates (..., hd, wd, c, 9); out-of-bounds windows read zero padding
    kw = np.stack([kp[..., 1 + dy:1 + dy + hd, 1 + dx:1 + dx + wd, :] for dy, dx in WINDOW_OFFSETS], axis=-1)
    out = qd @ kw                                                    # (..., hd, wd, 4, 9)
    q_shape, k_shape = q.shape, k.shape

    def _to_fine(x):
        # (..., hd, wd, 4, z) -> (..., hd*2*wd*2, z) in row-major fine order
        z = x.shape[-1]
        x = x.reshape(lead + (hd, wd, 2, 2, z))
        return x.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)).reshape(lead + (4 * hd * wd, z))

    def bw(g):
        g = g.reshape(lead + (hd, 2, wd, 2, 9))
        g = g.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)).reshape(lead + (hd, wd, 4, 9))
        gq_out = gk_out = None
        if q.requires_grad:
            gq = _to_fine(g @ np.swapaxes(kw, -1, -2))                # (..., N, c)
            gq_out = T._unbroadcast(np.swapaxes(gq, -1, -2), q_shape)
        if k.requires_grad:
            gkw = np.swapaxes(qd, -1, -2) @ g                         # (..., hd, wd, c, 9)
            gkp = np.zeros_like(kp)
            for j, (dy, dx) in enumerate(WINDOW_OFFSETS):
                gkp[..., 1 + dy:1 + dy + hd, 1 + dx:1 + dx + wd, :] += gkw[..., j]
            gk = gkp[..., 1:-1, 1:-1, :].reshape(lead + (hd * wd, c))
            gk_out = T._unbroadcast(np.swapaxes(gk, -1, -2), k_shape)
        return gq_out, gk_out

    return Tensor._result(_to_fine(out), (q, k), bw, "local_similarity")


def compute_assignment_local(q, k, scale, fine_shape, coarse_shape, level=0):
    """Windowed soft assignment: softmax over the in-bounds 3x3 coarse neighbours."""
    _check_grids(tuple(fine_shape), tuple(coarse_shape))
    logits = local_similarity(q, k, tuple(fine_shape), tuple(coarse_shape))
    _, valid = window_index(tuple(coarse_shape))
    weights, clamped = _tempered_softmax(logits, scale, mask=valid)
    return AssignmentMatrix(weights, "windowed", tuple(fine_shape), tuple(coarse_shape), level,
                            {"scale_clamped": clamped})


def window_mask_dense(fine_shape, coarse_shape):
    """Boolean (N, N_d) mask of the pairs the windowed layout may connect."""
    _check_grids(tuple(fine_shape), tuple(coarse_shape))
    index, valid = window_index(tuple(coarse_shape))
    mask = np.zeros((index.shape[0], coarse_shape[0] * coarse_shape[1]), dtype=bool)
    rows = np.broadcast_to(np.arange(index.shape[0])[:, None], index.shape)
    mask[rows[valid], index[valid]] = True
    return mask


def harden_assignment(a):
    """One-hot at each row's maximum; the lowest index wins ties."""
    w = a.weights.data
    if a.layout == "windowed":
        _, valid = window_index(tuple(a.coarse_shape))
        w = np.where(valid, w, -np.inf)
    hard = np.zeros_like(a.weights.data)
    np.put_along_axis(hard, np.argmax(w, axis=-1)[..., None], 1.0, axis=-1)
    return AssignmentMatrix(Tensor(hard), a.layout, a.fine_shape, a.coarse_shape, a.level,
                            dict(a.diagnostics, hardened=True))


def hard_parent(a):
    """Integer coarse index chosen by each fine pixel under hard assignment: (..., N)."""
    w = a.weights.data
    if a.layout == "dense":
        return np.argmax(w, axis=-1)
    index, valid = window_index(tuple(a.coarse_shape))
    slot = np.argmax(np.where(valid, w, -np.inf), axis=-1)
    return np.take_along_axis(np.broadcast_to(index, w.shape), slot[..., None], axis=-1)[..., 0]


def row_entropy(weights):
    p = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def assignment_entropy(a):
    """Mean Shannon entropy (nats) of the assignment rows."""
    w = a.weights.data if isinstance(a, AssignmentMatrix) else np.asarray(a)
    return float(row_entropy(w).mean())
