"""Mask, classification and scale-regularisation losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoding import MaskStack
from .matching import MatchResult, hungarian_match
from .tensor import DimensionError, Tensor

PROB_FLOOR = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossWeights:
    ce: float = 5.0
    dice: float = 5.0
    cls: float = 2.0
    reg: float = 0.1
    no_object: float = 0.1
    pixel_ce: float = 1.0

    def validate(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")
        return self


def _values(pred):
    return pred.values if isinstance(pred, MaskStack) else pred


def _check(pred, target):
    if pred.shape[-2:] != np.shape(target)[-2:]:
        raise DimensionError(f"prediction {pred.shape} and target {np.shape(target)} resolutions differ")


def _column_weights(pred, column_mask):
    if column_mask is None:
        return np.ones(pred.shape[:-2] + (1, pred.shape[-1]))
    return np.asarray(column_mask, dtype=np.float64)[..., None, :]


def bce_mask_loss(pred, target, column_mask=None):
    """Mean binary cross-entropy over pixels and (selected) masks.

    ``pred`` and ``target`` are (..., N, G); ``column_mask`` (..., G) selects
    which mask columns count.
    """
    p = _values(pred)
    _check(p, target)
    t = np.asarray(target, dtype=np.float64)
    pc = T.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ll = T.log(pc) * t + T.log(1.0 - pc) * (1.0 - t)
    w = _column_weights(p, column_mask)
    denom = p.shape[-2] * float(np.broadcast_to(w, p.shape[:-2] + (1, p.shape[-1])).sum())
    return -(ll * w).sum() / max(denom, 1.0)


def dice_loss(pred, target, column_mask=None, smooth=DICE_SMOOTH):
    """Mean over masks of 1 - (2 sum(p t) + s) / (sum p + sum t + s)."""
    p = _values(pred)
    _check(p, target)
    t = np.asarray(target, dtype=np.float64)
    inter = (p * t).sum(axis=-2)
    dice = 1.0 - (2.0 * inter + smooth) / (p.sum(axis=-2) + t.sum(axis=-2) + smooth)
    w = np.ones(dice.shape) if column_mask is None else np.broadcast_to(
        np.asarray(column_mask, dtype=np.float64), dice.shape)
    return (dice * w).sum() / max(float(w.sum()), 1.0)


def classification_targets(match: MatchResult, gt_classes, num_queries, no_object_class):
    target = np.full(num_queries, no_object_class, dtype=int)
    for q, g in match.pairs:
        target[q] = gt_classes[g]
    return target


def classification_loss(P, match, gt_classes, no_object_weight=0.1):
    """Weighted cross-entropy of every query: matched ones to their gt class,
    the rest to the no-object class (last column) with ``no_object_weight``.

    ``P`` is (N_m, K+1) or batched (B, N_m, K+1) with ``match``/``gt_classes``
    given per batch item.
    """
    probs = P.values if isinstance(P, MaskStack) else P
    n_cls = probs.shape[-1]
    if probs.ndim == 2:
        match, gt_classes = [match], [gt_classes]
    nq = probs.shape[-2]
    targets = np.stack([classification_targets(m, g, nq, n_cls - 1) for m, g in zip(match, gt_classes)])
    onehot = np.eye(n_cls)[targets]                                    # (B, N_m, K+1)
    weight = np.where(targets == n_cls - 1, no_object_weight, 1.0)     # (B, N_m)
    if probs.ndim == 2:
        onehot, weight = onehot[0], weight[0]
    logp = T.log(T.clamp_min(probs, 1e-12))
    ce = -(logp * onehot).sum(axis=-1)
    return (ce * weight).sum() / max(float(weight.sum()), 1e-12)


def scale_regularizer(scales):
    """Sum of |s| over the clustering temperatures (0 for an empty list)."""
    scales = list(scales)
    if not scales:
        return Tensor(0.0)
    total = T.tabs(scales[0])
    for s in scales[1:]:
        total = total + T.tabs(s)
    return total


def pixel_cross_entropy(pred, labels, num_classes=None):
    """Mean of -log p[label] over pixels for class-probability stacks (..., N, K)."""
    p = _values(pred)
    labels = np.asarray(labels).reshape(p.shape[:-1])
    onehot = np.eye(p.shape[-1])[labels]
    return -(T.log(T.clamp_min(p, PROB_FLOOR)) * onehot).sum() / float(labels.size)


def matching_cost(pred_masks, P, gt_masks, gt_classes, weights: LossWeights):
    """(N_m, G) cost: weighted BCE + dice between every mask pair minus weighted class probability.

    ``pred_masks`` (N, N_m) probabilities, ``P`` (N_m, K+1), ``gt_masks`` (N, G) binary.
    """
    p = np.clip(np.asarray(pred_masks, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    t = np.asarray(gt_masks, dtype=np.float64)
    n = p.shape[0]
    lp, lq = np.log(p), np.log(1.0 - p)
    bce = -(lp.T @ t + lq.T @ (1.0 - t)) / n
    inter = p.T @ t
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (p.sum(0)[:, None] + t.sum(0)[None, :] + DICE_SMOOTH)
    cls = -np.asarray(P)[:, np.asarray(gt_classes, dtype=int)]
    return weights.ce * bce + weights.dice * dice + weights.cls * cls


def match_batch(pred_masks, P, gt_masks, gt_classes, weights):
    """Hungarian matching per batch item on detached values."""
    pm = pred_masks.data if isinstance(pred_masks, Tensor) else np.asarray(pred_masks)
    Pd = P.data if isinstance(P, Tensor) else np.asarray(P)
    return [hungarian_match(matching_cost(pm[b], Pd[b], gt_masks[b], gt_classes[b], weights))
            for b in range(pm.shape[0])]


def matched_targets(matches, gt_masks, num_queries, num_pixels):
    """Dense (B, N, N_m) target masks aligned to query columns plus (B, N_m) column mask."""
    B = len(matches)
    target = np.zeros((B, num_pixels, num_queries))
    cols = np.zeros((B, num_queries))
    for b, m in enumerate(matches):
        for q, g in m.pairs:
            target[b, :, q] = gt_masks[b][:, g]
            cols[b, q] = 1.0
    return target, cols


def total_loss(pred_masks, P, scales, gt_masks, gt_classes, weights: LossWeights, matches=None):
    """Weighted sum of mask BCE, dice, classification CE and the scale regulariser.

    ``pred_masks`` are full-resolution decoded mask probabilities (B, N, N_m);
    ``gt_masks`` is a list of (N, G_b) binary arrays and ``gt_classes`` a list
    of (G_b,) class ids.  Returns (loss, components dict, matches).
    """
    if matches is None:
        matches = match_batch(pred_masks, P, gt_masks, gt_classes, weights)
    values = pred_masks.values if isinstance(pred_masks, MaskStack) else pred_masks
    B, N, nq = values.shape
    target, cols = matched_targets(matches, gt_masks, nq, N)
    parts = {}
    zero = Tensor(0.0)
    parts["ce"] = bce_mask_loss(values, target, cols) if weights.ce else zero
    parts["dice"] = dice_loss(values, target, cols) if weights.dice else zero
    parts["cls"] = classification_loss(P, matches, gt_classes, weights.no_object) if weights.cls else zero
    parts["reg"] = scale_regularizer(scales) if weights.reg else zero
    loss = (parts["ce"] * weights.ce + parts["dice"] * weights.dice
            + parts["cls"] * weights.cls + parts["reg"] * weights.reg)
    return loss, {k: float(v.data) for k, v in parts.items()}, matches
