"""Clustering and segmentation quality metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UE_VARIANTS = ("majority", "min", "leak_all")


def _contingency(a, b):
    """Overlap counts between label maps: (ids_a, ids_b, counts, inverse index per pixel)."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table, ia, ib


def undersegmentation_error(partition, gt, variant="majority"):
    """Leakage of clusters across ground-truth segments.

    Variants, with N the pixel count:

    * ``majority``: pixels of each cluster outside that cluster's best-overlapping
      segment, divided by N.  Every pixel counts at most once, so the value
      equals the area of the returned mask over N.
    * ``min``: sum over segments S and overlapping clusters C of
      min(|C & S|, |C - S|), divided by N.
    * ``leak_all``: (sum over S of the areas of all clusters touching S) - N, over N.

    Returns (error, boolean leakage mask shaped like ``partition``).
    """
    partition = np.asarray(partition)
    gt = np.asarray(gt)
    if partition.shape != gt.shape:
        raise ValueError(f"partition {partition.shape} and ground truth {gt.shape} differ in shape")
    if variant not in UE_VARIANTS:
        raise ValueError(f"unknown UE variant {variant!r}; choose from {UE_VARIANTS}")
    n = partition.size
    table, ic, ig = _contingency(partition, gt)
    sizes = table.sum(axis=1)
    if variant == "majority":
        best = np.argmax(table, axis=1)
        leak = ig != best[ic]
        return float(leak.sum()) / n, leak.reshape(partition.shape)
    inside = table
    outside = sizes[:, None] - table
    touching = table > 0
    if variant == "min":
        err = np.where(touching, np.minimum(inside, outside), 0).sum()
        small = touching & (inside <= outside)
        leak = small[ic, ig]
    else:
        err = (sizes[:, None] * touching).sum() - n
        straddle = touching.sum(axis=1) > 1
        leak = straddle[ic]
    return float(err) / n, leak.reshape(partition.shape)


def refines(partition, gt):
    """True when every cluster lies inside a single ground-truth segment."""
    table, _, _ = _contingency(partition, gt)
    return bool(np.all((table > 0).sum(axis=1) == 1))


def confusion_matrix(pred, gt, num_classes):
    """(K, K+1) counts; column K collects predictions outside [0, K)."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    keep = (gt >= 0) & (gt < num_classes)
    pred, gt = pred[keep], gt[keep]
    pred = np.where((pred >= 0) & (pred < num_classes), pred, num_classes)
    cm = np.bincount(gt * (num_classes + 1) + pred, minlength=num_classes * (num_classes + 1))
    return cm.reshape(num_classes, num_classes + 1)


def miou_from_confusion(cm):
    K = cm.shape[0]
    tp = np.diag(cm[:, :K]).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm[:, :K].sum(axis=0)
    union = gt_count + pred_count - tp
    present = union > 0
    per_class = [float(tp[c] / union[c]) if present[c] else None for c in range(K)]
    mean = float(np.mean(tp[present] / union[present])) if present.any() else 0.0
    total = cm.sum()
    acc = float(tp.sum() / total) if total else 0.0
    return {"per_class_iou": per_class, "miou": mean, "pixel_accuracy": acc}


def miou(pred, gt, num_classes):
    """Per-class IoU, mean IoU over classes present in pred or gt, and pixel accuracy."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return miou_from_confusion(confusion_matrix(pred, gt, num_classes))


@dataclass
class PQStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return PQStats(self.iou_sum + other.iou_sum, self.tp + other.tp,
                       self.fp + other.fp, self.fn + other.fn)

    def summary(self):
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return {"pq": 1.0, "sq": 1.0, "rq": 1.0, "tp": 0, "fp": 0, "fn": 0}
        sq = self.iou_sum / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return {"pq": sq * rq, "sq": sq, "rq": rq, "tp": self.tp, "fp": self.fp, "fn": self.fn}


def _segments(labels, instances, void_label):
    seg = np.stack([np.asarray(labels).reshape(-1), np.asarray(instances).reshape(-1)], axis=1)
    valid = seg[:, 0] != void_label if void_label is not None else np.ones(len(seg), bool)
    keys, inv = np.unique(seg, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    return keys, inv, valid


def panoptic_stats(pred_labels, pred_instances, gt_labels, gt_instances, void_label=None):
    """Match same-class segments with IoU > 0.5 and count TP/FP/FN for one image.

    A segment is a distinct (label, instance) pair.  Pixels whose gt label is
    ``void_label`` are left out of IoU unions; predicted void pixels form no
    segment; predicted segments that are mostly void are not counted as FP.
    """
    shapes = {np.shape(x) for x in (pred_labels, pred_instances, gt_labels, gt_instances)}
    if len(shapes) != 1:
        raise ValueError(f"label and instance maps differ in shape: {shapes}")
    pk, pinv, pvalid = _segments(pred_labels, pred_instances, void_label)
    gk, ginv, gvalid = _segments(gt_labels, gt_instances, void_label)
    inter = np.zeros((len(pk), len(gk)), dtype=np.int64)
    both = pvalid & gvalid
    np.add.at(inter, (pinv[both], ginv[both]), 1)
    p_area = np.bincount(pinv[pvalid], minlength=len(pk))
    g_area = np.bincount(ginv[gvalid], minlength=len(gk))
    p_void = np.bincount(pinv[pvalid & ~gvalid], minlength=len(pk))
    p_real = p_area > 0
    g_real = g_area > 0

    stats = PQStats()
    p_matched = np.zeros(len(pk), bool)
    g_matched = np.zeros(len(gk), bool)
    for i in np.nonzero(p_real)[0]:
        for j in np.nonzero(g_real & (inter[i] > 0))[0]:
            if pk[i, 0] != gk[j, 0]:
                continue
            union = p_area[i] - p_void[i] + g_area[j] - inter[i, j]
            iou = inter[i, j] / union
            if iou > 0.5:
                stats.iou_sum += float(iou)
                stats.tp += 1
                p_matched[i] = g_matched[j] = True
    stats.fn += int((g_real & ~g_matched).sum())
    for i in np.nonzero(p_real & ~p_matched)[0]:
        if p_area[i] and p_void[i] / p_area[i] > 0.5:
            continue
        stats.fp += 1
    return stats


def panoptic_quality(pred_labels, pred_instances, gt_labels, gt_instances, void_label=None):
    """PQ, SQ and RQ for one image (or for maps stacked along a leading axis)."""
    pl = np.asarray(pred_labels)
    if pl.ndim == 3:
        stats = PQStats()
        for args in zip(pred_labels, pred_instances, gt_labels, gt_instances):
            stats = stats + panoptic_stats(*args, void_label=void_label)
    else:
        stats = panoptic_stats(pred_labels, pred_instances, gt_labels, gt_instances, void_label)
    return stats.summary()


def boundary_map(labels):
    """True where any 4-neighbour carries a different label."""
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge
