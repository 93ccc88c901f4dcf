"""Quick oracle and invariant checks over every module, runnable from the CLI."""
from __future__ import annotations

import itertools
import time

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, forward_with_hooks, init_backbone
from .clustering import (assignment_entropy, compute_assignment_dense, compute_assignment_local,
                         harden_assignment, window_mask_dense)
from .data import netpbm
from .decoding import CLASS, MaskStack, decode_full
from .gradcheck import check_gradients
from .heads import postprocess_panoptic
from .losses import dice_loss, scale_regularizer
from .matching import hungarian_match
from .metrics import boundary_map, miou, panoptic_quality, undersegmentation_error
from .optim import AdamWState, optimizer_step


def _rng():
    return np.random.default_rng(20240611)


def check_local_equals_dense():
    rng = _rng()
    worst = 0.0
    for _ in range(30):
        hd, wd = rng.integers(1, 9, size=2)
        c = int(rng.integers(1, 6))
        q = T.Tensor(rng.normal(size=(c, 4 * hd * wd)))
        k = T.Tensor(rng.normal(size=(c, hd * wd)))
        s = float(rng.uniform(0.05, 2.0))
        local = compute_assignment_local(q, k, s, (2 * hd, 2 * wd), (hd, wd)).to_dense()
        dense = compute_assignment_dense(q, k, s, mask=window_mask_dense((2 * hd, 2 * wd), (hd, wd)))
        worst = max(worst, float(np.abs(local - dense.weights.data).max()))
    return worst <= 1e-10, f"max abs diff {worst:.2e}"


def check_hard_limit():
    rng = _rng()
    ok = True
    ents = []
    for _ in range(20):
        q = T.Tensor(rng.normal(size=(4, 16)))
        k = T.Tensor(rng.normal(size=(4, 5)))
        a = compute_assignment_dense(q, k, 1e-3)
        sim = q.data.T @ k.data
        ok &= bool(np.array_equal(harden_assignment(a).weights.data, np.eye(5)[np.argmax(sim, axis=1)]))
        ents.append(assignment_entropy(a))
    return ok and max(ents) < 0.01, f"max mean entropy {max(ents):.2e}"


def check_gradients_small():
    rng = _rng()
    q = T.parameter(rng.normal(size=(3, 16)))
    k = T.parameter(rng.normal(size=(3, 4)))
    s = T.parameter(np.array(0.4))
    m = T.parameter(rng.normal(size=(4, 2)))
    r = rng.normal(size=(16, 2))

    def f():
        a = compute_assignment_local(q, k, s, (4, 4), (2, 2))
        return (decode_full([a], MaskStack(m, (2, 2))).values * r).sum()

    errs = check_gradients(f, {"q": q, "k": k, "s": s, "m": m})
    worst = max(errs.values())
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def check_row_stochastic():
    rng = _rng()
    cfg = BackboneConfig(stem_stride=1, num_stages=3, channels=[4, 4, 4], hierarchical_level=2, c_f=4)
    pyr = forward_with_hooks(T.Tensor(rng.random((3, 16, 16))), init_backbone(cfg, 3), cfg)
    p = rng.random((4, 3))
    p /= p.sum(axis=1, keepdims=True)
    out = decode_full(pyr.assignments, MaskStack(T.Tensor(p), pyr.final_grid, CLASS))
    dev = float(np.abs(out.values.data.sum(axis=-1) - 1.0).max())
    return dev <= 1e-6, f"max row-sum deviation {dev:.2e}"


def check_hungarian():
    rng = _rng()
    for _ in range(100):
        n, g = sorted((int(v) for v in rng.integers(1, 6, size=2)), reverse=True)
        cost = rng.random((n, g))
        best = min(sum(cost[p[j], j] for j in range(g)) for p in itertools.permutations(range(n), g))
        if abs(hungarian_match(cost).total_cost - best) > 1e-12:
            return False, f"suboptimal on {n}x{g}"
    return True, "100 random matrices optimal"


def check_metrics():
    gt = np.zeros((4, 4), int)
    gt[:, 2:] = 1
    ue, _ = undersegmentation_error(np.zeros((4, 4), int), gt)
    a = np.zeros((4, 4), int)
    a[:2, :2] = 1
    b = np.zeros((4, 4), int)
    b[:2, 1:3] = 1
    iou = miou(a, b, 2)["per_class_iou"][1]
    pq = panoptic_quality(gt, gt, gt, gt)["pq"]
    edges = int(boundary_map(gt).sum())
    ok = ue == 0.5 and abs(iou - 1 / 3) < 1e-12 and pq == 1.0 and edges == 8
    return ok, f"UE {ue}, IoU {iou:.4f}, PQ {pq}, boundary pixels {edges}"


def check_losses_and_optim():
    t = np.zeros((4, 2))
    t[:2, 0] = 1
    t[2:, 1] = 1
    p = T.Tensor(np.where(t > 0, 1.0, 0.0))
    d = float(dice_loss(p, t).data)
    r = float(scale_regularizer([T.Tensor(0.1), T.Tensor(-0.2), T.Tensor(0.3)]).data)
    params = {"w": np.ones((2, 2))}
    optimizer_step(params, {"w": np.zeros((2, 2))}, AdamWState(), lr=0.1, weight_decay=0.5)
    ok = abs(d) < 1e-12 and abs(r - 0.6) < 1e-12 and np.allclose(params["w"], 0.95)
    return ok, f"dice {d:.1e}, reg {r:.3f}, decayed weight {params['w'][0, 0]:.3f}"


def check_postprocess():
    rng = _rng()
    P = rng.dirichlet(np.ones(4), size=3)
    M = rng.random((5, 3))
    labels, inst, _ = postprocess_panoptic(P, M)
    for j in range(5):
        best, arg = -1.0, -1
        for i in range(3):
            c = int(np.argmax(P[i]))
            if c != 3 and P[i, c] * M[j, i] > best:
                best, arg = P[i, c] * M[j, i], i
        want = (int(np.argmax(P[arg])), arg) if arg >= 0 else (3, -1)
        if (labels[j], inst[j]) != want:
            return False, f"pixel {j} differs from the per-pixel scan"
    return True, "matches per-pixel scan"


def check_netpbm():
    rng = _rng()
    lab = rng.integers(0, 300, size=(5, 7))
    back, _ = netpbm.parse(netpbm.encode_pgm(lab))
    rgb = rng.integers(0, 256, size=(3, 4, 3)).astype(np.uint8)
    back_rgb, _ = netpbm.parse(netpbm.encode_ppm(rgb))
    try:
        netpbm.parse(netpbm.encode_pgm(lab)[:-1])
        rejected = False
    except netpbm.NetpbmError:
        rejected = True
    ok = np.array_equal(back, lab) and np.array_equal(back_rgb, rgb) and rejected
    return ok, "round trip and truncation rejection"


CHECKS = [
    ("local assignment equals masked dense", check_local_equals_dense),
    ("hard limit matches argmax", check_hard_limit),
    ("gradients match finite differences", check_gradients_small),
    ("decoded class rows stay stochastic", check_row_stochastic),
    ("hungarian matches exhaustive search", check_hungarian),
    ("metric fixtures", check_metrics),
    ("losses and optimizer closed forms", check_losses_and_optim),
    ("postprocess matches scan", check_postprocess),
    ("netpbm round trip", check_netpbm),
]


def run_selftest(write=print):
    """Run every check; returns True when all pass."""
    all_ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= bool(ok)
        write(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    return all_ok
