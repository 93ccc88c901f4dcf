"""Training loop, evaluation and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig
from .clustering import assignment_entropy
from .data.synthetic import SyntheticSpec, load_manifest, load_split, synthesize
from .decoding import cluster_ids
from .heads import postprocess_panoptic
from .losses import LossWeights, pixel_cross_entropy, scale_regularizer, total_loss
from .metrics import PQStats, confusion_matrix, miou_from_confusion, panoptic_stats, undersegmentation_error
from .model import (HeadConfig, ModelParams, decay_mask, forward, init_model, predict_semantic,
                    scale_tensors, trainable)
from .optim import AdamWState, optimizer_step, step_decay_lr

log = logging.getLogger("hcseg")

CONFIG_SCHEMA = 1
CHECKPOINT_SCHEMA = 1


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    backbone_lr_mult: float = 1.0
    steps: int = 1000
    batch_size: int = 8
    decay_at: float = 0.9
    decay_factor: float = 0.1
    flip: bool = True


@dataclass
class DataConfig:
    manifest: str = ""               # empty: synthesise in memory from ``synthetic``
    synthetic: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(count=500, val_count=100))


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        stem_stride=1, num_stages=3, channels=[16, 24, 32], hierarchical_level=2))
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    log_every: int = 10
    eval_every: int = 0              # 0: evaluate only at the end
    ue_variant: str = "majority"

    def validate(self):
        self.backbone.validate()
        self.head.validate()
        self.loss.validate()
        if self.optim.steps < 0 or self.optim.batch_size < 1:
            raise ValueError("optim.steps must be >= 0 and optim.batch_size >= 1")
        if self.optim.lr < 0 or self.optim.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.data.manifest and not os.path.exists(self.data.manifest):
            raise FileNotFoundError(f"dataset manifest {self.data.manifest} does not exist")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["schema_version"] = CONFIG_SCHEMA
        return d

    def hash(self):
        d = self.to_dict()
        d.pop("out_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _merge_into(obj, values, path="config"):
    """Recursively overwrite dataclass fields of ``obj`` from a plain dict."""
    known = {f.name: f for f in fields(obj)}
    for key, val in values.items():
        if key == "schema_version" and path == "config":
            continue
        if key not in known:
            raise ValueError(f"unknown field {path}.{key}")
        cur = getattr(obj, key)
        if is_dataclass(cur):
            if not isinstance(val, dict):
                raise ValueError(f"{path}.{key} must be an object")
            _merge_into(cur, val, f"{path}.{key}")
        else:
            if isinstance(cur, tuple) and isinstance(val, list):
                val = tuple(val)
            setattr(obj, key, val)
    return obj


def config_from_dict(values) -> RunConfig:
    version = values.get("schema_version", CONFIG_SCHEMA)
    if version != CONFIG_SCHEMA:
        raise ValueError(f"unsupported config schema_version {version!r}")
    return _merge_into(RunConfig(), values)


# --- data ----------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray       # (N, 3, H, W) float64 in [0, 1]
    semantic: np.ndarray     # (N, H, W)
    instance: np.ndarray     # (N, H, W)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return Dataset(self.images[idx], self.semantic[idx], self.instance[idx])


def _stack(samples):
    if not samples:
        return Dataset(np.zeros((0, 3, 1, 1)), np.zeros((0, 1, 1), int), np.zeros((0, 1, 1), int))
    return Dataset(np.stack([s.image.transpose(2, 0, 1) / 255.0 for s in samples]),
                   np.stack([s.semantic for s in samples]), np.stack([s.instance for s in samples]))


def load_data(cfg: RunConfig):
    """(train, val) datasets from the manifest or the in-memory synthesiser."""
    if cfg.data.manifest:
        m = load_manifest(cfg.data.manifest)
        return _stack(load_split(m, "train")), _stack(load_split(m, "val"))
    spec = cfg.data.synthetic
    train = _stack(synthesize(spec, spec.count, 0))
    val = _stack(synthesize(spec, spec.val_count, spec.count))
    return train, val


def gt_segments(semantic, instance):
    """Binary (N, G) masks and (G,) classes: one stuff segment for background, one per instance."""
    sem = semantic.reshape(-1)
    inst = instance.reshape(-1)
    masks, classes = [], []
    if (inst == 0).any():
        masks.append(inst == 0)
        classes.append(0)
    for i in np.unique(inst):
        if i == 0:
            continue
        sel = inst == i
        masks.append(sel)
        classes.append(int(np.bincount(sem[sel]).argmax()))
    if not masks:
        return np.zeros((sem.size, 0)), np.zeros(0, dtype=int)
    return np.stack(masks, axis=1).astype(np.float64), np.array(classes, dtype=int)


# --- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    state: AdamWState
    history: list
    config: RunConfig


def batch_loss(out, scales, cfg: RunConfig, sem, inst):
    """Loss of one batch: pixel CE (per-pixel head) or the matched mask loss, plus the scale term."""
    if cfg.head.kind == "per-pixel":
        ce = pixel_cross_entropy(out.full, sem.reshape(sem.shape[0], -1))
        reg = scale_regularizer(scales)
        loss = ce * cfg.loss.pixel_ce + reg * cfg.loss.reg
        return loss, {"pixel_ce": float(ce.data), "reg": float(reg.data)}
    segs = [gt_segments(s, i) for s, i in zip(sem, inst)]
    loss, parts, _ = total_loss(out.full.values, out.probs, scales,
                                [m for m, _ in segs], [c for _, c in segs], cfg.loss)
    return loss, parts


def _grads(named):
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in named.items()}


def train(cfg: RunConfig, train_set: Dataset, val_set: Dataset = None, params=None, state=None,
          log_path=None, progress=None) -> TrainResult:
    """Minibatch AdamW training; deterministic given ``cfg.seed`` and the data."""
    cfg.validate()
    if params is None:
        params = init_model(cfg.backbone, cfg.head, cfg.seed)
    state = state or AdamWState()
    named = trainable(params)
    dmask = decay_mask(named)
    lr_mult = {k: (cfg.optim.backbone_lr_mult if k.startswith("backbone.") else 1.0) for k in named}
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
    n = len(train_set)
    if n == 0 and cfg.optim.steps:
        raise ValueError("training set is empty")
    order = np.zeros(0, dtype=int)
    history = []
    logf = open(log_path, "a") if log_path else None
    try:
        for step in range(cfg.optim.steps):
            if len(order) < cfg.optim.batch_size:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[:cfg.optim.batch_size], order[cfg.optim.batch_size:]
            imgs = train_set.images[idx]
            sem = train_set.semantic[idx]
            inst = train_set.instance[idx]
            if cfg.optim.flip:
                flip = rng.random(len(idx)) < 0.5
                imgs = np.where(flip[:, None, None, None], imgs[..., ::-1], imgs)
                sem = np.where(flip[:, None, None], sem[..., ::-1], sem)
                inst = np.where(flip[:, None, None], inst[..., ::-1], inst)
            out = forward(imgs, params, cfg.backbone, cfg.head)
            loss, parts = batch_loss(out, scale_tensors(params), cfg, sem, inst)
            T.backward(loss)
            lr = step_decay_lr(cfg.optim.lr, step, cfg.optim.steps, cfg.optim.decay_at, cfg.optim.decay_factor)
            arrays = {k: v.data for k, v in named.items()}
            optimizer_step(arrays, _grads(named), state, lr, cfg.optim.weight_decay, tuple(cfg.optim.betas),
                           cfg.optim.eps, dmask, lr_mult)
            for v in named.values():
                v.grad = None
            rec = {"step": step, "loss": float(loss.data), "lr": lr, **parts}
            if step % cfg.log_every == 0 or step == cfg.optim.steps - 1:
                rec["scales"] = [float(s.data) for s in scale_tensors(params)]
                rec["entropy"] = [assignment_entropy(a) for a in out.pyramid.assignments]
                if logf:
                    logf.write(json.dumps(rec, sort_keys=True) + "\n")
                    logf.flush()
                log.info("step %d loss %.4f", step, rec["loss"])
            if cfg.eval_every and val_set is not None and (step + 1) % cfg.eval_every == 0:
                ev = evaluate(params, cfg, val_set)
                if logf:
                    logf.write(json.dumps({"step": step, "eval": ev}, sort_keys=True) + "\n")
            history.append(rec)
            if progress:
                progress(step, rec)
    finally:
        if logf:
            logf.close()
    return TrainResult(params, state, history, cfg)


# --- evaluation ----------------------------------------------------------------

def _components_panoptic(labels, num_classes):
    """Instance ids for a semantic map: connected components of every non-background class."""
    from scipy import ndimage

    inst = np.zeros(labels.shape, dtype=np.int64)
    nxt = 1
    for c in range(1, num_classes):
        comp, k = ndimage.label(labels == c)
        inst[comp > 0] = comp[comp > 0] + nxt - 1
        nxt += k
    return inst


def predict(params, cfg: RunConfig, images, hard=False):
    """Labels, instances and the raw output for a batch of (B, 3, H, W) images."""
    with T.no_grad():
        out = forward(images, params, cfg.backbone, cfg.head, hard=hard)
    H, W = out.full.grid
    B = out.full.values.shape[0]
    if cfg.head.kind == "per-pixel":
        labels = predict_semantic(out)
        inst = np.stack([_components_panoptic(l, cfg.head.num_classes) for l in labels])
    else:
        lab, ins, _ = postprocess_panoptic(out.probs, out.full)
        labels = lab.reshape(B, H, W)
        inst = ins.reshape(B, H, W)
    return labels, inst, out


def evaluate(params, cfg: RunConfig, data: Dataset, batch_size=16, variant=None):
    """mIoU, PQ, per-level UE and assignment entropy on a dataset."""
    K = cfg.head.num_classes
    variant = variant or cfg.ue_variant
    cm = np.zeros((K, K + 1), dtype=np.int64)
    cm_hard = np.zeros((K, K + 1), dtype=np.int64)
    pq = PQStats()
    pq_hard = PQStats()
    L = cfg.backbone.hierarchical_level
    ue_sum = np.zeros(L)
    ent_sum = np.zeros(L)
    n = len(data)
    for lo in range(0, n, batch_size):
        sl = slice(lo, min(lo + batch_size, n))
        labels, inst, out = predict(params, cfg, data.images[sl])
        cm += confusion_matrix(labels, data.semantic[sl], K)
        for b in range(labels.shape[0]):
            pq = pq + panoptic_stats(labels[b], inst[b], data.semantic[sl][b], data.instance[sl][b],
                                     void_label=K)
        if L:
            hl, hi, _ = predict(params, cfg, data.images[sl], hard=True)
            cm_hard += confusion_matrix(hl, data.semantic[sl], K)
            for b in range(hl.shape[0]):
                pq_hard = pq_hard + panoptic_stats(hl[b], hi[b], data.semantic[sl][b], data.instance[sl][b],
                                                   void_label=K)
        chain = out.pyramid.assignments
        for i, a in enumerate(chain):
            ent = assignment_entropy(a) * labels.shape[0]
            ent_sum[i] += ent
            part = cluster_ids(chain, data.images.shape[-2:], upto=i)
            for b in range(labels.shape[0]):
                ue_sum[i] += undersegmentation_error(part[b], data.instance[sl][b], variant)[0]
    seg = miou_from_confusion(cm)
    levels = range(L)
    return {
        "miou": seg["miou"],
        "per_class_iou": seg["per_class_iou"],
        "pixel_accuracy": seg["pixel_accuracy"],
        **pq.summary(),
        "ue_variant": variant,
        "ue": [float(ue_sum[i] / max(n, 1)) for i in levels],
        "entropy": [float(ent_sum[i] / max(n, 1)) for i in levels],
        "num_images": n,
        "decode": "soft",
        "hard_decode": ({"miou": miou_from_confusion(cm_hard)["miou"], "pq": pq_hard.summary()["pq"]}
                        if L else {"miou": seg["miou"], "pq": pq.summary()["pq"]}),
    }


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, state: AdamWState, cfg: RunConfig):
    arrays = {f"param/{k}": v.data for k, v in params.named().items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    meta = {"schema_version": CHECKPOINT_SCHEMA, "config": cfg.to_dict(), "config_hash": cfg.hash(),
            "optimizer_step": state.step}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    try:
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e.strerror}") from e


def load_checkpoint(path, cfg: RunConfig = None):
    """(params, state, config); the stored config is used unless one is given."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ValueError(f"{path}: unsupported checkpoint schema_version {meta.get('schema_version')!r}")
        cfg = cfg or config_from_dict(meta["config"])
        params = init_model(cfg.backbone, cfg.head, cfg.seed)
        named = params.named()
        for k, v in named.items():
            key = f"param/{k}"
            if key not in z:
                raise ValueError(f"{path}: checkpoint lacks parameter {k}")
            if z[key].shape != v.data.shape:
                raise ValueError(f"{path}: parameter {k} has shape {z[key].shape}, model expects {v.data.shape}")
            v.data[...] = z[key]
        state = AdamWState(step=int(meta.get("optimizer_step", 0)))
        for k in named:
            if f"adam_m/{k}" in z:
                state.m[k] = np.array(z[f"adam_m/{k}"])
                state.v[k] = np.array(z[f"adam_v/{k}"])
    return params, state, cfg


def run_training(cfg: RunConfig, out_dir=None, progress=None):
    """Train from scratch and write config.json, metrics.jsonl, checkpoint.npz and eval.json."""
    out_dir = str(out_dir or cfg.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    cfg = copy.deepcopy(cfg)
    cfg.out_dir = out_dir
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    train_set, val_set = load_data(cfg)
    log_path = os.path.join(out_dir, "metrics.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    t0 = time.time()
    res = train(cfg, train_set, val_set, log_path=log_path, progress=progress)
    save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), res.params, res.state, cfg)
    report = {"config_hash": cfg.hash(), "steps": cfg.optim.steps,
              "final_loss": res.history[-1]["loss"] if res.history else None,
              "metrics": evaluate(res.params, cfg, val_set) if len(val_set) else None,
              "timing": {"train_seconds": time.time() - t0}}
    return res, report
