"""Synthetic shape scenes (disks, rectangles, triangles) with semantic and instance maps."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netpbm

CLASS_NAMES = ("background", "disk", "rectangle", "triangle")
SCHEMA_VERSION = 1

# mean colour of each shape class; per-shape jitter is added on top
_CLASS_RGB = {1: (0.85, 0.30, 0.25), 2: (0.30, 0.75, 0.35), 3: (0.30, 0.40, 0.90)}


@dataclass
class SyntheticSpec:
    size: tuple = (64, 64)
    shapes_per_image: tuple = (1, 3)
    size_range: tuple = (7, 16)          # radius / half-extent in pixels
    allow_overlap: bool = False
    color_mode: str = "class"            # "class": class-tinted colours, "random": any colour
    color_jitter: float = 0.12
    noise: float = 0.03
    seed: int = 0
    count: int = 0
    val_count: int = 0

    @property
    def num_classes(self):
        return len(CLASS_NAMES)

    def validate(self):
        h, w = self.size
        lo, hi = self.size_range
        if not 1 <= lo <= hi:
            raise ValueError(f"size_range must satisfy 1 <= low <= high, got {self.size_range}")
        if 2 * (hi + 1) >= min(h, w):
            raise ValueError(f"shapes of extent {hi} do not fit a {h}x{w} canvas; "
                             f"lower size_range to below {min(h, w) // 2 - 1}")
        a, b = self.shapes_per_image
        if not 0 <= a <= b:
            raise ValueError(f"shapes_per_image must satisfy 0 <= low <= high, got {self.shapes_per_image}")
        if self.color_mode not in ("class", "random"):
            raise ValueError(f"unknown color_mode {self.color_mode!r}")
        if self.count < 0 or self.val_count < 0:
            raise ValueError("count and val_count must be non-negative")
        return self


@dataclass
class Sample:
    image: np.ndarray          # (H, W, 3) uint8
    semantic: np.ndarray       # (H, W) int, 0 = background
    instance: np.ndarray       # (H, W) int, 0 = background, 1.. per shape


def _grid(h, w):
    return np.mgrid[0:h, 0:w].astype(np.float64) + 0.5


def rasterize(kind, h, w, cy, cx, r, angle=0.0):
    """Boolean mask of one shape evaluated at pixel centres."""
    yy, xx = _grid(h, w)
    if kind == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 2:
        ry, rx = r
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if kind == 3:
        angs = angle + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        vy = cy + r * np.sin(angs)
        vx = cx + r * np.cos(angs)
        inside = np.ones((h, w), dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
            inside &= cross >= 0
        return inside
    raise ValueError(f"unknown shape class {kind}")


def _place(rng, spec):
    h, w = spec.size
    lo, hi = spec.size_range
    kind = int(rng.integers(1, len(CLASS_NAMES)))
    if kind == 2:
        r = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
        ext = r
    else:
        r = float(rng.integers(lo, hi + 1))
        ext = (r, r)
    cy = rng.uniform(ext[0] + 1, h - ext[0] - 1)
    cx = rng.uniform(ext[1] + 1, w - ext[1] - 1)
    angle = rng.uniform(0, 2 * np.pi)
    return kind, rasterize(kind, h, w, cy, cx, r, angle)


def _color(rng, kind, spec):
    if spec.color_mode == "random":
        return rng.uniform(0.1, 0.95, size=3)
    base = np.array(_CLASS_RGB[kind])
    return np.clip(base + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3), 0.0, 1.0)


def generate_sample(rng, spec: SyntheticSpec) -> Sample:
    h, w = spec.size
    semantic = np.zeros((h, w), dtype=np.int64)
    instance = np.zeros((h, w), dtype=np.int64)
    bg = rng.uniform(0.05, 0.35) + rng.uniform(-0.05, 0.05, size=3)
    img = np.broadcast_to(bg, (h, w, 3)).copy()
    # gentle illumination gradient so background is not a flat colour
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    yy, xx = _grid(h, w)
    img += (gy * (yy / h - 0.5) + gx * (xx / w - 0.5))[..., None]
    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    occupied = np.zeros((h, w), dtype=bool)
    next_id = 1
    for _ in range(n_shapes):
        for _attempt in range(50):
            kind, mask = _place(rng, spec)
            if not mask.any():
                continue
            if spec.allow_overlap:
                break
            grown = mask.copy()
            grown[1:] |= mask[:-1]
            grown[:-1] |= mask[1:]
            grown[:, 1:] |= mask[:, :-1]
            grown[:, :-1] |= mask[:, 1:]
            if not (grown & occupied).any():
                break
        else:
            continue
        img[mask] = _color(rng, kind, spec)
        semantic[mask] = kind
        instance[mask] = next_id
        occupied |= mask
        next_id += 1
    # later shapes may have erased earlier ones entirely (painter's order)
    ids = [i for i in np.unique(instance) if i]
    remap = np.zeros(next_id, dtype=np.int64)
    remap[ids] = np.arange(1, len(ids) + 1)
    instance = remap[instance]
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    image = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return Sample(image, semantic, instance)


def sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def synthesize(spec: SyntheticSpec, count=None, offset=0):
    """In-memory samples ``offset .. offset+count-1``; each draws from its own seeded stream."""
    spec.validate()
    count = spec.count if count is None else count
    return [generate_sample(sample_rng(spec.seed, offset + i), spec) for i in range(count)]


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)     # dicts: image, semantic, instance, split
    classes: dict = field(default_factory=lambda: dict(enumerate(CLASS_NAMES)))
    metadata: dict = field(default_factory=dict)
    root: str = "."
    schema_version: int = SCHEMA_VERSION

    def to_json(self):
        return {
            "schema_version": self.schema_version,
            "classes": {str(k): v for k, v in self.classes.items()},
            "entries": self.entries,
            "metadata": self.metadata,
        }

    def split(self, name):
        return [e for e in self.entries if e.get("split") == name]

    def path(self, rel):
        return os.path.join(self.root, rel)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write images (P6), semantic and instance maps (P5) and ``manifest.json``."""
    spec.validate()
    dirs = {k: os.path.join(out_dir, k) for k in ("images", "semantic", "instance")}
    try:
        for d in dirs.values():
            os.makedirs(d, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory under {out_dir}: {e.strerror}") from e
    entries = []
    total = spec.count + spec.val_count
    for i in range(total):
        s = generate_sample(sample_rng(spec.seed, i), spec)
        name = f"{i:05d}"
        rel = {"image": f"images/{name}.ppm", "semantic": f"semantic/{name}.pgm",
               "instance": f"instance/{name}.pgm"}
        netpbm.save_rgb(os.path.join(out_dir, rel["image"]), s.image)
        netpbm.save_labels(os.path.join(out_dir, rel["semantic"]), s.semantic)
        netpbm.save_labels(os.path.join(out_dir, rel["instance"]), s.instance)
        entries.append(dict(rel, split="train" if i < spec.count else "val"))
    spec_dict = asdict(spec)
    manifest = DatasetManifest(entries, metadata={
        "generator": "synthetic-shapes",
        "overlap_resolution": "painter" if spec.allow_overlap else "rejected",
        "spec": spec_dict,
    }, root=os.fspath(out_dir))
    path = os.path.join(out_dir, "manifest.json")
    try:
        with open(path, "w") as f:
            json.dump(manifest.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e
    return manifest


def load_manifest(path, check_files=True) -> DatasetManifest:
    """Read and validate a manifest; relative paths resolve against its directory."""
    with open(path) as f:
        raw = json.load(f)
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported manifest schema_version {version!r}")
    root = os.path.dirname(os.path.abspath(path))
    m = DatasetManifest(raw.get("entries", []), {int(k): v for k, v in raw.get("classes", {}).items()},
                        raw.get("metadata", {}), root, version)
    if check_files:
        for e in m.entries:
            dims = set()
            for key in ("image", "semantic", "instance"):
                p = m.path(e[key])
                if not os.path.exists(p):
                    raise FileNotFoundError(f"{path}: entry references missing file {p}")
                _, w, h, _ = netpbm.read_header(p)
                dims.add((h, w))
            if len(dims) != 1:
                raise ValueError(f"{path}: files of entry {e['image']} disagree on size: {sorted(dims)}")
    return m


def load_split(manifest: DatasetManifest, split):
    """Samples of one split, read from disk."""
    out = []
    for e in manifest.split(split):
        with open(manifest.path(e["image"]), "rb") as f:
            img, _ = netpbm.parse(f.read(), path=e["image"])
        out.append(Sample(img, netpbm.load_labels(manifest.path(e["semantic"])),
                          netpbm.load_labels(manifest.path(e["instance"]))))
    return out
