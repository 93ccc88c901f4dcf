"""Command-line entry point: generate / train / eval / infer / visualize / selftest."""
from __future__ import annotations

import argparse
import copy
import datetime
import json
import logging
import os
import sys

import numpy as np

from . import __version__

log = logging.getLogger("hcseg")

REPORT_SCHEMA = 1
LOG_ENV = "HCSEG_LOG_LEVEL"


class CLIError(Exception):
    """User-facing failure: printed to stderr, exit code 1."""


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _timestamps():
    return {"created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")}


def _write_json(path, obj):
    try:
        with open(path, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise CLIError(f"cannot write {path}: {e.strerror}") from e


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise CLIError(f"cannot create output directory {path}: {e.strerror}") from e


def _parse_levels(text, available):
    if text in (None, "all"):
        return list(available)
    try:
        wanted = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CLIError(f"--levels expects 'all' or a comma-separated list of integers, got {text!r}") from None
    bad = [lv for lv in wanted if lv not in available]
    if bad:
        raise CLIError(f"levels {bad} are not hooked; this model has levels {list(available)}")
    return wanted


def _load_config(args):
    from .train import RunConfig, config_from_dict

    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise CLIError(f"config file {args.config} does not exist") from None
        except json.JSONDecodeError as e:
            raise CLIError(f"config file {args.config} is not valid JSON: {e}") from None
        try:
            cfg = config_from_dict(raw)
        except (ValueError, TypeError) as e:
            raise CLIError(f"invalid config {args.config}: {e}") from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "head", None):
        cfg.head.kind = args.head
    if getattr(args, "hierarchical_level", None) is not None:
        cfg.backbone.hierarchical_level = args.hierarchical_level
    if getattr(args, "steps", None) is not None:
        cfg.optim.steps = args.steps
    try:
        cfg.validate()
    except (ValueError, FileNotFoundError) as e:
        raise CLIError(f"invalid config: {e}") from None
    return cfg


def _load_model(args, need_config=False):
    from .train import load_checkpoint

    if not args.checkpoint:
        raise CLIError("--checkpoint is required")
    cfg = _load_config(args) if (need_config and args.config) else None
    try:
        params, state, ckpt_cfg = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, ValueError, OSError) as e:
        raise CLIError(str(e)) from None
    if cfg is not None:
        # data and evaluation settings come from --config; the architecture from the checkpoint
        ckpt_cfg = copy.deepcopy(ckpt_cfg)
        ckpt_cfg.data = cfg.data
        ckpt_cfg.ue_variant = cfg.ue_variant
    return params, ckpt_cfg


# --- subcommands ---------------------------------------------------------------

def cmd_generate(args):
    from .data.synthetic import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(seed=args.seed or 0, count=args.count, val_count=args.val_count)
    if args.size:
        spec.size = (args.size, args.size)
        # shape extents scale with the canvas (defaults are tuned for 64x64)
        lo, hi = spec.size_range
        spec.size_range = (max(2, round(lo * args.size / 64)), max(2, round(hi * args.size / 64)))
    try:
        m = generate_synthetic(spec, args.out)
    except (OSError, ValueError) as e:
        raise CLIError(str(e)) from None
    print(json.dumps({"manifest": os.path.join(args.out, "manifest.json"), "entries": len(m.entries)},
                     sort_keys=True))
    return 0


def cmd_train(args):
    from .plotting import training_curves, write_csv
    from .train import run_training

    cfg = _load_config(args)
    _makedirs(cfg.out_dir)
    try:
        res, report = run_training(cfg, cfg.out_dir)
    except (OSError, ValueError) as e:
        raise CLIError(f"training failed: {e}") from None
    timing = report.pop("timing")
    _write_json(os.path.join(cfg.out_dir, "report.json"),
                {"schema_version": REPORT_SCHEMA, "result": report, "timestamps": {**_timestamps(), **timing}})
    rows = [{k: v for k, v in r.items() if not isinstance(v, list)} for r in res.history]
    if rows:
        write_csv(rows, os.path.join(cfg.out_dir, "metrics.csv"))
        training_curves(res.history, os.path.join(cfg.out_dir, "loss_curve.png"))
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval(args):
    from .plotting import write_csv
    from .train import evaluate, load_data

    params, cfg = _load_model(args, need_config=True)
    _, val = load_data(cfg)
    if len(val) == 0:
        raise CLIError("the validation split is empty")
    metrics = evaluate(params, cfg, val)
    levels = _assignment_levels(cfg)
    wanted = _parse_levels(args.levels, levels)
    keep = [levels.index(lv) for lv in wanted]
    metrics["levels"] = wanted
    metrics["ue"] = [metrics["ue"][i] for i in keep]
    metrics["entropy"] = [metrics["entropy"][i] for i in keep]
    report = {"schema_version": REPORT_SCHEMA, "checkpoint": os.path.basename(args.checkpoint),
              "head": cfg.head.kind, "metrics": metrics}
    text = json.dumps(report, sort_keys=True)
    if args.out:
        _makedirs(args.out)
        _write_json(os.path.join(args.out, "eval.json"), {**report, "timestamps": _timestamps()})
        write_csv([{"level": lv, "ue": u, "entropy": e} for lv, u, e in
                   zip(wanted, metrics["ue"], metrics["entropy"])], os.path.join(args.out, "eval_levels.csv"))
    print(text)
    return 0


def _assignment_levels(cfg):
    """Level labels of the hooked assignments, finest first (log2 of the fine-grid stride)."""
    b = cfg.backbone
    base = int(np.log2(b.stem_stride))
    return [base + s for s in b.hooked_stages()]


def _read_image(path):
    from .data import netpbm

    try:
        return netpbm.load_image(path).data
    except FileNotFoundError:
        raise CLIError(f"image {path} does not exist") from None
    except netpbm.NetpbmError as e:
        raise CLIError(str(e)) from None


def cmd_infer(args):
    from .data.outputs import colorize, save_outputs
    from .train import predict

    params, cfg = _load_model(args)
    if not args.image:
        raise CLIError("--image is required")
    img = _read_image(args.image)
    stride = cfg.backbone.total_stride
    if img.shape[1] % stride or img.shape[2] % stride:
        raise CLIError(f"image size {img.shape[1]}x{img.shape[2]} is not divisible by the model stride "
                       f"{stride}")
    labels, inst, _ = predict(params, cfg, img[None])
    out = args.out or "."
    _makedirs(out)
    save_outputs(labels[0], os.path.join(out, "labels.pgm"))
    save_outputs(inst[0] + 1, os.path.join(out, "instances.pgm"))   # 0 marks void
    save_outputs(colorize(labels[0], cfg.head.num_classes + 1), os.path.join(out, "prediction.ppm"))
    summary = {"schema_version": REPORT_SCHEMA, "image": os.path.basename(args.image),
               "labels": "labels.pgm", "instances": "instances.pgm",
               "class_pixels": np.bincount(labels[0].reshape(-1), minlength=cfg.head.num_classes + 1).tolist()}
    _write_json(os.path.join(out, "infer.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_visualize(args):
    from .data.outputs import colorize, overlay_boundaries, overlay_leakage, save_outputs, to_uint8_rgb
    from .decoding import cluster_ids
    from .metrics import boundary_map, undersegmentation_error
    from .plotting import level_panel
    from .train import load_data, predict

    params, cfg = _load_model(args, need_config=True)
    if args.image:
        img = _read_image(args.image)
        if not args.gt:
            raise CLIError("--image needs --gt (an instance-label P5 file) to compute leakage")
        from .data import netpbm
        try:
            gt = netpbm.load_labels(args.gt)
        except (FileNotFoundError, netpbm.NetpbmError) as e:
            raise CLIError(str(e)) from None
    else:
        _, val = load_data(cfg)
        if not 0 <= args.index < len(val):
            raise CLIError(f"--index {args.index} is outside the validation split (size {len(val)})")
        img, gt = val.images[args.index], val.instance[args.index]
    if gt.shape != img.shape[1:]:
        raise CLIError(f"ground truth {gt.shape} and image {img.shape[1:]} differ in size")
    levels = _assignment_levels(cfg)
    wanted = _parse_levels(args.levels, levels)
    labels, _, out = predict(params, cfg, img[None])
    chain = out.pyramid.assignments
    out_dir = args.out or "."
    _makedirs(out_dir)
    rgb = to_uint8_rgb(img)
    b_imgs, l_imgs, ues, files = [], [], [], []
    for lv in wanted:
        i = levels.index(lv)
        part = cluster_ids(chain, img.shape[1:], upto=i)[0]
        ue, leak = undersegmentation_error(part, gt, cfg.ue_variant)
        b = overlay_boundaries(rgb, boundary_map(part))
        lk = overlay_leakage(rgb, leak)
        for name, arr in ((f"level{lv}_boundaries.ppm", b), (f"level{lv}_leakage.ppm", lk)):
            save_outputs(arr, os.path.join(out_dir, name))
            files.append(name)
        b_imgs.append(b)
        l_imgs.append(lk)
        ues.append(ue)
    pred = colorize(labels[0], cfg.head.num_classes + 1)
    save_outputs(pred, os.path.join(out_dir, "prediction.ppm"))
    files.append("prediction.ppm")
    if wanted:
        level_panel(rgb, b_imgs, l_imgs, pred, wanted, os.path.join(out_dir, "figure.png"), ue=ues)
    report = {"schema_version": REPORT_SCHEMA, "levels": wanted, "ue": ues, "ue_variant": cfg.ue_variant,
              "files": files}
    _write_json(os.path.join(out_dir, "visualize.json"), report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    ok = run_selftest(write=print)
    print("selftest: " + ("all checks passed" if ok else "FAILED"))
    return 0 if ok else 1


# --- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hcseg", description="Hierarchical-clustering segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="JSON run config; flags override its values")
        sp.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        sp.add_argument("--out", help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint.npz written by 'train'")

    g = sub.add_parser("generate", help="write a synthetic shapes dataset with a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=500)
    g.add_argument("--val-count", type=int, default=100)
    g.add_argument("--size", type=int, default=0, help="square image side (default 64)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write checkpoint, metrics log and report")
    common(t)
    t.add_argument("--head", choices=["mask-query", "per-pixel"])
    t.add_argument("--hierarchical-level", type=int, dest="hierarchical_level")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report mIoU / PQ / per-level UE as JSON")
    common(e, checkpoint=True)
    e.add_argument("--levels", default="all", help="'all' or comma-separated level list")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict label and instance maps for one P6 image")
    common(i, checkpoint=True)
    i.add_argument("--image", help="input P6 image")
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("visualize", help="per-level cluster boundary and leakage overlays")
    common(v, checkpoint=True)
    v.add_argument("--levels", default="all", help="'all' or comma-separated level list")
    v.add_argument("--image", help="input P6 image (default: a validation sample)")
    v.add_argument("--gt", help="instance label P5 file for --image")
    v.add_argument("--index", type=int, default=0, help="validation sample index")
    v.set_defaults(func=cmd_visualize)

    s = sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def run_cli(argv=None):
    """Parse ``argv`` and run a subcommand; returns the process exit code."""
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:          # argparse already printed usage to stderr
        return int(e.code or 0)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2 ** 64:
        print(f"hcseg: error: --seed must be an unsigned 64-bit integer, got {args.seed}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CLIError as e:
        print(f"hcseg {args.command}: error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
