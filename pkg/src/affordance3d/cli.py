"""``affordance3d`` command-line entry point.

Every training or inference subcommand writes, next to its main output:

* ``<out>.run.json``: config snapshot, seed, code version and arguments
* ``<out>.log.jsonl``: line-delimited records (per-epoch losses for training)

A ``.affordance3d.lock`` file guards each output directory for the duration
of the run. Exit status is 0 on success, 2 on usage errors (bad flag, unknown
config key, malformed value) and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import BackboneConfig, load_backbone, save_backbone
from .cast import (
    CastConfig,
    FinetuneConfig,
    HashTextEncoder,
    Prompt,
    finetune,
    load_model,
    save_model,
    segment,
    teacher_from_header,
    text_encoder_from_header,
)
from .cmat import PretrainConfig, prepare_samples, pretrain, seed_everything
from .datasets import SPLITS, generate_dataset
from .errors import InvalidConfig
from .grounding import ProceduralTeacher, load_lifted, pca_to_rgb
from .io import load_arrays, load_cloud, save_arrays, save_cloud_ply
from .pipeline import evaluate_samples, lift_dataset, open_manifest, pretrain_items, segmentation_samples, teacher_dict

DATA_ENV = "AFFORDANCE3D_DATA"
LOCK_NAME = ".affordance3d.lock"

log = logging.getLogger("affordance3d")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _kinds(text):
    return tuple(k.strip() for k in text.split(",") if k.strip())


BACKBONE_KEYS = {"depth": int, "embed_dim": int, "heads": int, "M": int, "k": int, "patch_hidden": int}

PRETRAIN_KEYS = {
    "profile": str, "seed": int, "lambda_rec": float, "lambda_aff": float, "lambda_div": float,
    "epochs": int, "batch_size": int, "lr": float, "warmup_epochs": int, "mask_ratio": float,
    "weight_decay": float, "views": int, **BACKBONE_KEYS,
}

FINETUNE_KEYS = {
    "profile": str, "seed": int, "epochs": int, "batch_size": int, "lr_backbone": float, "lr_head": float,
    "weight_decay": float, "freeze_backbone": _bool, "lambda_focal": float, "lambda_dice": float,
    "fusion_blocks": int, "shared_dim": int, "fusion_heads": int, "fp_neighbors": int,
    "prompt_kinds": _kinds, **BACKBONE_KEYS,
}


def read_config(path, schema) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or not key:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        if key not in schema:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        if key in out:
            raise UsageError(f"{path}:{n}: duplicate config key {key!r}")
        try:
            out[key] = schema[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: bad value for {key}: {exc}") from None
    if out.get("profile", "toy") not in ("paper", "toy"):
        raise UsageError(f"{path}: profile must be paper or toy")
    return out


def _pick(values, keys):
    return {k: values[k] for k in keys if k in values}


def pretrain_configs(values):
    profile = values.get("profile", "toy")
    bb = _pick(values, [*BACKBONE_KEYS, "mask_ratio"])
    pc = _pick(values, ["seed", "lambda_rec", "lambda_aff", "lambda_div", "epochs", "batch_size", "lr", "warmup_epochs", "weight_decay"])
    try:
        return BackboneConfig.profile(profile, **bb), PretrainConfig.profile(profile, **pc)
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from None


def finetune_configs(values):
    profile = values.get("profile", "toy")
    cc = _pick(values, ["fusion_blocks", "shared_dim", "fp_neighbors", "lambda_focal", "lambda_dice", "prompt_kinds"])
    if "fusion_heads" in values:
        cc["heads"] = values["fusion_heads"]
    fc = _pick(values, ["seed", "epochs", "batch_size", "lr_backbone", "lr_head", "weight_decay", "freeze_backbone"])
    try:
        return CastConfig.profile(profile, **cc), FinetuneConfig.profile(profile, **fc)
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# run bookkeeping


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()})


@contextmanager
def output_lock(directory):
    """Exclusive marker file; a second writer fails instead of waiting."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        holder = path.read_text().strip() or "?"
        raise RuntimeError(f"{directory} is locked by another run (pid {holder}); remove {path} if stale") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        path.unlink(missing_ok=True)


def _sidecar(out, suffix):
    out = Path(out)
    return out.with_name(out.name + suffix)


def write_run_record(out, command, args, config=None, seed=None):
    record = {
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "config": config or {},
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }
    _sidecar(out, ".run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


class JsonlLog:
    def __init__(self, out):
        self.path = _sidecar(out, ".log.jsonl")
        self.fh = open(self.path, "w")

    def __call__(self, record):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _data_dir(args):
    data = args.data or os.environ.get(DATA_ENV)
    if not data:
        raise UsageError(f"no data directory: pass --data or set {DATA_ENV}")
    return Path(data)


def _training_run(args, command, config, seed, body):
    out = Path(args.out)
    with output_lock(out.parent):
        write_run_record(out, command, args, config, seed)
        sink = JsonlLog(out)
        try:
            body(sink)
        finally:
            sink.close()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    out = args.out or os.environ.get(DATA_ENV)
    if not out:
        raise UsageError(f"no output directory: pass --out or set {DATA_ENV}")
    if args.num_objects < 1:
        raise UsageError("--num-objects must be positive")
    with output_lock(out):
        manifest = generate_dataset(out, args.num_objects, tuple(args.unseen), args.seed, args.smooth)
    counts = {s: len(manifest.split(s)) for s in SPLITS}
    print(json.dumps({"out": str(out), **counts}, sort_keys=True))


def cmd_lift(args):
    manifest = open_manifest(_data_dir(args))
    teacher = ProceduralTeacher(noise_scale=args.noise, seed=args.teacher_seed)
    with output_lock(manifest.root):
        paths = lift_dataset(manifest, teacher, args.views, overwrite=args.overwrite)
    print(json.dumps({"lifted": len(paths)}))


def cmd_pretrain(args):
    values = read_config(args.config, PRETRAIN_KEYS)
    bcfg, pcfg = pretrain_configs(values)
    views = values.get("views", 12)
    manifest = open_manifest(_data_dir(args))
    snapshot = {"profile": values.get("profile", "toy"), "views": views, "backbone": asdict(bcfg), "pretrain": asdict(pcfg)}

    def body(sink):
        teacher = ProceduralTeacher()
        with output_lock(manifest.root / "lifted"):
            items = pretrain_items(manifest, "train", teacher, views)
        if not items:
            raise RuntimeError("training split is empty")
        model, history = pretrain(prepare_samples(items, bcfg), bcfg, pcfg, on_epoch=sink)
        save_backbone(args.out, model, extra={"pretrain": asdict(pcfg), "teacher": teacher_dict(teacher), "views": views})
        print(json.dumps(history[-1], sort_keys=True))

    _training_run(args, "pretrain", snapshot, pcfg.seed, body)


def cmd_finetune(args):
    values = read_config(args.config, FINETUNE_KEYS)
    ccfg, fcfg = finetune_configs(values)
    bb_keys = _pick(values, BACKBONE_KEYS)
    if args.ckpt and bb_keys:
        raise UsageError(f"backbone keys {sorted(bb_keys)} conflict with --ckpt; the checkpoint fixes the backbone")
    manifest = open_manifest(_data_dir(args))
    backbone = load_backbone(args.ckpt) if args.ckpt else None
    if backbone is not None:
        bcfg = backbone.config
    else:
        try:
            bcfg = BackboneConfig.profile(values.get("profile", "toy"), **bb_keys)
        except InvalidConfig as exc:
            raise UsageError(str(exc)) from None
    snapshot = {"profile": values.get("profile", "toy"), "backbone": asdict(bcfg), "cast": asdict(ccfg),
                "finetune": asdict(fcfg), "ckpt": args.ckpt}

    def body(sink):
        teacher = ProceduralTeacher()
        encoder = HashTextEncoder(ccfg.text_dim)
        samples = segmentation_samples(manifest, "train", bcfg, ccfg.prompt_kinds, encoder, teacher, ccfg.fp_neighbors)
        if not samples:
            raise RuntimeError("no training samples for the configured prompt kinds")
        model, history = finetune(samples, bcfg, ccfg, fcfg, backbone, on_epoch=sink)
        save_model(args.out, model, teacher_dict(teacher), {"name": encoder.name, "dim": encoder.dim, "seed": encoder.seed},
                   extra={"finetune": asdict(fcfg), "ckpt": args.ckpt})
        print(json.dumps(history[-1], sort_keys=True))

    _training_run(args, "finetune", snapshot, fcfg.seed, body)


def cmd_evaluate(args):
    model, header = load_model(args.model)
    manifest = open_manifest(_data_dir(args))
    report = Path(args.report)
    with output_lock(report.parent):
        write_run_record(report, "evaluate", args, {"split": args.split}, None)
        seed_everything(0)
        samples = segmentation_samples(manifest, args.split, model.backbone.config, model.config.prompt_kinds,
                                       text_encoder_from_header(header), teacher_from_header(header), model.config.fp_neighbors)
        if not samples:
            raise RuntimeError(f"split {args.split!r} has no samples for prompt kinds {list(model.config.prompt_kinds)}")
        result = evaluate_samples(model, samples)
        text = result.to_text({"model": Path(args.model).name, "split": args.split,
                               "prompt_kinds": ",".join(model.config.prompt_kinds)})
        report.write_text(text)
    print(json.dumps({"aiou": result.aiou, "auc": result.auc, "sim": result.sim, "mae": result.mae, "pairs": len(result.per_object)}))


def score_colors(scores):
    """Blue (0) to red (1) ramp."""
    s = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    return {
        "red": np.round(255 * s).astype(np.uint8),
        "green": np.zeros(len(s), dtype=np.uint8),
        "blue": np.round(255 * (1 - s)).astype(np.uint8),
    }


def cmd_segment(args):
    model, header = load_model(args.model)
    cloud = load_cloud(args.cloud)
    if args.text is not None:
        prompt = Prompt("text", text_encoder_from_header(header).encode(args.text))
    else:
        buf = load_arrays(args.image_exemplar)
        if "part_id_buffer" not in buf:
            raise RuntimeError(f"{args.image_exemplar} has no part_id_buffer array")
        prompt = Prompt("image", image_feature=teacher_from_header(header).encode_exemplar(buf["part_id_buffer"]))
    out = Path(args.out)
    arrays_path = out if out.suffix == ".npz" else out.with_suffix(".npz")
    ply_path = out if out.suffix == ".ply" else out.with_suffix(".ply")
    with output_lock(out.parent):
        mask = segment(model, cloud, prompt)
        save_arrays(arrays_path, {"scores": mask.scores, "logits": mask.logits})
        save_cloud_ply(ply_path, cloud, {"score": mask.scores.astype(np.float32), **score_colors(mask.scores)})
        write_run_record(out, "segment", args)
    print(json.dumps({"scores": str(arrays_path), "ply": str(ply_path), "positive": int((mask.scores >= 0.5).sum())}))


def _load_features(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False)
    arrays = load_arrays(path)
    if "visibility_count" in arrays:
        return load_lifted(path).features
    if "features" not in arrays:
        raise RuntimeError(f"{path} has no features array")
    return arrays["features"]


def cmd_visualize(args):
    feats = np.asarray(_load_features(args.features), dtype=np.float64)
    cloud = load_cloud(args.cloud)
    if feats.ndim != 2 or len(feats) != len(cloud.points):
        raise RuntimeError(f"features have shape {feats.shape} but the cloud has {len(cloud.points)} points")
    rgb = np.round(pca_to_rgb(feats) * 255).astype(np.uint8)
    out = Path(args.out)
    with output_lock(out.parent):
        save_cloud_ply(out, cloud, {"red": rgb[:, 0], "green": rgb[:, 1], "blue": rgb[:, 2]})
    print(json.dumps({"ply": str(out)}))


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="affordance3d", description="Prompted 3D affordance segmentation toolkit.")
    p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    data_help = f"dataset directory (default: ${DATA_ENV})"

    s = sub.add_parser("gen-data", help="generate the synthetic dataset")
    s.add_argument("--out", help=f"output directory (default: ${DATA_ENV})")
    s.add_argument("--num-objects", type=int, required=True)
    s.add_argument("--unseen", nargs="*", default=["door"], help="categories held out for the unseen split")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--smooth", action="store_true", help="geodesic-decay heatmaps instead of binary ones")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("lift", help="cache lifted teacher features for every object")
    s.add_argument("--data", help=data_help)
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--teacher-seed", type=int, default=0)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("pretrain", help="pre-train the point backbone")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help=data_help)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune the segmentation model")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", help="pre-trained backbone (omit to train from scratch)")
    s.add_argument("--data", help=data_help)
    s.add_argument("--out", required=True, help="model path")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="score a model on a split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", help=data_help)
    s.add_argument("--report", required=True)
    s.add_argument("--split", default="seen-test", choices=SPLITS)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("segment", help="segment one cloud given a prompt")
    s.add_argument("--model", required=True)
    s.add_argument("--cloud", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--text")
    g.add_argument("--image-exemplar")
    s.add_argument("--out", required=True, help="scores .npz (a .ply with the same stem is written too)")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("visualize", help="colour a cloud by the PCA of its features")
    s.add_argument("--features", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(args.log_level.upper())
    log.propagate = False
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"affordance3d: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("affordance3d: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes a one-line cause
        print(f"affordance3d: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
