"""Command-line entry point: ``symfuse <subcommand> [flags]``.

Subcommands
    generate-data  write the synthetic train/eval frames and a manifest
    train          offline or class-incremental training, reports and checkpoints
    evaluate       modality table (or one setting) for a checkpoint
    gradcheck      finite-difference check of every primitive, loss and the network
    report         per-class table of the last step in results-table column order

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence,
5 gradient check failure.  Every file written embeds the config digest and is
byte-identical across reruns of the same configuration.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import EVAL_DATA_OFFSET, TRAIN_DATA_OFFSET, ConfigError, RunConfig, load_config
from .continual import DivergenceError, PlanError, TrainData, run_continual, run_offline
from .dataset import (
    CLASS_NAMES,
    TABLE_ORDER,
    DataError,
    ScheduleError,
    generate_frames,
    load_external_frame,
    load_label_map,
)
from .geometry import ProjectedFrame, ProjectionError
from .gradcheck import TOLERANCE, run_all
from .metrics import (
    SETTINGS,
    evaluate,
    iou,
    mean_iou_over,
    modality_table,
    per_class_rows,
    write_iou_rows,
)
from .network import BRANCHES, ModalityAvailability, ModelError, SymmetricFusionNet

log = logging.getLogger("symfuse")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_GRADCHECK = 5

DATA_ARRAYS = ("color", "lidar", "labels", "valid_mask")


class CheckpointMismatch(ConfigError):
    pass


# serialisation helpers


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def data_digest(cfg: RunConfig) -> str:
    """Hash of everything that determines the generated frames."""
    d = cfg.tree["dataset"]
    key = {"seed": cfg.seed, "num_classes": d["num_classes"], "train_frames": d["train_frames"],
           "eval_frames": d["eval_frames"], "synthetic": d["synthetic"]}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()


def synthetic_frames(cfg: RunConfig) -> tuple[list[ProjectedFrame], list[ProjectedFrame]]:
    d = cfg.tree["dataset"]
    train = generate_frames(cfg.scene_spec(TRAIN_DATA_OFFSET), int(d["train_frames"]))
    held_out = generate_frames(cfg.scene_spec(EVAL_DATA_OFFSET), int(d["eval_frames"]))
    return train, held_out


def write_dataset(out: Path, train, held_out, cfg: RunConfig) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, frames in (("train", train), ("eval", held_out)):
        for name in DATA_ARRAYS:
            path = out / f"{split}_{name}.npy"
            if frames:
                arr = np.stack([getattr(f, name) for f in frames])
            else:
                arr = np.zeros((0,), dtype=np.float64)
            np.save(path, arr, allow_pickle=False)
            files[path.name] = _sha256(path)
    manifest = {
        "config_digest": cfg.digest,
        "data_digest": data_digest(cfg),
        "seed": cfg.seed,
        "num_classes": cfg.num_classes,
        "frames": {"train": len(train), "eval": len(held_out)},
        "files": files,
    }
    _dump_json(out / "manifest.json", manifest)
    return manifest


def read_dataset(directory: Path, cfg: RunConfig):
    man_path = directory / "manifest.json"
    if not man_path.is_file():
        raise DataError(f"{directory}: no manifest.json")
    manifest = json.loads(man_path.read_text())
    if manifest.get("data_digest") != data_digest(cfg):
        raise DataError(f"{directory}: data was generated with different dataset settings")
    splits = {}
    for split in ("train", "eval"):
        arrays = {}
        for name in DATA_ARRAYS:
            path = directory / f"{split}_{name}.npy"
            if not path.is_file() or _sha256(path) != manifest["files"].get(path.name):
                raise DataError(f"{path}: missing or does not match the manifest")
            arrays[name] = np.load(path, allow_pickle=False)
        n = manifest["frames"][split]
        splits[split] = [ProjectedFrame(*(arrays[k][i] for k in DATA_ARRAYS)) for i in range(n)]
    return splits["train"], splits["eval"]


def external_frames(cfg: RunConfig):
    ext = cfg.tree["dataset"]["external"]
    proj = cfg.projection()
    table = load_label_map(cfg.path(ext["label_map"])) if ext["label_map"] else None
    extrinsic = ext["extrinsic"]

    def load(records):
        return [load_external_frame(cfg.path(r["scan"]), cfg.path(r["labels"]),
                                    cfg.path(r["image"]), proj, table, extrinsic)
                for r in records]

    return load(ext["train"]), load(ext["eval"])


def load_frames(cfg: RunConfig):
    d = cfg.tree["dataset"]
    if d["source"] == "external":
        return external_frames(cfg)
    if d["dir"] is not None:
        return read_dataset(cfg.path(d["dir"]), cfg)
    return synthetic_frames(cfg)


def _check_labels(frames: Sequence[ProjectedFrame], num_classes: int) -> None:
    for i, f in enumerate(frames):
        if f.labels.min(initial=0) < 0 or f.labels.max(initial=0) > num_classes:
            raise DataError(f"frame {i}: labels outside 0..{num_classes}")


# stub predictor used to validate the evaluation path


class OraclePredictor:
    """Predicts each frame's own labels for both branches."""

    def predict(self, frame: ProjectedFrame, avail=None):
        return {b: frame.labels.copy() for b in BRANCHES}


# subcommands


def cmd_generate_data(cfg: RunConfig, args) -> int:
    train, held_out = synthetic_frames(cfg)
    target = cfg.path(cfg.tree["dataset"]["dir"]) if cfg.tree["dataset"]["dir"] else cfg.output_dir / "data"
    manifest = write_dataset(target, train, held_out, cfg)
    print(f"wrote {manifest['frames']['train']} train and {manifest['frames']['eval']} eval "
          f"frames to {target}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    train, held_out = load_frames(cfg)
    _check_labels(train + held_out, cfg.num_classes)
    plan, model_cfg = cfg.plan(), cfg.model_config()
    data = TrainData(train, held_out, cfg.num_classes)
    out = cfg.output_dir
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if plan.schedule.step_count == 1:
        model, report = run_offline(plan, data, model_cfg)
        models = [model]
    else:
        models, report = run_continual(plan, data, model_cfg)
    report.config_digest = cfg.digest
    for k, m in enumerate(models):
        m.save(ckpt_dir / f"step{k}.ckpt", cfg.digest)
    (out / "report.csv").write_text(report.csv_text())
    manifest = report.manifest()
    manifest["checkpoints"] = {f"step{k}.ckpt": _sha256(ckpt_dir / f"step{k}.ckpt")
                               for k in range(len(models))}
    manifest["kd_variant"] = plan.kd_variant
    manifest["inpainting"] = plan.inpainting
    _dump_json(out / "manifest.json", manifest)
    last = len(models) - 1
    for b in BRANCHES:
        print(f"step {last} {b}: mIoU {report.step_miou(last, b, range(1, cfg.num_classes + 1)):.4f}")
    print(f"outputs in {out}")
    return EXIT_OK


def load_checkpoint(path: Path, cfg: RunConfig) -> SymmetricFusionNet:
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    try:
        model, digest = SymmetricFusionNet.load(path)
    except (ModelError, ValueError) as err:
        raise DataError(f"{path}: {err}") from err
    if digest != cfg.digest:
        raise CheckpointMismatch(f"{path} was written under config digest {digest[:12]}..., "
                                 f"current config is {cfg.digest[:12]}...")
    return model


def _latest_checkpoint(cfg: RunConfig) -> Path:
    ckpts = sorted((cfg.output_dir / "checkpoints").glob("step*.ckpt"),
                   key=lambda p: int(p.stem[4:]))
    if not ckpts:
        raise ConfigError(f"no checkpoints under {cfg.output_dir / 'checkpoints'}")
    return ckpts[-1]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    _, held_out = load_frames(cfg)
    if not held_out:
        raise DataError("no evaluation frames configured")
    _check_labels(held_out, cfg.num_classes)
    if args.oracle:
        model = OraclePredictor()
    else:
        ckpt = Path(args.checkpoint).resolve() if args.checkpoint else _latest_checkpoint(cfg)
        model = load_checkpoint(ckpt, cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    tag = "oracle_" if args.oracle else ""
    if args.modality == "all":
        table = modality_table(model, held_out, cfg.num_classes)
        path = out / f"{tag}modality_table.csv"
        table.write_csv(path, cfg.digest)
        for s, b, v in table.rows():
            print(f"{s:8s} {b:6s} {v:.4f}")
    else:
        cms = evaluate(model, held_out, cfg.num_classes, ModalityAvailability.from_name(args.modality))
        rows = []
        for b in BRANCHES:
            per_class, miou = iou(cms[b])
            rows += [(b, str(c), float(per_class[c - 1])) for c in range(1, cfg.num_classes + 1)]
            rows.append((b, "mean", float(miou)))
            print(f"{args.modality} {b}: mIoU {miou:.4f}")
        path = out / f"{tag}eval_{args.modality}.csv"
        write_iou_rows(path, rows, ["branch", "class", "iou"], cfg.digest)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_all(cfg.seed)
    worst = max(results, key=lambda r: r.error)
    failed = [r.name for r in results if not r.passed]
    report = {
        "config_digest": cfg.digest,
        "tolerance": TOLERANCE,
        "max_relative_error": worst.error,
        "worst": worst.name,
        "failed": failed,
        "checks": {r.name: r.error for r in results},
    }
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "gradcheck.json", report)
    status = "FAIL" if failed else "PASS"
    print(f"gradcheck {status}: {len(results)} checks, max relative error "
          f"{worst.error:.3e} ({worst.name})")
    for name in failed:
        print(f"  failed: {name}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def _read_report(path: Path, digest: str) -> list[tuple[int, str, int, float]]:
    if not path.is_file():
        raise ConfigError(f"{path} not found; run train first")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != f"# config_digest={digest}":
        raise CheckpointMismatch(f"{path} was produced under a different config")
    rows = []
    for rec in csv.DictReader(lines[1:]):
        rows.append((int(rec["step"]), rec["branch"], int(rec["class"]), float(rec["iou"])))
    return rows


def cmd_report(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    rows = _read_report(out / "report.csv", cfg.digest)
    n = cfg.num_classes
    last = max(s for s, _, _, _ in rows)
    schedule = cfg.schedule()
    order = TABLE_ORDER if n == 19 else tuple(range(1, n + 1))
    names = CLASS_NAMES if n == 19 else {}
    old = schedule.steps[0]
    new = [c for step in schedule.steps[1:] for c in step]
    table = []
    for b in BRANCHES:
        per_class = np.full(n, np.nan)
        for s, br, c, v in rows:
            if s == last and br == b:
                per_class[c - 1] = v
        summary = [("old", mean_iou_over(per_class, old)),
                   ("new", mean_iou_over(per_class, new) if new else float("nan")),
                   ("all", mean_iou_over(per_class, range(1, n + 1)))]
        table.append([b] + [v for _, v in per_class_rows(per_class, order, names)]
                     + [v for _, v in summary])
        print(f"{b}: " + "  ".join(f"{k} {v:.4f}" for k, v in summary))
    header = ["branch"] + [names.get(c, str(c)) for c in order] + ["old_miou", "new_miou", "all_miou"]
    path = out / "per_class.csv"
    write_iou_rows(path, table, header, cfg.digest)
    print(f"wrote {path} (step {last})")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--kd", choices=["same", "img", "pcd", "cross", "none"],
                        help="distillation variant for incremental steps")
    common.add_argument("--preset", help="class schedule: offline, 11-8, 6-5-8, 11-1, 6-1, or a-b-c")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="symfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="write synthetic frames")
    sub.add_parser("train", parents=[common], help="train and write reports")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--modality", choices=list(SETTINGS) + ["all"], default="all",
                    help="input setting; 'all' writes the full modality table")
    ev.add_argument("--checkpoint", help="checkpoint file (default: latest under --out)")
    ev.add_argument("--oracle", action="store_true",
                    help="use a perfect stub predictor instead of a checkpoint")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    sub.add_parser("report", parents=[common], help="per-class table of the last step")
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["output_dir"] = str(args.out.resolve())
    cont = {}
    if args.kd is not None:
        cont["kd"] = args.kd
    if args.preset is not None:
        cont["preset"] = args.preset
    if cont:
        o["continual"] = cont
    return o


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ScheduleError, PlanError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProjectionError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
