"""Command-line entry point: ``dbgla partition|train|eval|segment|sweep``.

Settings come from an optional JSON config file; every flag overrides the
matching key. The effective configuration is written to ``config.json`` in
the output directory and all artifacts land there. Failures exit with a
category code: 2 config, 3 data, 4 numeric, 5 I/O.
"""

import argparse
import colorsys
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import pointcloud
from .errors import ConfigError, DbglaError, StorageError, ValidationError
from .network import ModelConfig, load_model, predict, prepare, save_model
from .partition import PartitionConfig, partition_cloud, partition_summary
from .train import TrainConfig, evaluate, run_sweep, suite_scenes, train, write_sweep_csv

COMMANDS = ("partition", "train", "eval", "segment", "sweep")
SUITE_CLASS_NAMES = ["floor", "pole", "table", "small_object"]
SMALL_CLASS = 3


@dataclass
class RunConfig:
    command: str
    output_dir: str
    seed: int
    inputs: list = field(default_factory=list)
    val_inputs: list = field(default_factory=list)
    checkpoint: Optional[str] = None
    model: dict = field(default_factory=dict)  # ModelConfig keys
    train: dict = field(default_factory=dict)  # TrainConfig keys
    partition: dict = field(default_factory=dict)  # PartitionConfig keys
    scene: dict = field(default_factory=lambda: {"n_points": 500, "count": 1, "seed": 0})
    output_format: str = "xyzl"
    lams: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    parts: list = field(default_factory=lambda: [1, 3, 5, 7, 9])

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not isinstance(self.seed, int):
            raise ConfigError("a seed is required")
        for path in list(self.inputs) + list(self.val_inputs) + ([self.checkpoint] if self.checkpoint else []):
            if not Path(path).is_file():
                raise StorageError(f"input not found: {path}")
        if self.command in ("partition", "segment") and not self.inputs:
            raise ConfigError(f"{self.command} needs at least one input cloud")
        if self.command in ("eval", "segment") and not self.checkpoint:
            raise ConfigError(f"{self.command} needs a checkpoint")
        if self.output_format not in ("xyzl", "ply_ascii"):
            raise ConfigError("output_format must be xyzl or ply_ascii")

    def out(self, name):
        return Path(self.output_dir) / name


def _echo_config(cfg, **resolved):
    data = dataclasses.asdict(cfg)
    data.update(resolved)
    with open(cfg.out("config.json"), "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)


def _dataclass_from(cls, base, overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dataclasses.replace(base, **overrides)


def part_colors(parts, num_parts):
    """Blue for the sparsest part through red for the densest."""
    hues = np.linspace(2 / 3, 0.0, num_parts) if num_parts > 1 else np.array([2 / 3])
    palette = np.array([colorsys.hsv_to_rgb(h, 0.85, 0.95) for h in hues])
    return np.rint(palette[parts] * 255).astype(np.int64)


def class_colors(labels, num_classes):
    hues = np.arange(num_classes) / max(num_classes, 1)
    palette = np.array([colorsys.hsv_to_rgb(h, 0.7, 0.9) for h in hues])
    return np.rint(palette[labels] * 255).astype(np.int64)


def cmd_partition(cfg):
    """Colour every point by its area's density part and write a summary."""
    pcfg = _dataclass_from(PartitionConfig, PartitionConfig(), cfg.partition)
    summaries = {}
    for path in cfg.inputs:
        pc = pointcloud.load(path)
        grid, part = partition_cloud(pc.positions, pcfg)
        point_part = part.part_of_area[grid.area_of_point]
        stem = Path(path).stem
        colored = pointcloud.PointCloud(pc.positions, labels=point_part.astype(np.int64),
                                        num_classes=part.num_parts)
        pointcloud.save(colored, cfg.out(f"{stem}_parts.ply"), colors=part_colors(point_part, part.num_parts))
        summaries[stem] = partition_summary(grid, part)
    with open(cfg.out("partition.json"), "w") as fh:
        json.dump(summaries, fh, indent=2, sort_keys=True)
    _echo_config(cfg, resolved_partition=dataclasses.asdict(pcfg))
    return summaries


def _training_scenes(cfg):
    if cfg.inputs:
        num_classes = cfg.model.get("num_classes")
        scenes = [pointcloud.load(p, num_classes=num_classes) for p in cfg.inputs]
        val = [pointcloud.load(p, num_classes=num_classes) for p in cfg.val_inputs] or None
        for pc in scenes + (val or []):
            if pc.labels is None:
                raise ValidationError("training and validation clouds need labels")
        if num_classes is None:
            num_classes = max(int(pc.labels.max()) + 1 for pc in scenes + (val or []))
            for pc in scenes + (val or []):
                pc.num_classes = num_classes
        return scenes, val, num_classes, None
    s = cfg.scene
    scenes = suite_scenes(s.get("seed", 0), s.get("count", 1), s.get("n_points", 500))
    val = suite_scenes(s["val_seed"], s.get("val_count", 1), s.get("n_points", 500)) if "val_seed" in s else None
    return scenes, val, 4, SUITE_CLASS_NAMES


def cmd_train(cfg, log=None):
    """Train, then write the best checkpoint, loss curve and metric report."""
    scenes, val, num_classes, names = _training_scenes(cfg)
    model_over = {"num_classes": num_classes, "in_features": scenes[0].num_features, **cfg.model}
    mcfg = ModelConfig.from_dict(model_over)
    tcfg = _dataclass_from(TrainConfig, TrainConfig(seed=cfg.seed), cfg.train)
    _echo_config(cfg, resolved_model=mcfg.to_dict(), resolved_train=dataclasses.asdict(tcfg))
    result = train(mcfg, tcfg, scenes, val, log=log)
    save_model(cfg.out("checkpoint.npz"), result.model,
               {"class_names": names, "best_iteration": result.best_iteration, "seed": cfg.seed})
    keys = ["iteration", "lr", "total", "wce", "cr", "lam", "val_oa", "val_miou"]
    with open(cfg.out("loss_curve.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for entry in result.loss_curve:
            writer.writerow({k: repr(entry[k]) if isinstance(entry.get(k), float) else entry.get(k, "")
                             for k in keys})
    cm = evaluate(result.model, val or scenes)
    cm.to_json(cfg.out("metrics.json"), names)
    return result


def cmd_eval(cfg):
    model, meta = load_model(cfg.checkpoint)
    c = model.cfg.num_classes
    scenes = [pointcloud.load(p, num_classes=c) for p in cfg.inputs] if cfg.inputs else \
        suite_scenes(cfg.scene.get("seed", 0), cfg.scene.get("count", 1), cfg.scene.get("n_points", 500))
    for pc in scenes:
        if pc.labels is None:
            raise ValidationError("evaluation needs labelled clouds")
    plans = [prepare(pc.positions, model.cfg, cfg.seed + i) for i, pc in enumerate(scenes)]
    cm = evaluate(model, scenes, plans)
    cm.to_json(cfg.out("metrics.json"), meta.get("class_names"))
    _echo_config(cfg)
    return cm


def cmd_segment(cfg):
    model, _ = load_model(cfg.checkpoint)
    written = []
    for i, path in enumerate(cfg.inputs):
        pc = pointcloud.load(path)
        labels = predict(pc, model, seed=cfg.seed + i)
        out_pc = pointcloud.PointCloud(pc.positions, labels=labels, num_classes=model.cfg.num_classes)
        suffix = ".xyzl" if cfg.output_format == "xyzl" else ".ply"
        target = cfg.out(Path(path).stem + "_segmented" + suffix)
        colors = class_colors(labels, model.cfg.num_classes) if suffix == ".ply" else None
        pointcloud.save(out_pc, target, colors=colors)
        written.append(target)
    _echo_config(cfg)
    return written


def cmd_sweep(cfg, log=None):
    mcfg = ModelConfig.from_dict({"num_classes": 4, **cfg.model})
    tcfg = _dataclass_from(TrainConfig, TrainConfig(seed=cfg.seed), cfg.train)
    n_points = cfg.scene.get("n_points", 500)
    count = cfg.scene.get("count", 1)
    _echo_config(cfg, resolved_model=mcfg.to_dict(), resolved_train=dataclasses.asdict(tcfg))
    rows = run_sweep(mcfg, tcfg, cfg.lams, cfg.parts, lambda seed: (suite_scenes(seed, count, n_points),) * 2,
                     SMALL_CLASS, base_seed=cfg.seed, log=log)
    write_sweep_csv(rows, cfg.out("sweep.csv"))
    return rows


HANDLERS = {"partition": cmd_partition, "train": cmd_train, "eval": cmd_eval,
            "segment": cmd_segment, "sweep": cmd_sweep}


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="dbgla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("inputs", nargs="*", help="point cloud files (.xyz, .xyzl, .ply)")
        p.add_argument("-o", "--out", dest="output_dir", help="output directory")
        p.add_argument("-c", "--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--parts", type=int, help="number of density parts K")
        p.add_argument("--quiet", action="store_true")
        if name == "partition":
            p.add_argument("--target-areas", type=int)
            p.add_argument("--eps", type=float)
            p.add_argument("--min-pts", type=int)
            p.add_argument("--base-window", type=float)
            p.add_argument("--window-ratio", type=float)
        if name in ("train", "sweep"):
            p.add_argument("--iterations", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--scene-points", type=int)
            p.add_argument("--scene-count", type=int)
            p.add_argument("--scene-seed", type=int)
        if name == "train":
            p.add_argument("--val", nargs="*", default=None, dest="val_inputs")
            p.add_argument("--lam", type=float)
        if name in ("eval", "segment"):
            p.add_argument("--checkpoint")
        if name == "segment":
            p.add_argument("--format", dest="output_format", choices=["xyzl", "ply_ascii"])
        if name == "sweep":
            p.add_argument("--lams", type=_float_list)
            p.add_argument("--parts-list", type=_int_list, dest="parts_list")
    return parser


def config_from_args(args):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise StorageError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    data["command"] = args.command
    for key in ("output_dir", "seed", "checkpoint", "output_format"):
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    if args.inputs:
        data["inputs"] = args.inputs
    if getattr(args, "val_inputs", None):
        data["val_inputs"] = args.val_inputs
    model = dict(data.get("model", {}))
    train_over = dict(data.get("train", {}))
    part = dict(data.get("partition", {}))
    scene = dict(data.get("scene", {"n_points": 500, "count": 1, "seed": 0}))
    if args.parts is not None:
        model["num_parts"] = part["num_parts"] = args.parts
    for flag, key in (("target_areas", "target_area_count"), ("eps", "eps"), ("min_pts", "min_pts"),
                      ("base_window", "base_window_edge"), ("window_ratio", "window_ratio")):
        if getattr(args, flag, None) is not None:
            part[key] = getattr(args, flag)
    for flag, key in (("iterations", "iterations"), ("lr", "learning_rate")):
        if getattr(args, flag, None) is not None:
            train_over[key] = getattr(args, flag)
    if getattr(args, "lam", None) is not None:
        model["lam"] = args.lam
    for flag, key in (("scene_points", "n_points"), ("scene_count", "count"), ("scene_seed", "seed")):
        if getattr(args, flag, None) is not None:
            scene[key] = getattr(args, flag)
    if getattr(args, "lams", None):
        data["lams"] = args.lams
    if getattr(args, "parts_list", None):
        data["parts"] = args.parts_list
    data.update(model=model, train=train_over, partition=part, scene=scene)
    missing = [k for k in ("output_dir", "seed") if k not in data]
    if missing:
        raise ConfigError(f"missing required settings: {', '.join(missing)} (flag or config file)")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data)


def run(cfg, log=None):
    cfg.validate()
    try:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output dir {cfg.output_dir}: {exc}") from exc
    handler = HANDLERS[cfg.command]
    return handler(cfg, log) if cfg.command in ("train", "sweep") else handler(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        log = None if args.quiet else (lambda entry: print(_format_log(entry), flush=True))
        run(cfg, log)
    except DbglaError as exc:
        print(f"dbgla {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dbgla {args.command}: I/O error: {exc}", file=sys.stderr)
        return StorageError.exit_code
    return 0


def _format_log(entry):
    if isinstance(entry, dict):
        return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items())
    return " ".join(f"{k}={v}" for k, v in dataclasses.asdict(entry).items())


if __name__ == "__main__":
    sys.exit(main())
