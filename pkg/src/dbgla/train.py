"""Training loop, evaluation and the hyperparameter sweep.

Optimiser is Adam with a step decay of the learning rate (x0.1 at 60% and
85% of the run). Each scene's plan (grids, parts, sampled keys) is built once
and reused every iteration it is visited.
"""

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DbglaError, NumericError, ValidationError
from .losses import build_presence_labels, compute_class_weights, cr_loss, total_loss, wce_loss
from .metrics import ConfusionMatrix
from .network import Model, argmax_labels, prepare
from .pointcloud import generate_scene, imbalanced_scene_spec


@dataclass
class TrainConfig:
    iterations: int = 100
    learning_rate: float = 0.006
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_points: tuple = (0.6, 0.85)
    decay_factor: float = 0.1
    batch_scenes: int = 1
    eval_every: int = 10
    weight_smoothing: float = 1.0
    seed: int = 0

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_scenes < 1 or self.eval_every < 1:
            raise ConfigError("batch_scenes and eval_every must be >= 1")


def learning_rate_at(cfg, it):
    """Initial rate, multiplied by ``decay_factor`` at each passed decay point."""
    drops = sum(it >= math.floor(p * cfg.iterations) for p in cfg.decay_points)
    return cfg.learning_rate * cfg.decay_factor**drops


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def scene_loss(model, pc, plan, class_weights):
    """Forward one scene and return its :class:`LossReport`."""
    out = model.forward(pc.positions, pc.features, plan)
    cfg = model.cfg
    wce = wce_loss(out.logits, pc.labels, class_weights)
    presence = build_presence_labels(pc.labels, cfg.num_classes, cfg.presence_mode)
    cr = cr_loss(out.per_point_presence, presence)
    return total_loss(wce, cr, cfg.lam, cfg.presence_mode)


def evaluate(model, scenes, plans=None):
    """Aggregate confusion matrix over labelled scenes."""
    cm = ConfusionMatrix(model.cfg.num_classes)
    for i, pc in enumerate(scenes):
        if pc.labels is None:
            raise ValidationError("evaluation needs labelled clouds")
        if pc.labels.max() >= model.cfg.num_classes:
            raise ValidationError(f"labels reach {pc.labels.max()}, model has {model.cfg.num_classes} classes")
        plan = plans[i] if plans is not None else prepare(pc.positions, model.cfg)
        cm.accumulate(argmax_labels(model.forward(pc.positions, pc.features, plan).logits), pc.labels)
    return cm


@dataclass
class TrainResult:
    model: Model
    loss_curve: list = field(default_factory=list)  # dicts from LossReport.as_dict
    best_iteration: int = -1
    best_metrics: dict = None
    class_weights: np.ndarray = None


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def train(model_cfg, train_cfg, scenes, val_scenes=None, log=None):
    """Train a fresh model; returns the best-on-validation weights.

    ``val_scenes`` defaults to the training scenes. Raises NumericError when
    the loss stops being finite.
    """
    train_cfg.validate()
    if not scenes:
        raise ValidationError("no training scenes")
    for pc in scenes:
        if pc.labels is None:
            raise ValidationError("training clouds need labels")
    val_scenes = scenes if val_scenes is None else val_scenes
    model = Model(model_cfg, seed=train_cfg.seed)
    plans = [prepare(pc.positions, model_cfg, train_cfg.seed + i) for i, pc in enumerate(scenes)]
    val_plans = plans if val_scenes is scenes else [
        prepare(pc.positions, model_cfg, train_cfg.seed + 10_000 + i) for i, pc in enumerate(val_scenes)]
    weights = compute_class_weights([pc.class_histogram() for pc in scenes], model_cfg.num_classes,
                                    smoothing=train_cfg.weight_smoothing)
    params = model.parameters()
    opt = Adam(params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    result = TrainResult(model, class_weights=weights)
    best = None
    cursor = 0
    for it in range(train_cfg.iterations):
        model.zero_grad()
        reports = []
        for _ in range(train_cfg.batch_scenes):
            k = cursor % len(scenes)
            cursor += 1
            rep = scene_loss(model, scenes[k], plans[k], weights)
            if not math.isfinite(rep.total):
                raise NumericError(f"non-finite loss at iteration {it} (wce={rep.wce}, cr={rep.cr})")
            T.mul(rep.tensor, 1.0 / train_cfg.batch_scenes).backward()
            reports.append(rep)
        for p in params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient at iteration {it}")
        lr = learning_rate_at(train_cfg, it)
        opt.step(lr)
        entry = {"iteration": it, "lr": lr,
                 **{key: float(np.mean([getattr(r, key) for r in reports])) for key in ("total", "wce", "cr")},
                 "lam": model_cfg.lam}
        result.loss_curve.append(entry)
        last = it + 1 == train_cfg.iterations
        if (it + 1) % train_cfg.eval_every == 0 or last:
            metrics = evaluate(model, val_scenes, val_plans).summarize()
            entry["val_miou"] = metrics["miou"]
            entry["val_oa"] = metrics["oa"]
            if best is None or metrics["miou"] > best[0]:
                best = (metrics["miou"], it, _snapshot(model), metrics)
        if log is not None:
            log(entry)
    T.load_parameters(model, best[2])
    result.best_iteration, result.best_metrics = best[1], best[3]
    return result


def suite_scenes(seed, count=1, n_points=500):
    """Scenes of the imbalanced synthetic suite."""
    return [generate_scene(imbalanced_scene_spec(n_points, seed=seed * 1000 + i)) for i in range(count)]


@dataclass
class SweepRow:
    seed: int
    lam: float
    num_parts: int
    oa: float = float("nan")
    macc: float = float("nan")
    miou: float = float("nan")
    small_iou: float = float("nan")
    error: str = ""


SWEEP_FIELDS = [f for f in SweepRow.__dataclass_fields__]


def run_cell(model_cfg, train_cfg, train_scenes, test_scenes, small_class):
    result = train(model_cfg, train_cfg, train_scenes)
    s = evaluate(result.model, test_scenes).summarize()
    return s["oa"], s["macc"], s["miou"], float(s["per_class_iou"][small_class])


def run_sweep(model_cfg, train_cfg, lams, parts, scene_fn=None, small_class=3, base_seed=0, log=None):
    """Train and evaluate every (lam, K) cell; a failing cell is recorded and skipped.

    ``scene_fn(seed) -> (train_scenes, test_scenes)`` builds the data of a
    cell; the default trains and tests on one suite scene.
    """
    if not lams or not parts:
        raise ConfigError("sweep grid needs at least one lambda and one K")
    scene_fn = scene_fn or (lambda seed: (suite_scenes(seed),) * 2)
    rows = []
    for index, (lam, k) in enumerate((lam, k) for lam in lams for k in parts):
        seed = base_seed + index
        row = SweepRow(seed, float(lam), int(k))
        try:
            mcfg = replace(model_cfg, lam=float(lam), num_parts=int(k))
            train_scenes, test_scenes = scene_fn(seed)
            row.oa, row.macc, row.miou, row.small_iou = run_cell(
                mcfg, replace(train_cfg, seed=seed), train_scenes, test_scenes, small_class)
        except DbglaError as exc:
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
