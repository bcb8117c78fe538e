"""Encoder-decoder segmentation model built from density-aware attention stages.

Each encoder stage runs a pair of local window blocks (plain then shifted
tiling) and, in parallel from the same stage input, the global area-token
path. Between stages the local output is max-pooled into grid cells. The
decoder copies coarse features back to the points of each pooling cell,
concatenates the encoder skip, and fuses in the stage's global branch. A
presence head reads the max-pooled bottleneck features and predicts which
classes occur in the scene.

Everything that depends only on point positions (grids, density parts,
window tables, pooling maps) is computed once per cloud in a :class:`Plan`.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, ValidationError
from .global_attention import GlobalPath, fuse
from .local_attention import LocalBlock, MhsaConfig, build_window_batches
from .partition import PartitionConfig, build_grid, partition_cloud

PRESENCE_MODES = ("scene", "point")


@dataclass
class ModelConfig:
    num_classes: int
    in_features: int = 0
    widths: tuple = (48, 96, 192, 384)
    num_heads: tuple = (3, 6, 12, 24)
    head_dim: int = 16
    enc_dim: int = 32
    area_counts: tuple = (64, 16, 4, 1)
    pool_stride: int = 4
    num_parts: int = PartitionConfig.INDOOR_PARTS
    eps: Optional[float] = None
    min_pts: int = 4
    base_window_fraction: float = 0.25
    window_ratio: float = 2.0
    neighbor_rate: float = 0.25
    same_part_rate: float = 0.1
    same_part_windows: int = 2
    key_cap: int = 256
    attn_scale: bool = True
    ffn_expansion: int = 4
    use_local_position: bool = True
    use_global: bool = True
    use_global_bias: bool = True
    presence_mode: str = "scene"
    lam: float = 0.5

    @classmethod
    def compact(cls, num_classes, **overrides):
        """Narrow four-stage preset for desk-scale scenes of a few hundred points."""
        base = dict(widths=(16, 32, 64, 128), num_heads=(1, 2, 4, 8), head_dim=16, enc_dim=16)
        return cls(num_classes=num_classes, **{**base, **overrides})

    @property
    def num_stages(self):
        return len(self.widths)

    def validate(self):
        s = self.num_stages
        if s < 1:
            raise ConfigError("at least one stage is required")
        if len(self.num_heads) != s or len(self.area_counts) != s:
            raise ConfigError("widths, num_heads and area_counts need one entry per stage")
        for w, h in zip(self.widths, self.num_heads):
            if w != h * self.head_dim:
                raise ConfigError(f"width {w} != {h} heads x head_dim {self.head_dim}")
            if self.use_global and (w + self.enc_dim) % self.head_dim:
                raise ConfigError(f"width {w} + enc_dim {self.enc_dim} not divisible by head_dim")
        if self.num_classes < 1 or self.in_features < 0:
            raise ConfigError("num_classes must be >= 1 and in_features >= 0")
        if self.pool_stride < 1:
            raise ConfigError("pool_stride must be >= 1")
        if self.presence_mode not in PRESENCE_MODES:
            raise ConfigError(f"presence_mode must be one of {PRESENCE_MODES}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        self.partition_config(0).validate()
        self.mhsa_config(0).validate()

    def partition_config(self, stage):
        return PartitionConfig(target_area_count=int(self.area_counts[stage]), num_parts=self.num_parts,
                               eps=self.eps, min_pts=self.min_pts,
                               base_window_fraction=self.base_window_fraction, window_ratio=self.window_ratio)

    def mhsa_config(self, stage):
        return MhsaConfig(self.num_heads[stage], self.head_dim, self.neighbor_rate, self.same_part_rate,
                          self.same_part_windows, self.key_cap, self.attn_scale, self.ffn_expansion,
                          self.use_local_position)

    def to_dict(self):
        out = dataclasses.asdict(self)
        for key in ("widths", "num_heads", "area_counts"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("widths", "num_heads", "area_counts"):
            if key in data:
                data[key] = tuple(int(v) for v in data[key])
        return cls(**data)


@dataclass
class PoolMap:
    """Fine point -> pooling cell assignment and the cell centroids."""

    cell_of_point: np.ndarray
    positions: np.ndarray

    @property
    def num_cells(self):
        return len(self.positions)


@dataclass
class StagePlan:
    positions: np.ndarray
    grid: object
    partition: object
    batches: tuple
    pool: Optional[PoolMap] = None


@dataclass
class Plan:
    stages: list = field(default_factory=list)

    @property
    def num_points(self):
        return len(self.stages[0].positions)


def pool_cells(positions, stride):
    """Group points into grid cells holding about ``stride`` points each."""
    positions = np.asarray(positions, dtype=np.float64)
    target = max(1, int(np.ceil(len(positions) / stride)))
    grid = build_grid(positions, target, min_edge=1e-9)
    counts = grid.counts().astype(np.float64)
    sums = np.zeros((grid.num_areas, 3))
    np.add.at(sums, grid.area_of_point, positions)
    return PoolMap(grid.area_of_point, sums / counts[:, None])


def prepare(positions, cfg, seed=0):
    """Per-stage grids, density parts, window batches and pooling maps."""
    cfg.validate()
    pos = np.asarray(positions, dtype=np.float64)
    plan = Plan()
    for s in range(cfg.num_stages):
        grid, part = partition_cloud(pos, cfg.partition_config(s))
        batches = build_window_batches(pos, grid, part, cfg.mhsa_config(s), seed=seed * 97 + s)
        stage = StagePlan(pos, grid, part, batches)
        if s + 1 < cfg.num_stages:
            stage.pool = pool_cells(pos, cfg.pool_stride)
            pos = stage.pool.positions
        plan.stages.append(stage)
    return plan


def downsample(features, pool):
    """Max-pool features into the cells of ``pool``; returns (cell positions, features)."""
    features = T.as_tensor(features)
    if features.shape[0] != len(pool.cell_of_point):
        raise ShapeError(f"{features.shape[0]} feature rows for {len(pool.cell_of_point)} pooled points")
    return pool.positions, T.segment_max(features, pool.cell_of_point, pool.num_cells)


def upsample(coarse, pool):
    """Every fine point receives its cell's feature."""
    if pool is None:
        raise ConfigError("upsampling needs the pooling map from the matching downsample")
    coarse = T.as_tensor(coarse)
    if coarse.shape[0] != pool.num_cells:
        raise ShapeError(f"{coarse.shape[0]} coarse rows for {pool.num_cells} cells")
    return T.take(coarse, pool.cell_of_point)


class Embedding(T.Module):
    def __init__(self, in_dim, width, rng):
        self.fc1 = T.LinearLayer(in_dim, width, rng)
        self.fc2 = T.LinearLayer(width, width, rng)
        self.norm = T.LayerNorm(width)

    def __call__(self, x):
        return self.norm(self.fc2(T.gelu(self.fc1(x))))


class Stage(T.Module):
    def __init__(self, cfg, s, rng):
        w = cfg.widths[s]
        mcfg = cfg.mhsa_config(s)
        self.local = [LocalBlock(mcfg, rng), LocalBlock(mcfg, rng)]
        self.local_norm = T.LayerNorm(w)
        self.glob = (GlobalPath(w, cfg.enc_dim, cfg.head_dim, rng, cfg.use_global_bias, cfg.ffn_expansion)
                     if cfg.use_global else None)
        self.glob_norm = T.LayerNorm(w) if cfg.use_global else None
        self.fusion = T.LinearLayer(2 * w, w, rng) if cfg.use_global else None
        last = s + 1 == cfg.num_stages
        self.down = None if last else T.LinearLayer(w, cfg.widths[s + 1], rng)
        self.down_norm = None if last else T.LayerNorm(cfg.widths[s + 1])
        self.up = None if last else T.LinearLayer(cfg.widths[s + 1] + w, w, rng)
        self.up_norm = None if last else T.LayerNorm(w)


@dataclass
class ForwardOutput:
    logits: T.Tensor  # (N, C)
    presence_logits: T.Tensor  # (1, C) scene level, or (N, C) per point
    per_point_presence: T.Tensor  # (N, C) probabilities used by the presence loss

    @property
    def num_points(self):
        return self.logits.shape[0]


class Model(T.Module):
    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embed = Embedding(cfg.in_features + 3, cfg.widths[0], rng)
        self.stages = [Stage(cfg, s, rng) for s in range(cfg.num_stages)]
        self.head_norm = T.LayerNorm(cfg.widths[0])
        self.head = T.LinearLayer(cfg.widths[0], cfg.num_classes, rng)
        presence_in = cfg.widths[-1] if cfg.presence_mode == "scene" else cfg.widths[0]
        self.presence_norm = T.LayerNorm(presence_in)
        self.presence = T.LinearLayer(presence_in, cfg.num_classes, rng)

    def presence_parameter_count(self):
        return self.presence.num_parameters() + self.presence_norm.num_parameters()

    def __call__(self, positions, features, plan):
        return self.forward(positions, features, plan)

    def forward(self, positions, features, plan):
        cfg = self.cfg
        positions = np.asarray(positions, dtype=np.float64)
        n = len(positions)
        if plan.num_points != n:
            raise ShapeError(f"plan covers {plan.num_points} points, cloud has {n}")
        features = np.zeros((n, 0)) if features is None else np.asarray(features, dtype=np.float64)
        if features.shape != (n, cfg.in_features):
            raise ShapeError(f"model expects {cfg.in_features} input features, got shape {features.shape}")
        x = self.embed(np.concatenate([features, positions - positions.mean(axis=0)], axis=1))

        skips = []
        for stage, sp in zip(self.stages, plan.stages):
            local = stage.local[0](x, sp.positions, sp.batches[0])
            local = stage.local_norm(stage.local[1](local, sp.positions, sp.batches[1]))
            glob = stage.glob_norm(stage.glob(sp.positions, sp.grid, x)) if stage.glob is not None else None
            skips.append((local, glob))
            if stage.down is not None:
                _, pooled = downsample(local, sp.pool)
                x = stage.down_norm(stage.down(pooled))

        bottleneck = skips[-1][0]
        y = None
        for s in reversed(range(cfg.num_stages)):
            stage, (local, glob) = self.stages[s], skips[s]
            if y is None:
                y = local
            else:
                y = stage.up_norm(stage.up(T.concat([upsample(y, plan.stages[s].pool), local], axis=-1)))
            if glob is not None:
                y = fuse(y, glob, stage.fusion)

        logits = self.head(self.head_norm(y))
        if cfg.presence_mode == "scene":
            presence_logits = self.presence(self.presence_norm(T.max(bottleneck, axis=0, keepdims=True)))
            probs = T.take(T.sigmoid(presence_logits), np.zeros(n, dtype=np.int64))
        else:
            presence_logits = self.presence(self.presence_norm(y))
            probs = T.sigmoid(presence_logits)
        return ForwardOutput(logits, presence_logits, probs)


def forward(pc, model, plan=None, seed=0):
    """Run ``model`` on a :class:`PointCloud`; builds the plan if not given."""
    if pc.num_features != model.cfg.in_features:
        raise ShapeError(f"cloud has {pc.num_features} features, model expects {model.cfg.in_features}")
    plan = prepare(pc.positions, model.cfg, seed) if plan is None else plan
    return model.forward(pc.positions, pc.features, plan)


def argmax_labels(logits):
    """Row-wise argmax; ties go to the lowest class id."""
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1).astype(np.int64)


def predict(pc, model, plan=None, seed=0):
    return argmax_labels(forward(pc, model, plan, seed).logits)


def save_model(path, model, metadata=None):
    T.save_checkpoint(path, model, {**(metadata or {}), "model_config": model.cfg.to_dict()})


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, metadata)``."""
    params, meta = T.read_checkpoint(path)
    if "model_config" not in meta:
        raise ValidationError(f"{path}: checkpoint has no model_config record")
    model = Model(ModelConfig.from_dict(meta["model_config"]))
    T.load_parameters(model, params)
    return model, meta
