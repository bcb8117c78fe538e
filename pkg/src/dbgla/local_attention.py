"""Density-conditioned windowed attention inside local areas.

Every area is tiled by cubic windows whose edge comes from the area's density
part, so dense areas get small windows and sparse areas large ones. Queries
are a window's own points; keys are those points plus a sparse sample of
points from face-adjacent windows and from a few random windows of the same
density part. The shifted tiling (half a window per axis) is used by the
second block of each pair.

Windows are evaluated together: members and keys are padded into dense
``(W, Qmax)`` and ``(W, Kmax)`` index tables and padded keys are masked out of
the softmax.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

MASK_LOGIT = -1e30


@dataclass
class MhsaConfig:
    num_heads: int
    head_dim: int
    neighbor_rate: float = 0.25
    same_part_rate: float = 0.1
    same_part_windows: int = 2
    key_cap: int = 256
    attn_scale: bool = True
    ffn_expansion: int = 4
    use_position: bool = True

    @property
    def channels(self):
        return self.num_heads * self.head_dim

    def validate(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError("num_heads and head_dim must be >= 1")
        if not (0 <= self.neighbor_rate <= 1 and 0 <= self.same_part_rate <= 1):
            raise ConfigError("sampling rates must lie in [0, 1]")
        if self.key_cap < 1:
            raise ConfigError("key_cap must be >= 1")

    def scale(self):
        return 1.0 / math.sqrt(self.head_dim) if self.attn_scale else 1.0


@dataclass
class AttentionWindow:
    window_id: int
    area: int
    cell: tuple
    center: np.ndarray
    member_points: np.ndarray
    density_part: int
    key_points: Optional[np.ndarray] = None

    @property
    def external_keys(self):
        return self.key_points[len(self.member_points):]


def tile_windows(positions, grid, partition, shifted=False, max_members=None):
    """Cover every point of every area with exactly one cubic window.

    Shifted tilings start half a window edge before the area origin on each
    axis. Windows with more than ``max_members`` points are split along their
    longest spread axis.
    """
    positions = np.asarray(positions, dtype=np.float64)
    edges = partition.window_edge_of_part
    windows = []
    for area in range(grid.num_areas):
        members = grid.points_of_area(area)
        part = int(partition.part_of_area[area])
        w = float(edges[part])
        offset = 0.5 * w if shifted else 0.0
        origin = grid.cell_origin(area) - offset
        per_axis = int(math.ceil((grid.area_edge + offset) / w - 1e-9))
        cells = np.floor((positions[members] - origin) / w).astype(np.int64)
        cells = np.clip(cells, 0, max(per_axis - 1, 0))
        keys = (cells[:, 0] * per_axis + cells[:, 1]) * per_axis + cells[:, 2]
        for key in np.unique(keys):
            pts = members[keys == key]
            cell = tuple(int(c) for c in np.unravel_index(key, (per_axis,) * 3))
            center = origin + (np.asarray(cell) + 0.5) * w
            for chunk in _split(pts, positions, max_members):
                windows.append(AttentionWindow(len(windows), area, cell, center, chunk, part))
    return windows


def _split(points, positions, limit):
    if limit is None or len(points) <= limit:
        return [np.sort(points)]
    spread = np.ptp(positions[points], axis=0)
    order = points[np.argsort(positions[points, int(np.argmax(spread))], kind="stable")]
    half = len(order) // 2
    return _split(order[:half], positions, limit) + _split(order[half:], positions, limit)


def _sample(rng, points, rate):
    count = int(math.floor(rate * len(points) + 0.5))
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(points, size=count, replace=False))


def select_keys(windows, cfg, seed=0):
    """Attach key sets: members, then sampled neighbours, then same-part samples.

    Neighbours are windows of the same area whose cell differs by one step on a
    single axis; same-part windows are drawn from anywhere in the cloud. When
    the cap is exceeded the external keys are truncated, never the members.
    """
    rng = np.random.default_rng(seed)
    by_area_cell = {}
    by_part = {}
    for win in windows:
        by_area_cell.setdefault((win.area, win.cell), []).append(win.window_id)
        by_part.setdefault(win.density_part, []).append(win.window_id)
    steps = [np.eye(3, dtype=int)[i] * s for i in range(3) for s in (-1, 1)]
    for win in windows:
        neighbours = []
        for step in steps:
            cell = tuple(int(c) for c in np.asarray(win.cell) + step)
            neighbours.extend(by_area_cell.get((win.area, cell), []))
        external = [_sample(rng, windows[n].member_points, cfg.neighbor_rate) for n in neighbours]
        excluded = set(neighbours) | set(by_area_cell[(win.area, win.cell)])
        pool = [w for w in by_part[win.density_part] if w not in excluded]
        if pool and cfg.same_part_windows > 0 and cfg.same_part_rate > 0:
            chosen = rng.choice(pool, size=min(cfg.same_part_windows, len(pool)), replace=False)
            external += [_sample(rng, windows[c].member_points, cfg.same_part_rate) for c in sorted(chosen)]
        ext = np.concatenate(external) if external else np.zeros(0, dtype=np.int64)
        room = max(cfg.key_cap - len(win.member_points), 0)
        win.key_points = np.concatenate([win.member_points, ext[:room]]).astype(np.int64)
    return windows


@dataclass
class WindowBatch:
    """Padded index tables for evaluating many windows at once."""

    query_index: np.ndarray  # (W, Qmax)
    key_index: np.ndarray  # (W, Kmax)
    key_mask: np.ndarray  # (W, Kmax) bool
    centers: np.ndarray  # (W, 3)
    point_slot: np.ndarray  # (N,) flat index into W * Qmax
    windows: list = field(repr=False, default_factory=list)

    @property
    def logit_bias(self):
        return np.where(self.key_mask, 0.0, MASK_LOGIT)[:, None, None, :]


def batch_windows(windows, num_points):
    w = len(windows)
    qmax = max(len(win.member_points) for win in windows)
    kmax = max(len(win.key_points) for win in windows)
    query_index = np.zeros((w, qmax), dtype=np.int64)
    key_index = np.zeros((w, kmax), dtype=np.int64)
    key_mask = np.zeros((w, kmax), dtype=bool)
    point_slot = np.full(num_points, -1, dtype=np.int64)
    for i, win in enumerate(windows):
        nq, nk = len(win.member_points), len(win.key_points)
        query_index[i, :nq] = win.member_points
        key_index[i, :nk] = win.key_points
        key_mask[i, :nk] = True
        point_slot[win.member_points] = i * qmax + np.arange(nq)
    if (point_slot < 0).any():
        raise ConfigError("windows do not cover every point")
    centers = np.array([win.center for win in windows])
    return WindowBatch(query_index, key_index, key_mask, centers, point_slot, windows)


class AttentionParams(T.Module):
    """Q/K/V projections and the output projection, all channels -> channels."""

    def __init__(self, channels, rng):
        self.q = T.LinearLayer(channels, channels, rng)
        self.k = T.LinearLayer(channels, channels, rng)
        self.v = T.LinearLayer(channels, channels, rng)
        self.out = T.LinearLayer(channels, channels, rng)


def attend(q_in, k_in, params, num_heads, scale, logit_bias=None, return_weights=False):
    """Multi-head attention on batched inputs.

    ``q_in`` is (B, Q, C), ``k_in`` (B, K, C); ``logit_bias`` broadcasts to
    (B, H, Q, K). Returns (B, Q, C) after the output projection.
    """
    b, nq, c = q_in.shape
    nk = k_in.shape[1]
    if c % num_heads:
        raise ConfigError(f"channels {c} not divisible by {num_heads} heads")
    d = c // num_heads

    def heads(x, n):
        return T.transpose(T.reshape(x, (b, n, num_heads, d)), (0, 2, 1, 3))

    q = heads(params.q(q_in), nq)
    k = heads(params.k(k_in), nk)
    v = heads(params.v(k_in), nk)
    logits = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    if logit_bias is not None:
        logits = T.add(logits, logit_bias)
    weights = T.softmax(logits, axis=-1)
    out = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, nq, c))
    out = params.out(out)
    return (out, weights) if return_weights else out


def window_mhsa(x, n_queries, cfg, params, return_weights=False):
    """Attention for one window with channel-major input.

    ``x`` is (channels, n_keys) whose first ``n_queries`` columns are the
    window's own points. Returns (channels, n_queries).
    """
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[0] != cfg.channels:
        raise ShapeError(f"window input must be ({cfg.channels}, n_keys), got {x.shape}")
    if not 1 <= n_queries <= x.shape[1]:
        raise ShapeError(f"n_queries={n_queries} outside [1, {x.shape[1]}]")
    rows = T.transpose(x)
    k_in = T.reshape(rows, (1, x.shape[1], x.shape[0]))
    q_in = T.reshape(rows[:n_queries], (1, n_queries, x.shape[0]))
    res = attend(q_in, k_in, params, cfg.num_heads, cfg.scale(), return_weights=return_weights)
    out, weights = res if return_weights else (res, None)
    out = T.transpose(T.reshape(out, (n_queries, x.shape[0])))
    return (out, weights.data[0]) if return_weights else out


class FeedForward(T.Module):
    def __init__(self, channels, expansion, rng):
        self.fc1 = T.LinearLayer(channels, channels * expansion, rng)
        self.fc2 = T.LinearLayer(channels * expansion, channels, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class LocalBlock(T.Module):
    """Pre-norm residual block: ``y = x + MHSA(norm(x)); z = y + FFN(norm(y))``."""

    def __init__(self, cfg, rng):
        cfg.validate()
        c = cfg.channels
        self.cfg = cfg
        self.norm1 = T.LayerNorm(c)
        self.attn = AttentionParams(c, rng)
        self.pos = T.LinearLayer(3, c, rng) if cfg.use_position else None
        self.norm2 = T.LayerNorm(c)
        self.ffn = FeedForward(c, cfg.ffn_expansion, rng)

    def __call__(self, x, positions, batch, return_weights=False):
        return local_block(x, positions, batch, self, return_weights)


def local_block(x, positions, batch, block, return_weights=False):
    x = T.as_tensor(x)
    if x.shape[1] != block.cfg.channels:
        raise ShapeError(f"features have {x.shape[1]} channels, block expects {block.cfg.channels}")
    h = block.norm1(x)
    q_in = T.take(h, batch.query_index)
    k_in = T.take(h, batch.key_index)
    if block.pos is not None:
        centers = batch.centers[:, None, :]
        q_in = T.add(q_in, block.pos(positions[batch.query_index] - centers))
        k_in = T.add(k_in, block.pos(positions[batch.key_index] - centers))
    res = attend(q_in, k_in, block.attn, block.cfg.num_heads, block.cfg.scale(), batch.logit_bias, return_weights)
    out, weights = res if return_weights else (res, None)
    flat = T.reshape(out, (-1, x.shape[1]))
    y = T.add(x, T.take(flat, batch.point_slot))
    z = T.add(y, block.ffn(block.norm2(y)))
    return (z, weights) if return_weights else z


def build_window_batches(positions, grid, partition, cfg, seed=0):
    """Unshifted and shifted window batches for one local stage pair."""
    n = len(positions)
    batches = []
    for i, shifted in enumerate((False, True)):
        windows = tile_windows(positions, grid, partition, shifted, max_members=cfg.key_cap)
        select_keys(windows, cfg, seed=seed * 2 + i)
        batches.append(batch_windows(windows, n))
    return tuple(batches)
