"""Adaptive area grid, per-area density and density-part assignment.

The cloud is cut into equal cubic *areas* whose edge is chosen so that the
number of areas stays close to a target regardless of the cloud's physical
size. Each nonempty area gets a normalised point-count density, areas are
screened with DBSCAN in (scaled centroid, density) space, and then split into
``K`` density-ordered parts. Parts index from sparse (0) to dense (K-1) and
each part is given a window edge, largest for the sparsest part.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ConfigError

NOISE = -1


@dataclass
class PartitionConfig:
    target_area_count: int = 64
    num_parts: int = 5
    eps: Optional[float] = None  # in unit-cube units; None -> 1.5 area edges
    min_pts: int = 4
    density_weight: float = 1.0
    base_window_edge: Optional[float] = None  # None -> base_window_fraction * area_edge
    base_window_fraction: float = 0.25
    window_ratio: float = 2.0
    min_window_edge: float = 1e-3
    min_area_edge: float = 1e-3
    max_area_edge: float = float("inf")

    # K presets for the two scene profiles
    INDOOR_PARTS = 5
    OUTDOOR_PARTS = 7

    def validate(self):
        if self.target_area_count < 1:
            raise ConfigError("target_area_count must be >= 1")
        if self.num_parts < 1:
            raise ConfigError("num_parts must be >= 1")
        if self.eps is not None and self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.min_pts < 1:
            raise ConfigError("min_pts must be >= 1")
        if self.window_ratio <= 1:
            raise ConfigError("window_ratio must exceed 1")


@dataclass
class AreaGrid:
    origin: np.ndarray
    area_edge: float
    grid_dims: tuple
    area_of_point: np.ndarray  # (N,) compact ids 0..A-1
    area_cells: np.ndarray  # (A, 3) integer cell coordinates
    target_area_count: int
    members: list = field(repr=False, default_factory=list)

    @property
    def num_areas(self):
        return len(self.area_cells)

    def points_of_area(self, area):
        return self.members[area]

    def counts(self):
        return np.bincount(self.area_of_point, minlength=self.num_areas)

    def cell_origin(self, area):
        return self.origin + self.area_cells[area] * self.area_edge

    def cell_centers(self):
        return self.origin + (self.area_cells + 0.5) * self.area_edge


def build_grid(positions, target_area_count, min_edge=1e-3, max_edge=float("inf")):
    """Assign every point to one axis-aligned cubic area.

    The edge is ``cbrt(bbox_volume / target)``; for flat or linear clouds the
    volume and exponent use only the nonzero extents.
    """
    if target_area_count < 1:
        raise ConfigError("target_area_count must be >= 1")
    positions = np.asarray(positions, dtype=np.float64)
    lo = positions.min(axis=0)
    extent = positions.max(axis=0) - lo
    nonzero = extent[extent > 0]
    if nonzero.size == 0:
        edge = max(min_edge, min(1.0, max_edge))
    else:
        edge = (float(np.prod(nonzero)) / target_area_count) ** (1.0 / nonzero.size)
        edge = float(np.clip(edge, min_edge, max_edge))
    dims = np.maximum(1, np.ceil(extent / edge - 1e-9)).astype(np.int64)
    cells = np.floor((positions - lo) / edge).astype(np.int64)
    cells = np.clip(cells, 0, dims - 1)
    keys = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    unique_keys, area_of_point = np.unique(keys, return_inverse=True)
    area_cells = np.column_stack(np.unravel_index(unique_keys, dims))
    order = np.argsort(area_of_point, kind="stable")
    bounds = np.searchsorted(area_of_point[order], np.arange(len(unique_keys) + 1))
    members = [order[bounds[a]:bounds[a + 1]] for a in range(len(unique_keys))]
    return AreaGrid(lo, edge, tuple(int(d) for d in dims), area_of_point.astype(np.int64),
                    area_cells.astype(np.int64), int(target_area_count), members)


def compute_densities(grid):
    """Point count per nonempty area divided by the largest count."""
    counts = grid.counts().astype(np.float64)
    return counts / counts.max()


def dbscan(points, eps, min_pts):
    """Exact DBSCAN. Returns cluster ids ordered by lowest member index, NOISE = -1.

    A point is core when at least ``min_pts`` points (itself included) lie
    within distance ``eps``. Border points join the cluster that is discovered
    first when scanning points in index order.
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if eps <= 0 or min_pts < 1:
        raise ConfigError("dbscan needs eps > 0 and min_pts >= 1")
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(eps, output_type="ndarray")
    degree = np.ones(m, dtype=np.int64)
    np.add.at(degree, pairs[:, 0], 1)
    np.add.at(degree, pairs[:, 1], 1)
    core = degree >= min_pts

    both = core[pairs[:, 0]] & core[pairs[:, 1]]
    cp = pairs[both]
    adj = csr_matrix((np.ones(len(cp)), (cp[:, 0], cp[:, 1])), shape=(m, m))
    _, comp = connected_components(adj, directed=False)
    # clusters are started in order of their lowest-index core point
    first_core = {}
    for i in np.flatnonzero(core):
        first_core.setdefault(comp[i], i)
    rank = {c: r for r, c in enumerate(sorted(first_core, key=first_core.get))}
    labels = np.full(m, NOISE, dtype=np.int64)
    labels[core] = [rank[c] for c in comp[core]]
    # border point: earliest-started cluster among its core neighbours
    ends = np.concatenate([pairs, pairs[:, ::-1]])
    link = ~core[ends[:, 0]] & core[ends[:, 1]]
    best = np.full(m, np.iinfo(np.int64).max)
    np.minimum.at(best, ends[link, 0], labels[ends[link, 1]])
    border = best < np.iinfo(np.int64).max
    labels[border] = best[border]
    return canonicalize_labels(labels)


def canonicalize_labels(labels):
    """Renumber clusters 0, 1, ... by their lowest member index; keep NOISE."""
    labels = np.asarray(labels)
    out = np.full(len(labels), NOISE, dtype=np.int64)
    mapping = {}
    for i, lab in enumerate(labels):
        if lab == NOISE:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


@dataclass
class DensityPartition:
    density_of_area: np.ndarray
    part_of_area: np.ndarray
    num_parts: int
    requested_parts: int
    dbscan_labels: np.ndarray
    window_edge_of_part: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)

    def part_sizes(self):
        return np.bincount(self.part_of_area, minlength=self.num_parts)

    def mean_density_of_part(self):
        sums = np.bincount(self.part_of_area, weights=self.density_of_area, minlength=self.num_parts)
        return sums / self.part_sizes()


def _quantile_cuts(sorted_values, k):
    """Cut positions between distinct values, each nearest to ``floor(j*A/k)``."""
    a = len(sorted_values)
    boundaries = np.flatnonzero(np.diff(sorted_values) > 0) + 1
    cuts = []
    for j in range(1, k):
        target = (j * a) // k
        lowest_allowed = cuts[-1] + 1 if cuts else 1
        remaining = k - 1 - j  # cuts still to place after this one
        usable = boundaries[boundaries >= lowest_allowed]
        usable = usable[: len(usable) - remaining] if remaining else usable
        best = usable[np.argmin(np.abs(usable - target))]
        cuts.append(int(best))
    return cuts


def cluster_density_parts(grid, densities, num_parts, eps=None, min_pts=4, density_weight=1.0):
    """Split areas into density parts ordered sparse -> dense.

    DBSCAN in (centroid in the unit cube, weighted density) space flags
    isolated areas as noise. The parts themselves come from cutting the
    density-sorted areas at K-quantiles (never splitting equal densities);
    noise areas then take the part of the nearest non-noise area. Empty parts
    are dropped and parts are renumbered by mean density, so the result may
    have fewer parts than requested; every such event is recorded in
    ``warnings``.
    """
    if num_parts < 1:
        raise ConfigError("num_parts must be >= 1")
    densities = np.asarray(densities, dtype=np.float64)
    a = len(densities)
    warnings = []
    scale = float(max(grid.grid_dims))
    unit = (grid.area_cells + 0.5) / scale
    if eps is None:
        eps = 1.5 / scale
    labels = dbscan(np.column_stack([unit, density_weight * densities]), eps, min_pts)

    n_distinct = len(np.unique(densities))
    k = num_parts
    if k > n_distinct:
        warnings.append(f"requested {num_parts} parts but only {n_distinct} distinct densities over {a} areas;"
                        f" using {n_distinct}")
        k = n_distinct
    order = np.lexsort((np.arange(a), densities))
    cuts = _quantile_cuts(densities[order], k)
    rank_part = np.searchsorted(np.asarray(cuts, dtype=np.int64), np.arange(a), side="right")
    part = np.empty(a, dtype=np.int64)
    part[order] = rank_part

    noise = labels == NOISE
    if noise.any() and not noise.all():
        keep = np.flatnonzero(~noise)
        d2 = ((unit[noise][:, None, :] - unit[keep][None, :, :]) ** 2).sum(-1)
        part[noise] = part[keep[np.argmin(d2, axis=1)]]

    part, k = _renumber_parts(part, densities, k, warnings)
    return DensityPartition(densities, part, k, num_parts, labels, warnings=warnings)


def _renumber_parts(part, densities, k, warnings):
    used = np.unique(part)
    if len(used) < k:
        warnings.append(f"{k - len(used)} part(s) emptied by noise snapping; using {len(used)}")
    means = np.array([densities[part == p].mean() for p in used])
    distinct_means, merged = np.unique(means, return_inverse=True)
    if len(distinct_means) < len(used):
        warnings.append("parts with equal mean density merged")
    remap = np.full(int(part.max()) + 1, -1)
    remap[used] = merged
    return remap[part], len(distinct_means)


def assign_window_sizes(partition, base_window_edge, ratio, area_edge, min_window_edge=1e-3):
    """Window edge per part: ``base * ratio**(K-1-k)``, clamped to [min, area_edge]."""
    if ratio <= 1:
        raise ConfigError("window ratio must exceed 1")
    k = partition.num_parts
    edges = base_window_edge * float(ratio) ** (k - 1 - np.arange(k))
    partition.window_edge_of_part = np.clip(edges, min(min_window_edge, area_edge), area_edge)
    return partition


def partition_cloud(positions, cfg):
    """Grid, densities, parts and window edges in one call."""
    cfg.validate()
    grid = build_grid(positions, cfg.target_area_count, cfg.min_area_edge, cfg.max_area_edge)
    densities = compute_densities(grid)
    part = cluster_density_parts(grid, densities, cfg.num_parts, cfg.eps, cfg.min_pts, cfg.density_weight)
    base = cfg.base_window_edge if cfg.base_window_edge is not None else cfg.base_window_fraction * grid.area_edge
    assign_window_sizes(part, base, cfg.window_ratio, grid.area_edge, cfg.min_window_edge)
    return grid, part


def partition_summary(grid, partition):
    return {
        "area_count": int(grid.num_areas),
        "area_edge": float(grid.area_edge),
        "grid_dims": list(grid.grid_dims),
        "requested_parts": int(partition.requested_parts),
        "num_parts": int(partition.num_parts),
        "areas_per_part": [int(c) for c in partition.part_sizes()],
        "mean_density_per_part": [float(m) for m in partition.mean_density_of_part()],
        "window_edges": [float(w) for w in partition.window_edge_of_part],
        "noise_areas": int((partition.dbscan_labels == NOISE).sum()),
        "warnings": list(partition.warnings),
    }
