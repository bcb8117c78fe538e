"""Density partition of a scene with one dense cluster.

Prints the per-part summary and writes a colored PLY (blue sparse, red dense)
next to this script.

    python demos/partition_demo.py
"""
import json
from pathlib import Path

import numpy as np

from dbgla import pointcloud
from dbgla.cli import part_colors
from dbgla.partition import PartitionConfig, partition_cloud, partition_summary
from dbgla.pointcloud import dense_cluster_spec, generate_scene

spec, ratio = dense_cluster_spec(n_background=3000, n_cluster=800, seed=0)
pc = generate_scene(spec)
print(f"{len(pc)} points, cluster/background density ratio {ratio:.1f}")

grid, part = partition_cloud(pc.positions, PartitionConfig(target_area_count=64, num_parts=3))
print(json.dumps(partition_summary(grid, part), indent=2))

point_part = part.part_of_area[grid.area_of_point]
in_cluster = pc.labels == 1
for k in range(part.num_parts):
    share = (point_part[in_cluster] == k).mean()
    print(f"part {k}: window edge {part.window_edge_of_part[k]:.3f}, holds {share:.0%} of cluster points")

out = Path(__file__).with_name("partition_demo.ply")
pointcloud.save(pc, out, colors=part_colors(point_part, part.num_parts))
print("wrote", out)
assert np.all(np.diff(part.mean_density_of_part()) > 0), "parts are ordered sparse to dense"
