"""Local window attention and the global area path on a small cloud.

Shows how many windows each density part gets, checks that every query's
attention weights sum to one, and that the global branch has one row per point.

    python demos/attention_demo.py
"""
import numpy as np

from dbgla import tensor as T
from dbgla.network import Model, ModelConfig, prepare
from dbgla.pointcloud import generate_scene, imbalanced_scene_spec

pc = generate_scene(imbalanced_scene_spec(400, seed=0))
cfg = ModelConfig.compact(num_classes=4)
plan = prepare(pc.positions, cfg, seed=0)
stage = plan.stages[0]
print(f"stage 0: {stage.grid.num_areas} areas in {stage.partition.num_parts} parts")
print("window edges per part:", np.round(stage.partition.window_edge_of_part, 3))
for name, batch in zip(("unshifted", "shifted"), stage.batches):
    print(f"{name}: {batch.query_index.shape[0]} windows, "
          f"up to {batch.query_index.shape[1]} queries and {batch.key_index.shape[1]} keys each")

model = Model(cfg, seed=0)
x = model.embed(T.Tensor(pc.positions - pc.positions.mean(0)))
block = model.stages[0].local[0]
_, weights = block(x, stage.positions, stage.batches[0], return_weights=True)
w = weights.data
valid = stage.batches[0].logit_bias[:, 0, 0, :] == 0
rows = w.sum(-1)
print(f"attention tensor {w.shape}; max |row sum - 1| = {np.abs(rows - 1).max():.1e}")
print(f"mean keys per window {valid.sum(-1).mean():.1f}")

glob = model.stages[0].glob(stage.positions, stage.grid, x)
print("global branch output", glob.shape)
