"""Small lambda x K grid on the imbalanced scene suite.

Each cell trains the compact model on a fresh synthetic scene and reports the
IoU of the rare class (label 3). Writes sweep_demo.csv next to this script.

    python demos/sweep_demo.py
"""
from pathlib import Path

from dbgla.network import ModelConfig
from dbgla.train import TrainConfig, run_sweep, write_sweep_csv

rows = run_sweep(ModelConfig.compact(num_classes=4), TrainConfig(iterations=60),
                 lams=[0.5, 1.0], parts=[1, 5], log=print)
for r in rows:
    print(f"seed {r.seed} lam {r.lam} K {r.num_parts}: OA {r.oa:.3f} mIoU {r.miou:.3f} "
          f"rare IoU {r.small_iou:.3f} {r.error}")
out = Path(__file__).with_name("sweep_demo.csv")
write_sweep_csv(rows, out)
print("wrote", out)
