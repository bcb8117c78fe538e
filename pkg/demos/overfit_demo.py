"""Train the compact model on one imbalanced scene and watch it overfit.

    python demos/overfit_demo.py
"""
from dbgla.network import ModelConfig
from dbgla.train import TrainConfig, evaluate, suite_scenes, train

scenes = suite_scenes(seed=0, n_points=500)
cfg = ModelConfig.compact(num_classes=4)


def log(entry):
    if entry["iteration"] % 10 == 0 or "val_miou" in entry:
        extra = f" val mIoU {entry['val_miou']:.3f}" if "val_miou" in entry else ""
        print(f"it {entry['iteration']:3d} lr {entry['lr']:.0e} total {entry['total']:.4f} "
              f"wce {entry['wce']:.4f} cr {entry['cr']:.4f}{extra}")


result = train(cfg, TrainConfig(iterations=100, seed=0), scenes, val_scenes=scenes, log=log)
summary = evaluate(result.model, scenes).summarize()
print(f"best iteration {result.best_iteration}: OA {summary['oa']:.3f} mIoU {summary['miou']:.3f}")
print("per-class IoU", [round(float(v), 3) for v in summary["per_class_iou"]])
