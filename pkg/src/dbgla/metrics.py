"""Confusion-matrix segmentation metrics: OA, mAcc, per-class IoU, mIoU."""

import json

import numpy as np

from .errors import ValidationError


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def accumulate(self, predictions, labels):
        predictions = np.asarray(predictions)
        labels = np.asarray(labels)
        if predictions.shape != labels.shape:
            raise ValidationError(f"{predictions.shape} predictions vs {labels.shape} labels")
        for name, arr in (("prediction", predictions), ("label", labels)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise ValidationError(f"{name} ids must lie in [0, {self.num_classes})")
        idx = labels.astype(np.int64) * self.num_classes + predictions.astype(np.int64)
        self.counts += np.bincount(idx.ravel(), minlength=self.num_classes**2).reshape(self.counts.shape)
        return self

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise ValidationError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def summarize(self):
        """Metric dict. Classes with a zero denominator are left out of the means
        and listed under ``excluded_acc`` / ``excluded_iou``."""
        if self.total == 0:
            raise ValidationError("confusion matrix is empty")
        cm = self.counts.astype(np.float64)
        diag = np.diag(cm)
        rows, cols = cm.sum(axis=1), cm.sum(axis=0)
        union = rows + cols - diag
        with np.errstate(invalid="ignore", divide="ignore"):
            acc = np.where(rows > 0, diag / rows, np.nan)
            iou = np.where(union > 0, diag / union, np.nan)
        return {
            "oa": float(diag.sum() / cm.sum()),
            "macc": float(np.nanmean(acc)) if np.isfinite(acc).any() else float("nan"),
            "miou": float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan"),
            "per_class_acc": acc,
            "per_class_iou": iou,
            "support": rows.astype(np.int64),
            "excluded_acc": [int(k) for k in np.flatnonzero(rows == 0)],
            "excluded_iou": [int(k) for k in np.flatnonzero(union == 0)],
        }

    def report(self, class_names=None):
        s = self.summarize()
        names = class_names or [str(k) for k in range(self.num_classes)]

        def num(x):
            return None if not np.isfinite(x) else float(x)

        return {
            "oa": s["oa"],
            "macc": num(s["macc"]),
            "miou": num(s["miou"]),
            "per_class": [
                {"id": k, "name": names[k], "iou": num(s["per_class_iou"][k]), "acc": num(s["per_class_acc"][k]),
                 "support": int(s["support"][k])}
                for k in range(self.num_classes)
            ],
        }

    def to_json(self, path, class_names=None):
        with open(path, "w") as fh:
            json.dump(self.report(class_names), fh, indent=2, sort_keys=True)
