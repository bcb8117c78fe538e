"""Weighted cross-entropy, category-response loss and their blend.

``wce_loss`` weighs each point's log-likelihood by an inverse-frequency class
weight. ``cr_loss`` is a binary cross-entropy on class-presence predictions
summed over classes and divided by the number of points only, so its scale
grows with the class count. ``total_loss`` blends the two as
``lam * wce + (1 - lam) * cr``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError

PROB_EPS = 1e-12
PRESENCE_MODES = ("scene", "point")


def compute_class_weights(histograms, num_classes, smoothing=1.0, cap=None):
    """Inverse-frequency weights normalised to mean 1.

    ``histograms`` is one count vector or a list of them (e.g. one per
    sampled scene). Classes never seen get the largest observed weight,
    optionally capped.
    """
    hist = np.atleast_2d(np.asarray(histograms, dtype=np.float64))
    if hist.shape[1] != num_classes:
        raise ValidationError(f"histogram has {hist.shape[1]} classes, expected {num_classes}")
    counts = hist.sum(axis=0)
    total = counts.sum()
    if total <= 0:
        raise ValidationError("class histogram is empty")
    present = counts > 0
    w = np.empty(num_classes)
    w[present] = total / (num_classes * (counts[present] + smoothing))
    fill = w[present].max()
    if cap is not None:
        fill = min(fill, cap)
    w[~present] = fill
    return w / w.mean()


def _check_labels(labels, n, c):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def wce_loss(logits, labels, weights):
    """``-(1/N) sum_i w[y_i] log p_i[y_i]`` with p clamped to [1e-12, 1]."""
    logits = T.as_tensor(logits)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (c,):
        raise ShapeError(f"{weights.shape} class weights for {c} classes")
    logp = T.clip(T.log_softmax(logits, axis=-1), math.log(PROB_EPS), 0.0)
    picked = T.getitem(logp, (np.arange(n), labels))
    return T.mul(T.sum(T.mul(picked, weights[labels])), -1.0 / n)


def cr_loss(presence_probs, presence_labels):
    """Binary cross-entropy summed over points and classes, divided by N."""
    probs = T.as_tensor(presence_probs)
    target = np.asarray(presence_labels, dtype=np.float64)
    if probs.shape != target.shape or probs.ndim != 2:
        raise ShapeError(f"presence probabilities {probs.shape} vs labels {target.shape}")
    p = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = T.add(T.mul(T.log(p), target), T.mul(T.log(T.sub(1.0, p)), 1.0 - target))
    return T.mul(T.sum(ll), -1.0 / probs.shape[0])


def build_presence_labels(labels, num_classes, mode="scene"):
    """Per-point one-hot rows, or the scene's class indicator on every row."""
    labels = np.asarray(labels, dtype=np.int64)
    if mode not in PRESENCE_MODES:
        raise ValidationError(f"presence mode must be one of {PRESENCE_MODES}")
    onehot = np.zeros((len(labels), num_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    if mode == "point":
        return onehot
    return np.broadcast_to(onehot.max(axis=0), onehot.shape).copy()


@dataclass
class LossReport:
    total: float
    wce: float
    cr: float
    lam: float
    presence_mode: str = "scene"
    tensor: T.Tensor = None

    def as_dict(self):
        return {"total": self.total, "wce": self.wce, "cr": self.cr, "lam": self.lam,
                "presence_mode": self.presence_mode}


def total_loss(wce, cr, lam, presence_mode="scene"):
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    wce, cr = T.as_tensor(wce), T.as_tensor(cr)
    combined = T.add(T.mul(wce, lam), T.mul(cr, 1.0 - lam))
    return LossReport(float(combined.data), float(wce.data), float(cr.data), float(lam), presence_mode, combined)
