"""Confusion matrix, IoU / mIoU / accuracy, and expected calibration error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pseudo_label import VOID


def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int, void: int = VOID) -> np.ndarray:
    """K x K counts, rows = ground truth, columns = prediction; void truth cells skipped."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    t = truth.ravel().astype(np.int64)
    p = pred.ravel().astype(np.int64)
    keep = t != void
    t, p = t[keep], p[keep]
    if t.size and (t.max() >= num_classes or t.min() < 0):
        raise ValueError(f"truth label outside [0, {num_classes})")
    if p.size and (p.max() >= num_classes or p.min() < 0):
        raise ValueError(f"predicted label outside [0, {num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass(frozen=True)
class Metrics:
    iou: dict[int, float]  # only classes with ground-truth support
    miou: float | None
    accuracy: float | None
    total: int

    def records(self) -> list[tuple[str, float]]:
        """Flat (name, value) pairs; absent metrics are omitted."""
        out = []
        if self.miou is not None:
            out.append(("miou", self.miou))
        if self.accuracy is not None:
            out.append(("accuracy", self.accuracy))
        out.extend((f"iou_class_{k}", v) for k, v in sorted(self.iou.items()))
        out.append(("cells", float(self.total)))
        return out


def metrics(cm: np.ndarray) -> Metrics:
    """Per-class IoU, mIoU and accuracy.

    A class's support is its number of ground-truth cells; classes without
    support get no IoU and are left out of the mIoU mean.  Their false
    positives still lower the IoU of the classes they were confused with.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        return Metrics({}, None, None, 0)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    support = cm.sum(axis=1)
    iou = {k: float(tp[k] / denom[k]) for k in range(len(tp)) if support[k] > 0}
    miou = float(np.mean(list(iou.values()))) if iou else None
    return Metrics(iou, miou, float(tp.sum() / total), total)


def ece(confidences: np.ndarray, correct: np.ndarray, bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins.

    Bins are [i/B, (i+1)/B) except the last, which also includes 1.0.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness flags differ in length")
    n = len(conf)
    if n == 0:
        return 0.0
    edges = np.arange(bins + 1) / bins
    b = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, bins - 1)
    count = np.bincount(b, minlength=bins)
    conf_sum = np.bincount(b, weights=conf, minlength=bins)
    acc_sum = np.bincount(b, weights=corr, minlength=bins)
    used = count > 0
    gap = np.abs(acc_sum[used] - conf_sum[used]) / count[used]
    return float(np.sum(count[used] / n * gap))


def format_report(m: Metrics, extra: dict[str, float] | None = None) -> str:
    """key=value lines, one metric per line."""
    lines = [f"{name}={value:.10g}" for name, value in m.records()]
    if extra:
        lines.extend(f"{k}={v:.10g}" for k, v in extra.items())
    return "\n".join(lines) + "\n"
