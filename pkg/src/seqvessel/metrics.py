"""Segmentation quality metrics and their CSV emission."""

from dataclasses import dataclass

import numpy as np


def _as_binary(name, m):
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} mask must be binary (0/1)")
    return m != 0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_masks(cls, pred, gt):
        pred = _as_binary("predicted", pred)
        gt = _as_binary("ground-truth", gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
        return cls(
            tp=int(np.count_nonzero(pred & gt)),
            fp=int(np.count_nonzero(pred & ~gt)),
            tn=int(np.count_nonzero(~pred & ~gt)),
            fn=int(np.count_nonzero(~pred & gt)),
        )

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsRecord:
    dr: float
    precision: float
    f: float
    gve_percent: float | None = None


def binarize(p, threshold=0.5):
    """Threshold probabilities: 1 where p >= threshold.  Idempotent."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(p) >= threshold).astype(np.float32)


def segmentation_metrics(pred, gt) -> MetricsRecord:
    """Detection rate TP/(TP+FN), precision TP/(TP+FP), and their harmonic mean.

    Empty-set conventions keep the metrics total: a side with an empty
    denominator scores 1 when the prediction agrees it is empty and 0
    otherwise; F is 0 when DR + P is 0.
    """
    c = ConfusionCounts.from_masks(pred, gt)
    if c.tp + c.fn == 0:
        dr = 1.0 if c.fp == 0 else 0.0
    else:
        dr = c.tp / (c.tp + c.fn)
    if c.tp + c.fp == 0:
        precision = 1.0 if c.fn == 0 else 0.0
    else:
        precision = c.tp / (c.tp + c.fp)
    f = 0.0 if dr + precision == 0 else 2.0 * dr * precision / (dr + precision)
    return MetricsRecord(dr=dr, precision=precision, f=f)


def gve(pred, gt) -> float:
    """Relative positive-pixel-count error |V(gt) - V(pred)| / V(gt) * 100."""
    pred = _as_binary("predicted", pred)
    gt = _as_binary("ground-truth", gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    v_gt = int(np.count_nonzero(gt))
    if v_gt == 0:
        raise ValueError("empty ground truth")
    v_pred = int(np.count_nonzero(pred))
    return abs(v_gt - v_pred) / v_gt * 100.0


def metrics_csv(rows) -> str:
    """Render (sample_id, MetricsRecord) pairs as CSV, six decimals, '\\n' rows."""
    lines = ["sample_id,DR,P,F,GVE"]
    for sample_id, rec in rows:
        g = float("nan") if rec.gve_percent is None else rec.gve_percent
        lines.append(f"{sample_id},{rec.dr:.6f},{rec.precision:.6f},{rec.f:.6f},{g:.6f}")
    return "\n".join(lines) + "\n"
