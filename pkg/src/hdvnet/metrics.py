"""IoU metrics, overall and per density state."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .density import inherent_state
from .errors import EmptySlice, ShapeError

STATE_COLUMNS = ("I5", "I4", "I3", "I2", "I1", "I0")
COLUMNS = ("All",) + STATE_COLUMNS


def confusion(pred, labels, k: int, mask=None) -> np.ndarray:
    """``C[true, pred]`` counts over the (masked) points."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ShapeError("predictions and labels differ in length")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred, labels = pred[mask], labels[mask]
    return np.bincount(labels * k + pred, minlength=k * k).reshape(k, k)


@dataclass
class IoUResult:
    iou: Dict[int, float]  # only classes present in labels or predictions
    miou: float
    n: int
    absent: List[int]


def miou(pred, labels, k: Optional[int] = None, mask=None) -> IoUResult:
    """Mean IoU over classes that occur in the labels or predictions of the slice."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if k is None:
        k = int(max(pred.max(initial=-1), labels.max(initial=-1))) + 1
    cm = confusion(pred, labels, k, mask)
    n = int(cm.sum())
    if n == 0:
        raise EmptySlice("no points in this slice")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = np.flatnonzero(union > 0)
    iou = {int(c): float(tp[c] / union[c]) for c in present}
    absent = [int(c) for c in range(k) if c not in iou]
    return IoUResult(iou=iou, miou=float(np.mean(list(iou.values()))), n=n, absent=absent)


@dataclass
class MetricsTable:
    """One method's row: joint MIoU plus one column per density state.

    A column with no points holds ``None`` and renders as ``n/a``.
    """

    miou: Dict[str, Optional[float]]
    proportion: Dict[str, float]  # percent of points per column
    class_iou: Dict[str, Dict[int, float]]
    counts: Dict[str, int]
    class_count: int
    absent: Dict[str, List[int]] = field(default_factory=dict)

    def weighted_average(self) -> float:
        """Proportion-weighted mean of the per-state MIoUs (what "All" is not)."""
        num = sum(self.proportion[c] * self.miou[c] for c in STATE_COLUMNS if self.miou[c] is not None)
        den = sum(self.proportion[c] for c in STATE_COLUMNS if self.miou[c] is not None)
        return num / den

    def to_csv(self, name="model") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + list(COLUMNS))
        w.writerow(["proportion_pct"] + [f"{self.proportion[c]:.6g}" for c in COLUMNS])
        w.writerow([f"{name}_miou_pct"] + [_fmt(self.miou[c]) for c in COLUMNS])
        for cls in range(self.class_count):
            w.writerow([f"{name}_iou_class{cls}_pct"]
                       + [_fmt(self.class_iou[c].get(cls)) for c in COLUMNS])
        return buf.getvalue()

    def to_markdown(self, name="model") -> str:
        return render_markdown({name: self})


def _fmt(v) -> str:
    return "n/a" if v is None else f"{100.0 * v:.2f}"


def render_markdown(tables: Dict[str, MetricsTable]) -> str:
    first = next(iter(tables.values()))
    lines = ["| | " + " | ".join(COLUMNS) + " |", "|" + "---|" * (len(COLUMNS) + 1)]
    lines.append("| Proportion of scene | "
                 + " | ".join(f"{first.proportion[c]:.3g}%" for c in COLUMNS) + " |")
    for name, t in tables.items():
        lines.append(f"| {name} | " + " | ".join(_fmt(t.miou[c]) for c in COLUMNS) + " |")
    absent = {c: v for c, v in first.absent.items() if v}
    if absent:
        note = "; ".join(f"{c}: classes {v}" for c, v in absent.items())
        lines.append("")
        lines.append(f"Absent classes excluded from the mean: {note}")
    return "\n".join(lines) + "\n"


def per_density_report(pred, labels, states_or_rho, thresholds=None,
                       class_count: Optional[int] = None) -> MetricsTable:
    """Joint MIoU and one MIoU per inherent state.

    ``states_or_rho`` holds states directly, or densities when ``thresholds``
    is given.
    """
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    states = (np.asarray(states_or_rho, dtype=np.int64) if thresholds is None
              else inherent_state(states_or_rho, thresholds))
    if states.shape != labels.shape:
        raise ShapeError("one state per point")
    k = class_count or int(max(pred.max(initial=0), labels.max(initial=0))) + 1
    n = labels.size
    masks = {"All": np.ones(n, dtype=bool)}
    for c in STATE_COLUMNS:
        masks[c] = states == int(c[1])
    out_miou, prop, cls_iou, counts, absent = {}, {}, {}, {}, {}
    for c, m in masks.items():
        counts[c] = int(m.sum())
        prop[c] = 100.0 * counts[c] / n if n else 0.0
        try:
            r = miou(pred, labels, k, m)
            out_miou[c], cls_iou[c], absent[c] = r.miou, r.iou, r.absent
        except EmptySlice:
            out_miou[c], cls_iou[c], absent[c] = None, {}, []
    return MetricsTable(miou=out_miou, proportion=prop, class_iou=cls_iou, counts=counts,
                        class_count=k, absent=absent)
