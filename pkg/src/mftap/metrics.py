"""IoU / Dice scoring and mean +- std aggregation over frames.

Empty-class convention: a positive class absent from both prediction and
ground truth is left out of the frame mean; absent from only one side it
scores 0. A frame with no positive class on either side scores 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mftap.errors import ShapeError


@dataclass
class FrameScore:
    iou: float
    dice: float
    per_class_iou: dict[int, float]
    per_class_dice: dict[int, float]


def _overlaps(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ", axis="height")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"{name} has ids outside [0, {num_classes - 1}]")
    for c in range(1, num_classes):
        a, b = pred == c, gt == c
        inter = int(np.count_nonzero(a & b))
        sa, sb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
        yield c, inter, sa, sb


def iou(pred: np.ndarray, gt: np.ndarray, num_classes: int = 2) -> tuple[dict[int, float], float]:
    per = {}
    for c, inter, sa, sb in _overlaps(pred, gt, num_classes):
        union = sa + sb - inter
        if union:
            per[c] = inter / union
    return per, (float(np.mean(list(per.values()))) if per else 1.0)


def dice(pred: np.ndarray, gt: np.ndarray, num_classes: int = 2) -> tuple[dict[int, float], float]:
    per = {}
    for c, inter, sa, sb in _overlaps(pred, gt, num_classes):
        if sa + sb:
            per[c] = 2.0 * inter / (sa + sb)
    return per, (float(np.mean(list(per.values()))) if per else 1.0)


def score_frame(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> FrameScore:
    pi, mi = iou(pred, gt, num_classes)
    pd, md = dice(pred, gt, num_classes)
    return FrameScore(iou=mi, dice=md, per_class_iou=pi, per_class_dice=pd)


@dataclass
class MetricReport:
    frame_iou: list[float]
    frame_dice: list[float]
    iou_mean: float
    iou_std: float
    dice_mean: float
    dice_std: float
    class_iou: dict[int, float] = field(default_factory=dict)
    class_dice: dict[int, float] = field(default_factory=dict)
    task: str = "binary"
    label: str = ""


def mean_std(values) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty list of scores")
    m = float(v.mean())
    return m, float(np.sqrt(np.mean((v - m) ** 2)))


def aggregate(scores: list[FrameScore], task: str = "binary", label: str = "") -> MetricReport:
    if not scores:
        raise ValueError("cannot aggregate an empty list of frame scores")
    ious = [s.iou for s in scores]
    dices = [s.dice for s in scores]
    im, isd = mean_std(ious)
    dm, dsd = mean_std(dices)
    classes = sorted({c for s in scores for c in s.per_class_iou})
    class_iou = {c: mean_std([s.per_class_iou[c] for s in scores if c in s.per_class_iou])[0] for c in classes}
    class_dice = {c: mean_std([s.per_class_dice[c] for s in scores if c in s.per_class_dice])[0] for c in classes}
    return MetricReport(ious, dices, im, isd, dm, dsd, class_iou, class_dice, task, label)


def write_csv(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "iou", "dice"])
        for k, (a, b) in enumerate(zip(report.frame_iou, report.frame_dice)):
            w.writerow([k, repr(a), repr(b)])
        w.writerow(["mean", repr(report.iou_mean), repr(report.dice_mean)])
        w.writerow(["std", repr(report.iou_std), repr(report.dice_std)])
        for c in report.class_iou:
            w.writerow([f"class{c}", repr(report.class_iou[c]), repr(report.class_dice[c])])


def format_table(reports: list[MetricReport]) -> str:
    """Plain-text table, one row per method, IoU and Dice in percent as mean+-std."""
    rows = [("Method", "Task", "IoU (%)", "Dice (%)")]
    for r in reports:
        rows.append(
            (
                r.label or "-",
                r.task,
                f"{100 * r.iou_mean:.2f}+-{100 * r.iou_std:.2f}",
                f"{100 * r.dice_mean:.2f}+-{100 * r.dice_std:.2f}",
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for k, row in enumerate(rows):
        lines.append(" | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
        if k == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def is_finite(report: MetricReport) -> bool:
    return all(math.isfinite(x) for x in (report.iou_mean, report.dice_mean))
