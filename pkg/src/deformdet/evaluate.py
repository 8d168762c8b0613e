"""Detection metrics: IoU, greedy matching, all-point AP, mAP@50 and mAP@50:95.

Classes with no ground truth in the evaluated set are left out of the class
mean and listed in ``EvalReport.excluded``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .head import BBox, Detection


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def iou_thresholds(upper: float = 0.95) -> list[float]:
    n = int(round((upper - 0.5) / 0.05)) + 1
    return [round(0.5 + 0.05 * k, 2) for k in range(n)]


def match_ranked(dets: list[tuple[str, Detection]], gts: dict[str, list[BBox]],
                 iou_thresh: float) -> np.ndarray:
    """True-positive flags for ``dets`` (already ranked) against ``gts`` per image.

    Each detection takes the highest-IoU still-unmatched ground truth with
    IoU >= ``iou_thresh``; equal IoUs go to the lower gt index.
    """
    used = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for k, (img, det) in enumerate(dets):
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gts.get(img, ())):
            if used[img][j]:
                continue
            v = iou(det.bbox, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[img][best] = True
            tp[k] = True
    return tp


def pr_curve(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def ap_from_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def rank(dets: list[tuple[str, Detection]]) -> list[tuple[str, Detection]]:
    # stable: equal scores keep input order
    return sorted(dets, key=lambda t: -t[1].score)


def average_precision(dets, gts, iou_thresh: float = 0.5) -> float:
    """AP for one class.

    ``dets`` is a ranked list of ``Detection`` (single image) or of
    ``(image_id, Detection)`` pairs; ``gts`` is a list of ``BBox`` or a dict
    ``image_id -> list[BBox]``.
    """
    if isinstance(gts, dict):
        pairs, gt_map = dets, gts
    else:
        pairs = [("0", d) for d in dets]
        gt_map = {"0": list(gts)}
    n_gt = sum(len(v) for v in gt_map.values())
    if n_gt == 0:
        return 0.0
    tp = match_ranked(pairs, gt_map, iou_thresh)
    return ap_from_pr(*pr_curve(tp, n_gt))


@dataclass
class EvalReport:
    thresholds: list[float]
    per_class_ap: dict[int, dict[float, float]]
    map50: float
    map5095: float
    pr_curves: dict[int, list[tuple[float, float]]] = field(default_factory=dict)
    excluded: list[int] = field(default_factory=list)
    class_names: dict[int, str] = field(default_factory=dict)

    def class_mean(self, c: int) -> float:
        return float(np.mean([self.per_class_ap[c][t] for t in self.thresholds]))

    def table(self) -> str:
        head = ["class", "AP50", f"AP50:{int(round(self.thresholds[-1] * 100))}"]
        rows = [head]
        for c in sorted(self.per_class_ap):
            name = self.class_names.get(c, str(c))
            rows.append([name, f"{self.per_class_ap[c][0.5]:.4f}", f"{self.class_mean(c):.4f}"])
        for c in self.excluded:
            rows.append([self.class_names.get(c, str(c)), "n/a", "n/a"])
        rows.append(["mAP", f"{self.map50:.4f}", f"{self.map5095:.4f}"])
        width = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(v.ljust(width[i]) for i, v in enumerate(r)) for r in rows]
        if self.excluded:
            lines.append("classes without ground truth (excluded from mean): "
                         + ",".join(map(str, self.excluded)))
        return "\n".join(lines) + "\n"

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "recall", "precision"])
            for c in sorted(self.pr_curves):
                for r, p in self.pr_curves[c]:
                    writer.writerow([c, f"{r:.10g}", f"{p:.10g}"])


def evaluate(dets: dict[str, list[Detection]], gts: dict[str, list[BBox]],
             classes, upper: float = 0.95, class_names: dict[int, str] | None = None) -> EvalReport:
    classes = list(classes)
    known = set(classes)
    for img, items in dets.items():
        for d in items:
            if d.class_id not in known:
                raise ValueError(f"unknown class id {d.class_id} in detections for {img}")
    for img, boxes in gts.items():
        for g in boxes:
            if g.class_id not in known:
                raise ValueError(f"unknown class id {g.class_id} in ground truth for {img}")
    thresholds = iou_thresholds(upper)
    per_class, curves, excluded = {}, {}, []
    for c in classes:
        gt_c = {img: [g for g in boxes if g.class_id == c] for img, boxes in gts.items()}
        n_gt = sum(len(v) for v in gt_c.values())
        if n_gt == 0:
            excluded.append(c)
            continue
        ranked = rank([(img, d) for img in sorted(dets) for d in dets[img] if d.class_id == c])
        per_class[c] = {}
        for t in thresholds:
            rec, prec = pr_curve(match_ranked(ranked, gt_c, t), n_gt)
            per_class[c][t] = ap_from_pr(rec, prec)
            if t == 0.5:
                curves[c] = list(zip(rec.tolist(), prec.tolist()))
    if per_class:
        map50 = float(np.mean([per_class[c][0.5] for c in per_class]))
        map5095 = float(np.mean([per_class[c][t] for c in per_class for t in thresholds]))
    else:
        map50 = map5095 = 0.0
    return EvalReport(thresholds, per_class, map50, map5095, curves, excluded,
                      dict(class_names or {}))
