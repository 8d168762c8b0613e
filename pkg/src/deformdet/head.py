"""Anchor-free decoupled detection head: targets, loss, decoding and NMS.

Box regression layout per cell (channel order): ``sigmoid(t0)``/``sigmoid(t1)``
give the centre's fractional x/y position inside the cell; ``t2``/``t3`` are
``log w`` / ``log h`` with sizes normalised to the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Conv, ParamStore
from .tensor import ShapeError

PRIOR_PROB = 0.01
LOG_SIZE_PRIOR = math.log(0.2)


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float

    @property
    def class_id(self) -> int:
        return self.bbox.class_id


@dataclass
class HeadOutput:
    cls: dict[int, np.ndarray]  # level -> (B, K, h, w) logits
    box: dict[int, np.ndarray]  # level -> (B, 4, h, w) raw regression

    @property
    def levels(self) -> list[int]:
        return sorted(self.cls)


@dataclass
class Targets:
    cls: dict[int, np.ndarray]
    box: dict[int, np.ndarray]
    pos: dict[int, np.ndarray]  # (B, h, w) bool
    image_size: tuple[int, int]
    assigned: list[list[tuple[int, int, int, BBox]]] = field(default_factory=list)


class Head:
    def __init__(self, store: ParamStore, levels, in_channels: int, num_classes: int):
        self.levels = list(levels)
        self.num_classes = num_classes
        self.branches = {}
        prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        for i in self.levels:
            p = f"head.l{i}"
            stage = f"head{i}"
            self.branches[i] = (
                Conv(store, f"{p}.cls.conv", in_channels, in_channels, 3, stage=stage),
                Conv(store, f"{p}.cls.pred", in_channels, num_classes, 1, act=False,
                     stage=stage, gain=0.1, bias_init=prior),
                Conv(store, f"{p}.box.conv", in_channels, in_channels, 3, stage=stage),
                Conv(store, f"{p}.box.pred", in_channels, 4, 1, act=False, stage=stage,
                     gain=0.1),
            )
            store[f"{p}.box.pred.bias"][2:] = LOG_SIZE_PRIOR

    def forward(self, N: dict[int, np.ndarray]) -> HeadOutput:
        cls, box = {}, {}
        for i in self.levels:
            if i not in N:
                raise ShapeError(f"head expects level {i}")
            cconv, cpred, bconv, bpred = self.branches[i]
            cls[i] = cpred.forward(cconv.forward(N[i]))
            box[i] = bpred.forward(bconv.forward(N[i]))
        return HeadOutput(cls, box)

    def backward(self, d_cls: dict[int, np.ndarray], d_box: dict[int, np.ndarray]):
        out = {}
        for i in self.levels:
            cconv, cpred, bconv, bpred = self.branches[i]
            out[i] = cconv.backward(cpred.backward(d_cls[i])) + bconv.backward(
                bpred.backward(d_box[i]))
        return out


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p: float) -> float:
    p = min(max(p, 1e-15), 1 - 1e-15)
    return math.log(p / (1 - p))


def select_level(box: BBox, image_size: tuple[int, int], levels) -> int:
    """Pyramid level whose stride is about half the box's side length."""
    h, w = image_size
    side = math.sqrt(box.w * box.h * h * w)
    level = math.floor(math.log2(max(side, 1e-12)) + 0.5) - 1
    return min(max(level, min(levels)), max(levels))


def cell_of(box: BBox, level: int, image_size: tuple[int, int]) -> tuple[int, int]:
    h, w = image_size
    stride = 2 ** level
    rows, cols = h // stride, w // stride
    row = min(int(box.cy * h // stride), rows - 1)
    col = min(int(box.cx * w // stride), cols - 1)
    return row, col


def encode_box(box: BBox, level: int, image_size: tuple[int, int]) -> np.ndarray:
    """Target ``(frac_x, frac_y, log w, log h)`` for the cell owning the box centre."""
    h, w = image_size
    stride = 2 ** level
    row, col = cell_of(box, level, image_size)
    return np.array([box.cx * w / stride - col, box.cy * h / stride - row,
                     math.log(box.w), math.log(box.h)])


def raw_from_target(target: np.ndarray) -> np.ndarray:
    """Regression outputs that decode exactly to ``target``."""
    return np.array([_logit(target[0]), _logit(target[1]), target[2], target[3]])


def assign_targets(gts: list[list[BBox]], levels, image_size: tuple[int, int],
                   num_classes: int) -> Targets:
    levels = sorted(levels)
    h, w = image_size
    b = len(gts)
    cls, box, pos, area = {}, {}, {}, {}
    for i in levels:
        s = 2 ** i
        cls[i] = np.zeros((b, num_classes, h // s, w // s))
        box[i] = np.zeros((b, 4, h // s, w // s))
        pos[i] = np.zeros((b, h // s, w // s), dtype=bool)
        area[i] = np.full((b, h // s, w // s), -1.0)
    assigned = []
    for n, boxes in enumerate(gts):
        owner = {}
        for g in boxes:
            if not 0 <= g.class_id < num_classes:
                raise ValueError(f"class id {g.class_id} outside 0..{num_classes - 1}")
            lv = select_level(g, image_size, levels)
            r, c = cell_of(g, lv, image_size)
            if g.area > area[lv][n, r, c]:
                area[lv][n, r, c] = g.area
                owner[(lv, r, c)] = g
        for (lv, r, c), g in sorted(owner.items()):
            cls[lv][n, :, r, c] = 0.0
            cls[lv][n, g.class_id, r, c] = 1.0
            box[lv][n, :, r, c] = encode_box(g, lv, image_size)
            pos[lv][n, r, c] = True
        assigned.append([(lv, r, c, g) for (lv, r, c), g in sorted(owner.items())])
    return Targets(cls, box, pos, image_size, assigned)


def _smooth_l1(x, beta):
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def _smooth_l1_grad(x, beta):
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def compute_loss(pred: HeadOutput, targets: Targets, cls_weight: float = 1.0,
                 box_weight: float = 5.0, beta: float = 1.0 / 9.0, with_grad: bool = False):
    """Class-balanced BCE over every (cell, class) plus smooth-L1 on positive cells.

    The classification term averages BCE separately over positive and negative
    (cell, class) entries and takes the mean of the two, so it equals ln 2 for
    all-zero logits whether or not any box is present.  The box term is summed
    over positive cells and divided by their count.

    Returns ``(total, cls, box)``, and with ``with_grad`` also the gradient
    dicts ``(d_cls, d_box)`` of ``total`` w.r.t. the head outputs.
    """
    n_all = sum(pred.cls[i].size for i in pred.levels)
    n_pos_el = int(sum(targets.cls[i].sum() for i in pred.levels))
    n_pos = sum(int(targets.pos[i].sum()) for i in pred.levels)
    if n_pos_el:
        w_pos, w_neg = 0.5 / n_pos_el, 0.5 / (n_all - n_pos_el)
    else:
        w_pos = w_neg = 1.0 / n_all
    box_norm = max(n_pos, 1)
    cls_loss = box_loss = 0.0
    d_cls, d_box = {}, {}
    for i in pred.levels:
        z, t = pred.cls[i], targets.cls[i]
        if z.shape != t.shape:
            raise ShapeError(f"level {i}: logits {z.shape} vs targets {t.shape}")
        weight = np.where(t > 0, w_pos, w_neg)
        # stable BCE-with-logits
        bce = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
        cls_loss += float((weight * bce).sum())
        raw, tb = pred.box[i], targets.box[i]
        mask = targets.pos[i][:, None, :, :]
        sxy = sigmoid(raw[:, :2])
        diff = np.concatenate([sxy - tb[:, :2], raw[:, 2:] - tb[:, 2:]], axis=1) * mask
        box_loss += float(_smooth_l1(diff, beta).sum())
        if with_grad:
            d_cls[i] = cls_weight * weight * (sigmoid(z) - t)
            g = _smooth_l1_grad(diff, beta) * mask * (box_weight / box_norm)
            g[:, :2] *= sxy * (1.0 - sxy)
            d_box[i] = g
    box_loss /= box_norm
    total = cls_weight * cls_loss + box_weight * box_loss
    if with_grad:
        return total, cls_loss, box_loss, d_cls, d_box
    return total, cls_loss, box_loss


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner boxes ``(x0, y0, x1, y1)``."""
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS over boxes already in rank order; returns kept indices."""
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in range(len(boxes)):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = np.arange(i + 1, len(boxes))
        rest = rest[~suppressed[rest]]
        if rest.size:
            ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
            suppressed[rest[ious >= iou_thresh]] = True
    return keep


def decode(pred: HeadOutput, score_thresh: float = 0.05, iou_thresh: float = 0.5,
           image_size: tuple[int, int] | None = None, max_det: int = 100) -> list[list[Detection]]:
    """Per-image detections sorted by descending score after class-wise NMS."""
    if not (0 <= score_thresh <= 1 and 0 <= iou_thresh <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    levels = pred.levels
    if image_size is None:
        lo = levels[0]
        image_size = (pred.cls[lo].shape[2] * 2 ** lo, pred.cls[lo].shape[3] * 2 ** lo)
    h, w = image_size
    batch = pred.cls[levels[0]].shape[0]
    results = []
    for n in range(batch):
        rows = []  # (-score, level, row, col, class, cx, cy, bw, bh)
        for i in levels:
            s = 2 ** i
            scores = sigmoid(pred.cls[i][n])
            k, r, c = np.nonzero(scores > score_thresh)
            if not k.size:
                continue
            raw = pred.box[i][n][:, r, c]
            cx = (c + sigmoid(raw[0])) * s / w
            cy = (r + sigmoid(raw[1])) * s / h
            bw = np.clip(np.exp(raw[2]), 1e-9, 1.0)
            bh = np.clip(np.exp(raw[3]), 1e-9, 1.0)
            for j in range(k.size):
                rows.append((-scores[k[j], r[j], c[j]], i, r[j], c[j], k[j],
                             cx[j], cy[j], bw[j], bh[j]))
        rows.sort(key=lambda t: t[:5])
        kept = []
        for cls_id in sorted({int(t[4]) for t in rows}):
            group = [t for t in rows if t[4] == cls_id]
            corners = np.array([[t[5] - t[7] / 2, t[6] - t[8] / 2, t[5] + t[7] / 2,
                                 t[6] + t[8] / 2] for t in group])
            kept.extend(group[j] for j in nms(corners, iou_thresh))
        kept.sort(key=lambda t: t[:5])
        results.append([Detection(BBox(float(t[5]), float(t[6]), float(t[7]), float(t[8]),
                                       int(t[4])), float(-t[0])) for t in kept[:max_det]])
    return results


def write_detections(path, detections: dict[str, list[Detection]]) -> None:
    with open(path, "w") as fh:
        for image_id, dets in detections.items():
            for d in dets:
                b = d.bbox
                fh.write(f"{image_id} {b.class_id} {d.score:.10g} {b.cx:.10g} {b.cy:.10g} "
                         f"{b.w:.10g} {b.h:.10g}\n")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            box = BBox(*map(float, parts[3:]), class_id=int(parts[1]))
            det = Detection(box, float(parts[2]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        out.setdefault(parts[0], []).append(det)
    return out
