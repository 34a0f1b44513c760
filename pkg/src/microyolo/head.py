"""Grid-cell detection head: target encoding, the multi-part regression
loss with analytic gradients, output decoding, IoU and NMS.

The head output is a flat vector of length S*S*(B*5 + C); per cell the
layout is B blocks of (x, y, w, h, confidence) followed by C class scores.
Box x,y are relative to the cell, w,h relative to the whole image.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Box:
    """Ground-truth box in normalized center-size image coordinates."""
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def validate(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size out of range: ({self.w}, {self.h})")
        return self


@dataclass
class Detection:
    """Decoded detection; coordinates clamped to [0,1], score = conf * class."""
    cx: float
    cy: float
    w: float
    h: float
    class_id: int
    score: float


@dataclass
class GridTarget:
    """Per-cell encoding of ground truth for an S x S grid with C classes."""
    grid: int
    num_classes: int
    obj: np.ndarray = None        # (S,S) bool
    tx: np.ndarray = None         # (S,S) cell-relative center x in [0,1)
    ty: np.ndarray = None
    tw: np.ndarray = None         # (S,S) image-relative size
    th: np.ndarray = None
    cls: np.ndarray = None        # (S,S,C) one-hot
    boxes: list = field(default_factory=list)   # encoded boxes, one per cell

    def __post_init__(self):
        s, c = self.grid, self.num_classes
        if self.obj is None:
            self.obj = np.zeros((s, s), dtype=bool)
            self.tx = np.zeros((s, s), dtype=np.float32)
            self.ty = np.zeros((s, s), dtype=np.float32)
            self.tw = np.zeros((s, s), dtype=np.float32)
            self.th = np.zeros((s, s), dtype=np.float32)
            self.cls = np.zeros((s, s, c), dtype=np.float32)


def _cell_index(v, s):
    """Half-open cell assignment [i/S,(i+1)/S); a center at 1.0 maps to S-1."""
    return min(int(v * s), s - 1)


def encode_targets(boxes, grid, num_classes):
    """Assign each box to the cell containing its center.

    At most one object per cell: the first box (in input order) wins and
    later boxes falling into the same cell are dropped.
    """
    t = GridTarget(grid=grid, num_classes=num_classes)
    for box in boxes:
        box.validate()
        if box.class_id >= num_classes:
            raise ValueError(
                f"class id {box.class_id} out of range for {num_classes} classes")
        row = _cell_index(box.cy, grid)
        col = _cell_index(box.cx, grid)
        if t.obj[row, col]:
            continue
        t.obj[row, col] = True
        t.tx[row, col] = box.cx * grid - col
        t.ty[row, col] = box.cy * grid - row
        t.tw[row, col] = box.w
        t.th[row, col] = box.h
        t.cls[row, col, box.class_id] = 1.0
        t.boxes.append(box)
    return t


def iou(a, b):
    """Intersection over union of two center-size boxes; 0 when disjoint."""
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class _RawBox:
    """Unvalidated center-size box used for IoU during loss computation."""
    cx: float
    cy: float
    w: float
    h: float


def _pred_box(cell_pred, row, col, grid):
    """Decode one predictor's (x,y,w,h) to absolute coords; w,h clamped >= 0."""
    x, y, w, h = cell_pred[:4]
    return _RawBox(cx=(col + float(x)) / grid, cy=(row + float(y)) / grid,
                   w=max(float(w), 0.0), h=max(float(h), 0.0))


def _responsible(cell_pred, target_box, boxes_per_cell, row, col, grid):
    """Index and IoU of the predictor with highest IoU; ties -> lower index."""
    best_j, best_iou = 0, -1.0
    for j in range(boxes_per_cell):
        pb = _pred_box(cell_pred[j * 5:], row, col, grid)
        v = iou(pb, target_box)
        if v > best_iou:
            best_j, best_iou = j, v
    return best_j, max(best_iou, 0.0)


def yolo_loss(pred, target, boxes_per_cell, lambda_coord=5.0, lambda_noobj=0.5):
    """Sum-squared detection loss and its gradient w.r.t. the flat prediction.

    Per object cell, the predictor with highest IoU against the target is
    responsible: its coordinates (with square roots on w,h), its confidence
    (target = that IoU) and the cell's class scores enter the loss. Every
    other predictor's confidence is pulled to zero with weight lambda_noobj.

    The returned gradient differentiates the sum-squared error with the
    responsibility assignment and the confidence labels held fixed at their
    current values, the way this loss family is trained in practice (the
    labels are recomputed every call, but no gradient flows through them).
    Negative predicted w,h are clamped to zero inside the square root and
    receive zero gradient.
    """
    s, b, c = target.grid, boxes_per_cell, target.num_classes
    width = b * 5 + c
    if pred.size != s * s * width:
        raise ValueError(
            f"prediction length {pred.size} does not match grid {s}, "
            f"{b} boxes, {c} classes")
    p = np.asarray(pred, np.float32).reshape(s, s, width)
    g = np.zeros_like(p)

    # responsibility first, so the no-object sum can exclude those slots
    # outright (keeps the loss exactly non-negative)
    responsible = []
    for row, col in np.argwhere(target.obj):
        cell = p[row, col]
        tb = Box(cx=(col + float(target.tx[row, col])) / s,
                 cy=(row + float(target.ty[row, col])) / s,
                 w=float(target.tw[row, col]), h=float(target.th[row, col]))
        j, conf_label = _responsible(cell, tb, b, row, col, s)
        responsible.append((int(row), int(col), j, tb, conf_label))

    conf = p[:, :, 4:b * 5:5].copy()
    for row, col, j, _tb, _label in responsible:
        conf[row, col, j] = 0.0
    loss = lambda_noobj * float(np.sum(conf ** 2))
    g[:, :, 4:b * 5:5] = 2.0 * lambda_noobj * conf

    for row, col, j, tb, conf_label in responsible:
        cell = p[row, col]
        o = j * 5
        x, y, w, h, pc = (float(v) for v in cell[o:o + 5])

        dx = x - float(target.tx[row, col])
        dy = y - float(target.ty[row, col])
        loss += lambda_coord * (dx * dx + dy * dy)
        g[row, col, o + 0] = 2.0 * lambda_coord * dx
        g[row, col, o + 1] = 2.0 * lambda_coord * dy

        for k, (pv, tv) in enumerate(((w, float(target.tw[row, col])),
                                      (h, float(target.th[row, col])))):
            sp = np.sqrt(max(pv, 0.0))
            st = np.sqrt(tv)
            d = sp - st
            loss += lambda_coord * d * d
            if pv > 0.0:
                g[row, col, o + 2 + k] = lambda_coord * d / np.sqrt(pv)

        dconf = pc - conf_label
        loss += dconf * dconf
        g[row, col, o + 4] = 2.0 * dconf

        dcls = cell[b * 5:] - target.cls[row, col]
        loss += float(np.sum(dcls ** 2))
        g[row, col, b * 5:] = 2.0 * dcls

    return float(loss), g.reshape(-1)


def perfect_output(target, boxes_per_cell):
    """Synthesize the zero-loss head output for a target (used by tests).

    Predictor 0 carries the target box with confidence 1, all other
    confidences are 0 and the class block is the target one-hot.
    """
    s, c = target.grid, target.num_classes
    out = np.zeros(s * s * (boxes_per_cell * 5 + c), dtype=np.float32)
    p = out.reshape(s, s, boxes_per_cell * 5 + c)
    for row, col in np.argwhere(target.obj):
        p[row, col, 0] = target.tx[row, col]
        p[row, col, 1] = target.ty[row, col]
        p[row, col, 2] = target.tw[row, col]
        p[row, col, 3] = target.th[row, col]
        p[row, col, 4] = 1.0
        p[row, col, boxes_per_cell * 5:] = target.cls[row, col]
    return out


def decode_predictions(out, grid, boxes_per_cell, num_classes, conf_threshold):
    """Head output -> detections with score = confidence * max class score."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {conf_threshold}")
    width = boxes_per_cell * 5 + num_classes
    p = np.asarray(out, np.float32).reshape(grid, grid, width)
    dets = []
    for row in range(grid):
        for col in range(grid):
            cls_scores = p[row, col, boxes_per_cell * 5:]
            class_id = int(np.argmax(cls_scores))
            class_score = float(cls_scores[class_id])
            for j in range(boxes_per_cell):
                x, y, w, h, conf = (float(v) for v in p[row, col, j * 5:j * 5 + 5])
                score = conf * class_score
                if score < conf_threshold:
                    continue
                dets.append(Detection(
                    cx=min(max((col + x) / grid, 0.0), 1.0),
                    cy=min(max((row + y) / grid, 0.0), 1.0),
                    w=min(max(w, 0.0), 1.0),
                    h=min(max(h, 0.0), 1.0),
                    class_id=class_id, score=score))
    return dets


def nms(dets, iou_threshold):
    """Greedy per-class NMS; stable order by (score desc, input index asc)."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k, d) <= iou_threshold
               for k in kept):
            kept.append(d)
    return kept
