"""Detection evaluation: greedy IoU matching, average precision over the
precision envelope (all-point interpolation, 11-point behind a flag), and
the restriction-matrix report.

Protocol: per class, detections are ranked by score (ties by input order);
each detection greedily matches the unmatched ground-truth box of its class
and image with the highest IoU at or above the threshold. Classes with no
ground truth are excluded from the mean.
"""

import math
from dataclasses import dataclass

import numpy as np

from .head import decode_predictions, iou, nms


def match_detections(dets, gts, iou_threshold=0.5):
    """Label each detection TP/FP against one image's same-class boxes.

    dets must already be sorted by descending score (ties by input index);
    every matched ground truth is consumed. Returns a list of booleans.
    """
    matched = [False] * len(gts)
    labels = []
    for det in dets:
        best_iou, best_g = 0.0, -1
        for g, gt in enumerate(gts):
            if matched[g] or gt.class_id != det.class_id:
                continue
            v = iou(det, gt)
            if v > best_iou:
                best_iou, best_g = v, g
        if best_g >= 0 and best_iou >= iou_threshold:
            matched[best_g] = True
            labels.append(True)
        else:
            labels.append(False)
    return labels


def average_precision(tp_labels, scores, num_gt, eleven_point=False):
    """Area under the precision envelope of the ranked detections.

    Returns None when num_gt == 0 (undefined; excluded from the mean).
    """
    if num_gt < 0:
        raise ValueError(f"num_gt must be >= 0, got {num_gt}")
    if num_gt == 0:
        return None
    if len(tp_labels) != len(scores):
        raise ValueError("tp_labels and scores must have equal length")
    if not tp_labels:
        return 0.0
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = np.cumsum([1.0 if tp_labels[i] else 0.0 for i in order])
    fp = np.cumsum([0.0 if tp_labels[i] else 1.0 for i in order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    if eleven_point:
        ap = 0.0
        for t in np.arange(0.0, 1.01, 0.1):
            mask = recall >= t
            ap += (float(precision[mask].max()) if mask.any() else 0.0) / 11.0
        return ap
    # envelope: precision at recall r is the max precision at recall >= r
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


@dataclass
class EvalResult:
    ap_per_class: dict                 # class id -> AP (None when no GT)
    map: float
    num_images: int
    num_gt: dict
    num_detections: int
    iou_threshold: float
    restriction: float = math.inf

    def render(self, class_names=None):
        lines = ["class         AP      ground truths"]
        for cls in sorted(self.ap_per_class):
            name = (class_names or {}).get(cls, f"class {cls}")
            ap = self.ap_per_class[cls]
            ap_txt = f"{ap:7.4f}" if ap is not None else "   n/a "
            lines.append(f"{name:<12} {ap_txt}  {self.num_gt.get(cls, 0)}")
        lines.append(f"mAP@{self.iou_threshold:g} = {self.map:.4f} "
                     f"({self.num_images} images, "
                     f"{self.num_detections} detections)")
        return "\n".join(lines)


def evaluate_detections(dets_per_image, gts_per_image, num_classes,
                        iou_threshold=0.5, eleven_point=False,
                        restriction=math.inf):
    """Compute per-class AP and mAP from already-decoded detections."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must align per image")
    ap_per_class = {}
    num_gt_per_class = {}
    total_dets = 0
    for cls in range(num_classes):
        scored = []          # (score, input order, tp)
        num_gt = 0
        for img_idx, (dets, gts) in enumerate(zip(dets_per_image,
                                                  gts_per_image)):
            cls_gts = [g for g in gts if g.class_id == cls]
            num_gt += len(cls_gts)
            cls_dets = sorted((d for d in dets if d.class_id == cls),
                              key=lambda d: -d.score)
            labels = match_detections(cls_dets, cls_gts, iou_threshold)
            for d, tp in zip(cls_dets, labels):
                scored.append((d.score, tp))
        num_gt_per_class[cls] = num_gt
        total_dets += len(scored)
        ap_per_class[cls] = average_precision(
            [tp for _, tp in scored], [s for s, _ in scored], num_gt,
            eleven_point=eleven_point)
    defined = [ap for ap in ap_per_class.values() if ap is not None]
    mean_ap = float(np.mean(defined)) if defined else 0.0
    return EvalResult(ap_per_class=ap_per_class, map=mean_ap,
                      num_images=len(dets_per_image), num_gt=num_gt_per_class,
                      num_detections=total_dets, iou_threshold=iou_threshold,
                      restriction=restriction)


def evaluate(model, samples, images, restriction=math.inf,
             conf_threshold=0.1, nms_threshold=0.5, iou_threshold=0.5,
             eleven_point=False, batch_size=32):
    """Run inference + decode + NMS + matching over a dataset.

    model is a Network or Int8Network; samples/images as from load_dataset.
    Samples with more than `restriction` boxes are excluded.
    """
    cfg = model.cfg
    keep = [k for k, s in enumerate(samples)
            if len(s.boxes) <= restriction]
    dets_per_image = []
    gts_per_image = []
    for b0 in range(0, len(keep), batch_size):
        idx = keep[b0:b0 + batch_size]
        xs = np.stack([images[k] for k in idx])
        outs = model.forward_batch(xs)
        for row, k in enumerate(idx):
            dets = decode_predictions(outs[row], cfg.grid, cfg.boxes_per_cell,
                                      cfg.num_classes, conf_threshold)
            dets_per_image.append(nms(dets, nms_threshold))
            gts_per_image.append(samples[k].boxes)
    return evaluate_detections(dets_per_image, gts_per_image,
                               cfg.num_classes, iou_threshold,
                               eleven_point=eleven_point,
                               restriction=restriction)


@dataclass
class MatrixReport:
    row_labels: list
    col_restrictions: list
    results: list                     # results[r][c] -> EvalResult
    field: str = "map"

    def cell(self, r, c):
        return getattr(self.results[r][c], self.field)

    def render(self):
        def rname(n):
            return "no restriction" if math.isinf(n) else f"max {int(n)} obj."
        header = ["model / eval set"] + [rname(c) for c in self.col_restrictions]
        widths = [max(len(header[0]), *(len(l) for l in self.row_labels))] + \
                 [max(len(h), 7) for h in header[1:]]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        for r, label in enumerate(self.row_labels):
            cells = [label.ljust(widths[0])]
            for c in range(len(self.col_restrictions)):
                cells.append(f"{self.cell(r, c) * 100:6.1f}%".ljust(widths[c + 1]))
            lines.append("  ".join(cells))
        return "\n".join(lines)


def eval_matrix(models, samples, images, restrictions=(math.inf, 10, 5),
                **eval_kwargs):
    """Evaluate each (label, model) row under every restriction column."""
    results = []
    for _label, model in models:
        row = [evaluate(model, samples, images, restriction=r, **eval_kwargs)
               for r in restrictions]
        results.append(row)
    return MatrixReport(row_labels=[l for l, _ in models],
                        col_restrictions=list(restrictions), results=results)


def oracle_detections(samples):
    """Ground truth re-emitted as perfect detections (confidence 1.0)."""
    from .head import Detection
    per_image = []
    for s in samples:
        per_image.append([Detection(cx=b.cx, cy=b.cy, w=b.w, h=b.h,
                                    class_id=b.class_id, score=1.0)
                          for b in s.boxes])
    return per_image
