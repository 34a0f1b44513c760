"""Report rendering: delimited output plus matplotlib figures.

Every report path writes machine-readable CSV next to an aligned text
table, and (where it helps) a PNG figure: the device comparison as a
four-panel bar chart, evaluations as precision/recall curves, training
runs as loss curves.
"""

import csv
import math

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def write_profile_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        header = ["device", "voltage_v", "clock_mhz", "latency_ms", "power_mw",
                  "power_eff_uw_per_mhz", "mac_per_cycle", "energy_uj"]
        multi = len(report.rows) > 1
        if multi:
            header += ["latency_ratio", "energy_ratio"]
        w.writerow(header)
        for r in report.rows:
            m = r.measurement
            row = [m.device, m.voltage_v, m.clock_mhz, m.latency_ms, m.power_mw,
                   f"{r.power_eff_uw_per_mhz:.6g}", f"{r.mac_per_cycle:.6g}",
                   f"{r.energy_uj:.6g}"]
            if multi:
                row += [f"{r.latency_ratio:.6g}", f"{r.energy_ratio:.6g}"]
            w.writerow(row)
    return path


def profile_figure(report, path):
    """Four-panel device comparison: latency, MAC/cycle, uW/MHz, uJ/inf."""
    devices = [r.measurement.device for r in report.rows]
    panels = [
        ("inference latency [ms]", [r.measurement.latency_ms for r in report.rows], True),
        ("inference efficiency [MAC/cycle]", [r.mac_per_cycle for r in report.rows], True),
        ("power efficiency [uW/MHz]", [r.power_eff_uw_per_mhz for r in report.rows], False),
        ("energy per inference [uJ]", [r.energy_uj for r in report.rows], True),
    ]
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    for ax, (title, values, logscale) in zip(axes.flat, panels):
        ax.bar(devices, values, color="#4878a8")
        ax.set_title(title, fontsize=10)
        if logscale and min(values) > 0 and max(values) / min(values) > 50:
            ax.set_yscale("log")
        ax.tick_params(axis="x", labelrotation=20, labelsize=8)
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle(f"device comparison ({report.macs:,} MACs/inference)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_eval_csv(result, path, class_names=None):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["class", "ap", "num_gt"])
        for cls in sorted(result.ap_per_class):
            name = (class_names or {}).get(cls, f"class_{cls}")
            ap = result.ap_per_class[cls]
            w.writerow([name, "" if ap is None else f"{ap:.6f}",
                        result.num_gt.get(cls, 0)])
        w.writerow(["mAP", f"{result.map:.6f}", sum(result.num_gt.values())])
    return path


def write_matrix_csv(matrix, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)

        def rname(n):
            return "no_restriction" if math.isinf(n) else f"max_{int(n)}"
        w.writerow(["model"] + [rname(c) for c in matrix.col_restrictions])
        for r, label in enumerate(matrix.row_labels):
            w.writerow([label] + [f"{matrix.cell(r, c):.6f}"
                                  for c in range(len(matrix.col_restrictions))])
    return path


def pr_figure(pr_curves, path, iou_threshold=0.5):
    """Precision/recall curves, one per class.

    pr_curves: {class name: (recall array, precision array)}.
    """
    fig, ax = plt.subplots(figsize=(6, 5))
    for name, (recall, precision) in pr_curves.items():
        ax.plot(recall, precision, label=name, linewidth=1.5)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=9)
    ax.set_title(f"precision/recall at IoU {iou_threshold:g}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def pr_curve_data(dets_per_image, gts_per_image, num_classes,
                  iou_threshold=0.5):
    """Recall/precision arrays per class for plotting."""
    import numpy as np

    from .evaluation import match_detections
    curves = {}
    for cls in range(num_classes):
        scored = []
        num_gt = 0
        for dets, gts in zip(dets_per_image, gts_per_image):
            cls_gts = [g for g in gts if g.class_id == cls]
            num_gt += len(cls_gts)
            cls_dets = sorted((d for d in dets if d.class_id == cls),
                              key=lambda d: -d.score)
            for d, tp in zip(cls_dets,
                             match_detections(cls_dets, cls_gts, iou_threshold)):
                scored.append((d.score, tp))
        if num_gt == 0:
            continue
        scored.sort(key=lambda t: -t[0])
        tp = np.cumsum([1.0 if t else 0.0 for _, t in scored])
        fp = np.cumsum([0.0 if t else 1.0 for _, t in scored])
        rec = tp / num_gt
        prec = tp / np.maximum(tp + fp, 1e-12)
        curves[cls] = (rec, prec)
    return curves


def loss_figure(history, path):
    """Training/validation loss over epochs with the phase boundary marked."""
    epochs = [row.epoch for row in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [row.train_loss for row in history], label="train loss")
    ax.plot(epochs, [row.val_loss for row in history], label="validation loss")
    qat_epochs = [row.epoch for row in history if row.phase == "qat"]
    if qat_epochs:
        ax.axvline(qat_epochs[0] - 0.5, color="gray", linestyle="--",
                   linewidth=1, label="quantization-aware phase")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
