"""Shared test helpers: finite differences and brute-force oracles."""

import numpy as np
import pytest


def fd_grad(f, arr, eps=1e-3):
    """Central finite-difference gradient of scalar f() w.r.t. arr, in place."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(analytic, reference):
    """Max-norm error of `analytic` relative to the max-norm of `reference`."""
    analytic = np.asarray(analytic, np.float64)
    reference = np.asarray(reference, np.float64)
    denom = max(np.abs(reference).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - reference).max(initial=0.0) / denom)


def conv3x3_oracle(x, w, b):
    """Six-nested-loop same-padded 3x3 convolution (float64)."""
    cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((cout, h, wd), np.float64)
    xp = np.pad(np.asarray(x, np.float64), ((0, 0), (1, 1), (1, 1)))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for c in range(cin):
                    for u in range(3):
                        for v in range(3):
                            acc += xp[c, i + u, j + v] * w[o, c, u, v]
                out[o, i, j] = acc + b[o]
    return out


def ap_envelope_oracle(tp_labels, scores, num_gt):
    """Brute-force area under the precision envelope (first principles)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = fp = 0
    points = []
    for i in order:
        if tp_labels[i]:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    area = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        if recall == prev_recall:
            continue
        envelope = max((p for r, p in points if r >= recall), default=0.0)
        area += (recall - prev_recall) * envelope
        prev_recall = recall
    return area


MICRO_CFG_TEXT = """\
# small unit-test model
input 3 16 16
head 4 2 1
conv3x3 3 8
relu
maxpool2x2
conv3x3 8 8
relu
maxpool2x2
flatten
fc 128 64
relu
fc 64 176
"""


@pytest.fixture
def micro_cfg():
    from microyolo.config import parse_model_config
    return parse_model_config(MICRO_CFG_TEXT)
