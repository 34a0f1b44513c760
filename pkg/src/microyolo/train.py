"""Two-phase training: float epochs followed by quantization-aware epochs.

Plain SGD with weight decay and a per-phase multi-step learning rate
schedule. Training is fully deterministic under a fixed seed: the same
(seed, config, dataset) always produces bitwise-identical checkpoints.

At the phase boundary weight scales are frozen from the float weights;
the first quantization-aware epoch observes activation peaks (weights
fake-quantized, activations untouched), after which activation scales are
frozen and fake quantization is fully active.
"""

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .config import config_text, parse_model_config
from .data import filter_max_objects, load_dataset, split_90_10
from .head import encode_targets, yolo_loss
from .net import Network
from .serialize import save_checkpoint


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last good checkpoint path."""

    def __init__(self, message, checkpoint_path):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    dataset_dir: str
    out_dir: str
    epochs_float: int = 350
    epochs_qat: int = 300
    lr0: float = 5e-4
    weight_decay: float = 5e-4
    batch_size: int = 32
    milestones: tuple = (0.5, 0.8)     # fractions of each phase's epochs
    lr_decay: float = 0.1
    seed: int = 0
    max_objects: float = math.inf
    checkpoint_every: int = 50

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        ms = tuple(self.milestones)
        if list(ms) != sorted(set(ms)) or any(not 0 < m < 1 for m in ms):
            raise ValueError(
                f"milestones must be strictly increasing in (0,1), got {ms}")
        self.milestones = ms

    def as_dict(self):
        return {f.name: getattr(self, f.name) if f.name != "max_objects"
                else (None if math.isinf(self.max_objects) else self.max_objects)
                for f in fields(self)}


def sgd_step(params, grads, lr, weight_decay):
    """p <- p - lr * (g + weight_decay * p), in place over the param dict."""
    for i, (gw, gb) in grads.items():
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise ValueError(f"non-finite gradient at layer {i}")
        w, b = params[i]
        w -= lr * (gw + weight_decay * w)
        b -= lr * (gb + weight_decay * b)
    return params


def multistep_lr(epoch, phase_epochs, lr0, milestones=(0.5, 0.8), decay=0.1):
    """lr0 * decay^(milestones passed); milestones are phase fractions."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    passed = sum(1 for m in milestones if epoch >= int(m * phase_epochs))
    return lr0 * decay ** passed


@dataclass
class EpochLog:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_loss: float
    wall_time_s: float


@dataclass
class TrainResult:
    history: list
    final_checkpoint: str
    log_path: str
    checkpoints: list = field(default_factory=list)


def _prepare(train_cfg):
    samples, images = load_dataset(train_cfg.dataset_dir)
    pairs = list(zip(samples, images))
    kept = filter_max_objects(samples, train_cfg.max_objects)
    kept_ids = {id(s) for s in kept}
    pairs = [(s, img) for s, img in pairs if id(s) in kept_ids]
    if len(pairs) < 2:
        raise ValueError("dataset empty (or too small) after filtering")
    split = split_90_10(list(range(len(pairs))), seed=train_cfg.seed)
    train_pairs = [pairs[i] for i in split.train]
    val_pairs = [pairs[i] for i in split.validation]
    return train_pairs, val_pairs


def _stack_batch(pairs, model_cfg):
    xs = np.stack([img for _, img in pairs])
    targets = [encode_targets(s.boxes, model_cfg.grid, model_cfg.num_classes)
               for s, _ in pairs]
    return xs, targets


def _batch_loss_grad(net, xs, targets):
    out, caches = net.forward_batch(xs, want_caches=True)
    n = out.shape[0]
    grad = np.empty_like(out)
    total = 0.0
    for k in range(n):
        loss_k, g_k = yolo_loss(out[k], targets[k], net.cfg.boxes_per_cell)
        total += loss_k
        grad[k] = g_k
    grads = net.backward_batch(grad / n, caches)
    return total / n, grads


def _eval_loss(net, pairs, model_cfg, batch_size):
    if not pairs:
        return float("nan")
    total, count = 0.0, 0
    for b0 in range(0, len(pairs), batch_size):
        chunk = pairs[b0:b0 + batch_size]
        xs, targets = _stack_batch(chunk, model_cfg)
        out = net.forward_batch(xs)
        for k in range(len(chunk)):
            loss_k, _ = yolo_loss(out[k], targets[k], model_cfg.boxes_per_cell)
            total += loss_k
            count += 1
    return total / count


def train(train_cfg, model_cfg, progress=None):
    """Run both training phases; returns a TrainResult.

    progress, if given, is called with each EpochLog as it is produced.
    """
    out_dir = Path(train_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_text = config_text(model_cfg)
    train_pairs, val_pairs = _prepare(train_cfg)
    net = Network.initialize(model_cfg, seed=train_cfg.seed)
    history = []
    checkpoints = []
    log_path = out_dir / "training_log.csv"
    last_good = None
    epoch_seed_rng = np.random.default_rng(train_cfg.seed)

    def checkpoint_meta(epoch, phase):
        meta = {"epoch": epoch, "phase": phase, "seed": train_cfg.seed}
        if net.qat is not None and net.qat.mode == "active":
            meta["quant"] = {
                "input_scale": 1.0 / 128.0,
                "weight_scales": {str(i): qp.scale for i, qp in
                                  net.qat.weight_scales.items()},
                "act_scales": {str(p): qp.scale for p, qp in
                               net.qat.act_scales.items()},
            }
        return meta

    def write_ckpt(name, epoch, phase):
        path = out_dir / name
        save_checkpoint(path, cfg_text, net.params, checkpoint_meta(epoch, phase))
        return str(path)

    with open(log_path, "w", newline="", encoding="utf-8") as log_file:
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "phase", "lr", "train_loss", "val_loss",
                         "wall_time_s"])
        global_epoch = 0
        for phase, phase_epochs in (("float", train_cfg.epochs_float),
                                    ("qat", train_cfg.epochs_qat)):
            if phase == "qat" and phase_epochs > 0:
                net.start_qat()
            for epoch in range(phase_epochs):
                t0 = time.monotonic()
                lr = multistep_lr(epoch, phase_epochs, train_cfg.lr0,
                                  train_cfg.milestones, train_cfg.lr_decay)
                order = np.random.default_rng(
                    [train_cfg.seed, global_epoch]).permutation(len(train_pairs))
                epoch_loss, seen = 0.0, 0
                for b0 in range(0, len(order), train_cfg.batch_size):
                    batch = [train_pairs[i] for i in order[b0:b0 + train_cfg.batch_size]]
                    xs, targets = _stack_batch(batch, model_cfg)
                    try:
                        loss, grads = _batch_loss_grad(net, xs, targets)
                    except ValueError as e:
                        path = write_ckpt("diverged_last_good.ckpt",
                                          global_epoch, phase) if last_good is None \
                            else last_good
                        raise TrainingDiverged(
                            f"training diverged at epoch {global_epoch}: {e}",
                            path) from e
                    if not np.isfinite(loss):
                        path = last_good or write_ckpt(
                            "diverged_last_good.ckpt", global_epoch, phase)
                        raise TrainingDiverged(
                            f"loss became non-finite at epoch {global_epoch}",
                            path)
                    sgd_step(net.params, grads, lr, train_cfg.weight_decay)
                    epoch_loss += loss * len(batch)
                    seen += len(batch)
                if phase == "qat" and epoch == 0 and net.qat.mode == "observe":
                    net.qat.freeze_act_scales()
                val_loss = _eval_loss(net, val_pairs, model_cfg,
                                      train_cfg.batch_size)
                row = EpochLog(epoch=global_epoch, phase=phase, lr=lr,
                               train_loss=epoch_loss / max(seen, 1),
                               val_loss=val_loss,
                               wall_time_s=time.monotonic() - t0)
                history.append(row)
                writer.writerow([row.epoch, row.phase, f"{row.lr:.10g}",
                                 f"{row.train_loss:.8f}", f"{row.val_loss:.8f}",
                                 f"{row.wall_time_s:.3f}"])
                log_file.flush()
                if progress is not None:
                    progress(row)
                if (global_epoch + 1) % train_cfg.checkpoint_every == 0:
                    path = write_ckpt(f"epoch_{global_epoch:04d}.ckpt",
                                      global_epoch, phase)
                    checkpoints.append(path)
                    last_good = path
                global_epoch += 1
        final = write_ckpt("final.ckpt", global_epoch - 1,
                           "qat" if train_cfg.epochs_qat > 0 else "float")
        checkpoints.append(final)
    return TrainResult(history=history, final_checkpoint=final,
                       log_path=str(log_path), checkpoints=checkpoints)


def network_from_checkpoint(ckpt):
    """Rebuild a Network (and its QAT state, if saved) from a Checkpoint."""
    from .net import QatState
    from .quant import QuantParams

    cfg = ckpt.cfg if ckpt.cfg is not None else parse_model_config(ckpt.config_text)
    net = Network(cfg, {i: (w.copy(), b.copy()) for i, (w, b) in
                        ckpt.params.items()})
    quant = ckpt.meta.get("quant")
    if quant:
        net.qat = QatState(
            mode="active",
            weight_scales={int(i): QuantParams(s) for i, s in
                           quant["weight_scales"].items()},
            act_scales={int(p): QuantParams(s) for p, s in
                        quant["act_scales"].items()})
    return net
