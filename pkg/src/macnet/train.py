"""SGD with momentum and weight decay, step learning-rate policy, and the epoch loop."""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data.augment import AugmentationPolicy
from .data.batches import ImageStore, batch_iterator
from .errors import ConfigurationError, ContractError, NumericFault
from .metrics import compute_class_weights, compute_report, weighted_cross_entropy
from .model import load_model, macnet_forward, save_model
from .tensor import backward, no_grad

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["epoch", "lr", "train_loss", "train_top1", "val_top1", "val_top5", "val_macro_f1"]


@dataclass
class OptimizerState:
    velocities: dict
    momentum: float = 0.9
    weight_decay: float = 0.0005
    current_lr: float = 0.001

    @classmethod
    def create(cls, params, momentum=0.9, weight_decay=0.0005, lr=0.001):
        return cls({name: np.zeros_like(p.data) for name, p in params.items()}, momentum, weight_decay, lr)


def sgd_step(params, state):
    """One heavy-ball update: ``v = mu v + (g + wd p)``, ``p -= lr v``; clears grads."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameter {missing[0]!r}" + (
            f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    lr, mu, wd = state.current_lr, state.momentum, state.weight_decay
    for name, p in params.items():
        v = state.velocities[name]
        g = p.grad + wd * p.data if wd else p.grad
        v *= mu
        v += g
        p.data -= lr * v
        p.grad = None
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.001
    step_size_epochs: int = 20
    gamma: float = 0.1


def lr_at(schedule, epoch):
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    return schedule.base_lr * schedule.gamma ** (epoch // schedule.step_size_epochs)


@dataclass
class TrainRunConfig:
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    schedule: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    checkpoint_every: int = 0
    track_train_accuracy: bool = True
    stop_at_train_accuracy: float = None
    eval_batch_size: int = 64
    workers: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def desk(cls, **overrides):
        """Small-data profile: 200 epochs, batches of 16, no augmentation."""
        values = dict(epochs=200, batch_size=16, augmentation=AugmentationPolicy.disabled())
        values.update(overrides)
        return cls(**values)


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int = None
    best_val_f1: float = None
    checkpoint_dir: Path = None
    last_checkpoint: Path = None
    stopped_early: bool = False
    wall_time: float = 0.0


def evaluate(model, manifest, split, batch_size=64, store=None):
    """Eval-mode report over a whole split, without augmentation; model mode is restored afterwards."""
    if manifest.num_images(split) == 0:
        raise ContractError(f"split {split!r} has no images to evaluate")
    prev = model.mode
    model.eval()
    store = store or ImageStore(model.dtype.type)
    probs, labels = [], []
    try:
        with no_grad():
            for images, y in batch_iterator(manifest, split, batch_size, store=store):
                probs.append(ops.softmax(macnet_forward(model, images)).data)
                labels.append(y)
    finally:
        model.mode = prev
    probs = np.concatenate(probs)
    labels = np.concatenate(labels)
    predicted = np.argsort(-probs, axis=1, kind="stable")[:, 0]
    return compute_report(predicted, labels, probs, len(manifest.class_names), manifest.class_names)


def save_checkpoint(path, model, state, epoch, run, extra_meta=None):
    extra = {f"velocity/{k}": v for k, v in state.velocities.items()}
    meta = {
        "epoch": epoch,
        "train.seed": run.seed,
        "train.lr": repr(state.current_lr),
        "train.momentum": repr(state.momentum),
        "train.weight_decay": repr(state.weight_decay),
    }
    meta.update(extra_meta or {})
    save_model(path, model, meta=meta, extra=extra)
    return Path(path)


def load_checkpoint(path):
    """Returns ``(model, optimizer state, epoch, meta)``."""
    model, arrays, meta = load_model(path)
    velocities = {}
    for name, p in model.params.items():
        v = arrays.get(f"velocity/{name}")
        velocities[name] = np.zeros_like(p.data) if v is None else v.astype(p.dtype)
    state = OptimizerState(velocities, float(meta.get("train.momentum", 0.9)),
                           float(meta.get("train.weight_decay", 0.0005)), float(meta.get("train.lr", 0.001)))
    return model, state, int(meta.get("epoch", -1)), meta


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in HISTORY_FIELDS})


def read_history(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (None if v == "" else (int(v) if k == "epoch" else float(v))) for k, v in row.items()})
    return rows


def train(model, manifest, run, out_dir=None, state=None, start_epoch=0, history=None):
    """Run the epoch loop from ``start_epoch`` to ``run.epochs - 1``.

    Loss weights come from the train split.  After each epoch the val split
    (when present) is evaluated in eval mode and a history row is appended.
    With ``out_dir`` set, ``history.csv`` and ``checkpoints/`` (``last``,
    ``best`` by val macro-F1, and every ``checkpoint_every`` epochs) are
    written there.
    """
    t0 = time.time()
    train_counts = manifest.class_counts("train")
    if train_counts.sum() == 0:
        raise ContractError("train split is empty")
    weights = compute_class_weights(train_counts, manifest.class_names)
    has_val = manifest.num_images("val") > 0
    state = state or OptimizerState.create(model.params, run.momentum, run.weight_decay, run.schedule.base_lr)
    history = list(history or [])
    store = ImageStore(model.dtype.type)
    ckpt_dir = last_good = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        if (ckpt_dir / "last.ckpt").exists():
            last_good = ckpt_dir / "last.ckpt"
    best_epoch, best_f1 = None, -math.inf
    for row in history:
        if row.get("val_macro_f1") is not None and row["val_macro_f1"] > best_f1:
            best_epoch, best_f1 = row["epoch"], row["val_macro_f1"]

    result = TrainResult(model, history, checkpoint_dir=ckpt_dir)
    for epoch in range(start_epoch, run.epochs):
        state.current_lr = lr_at(run.schedule, epoch)
        model.train()
        total_loss, seen = 0.0, 0
        batches = batch_iterator(manifest, "train", run.batch_size, run.seed, epoch, run.augmentation, store,
                                 run.workers)
        for b, (images, labels) in enumerate(batches):
            try:
                logits = macnet_forward(model, images, rng=np.random.default_rng([run.seed, epoch, b, 0xD0]))
                loss = weighted_cross_entropy(ops.softmax(logits), labels, weights)
            except NumericFault as exc:
                raise NumericFault(f"epoch {epoch}, batch {b}: {exc}", last_good) from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericFault(f"epoch {epoch}, batch {b}: non-finite loss {value}", last_good)
            model.zero_grad()
            backward(loss)
            sgd_step(model.params, state)
            total_loss += value
            seen += len(labels)

        row = {"epoch": epoch, "lr": state.current_lr, "train_loss": total_loss / seen,
               "train_top1": None, "val_top1": None, "val_top5": None, "val_macro_f1": None}
        if run.track_train_accuracy:
            row["train_top1"] = evaluate(model, manifest, "train", run.eval_batch_size, store).top1_accuracy
        if has_val:
            rep = evaluate(model, manifest, "val", run.eval_batch_size, store)
            row.update(val_top1=rep.top1_accuracy, val_top5=rep.top5_accuracy, val_macro_f1=rep.macro_f1)
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f train_top1 %s val_f1 %s", epoch, row["lr"], row["train_loss"],
                 row["train_top1"], row["val_macro_f1"])

        improved = has_val and row["val_macro_f1"] > best_f1
        if improved:
            best_epoch, best_f1 = epoch, row["val_macro_f1"]
        if ckpt_dir is not None:
            meta = {"best_epoch": "" if best_epoch is None else best_epoch}
            last_good = save_checkpoint(ckpt_dir / "last.ckpt", model, state, epoch, run, meta)
            if improved:
                save_checkpoint(ckpt_dir / "best.ckpt", model, state, epoch, run, meta)
            if run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.ckpt", model, state, epoch, run, meta)
            write_history(history, out_dir / "history.csv")
        result.last_checkpoint = last_good
        if run.stop_at_train_accuracy is not None and row["train_top1"] is not None \
                and row["train_top1"] >= run.stop_at_train_accuracy:
            result.stopped_early = True
            break

    result.best_epoch = best_epoch
    result.best_val_f1 = None if best_epoch is None else best_f1
    result.wall_time = time.time() - t0
    return result


def resume(checkpoint, manifest, run, out_dir=None):
    """Continue a run from ``checkpoint`` at its stored epoch + 1."""
    model, state, epoch, _ = load_checkpoint(checkpoint)
    history = []
    if out_dir is not None and (Path(out_dir) / "history.csv").exists():
        history = [r for r in read_history(Path(out_dir) / "history.csv") if r["epoch"] <= epoch]
    return train(model, manifest, run, out_dir, state=state, start_epoch=epoch + 1, history=history)
