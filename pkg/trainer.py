# trainer.py
# Adam optimizer, the training loop with best-validation checkpointing, and
# Top-1 evaluation.

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import numeric as nm
from config import EMOJI_ERROR, EMOJI_SUCCESS, ExperimentConfig, make_rng
from data_loader import batch_slices, holdout_split, make_batch
from errors import ContractError, InputError, NumericError
from model import ClipMgModel, loss
from output_manager import append_metrics, display_epoch, display_run_header, load_checkpoint, save_checkpoint


class Adam:
    """Adaptive-moment descent over a dict of trainable tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lr * (self.m[k] / correction1) / (np.sqrt(self.v[k] / correction2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


@dataclass
class EvalResult:
    top1: float
    correct: int
    total: int
    per_class: dict
    confusion: np.ndarray
    predictions: list = field(default_factory=list)
    loss: float = float("nan")


@dataclass
class TrainResult:
    model: ClipMgModel
    checkpoint: Path
    metrics: Path
    best_val_top1: float
    best_epoch: int
    steps: int
    history: list


def build_model(cfg: ExperimentConfig, num_classes):
    return ClipMgModel(
        variant=cfg.variant, profile=cfg.profile, seed=cfg.seed, gate_mode=cfg.gate_mode,
        motion_weighting=cfg.motion_weighting, learned_qkv=cfg.learned_qkv,
        sigma_rel=cfg.resolved_sigma_rel(), num_classes=num_classes,
    )


def predict(probs):
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)


def top1_summary(predictions, labels, num_classes, mean_loss=float("nan")):
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InputError("cannot score an empty split")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    correct = int(np.trace(confusion))
    per_class = {}
    for c in range(num_classes):
        seen = confusion[c].sum()
        if seen:
            per_class[c] = 100.0 * confusion[c, c] / seen
    return EvalResult(top1=100.0 * correct / labels.size, correct=correct, total=int(labels.size),
                      per_class=per_class, confusion=confusion, predictions=predictions.tolist(),
                      loss=mean_loss)


def evaluate_model(model: ClipMgModel, dataset, ids, batch_size=32, workers=1):
    if not ids:
        raise InputError("evaluation split is empty")
    if model.num_classes != dataset.num_classes:
        raise ContractError(f"checkpoint has {model.num_classes} classes, dataset has {dataset.num_classes}")
    dtype = next(iter(model.named_parameters().values())).dtype
    predictions, labels, total_loss = [], [], 0.0
    with nm.no_grad():
        for chunk in batch_slices(ids, batch_size):
            batch = make_batch(dataset.clips(chunk), model.heatmap_canvas,
                               with_heatmaps=model.flags.pose_branch, dtype=dtype, workers=workers)
            probs, _ = model.forward(batch)
            predictions.extend(predict(probs.data).tolist())
            labels.extend(batch.labels.tolist())
            total_loss += loss(probs, batch.labels).item() * batch.batch_size
    return top1_summary(predictions, labels, model.num_classes, total_loss / len(labels))


def evaluate(checkpoint, dataset, split="test", batch_size=32, workers=1):
    """Top-1 (%) of a checkpoint path (or an in-memory model) on ``split``."""
    model = checkpoint if isinstance(checkpoint, ClipMgModel) else load_checkpoint(checkpoint)[0]
    return evaluate_model(model, dataset, dataset.split(split), batch_size, workers)


def _dump_bad_batch(out_dir, epoch, step, clip_ids, error):
    path = Path(out_dir) / "nonfinite_batch.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"epoch": epoch, "step": step, "clip_ids": clip_ids, "error": str(error)}, f, indent=2)
    return path


def train(cfg: ExperimentConfig, dataset, out_dir=None, verbose=True):
    """Train ``cfg.variant`` on the dataset's train split.

    Validation uses the dataset's "val" split if it has one, otherwise a seeded
    ``cfg.val_fraction`` holdout of train. Two metrics rows per epoch:
    (epoch, "train", mean step loss, running Top-1 over the epoch's batches)
    and (epoch, "val", validation loss, validation Top-1).
    """
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    checkpoint_path = out_dir / "best.ckpt"
    if metrics_path.exists():
        metrics_path.unlink()

    ids = dataset.split("train")
    if cfg.subset:
        ids = ids[:cfg.subset]
    if "val" in dataset.splits:
        train_ids, val_ids = ids, dataset.split("val")
    else:
        train_ids, val_ids = holdout_split(ids, cfg.val_fraction, cfg.seed)
        if not val_ids:
            val_ids = train_ids

    if verbose:
        display_run_header(f"TRAINING {cfg.variant}", cfg)
        print(f"  Clips:      {len(train_ids)} train / {len(val_ids)} val")

    with nm.precision(cfg.train_dtype):
        model = build_model(cfg, dataset.num_classes)
        dtype = nm.get_default_dtype()
        opt = Adam(model.trainable_parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

        best_top1, best_epoch, steps, history = -1.0, 0, 0, []
        for epoch in range(1, cfg.epochs + 1):
            losses, hits, seen = [], 0, 0
            for chunk in batch_slices(train_ids, cfg.batch_size, make_rng(cfg.seed, 6, epoch)):
                batch = make_batch(dataset.clips(chunk), model.heatmap_canvas,
                                   with_heatmaps=model.flags.pose_branch, dtype=dtype,
                                   workers=cfg.num_workers)
                try:
                    probs, _ = model.forward(batch)
                    value = loss(probs, batch.labels)
                    opt.zero_grad()
                    value.backward()
                except NumericError as e:
                    dump = _dump_bad_batch(out_dir, epoch, steps, batch.clip_ids, e)
                    print(f"{EMOJI_ERROR} Non-finite value at epoch {epoch}, step {steps}; batch saved to {dump}")
                    raise NumericError(f"{e} (epoch {epoch}, step {steps}, clips {batch.clip_ids})") from e
                opt.step()
                losses.append(value.item())
                hits += int((predict(probs.data) == batch.labels).sum())
                seen += batch.batch_size
                steps += 1
                if cfg.max_steps and steps >= cfg.max_steps:
                    break

            train_loss = float(np.mean(losses))
            train_top1 = 100.0 * hits / seen
            val = evaluate_model(model, dataset, val_ids, cfg.batch_size, cfg.num_workers)
            improved = val.top1 > best_top1
            if improved:
                best_top1, best_epoch = val.top1, epoch
                save_checkpoint(checkpoint_path, model, extra={
                    "epoch": epoch, "val_top1": val.top1, "config": cfg.to_dict()})
            append_metrics(metrics_path, [(epoch, "train", train_loss, train_top1),
                                          (epoch, "val", val.loss, val.top1)])
            history.append({"epoch": epoch, "train_loss": train_loss, "train_top1": train_top1,
                            "val_loss": val.loss, "val_top1": val.top1})
            if verbose:
                display_epoch(epoch, train_loss, val.top1, improved)
            if cfg.max_steps and steps >= cfg.max_steps:
                break

    if verbose:
        print(f"{EMOJI_SUCCESS} Best val Top-1 {best_top1:.2f}% at epoch {best_epoch} ({steps} steps)")
    return TrainResult(model=model, checkpoint=checkpoint_path, metrics=metrics_path,
                       best_val_top1=best_top1, best_epoch=best_epoch, steps=steps, history=history)
