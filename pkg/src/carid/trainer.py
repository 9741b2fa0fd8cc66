"""Fine-tuning loop: cross-entropy objective, plateau scheduling, checkpoints.

Metrics for each epoch are appended to ``metrics.jsonl`` in the run
directory (one JSON object per line) and the best-validation-accuracy
epoch is kept as ``best.ckpt``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from . import augment
from .augment import AugmentationPolicy
from .backbones import BackboneSpec, FineTuneModel, build_model, calibrate_on_batches
from .dataset import DatasetManifest, ImageRecord, Split, crop_to_bbox, decode_image

CHECKPOINT_FORMAT_VERSION = 1

VALID_BATCH_SIZES = (32, 64, 128)


class EmptySplit(ValueError):
    pass


class NaNLoss(RuntimeError):
    def __init__(self, epoch: int, history: list["EpochMetrics"]):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.history = history


class CorruptCheckpoint(RuntimeError):
    pass


class VersionMismatch(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # adam | sgd
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    scheduler_patience: int = 7
    scheduler_factor: float = 0.3
    monitor: str = "val_accuracy"
    dropout_rate: float = 0.3
    seed: int = 0
    num_workers: int = 0
    improvement_threshold: float = 1e-4

    def validate(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size not in VALID_BATCH_SIZES:
            raise ValueError(f"batch_size must be one of {VALID_BATCH_SIZES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.scheduler_patience < 1:
            raise ValueError("scheduler patience must be >= 1")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError("scheduler factor must be in (0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.monitor != "val_accuracy":
            raise ValueError("only val_accuracy monitoring is supported")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    lr: float


@dataclass
class SchedulerState:
    best_metric: float = -math.inf
    epochs_since_improvement: int = 0
    current_lr: float = 0.0


def scheduler_step(state: SchedulerState, val_metric: float, patience: int,
                   factor: float, threshold: float = 1e-4) -> SchedulerState:
    """Reduce-on-plateau step for a maximized metric.

    An observation improving on the best by more than ``threshold`` resets
    the counter; once the counter exceeds ``patience`` the learning rate is
    multiplied by ``factor`` and the counter resets (a new plateau may
    trigger another reduction without an intervening improvement).
    """
    if not 0.0 < factor < 1.0:
        raise ValueError(f"factor must be in (0, 1), got {factor}")
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    if val_metric > state.best_metric + threshold:
        return SchedulerState(best_metric=val_metric, epochs_since_improvement=0,
                              current_lr=state.current_lr)
    waited = state.epochs_since_improvement + 1
    lr = state.current_lr
    if waited > patience:
        lr *= factor
        waited = 0
    return SchedulerState(best_metric=state.best_metric, epochs_since_improvement=waited,
                          current_lr=lr)


def sample_seed(seed: int, epoch: int, index: int) -> int:
    """Augmentation seed for one (run, epoch, sample) triple.

    Derived deterministically so results do not depend on how samples are
    distributed over data-loading workers.
    """
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1, np.uint64)[0])


class ManifestDataset(Dataset):
    """Decode, crop to bbox, then augment (train) or resize+normalize (eval)."""

    def __init__(self, records: Sequence[ImageRecord], policy: AugmentationPolicy,
                 train: bool, seed: int = 0):
        self.records = list(records)
        self.policy = policy
        self.train = train
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int):
        rec = self.records[idx]
        img = crop_to_bbox(rec, decode_image(rec.image_path))
        if self.train:
            tensor = augment.apply(self.policy, img, sample_seed(self.seed, self.epoch, idx))
        else:
            tensor = augment.eval_transform(self.policy, img)
        return tensor, rec.class_id


def _eval_records(model: FineTuneModel, records: Sequence[ImageRecord],
                  policy: AugmentationPolicy, batch_size: int,
                  num_workers: int = 0) -> tuple[float, float, dict[int, float]]:
    ds = ManifestDataset(records, policy, train=False)
    loader = DataLoader(ds, batch_size=batch_size, num_workers=num_workers)
    model.eval()
    loss_sum, correct, total = 0.0, 0, 0
    class_correct: dict[int, int] = {}
    class_total: dict[int, int] = {}
    with torch.no_grad():
        for x, y in loader:
            logits = model(x)
            loss_sum += F.cross_entropy(logits, y, reduction="sum").item()
            pred = logits.argmax(dim=1)
            correct += (pred == y).sum().item()
            total += y.numel()
            for cls, ok in zip(y.tolist(), (pred == y).tolist()):
                class_total[cls] = class_total.get(cls, 0) + 1
                class_correct[cls] = class_correct.get(cls, 0) + int(ok)
    per_class = {c: class_correct.get(c, 0) / n for c, n in sorted(class_total.items())}
    return loss_sum / total, correct / total, per_class


def evaluate(model: FineTuneModel, manifest: DatasetManifest, split: Split | str,
             policy: AugmentationPolicy, batch_size: int = 64) -> dict:
    """Deterministic accuracy/loss on one split (no stochastic transforms)."""
    records = manifest.by_split(split)
    if not records:
        raise EmptySplit(f"split {split!r} has no records")
    loss, accuracy, per_class = _eval_records(model, records, policy, batch_size)
    return {"accuracy": accuracy, "loss": loss, "per_class_accuracy": per_class}


def predict_labels(model: FineTuneModel, records: Sequence[ImageRecord],
                   policy: AugmentationPolicy, batch_size: int = 64) -> list[int]:
    """Per-record argmax class ids, in record order."""
    ds = ManifestDataset(records, policy, train=False)
    loader = DataLoader(ds, batch_size=batch_size)
    model.eval()
    out: list[int] = []
    with torch.no_grad():
        for x, _ in loader:
            out.extend(model(x).argmax(dim=1).tolist())
    return out


def _make_optimizer(model: FineTuneModel, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.lr, momentum=0.9,
                           weight_decay=config.weight_decay)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def checkpoint_payload(model: FineTuneModel, class_names: Sequence[str],
                       policy: AugmentationPolicy, config: TrainConfig | None = None,
                       metrics: dict | None = None,
                       state_dict: dict | None = None) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": asdict(model.spec),
        "num_classes": model.num_classes,
        "class_names": list(class_names),
        "normalization": {
            "mean": list(policy.mean),
            "std": list(policy.std),
            "output_size": list(policy.output_size),
        },
        "train_config": asdict(config) if config else None,
        "metrics": metrics,
        "state_dict": state_dict if state_dict is not None else model.state_dict(),
    }


def save_checkpoint(model: FineTuneModel, config: TrainConfig | None, metrics: dict | None,
                    path: Path | str, *, class_names: Sequence[str],
                    policy: AugmentationPolicy) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint_payload(model, class_names, policy, config, metrics), path)


def load_checkpoint(path: Path | str) -> tuple[FineTuneModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata).

    Weights always come from the file, so the trunk is instantiated without
    its upstream pretrained weights regardless of what the spec recorded.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CorruptCheckpoint(f"{path}: not a checkpoint payload")
    version = payload["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(
            f"checkpoint format {version}, this build reads {CHECKPOINT_FORMAT_VERSION}"
        )
    try:
        spec = BackboneSpec(**payload["backbone"])
        train_config = payload.get("train_config") or {}
        dropout = train_config.get("dropout_rate", 0.0)
        model = build_model(replace(spec, pretrained=False), payload["num_classes"], dropout)
        model.load_state_dict(payload["state_dict"], strict=True)
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta


def policy_from_checkpoint(meta: dict) -> AugmentationPolicy:
    norm = meta["normalization"]
    return AugmentationPolicy(
        transforms=(), output_size=tuple(norm["output_size"]),
        mean=tuple(norm["mean"]), std=tuple(norm["std"]),
    )


def train(model: FineTuneModel, manifest: DatasetManifest, policy: AugmentationPolicy,
          config: TrainConfig, run_dir: Path | str | None = None,
          ) -> tuple[dict, list[EpochMetrics]]:
    """Fine-tune on the train split, validating every epoch.

    Returns (checkpoint payload, history). The checkpoint holds the weights
    of the epoch with the highest validation accuracy (earliest on ties).
    Fully reproducible for a fixed config/seed with single-worker loading.
    """
    config.validate()
    train_records = manifest.by_split(Split.TRAIN)
    val_records = manifest.by_split(Split.VAL)
    if not train_records:
        raise EmptySplit("train split is empty")
    if not val_records:
        raise EmptySplit("val split is empty")

    run_path = Path(run_dir) if run_dir else None
    metrics_fp = None
    if run_path:
        run_path.mkdir(parents=True, exist_ok=True)
        metrics_fp = open(run_path / "metrics.jsonl", "w")

    torch.manual_seed(config.seed)
    if not model.spec.pretrained:
        # A random trunk has no meaningful frozen statistics yet; estimate
        # them once on the training distribution before the first step.
        calib = DataLoader(ManifestDataset(train_records, policy, train=False),
                           batch_size=config.batch_size)
        calibrate_on_batches(model, (x for x, _ in calib))
    optimizer = _make_optimizer(model, config)
    sched = SchedulerState(current_lr=config.lr)
    ds = ManifestDataset(train_records, policy, train=True, seed=config.seed)

    history: list[EpochMetrics] = []
    best_acc = -math.inf
    best_state: dict | None = None
    best_metrics: EpochMetrics | None = None

    try:
        for epoch in range(config.epochs):
            ds.set_epoch(epoch)
            order = np.random.default_rng([config.seed, epoch]).permutation(len(ds))
            loader = DataLoader(ds, batch_size=config.batch_size, sampler=order.tolist(),
                                num_workers=config.num_workers)
            model.train()
            loss_sum, correct, total = 0.0, 0, 0
            for x, y in loader:
                logits = model(x)
                loss = F.cross_entropy(logits, y)
                if not torch.isfinite(loss):
                    raise NaNLoss(epoch, history)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                loss_sum += loss.item() * y.numel()
                correct += (logits.argmax(dim=1) == y).sum().item()
                total += y.numel()

            val_loss, val_acc, _ = _eval_records(model, val_records, policy,
                                                 config.batch_size, config.num_workers)
            metrics = EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / total,
                train_accuracy=correct / total,
                val_loss=val_loss,
                val_accuracy=val_acc,
                lr=sched.current_lr,
            )
            history.append(metrics)
            if metrics_fp:
                metrics_fp.write(json.dumps(asdict(metrics)) + "\n")
                metrics_fp.flush()

            if val_acc > best_acc:
                best_acc = val_acc
                best_state = copy.deepcopy(model.state_dict())
                best_metrics = metrics

            sched = scheduler_step(sched, val_acc, config.scheduler_patience,
                                   config.scheduler_factor, config.improvement_threshold)
            _set_lr(optimizer, sched.current_lr)
    finally:
        if metrics_fp:
            metrics_fp.close()

    payload = checkpoint_payload(
        model, manifest.class_names, policy, config,
        metrics=asdict(best_metrics) if best_metrics else None,
        state_dict=best_state,
    )
    if run_path:
        torch.save(payload, run_path / "best.ckpt")
    return payload, history
