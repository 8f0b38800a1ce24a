"""Two-stage training: a base run at 1e-4 then fine-tuning at 1e-5.

Training is seeded end to end (Python, NumPy, and torch RNGs, with
nondeterministic kernels disabled) so a rerun under the same seed logs
identical losses. Per-epoch train/val metrics stream to a JSONL log; the
best-validation-accuracy checkpoint and the final weights are kept.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentationPolicy
from .data import Manifest, VergeDataset, iter_batches, policy_from_header
from .model import build_model


@dataclass
class TrainSchedule:
    stage1_epochs: int = 50
    stage1_lr: float = 1e-4
    stage2_epochs: int = 50
    stage2_lr: float = 1e-5
    batch_size: int = 32
    seed: int = 0


def set_determinism(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _run_epoch(model, dataset, batch_size, seed, epoch, optimizer=None):
    training = optimizer is not None
    model.train(training)
    loss_fn = nn.CrossEntropyLoss()
    total_loss = 0.0
    correct = 0
    count = 0
    for x, y, _ in iter_batches(dataset, batch_size, seed, epoch, shuffle=training):
        if training:
            optimizer.zero_grad()
            logits = model(x)
            loss = loss_fn(logits, y)
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                logits = model(x)
                loss = loss_fn(logits, y)
        total_loss += float(loss.detach()) * len(y)
        correct += int((logits.argmax(dim=1) == y).sum())
        count += len(y)
    return total_loss / count, correct / count


def train(
    manifest: Manifest,
    images_root: str | Path,
    out_dir: str | Path,
    schedule: TrainSchedule | None = None,
    policy: AugmentationPolicy | None = None,
    arch: str = "baseline",
    balanced: bool = True,
    stop_at_train_acc: float | None = None,
) -> dict:
    """Train on the manifest's train split, validating on its val split.

    Returns a summary with the checkpoint paths and the metric history.
    ``stop_at_train_acc`` ends a stage early once the train accuracy
    reaches the given fraction (used by overfitting sanity checks).
    """
    schedule = schedule or TrainSchedule()
    set_determinism(schedule.seed)
    policy = policy_from_header(manifest.header, policy)

    train_set = VergeDataset(manifest, images_root, "train", policy, train=True, balanced=balanced)
    val_set = VergeDataset(manifest, images_root, "val", policy, train=False)

    model = build_model(arch, classes=manifest.classes)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    best_path = out_dir / "checkpoint_best.pt"
    last_path = out_dir / "checkpoint_last.pt"

    history = []
    best_val_acc = -1.0
    global_epoch = 0
    stopped = False
    with open(log_path, "w", encoding="utf-8") as log:
        for stage, (epochs, lr) in enumerate(
            ((schedule.stage1_epochs, schedule.stage1_lr), (schedule.stage2_epochs, schedule.stage2_lr)),
            start=1,
        ):
            if stopped or epochs <= 0:
                continue
            optimizer = torch.optim.Adam(model.parameters(), lr=lr)
            for _ in range(epochs):
                global_epoch += 1
                train_loss, train_acc = _run_epoch(
                    model, train_set, schedule.batch_size, schedule.seed, global_epoch, optimizer
                )
                val_loss, val_acc = _run_epoch(
                    model, val_set, schedule.batch_size, schedule.seed, global_epoch
                )
                entry = {
                    "stage": stage,
                    "epoch": global_epoch,
                    "lr": lr,
                    "train_loss": round(train_loss, 6),
                    "train_acc": round(train_acc, 6),
                    "val_loss": round(val_loss, 6),
                    "val_acc": round(val_acc, 6),
                }
                history.append(entry)
                log.write(json.dumps(entry) + "\n")
                log.flush()
                if val_acc > best_val_acc:
                    best_val_acc = val_acc
                    save_checkpoint(best_path, model, arch, manifest.classes, policy, entry)
                if stop_at_train_acc is not None and train_acc >= stop_at_train_acc:
                    stopped = True
                    break
    save_checkpoint(last_path, model, arch, manifest.classes, policy, history[-1])
    return {
        "history": history,
        "best_checkpoint": str(best_path),
        "last_checkpoint": str(last_path),
        "best_val_acc": best_val_acc,
        "epochs_run": global_epoch,
    }


def save_checkpoint(path, model, arch, classes, policy, metrics) -> None:
    torch.save(
        {
            "arch": arch,
            "classes": classes,
            "state_dict": model.state_dict(),
            "policy": asdict(policy),
            "metrics": metrics,
        },
        path,
    )


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = build_model(payload["arch"], classes=payload["classes"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    policy_data = dict(payload["policy"])
    for key in ("erase_area", "crop_scale", "norm_mean", "norm_std", "stochastic_order"):
        if key in policy_data and isinstance(policy_data[key], list):
            policy_data[key] = tuple(policy_data[key])
    policy = AugmentationPolicy(**policy_data)
    return model, policy, payload
