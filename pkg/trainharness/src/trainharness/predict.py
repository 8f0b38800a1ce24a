"""Prediction and embedding export against a manifest split.

Predictions use only the deterministic preprocessing group and write the
evaluation-ready CSV: ``sample_id,true_class,pred_class,score_1..score_k``
with softmax scores. Embeddings export the penultimate-layer vector per
sample (6400-wide for the baseline).
"""

from __future__ import annotations

import csv
from pathlib import Path

import torch

from .data import Manifest, VergeDataset, iter_batches
from .model import embed_batch
from .train import load_checkpoint


def predict(
    checkpoint_path: str | Path,
    manifest: Manifest,
    images_root: str | Path,
    split: str,
    out_csv: str | Path,
    batch_size: int = 32,
) -> Path:
    model, policy, payload = load_checkpoint(checkpoint_path)
    dataset = VergeDataset(manifest, images_root, split, policy, train=False)
    k = payload["classes"]
    by_id = {s.sample_id: s for s in dataset.samples}

    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "true_class", "pred_class"] + [f"score_{c}" for c in range(1, k + 1)]
        )
        with torch.no_grad():
            for x, _, ids in iter_batches(dataset, batch_size, seed=0, epoch=0, shuffle=False):
                probs = torch.softmax(model(x), dim=1)
                preds = probs.argmax(dim=1)
                for sid, pred, row in zip(ids, preds, probs):
                    writer.writerow(
                        [sid, by_id[sid].label, int(pred) + 1]
                        + [f"{float(v):.6f}" for v in row]
                    )
    return out_csv


def export_embeddings(
    checkpoint_path: str | Path,
    manifest: Manifest,
    images_root: str | Path,
    split: str,
    out_csv: str | Path,
    batch_size: int = 32,
) -> Path:
    model, policy, _ = load_checkpoint(checkpoint_path)
    dataset = VergeDataset(manifest, images_root, split, policy, train=False)
    by_id = {s.sample_id: s for s in dataset.samples}

    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    width = None
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        with torch.no_grad():
            for x, _, ids in iter_batches(dataset, batch_size, seed=0, epoch=0, shuffle=False):
                vectors = embed_batch(model, x)
                if width is None:
                    width = vectors.shape[1]
                    writer.writerow(
                        ["sample_id", "label"] + [f"v{i}" for i in range(width)]
                    )
                for sid, vec in zip(ids, vectors):
                    writer.writerow(
                        [sid, by_id[sid].label] + [f"{float(v):.6f}" for v in vec]
                    )
    return out_csv
