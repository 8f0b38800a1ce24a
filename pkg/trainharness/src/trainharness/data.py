"""Dataset access over vergepipe manifest files.

The manifest is JSON lines: a header line (``schema`` =
"vergepipe/manifest", class count under ``scheme``, optional
``norm_mean``/``norm_std``) followed by one sample object per line. Only
Active samples with an image path participate in training; class labels
are 1-based in the file and 0-based as tensor targets.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .augment import AugmentationPolicy, augment

MANIFEST_SCHEMA = "vergepipe/manifest"


@dataclass
class Sample:
    sample_id: str
    label: int  # 1-based class
    image_path: str
    split: str | None
    fold: int | None


@dataclass
class Manifest:
    header: dict
    samples: list[Sample]

    @property
    def classes(self) -> int:
        return int(self.header.get("scheme", 4))

    def split_samples(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]


def read_manifest(path: str | Path) -> Manifest:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty manifest: {path}")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"not a vergepipe manifest: {path}")
    samples = []
    for line in lines[1:]:
        row = json.loads(line)
        if row.get("status") != "active" or not row.get("image_path"):
            continue
        samples.append(
            Sample(
                sample_id=row["sample_id"],
                label=int(row["label"]),
                image_path=row["image_path"],
                split=row.get("split"),
                fold=row.get("fold"),
            )
        )
    return Manifest(header=header, samples=samples)


def policy_from_header(header: dict, policy: AugmentationPolicy | None = None) -> AugmentationPolicy:
    """Adopt the manifest's train-split normalisation statistics if present."""
    from dataclasses import replace

    base = policy if policy is not None else AugmentationPolicy()
    if "norm_mean" in header and "norm_std" in header:
        return replace(
            base,
            norm_mean=tuple(float(v) for v in header["norm_mean"]),
            norm_std=tuple(max(float(v), 1e-6) for v in header["norm_std"]),
        )
    return base


def balanced_order(samples: list[Sample]) -> list[int]:
    """Index order with minority classes replicated up to the majority.

    Replications spread round-robin over each class's samples in sample_id
    order (max spread one), mirroring the curation-side oversampling plan.
    """
    by_label: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_label.setdefault(s.label, []).append(i)
    for members in by_label.values():
        members.sort(key=lambda i: samples[i].sample_id)
    majority = max(len(m) for m in by_label.values())
    order: list[int] = []
    for label in sorted(by_label):
        members = by_label[label]
        extra = majority - len(members)
        base, rem = divmod(extra, len(members))
        for rank, idx in enumerate(members):
            order.extend([idx] * (1 + base + (1 if rank < rem else 0)))
    return order


class VergeDataset:
    """Image/label access with policy-driven preprocessing."""

    def __init__(
        self,
        manifest: Manifest,
        images_root: str | Path,
        split: str,
        policy: AugmentationPolicy,
        train: bool = False,
        balanced: bool = False,
    ):
        self.samples = manifest.split_samples(split)
        if not self.samples:
            raise ValueError(f"empty split {split!r}")
        missing = [
            s.image_path
            for s in self.samples
            if not (Path(images_root) / s.image_path).exists()
        ]
        if missing:
            raise FileNotFoundError(
                f"{len(missing)} image files missing, e.g. {missing[:3]}"
            )
        self.images_root = Path(images_root)
        self.policy = policy if train else policy.without_stochastic()
        self.train = train
        self.order = balanced_order(self.samples) if balanced else list(range(len(self.samples)))

    def __len__(self) -> int:
        return len(self.order)

    def load(self, position: int, rng: np.random.Generator):
        """Tensor, 0-based target, and sample id for one epoch position."""
        sample = self.samples[self.order[position]]
        image = Image.open(self.images_root / sample.image_path).convert("RGB")
        arr = augment(image, self.policy, rng)
        return torch.from_numpy(arr), sample.label - 1, sample.sample_id

    def epoch_label_histogram(self) -> Counter:
        return Counter(self.samples[i].label for i in self.order)


def iter_batches(
    dataset: VergeDataset,
    batch_size: int,
    seed: int,
    epoch: int,
    shuffle: bool = True,
):
    """Deterministic batch iterator.

    The shuffle order and every per-item augmentation stream derive from
    (seed, epoch, position), so a rerun with the same seed reproduces
    identical batches with no hidden global RNG state.
    """
    positions = np.arange(len(dataset))
    if shuffle:
        np.random.default_rng([seed, epoch]).shuffle(positions)
    for start in range(0, len(positions), batch_size):
        chunk = positions[start : start + batch_size]
        tensors, targets, ids = [], [], []
        for position in chunk:
            rng = np.random.default_rng([seed, epoch, int(position)])
            x, y, sid = dataset.load(int(position), rng)
            tensors.append(x)
            targets.append(y)
            ids.append(sid)
        yield torch.stack(tensors), torch.tensor(targets, dtype=torch.long), ids
