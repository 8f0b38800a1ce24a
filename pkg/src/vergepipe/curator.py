"""Dataset curation: filter, dedup, purge, split, balance, persist, download.

The manifest is the pipeline's central artifact: JSON lines with a
schema-versioned header line followed by one sample per line. Samples are
never deleted by curation ops, only re-labelled Active/Purged/Duplicate, so
counts always conserve and every op is idempotent.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import random
import threading
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .geodesy import CompassOctant, VergeSide
from .panoindex import BackendAuthError, RetryableBackendError
from .survey import Locality, Scheme

MANIFEST_SCHEMA = "vergepipe/manifest"
MANIFEST_VERSION = 1

DEFAULT_SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


class SampleStatus(Enum):
    ACTIVE = "active"
    PURGED = "purged"
    DUPLICATE = "duplicate"


class SplitName(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class PurgeReason(Enum):
    CAR = "Car"
    HOUSE = "House"
    CUT_VERGE = "CutVerge"
    VERGE_NOT_VISIBLE = "VergeNotVisible"
    OTHER = "Other"


@dataclass
class ManifestSample:
    """One labelled image sample with provenance and curation state."""

    sample_id: str
    identity_key: str
    label: int
    raw_score: int
    section_id: str
    pano_id: str
    capture_date: tuple[int, int]
    octant: CompassOctant
    side: VergeSide
    locality: Locality
    lat: float
    lon: float
    heading: float
    fov: float = 45.0
    pitch: float = 20.0
    width: int = 640
    height: int = 640
    image_path: str | None = None
    status: SampleStatus = SampleStatus.ACTIVE
    purge_reason: PurgeReason | None = None
    split: SplitName | None = None
    fold: int | None = None
    fetch_error: str | None = None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "identity_key": self.identity_key,
            "label": self.label,
            "raw_score": self.raw_score,
            "section_id": self.section_id,
            "pano_id": self.pano_id,
            "capture_date": list(self.capture_date),
            "octant": self.octant.name,
            "side": self.side.value,
            "locality": self.locality.value,
            "lat": self.lat,
            "lon": self.lon,
            "heading": self.heading,
            "fov": self.fov,
            "pitch": self.pitch,
            "width": self.width,
            "height": self.height,
            "image_path": self.image_path,
            "status": self.status.value,
            "purge_reason": self.purge_reason.value if self.purge_reason else None,
            "split": self.split.value if self.split else None,
            "fold": self.fold,
            "fetch_error": self.fetch_error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestSample":
        return cls(
            sample_id=d["sample_id"],
            identity_key=d["identity_key"],
            label=int(d["label"]),
            raw_score=int(d["raw_score"]),
            section_id=d["section_id"],
            pano_id=d["pano_id"],
            capture_date=(int(d["capture_date"][0]), int(d["capture_date"][1])),
            octant=CompassOctant[d["octant"]],
            side=VergeSide(d["side"]),
            locality=Locality(d["locality"]),
            lat=float(d["lat"]),
            lon=float(d["lon"]),
            heading=float(d["heading"]),
            fov=float(d.get("fov", 45.0)),
            pitch=float(d.get("pitch", 20.0)),
            width=int(d.get("width", 640)),
            height=int(d.get("height", 640)),
            image_path=d.get("image_path"),
            status=SampleStatus(d.get("status", "active")),
            purge_reason=PurgeReason(d["purge_reason"]) if d.get("purge_reason") else None,
            split=SplitName(d["split"]) if d.get("split") else None,
            fold=d.get("fold"),
            fetch_error=d.get("fetch_error"),
        )


def make_sample_id(section_id: str, identity_key: str) -> str:
    digest = hashlib.sha1(f"{section_id}|{identity_key}".encode("utf-8")).hexdigest()
    return f"s{digest[:12]}"


@dataclass
class DatasetManifest:
    samples: list[ManifestSample] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        base = {"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION}
        base.update(self.header)
        self.header = base

    def active(self) -> list[ManifestSample]:
        return [s for s in self.samples if s.status is SampleStatus.ACTIVE]

    def by_id(self) -> dict[str, ManifestSample]:
        return {s.sample_id: s for s in self.samples}

    def status_counts(self) -> Counter:
        return Counter(s.status for s in self.samples)

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header, sort_keys=True)]
        lines.extend(json.dumps(s.to_dict(), sort_keys=True) for s in self.samples)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty manifest")
        header = json.loads(lines[0])
        if header.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"not a manifest file (schema={header.get('schema')!r})")
        samples = [ManifestSample.from_dict(json.loads(ln)) for ln in lines[1:]]
        return cls(samples=samples, header=header)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterCriteria:
    """Capture-date and locality filter. ``None`` leaves a dimension open."""

    localities: frozenset[Locality] | None = None
    years: frozenset[int] | None = None
    months: frozenset[int] | None = None

    def __post_init__(self) -> None:
        for name in ("localities", "years", "months"):
            value = getattr(self, name)
            if value is not None and len(value) == 0:
                raise ValueError(f"{name} filter enabled but empty")
        if self.months is not None and not all(1 <= m <= 12 for m in self.months):
            raise ValueError("months must be within 1..12")

    def matches(self, locality: Locality, year: int, month: int) -> bool:
        if self.localities is not None and locality not in self.localities:
            return False
        if self.years is not None and year not in self.years:
            return False
        if self.months is not None and month not in self.months:
            return False
        return True


def apply_filters(samples: Sequence[ManifestSample], criteria: FilterCriteria) -> list[ManifestSample]:
    """Keep samples whose capture date and locality satisfy the criteria."""
    return [
        s
        for s in samples
        if criteria.matches(s.locality, s.capture_date[0], s.capture_date[1])
    ]


# ---------------------------------------------------------------------------
# Dedup / purge
# ---------------------------------------------------------------------------


def dedup(manifest: DatasetManifest) -> DatasetManifest:
    """Mark repeated identity keys Duplicate, keeping the first per key.

    "First" is the least (section_id, sample_id) pair, so sections sharing a
    panorama deterministically concede to the earliest section. Purged
    samples keep their status. Idempotent.
    """
    groups: dict[str, list[ManifestSample]] = defaultdict(list)
    for sample in manifest.samples:
        if sample.status is not SampleStatus.PURGED:
            groups[sample.identity_key].append(sample)
    for members in groups.values():
        members.sort(key=lambda s: (s.section_id, s.sample_id))
        members[0].status = SampleStatus.ACTIVE
        for other in members[1:]:
            other.status = SampleStatus.DUPLICATE
    return manifest


@dataclass(frozen=True)
class PurgeEntry:
    sample_id: str
    reason: PurgeReason


def read_purge_list(path: str | Path) -> list[PurgeEntry]:
    """Read a ``sample_id,reason`` CSV (header row optional)."""
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip() or row[0].lstrip().startswith("#"):
                continue
            if row[0].strip().lower() == "sample_id":
                continue
            if len(row) < 2:
                raise ValueError(f"purge row needs sample_id,reason: {row!r}")
            entries.append(PurgeEntry(row[0].strip(), PurgeReason(row[1].strip())))
    return entries


def apply_purge(manifest: DatasetManifest, purge_list: Sequence[PurgeEntry]) -> DatasetManifest:
    """Mark listed samples Purged with their reason. Idempotent.

    Every unknown sample_id is collected and reported in one error so a bad
    purge file can be fixed in a single pass.
    """
    by_id = manifest.by_id()
    unknown = sorted({e.sample_id for e in purge_list} - by_id.keys())
    if unknown:
        raise ValueError(f"purge list names unknown sample ids: {', '.join(unknown)}")
    for entry in purge_list:
        sample = by_id[entry.sample_id]
        if sample.status is SampleStatus.PURGED:
            continue
        sample.status = SampleStatus.PURGED
        sample.purge_reason = entry.reason
    return manifest


# ---------------------------------------------------------------------------
# Splitting, folds, class balancing
# ---------------------------------------------------------------------------


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = [total * f for f in fractions]
    counts = [int(x) for x in raw]
    shortfall = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (raw[i] - counts[i], -i), reverse=True)
    for i in order[:shortfall]:
        counts[i] += 1
    return counts


def _check_class_sizes(active: Sequence[ManifestSample]) -> dict[int, list[ManifestSample]]:
    by_label: dict[int, list[ManifestSample]] = defaultdict(list)
    for s in active:
        by_label[s.label].append(s)
    small = sorted(label for label, members in by_label.items() if len(members) < 3)
    if small:
        raise ValueError(f"classes with fewer than 3 active samples: {small}")
    return by_label


def split(
    manifest: DatasetManifest,
    fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS,
    seed: int = 0,
) -> DatasetManifest:
    """Assign Active samples to train/val/test, stratified by label.

    All samples of one panorama land in the same split (the three-heading
    extraction makes same-panorama images near-duplicates, and letting them
    straddle splits would leak). Panorama groups are shuffled under the seed
    and dealt greedily to whichever split is furthest below its per-class
    target, so proportions stay within a group's size of exact.
    """
    fracs = [float(f) for f in fractions]
    if len(fracs) != 3:
        raise ValueError("fractions must be (train, val, test)")
    total_f = sum(fracs)
    if total_f <= 0:
        raise ValueError("fractions must sum to a positive value")
    fracs = [f / total_f for f in fracs]

    active = manifest.active()
    by_label = _check_class_sizes(active)
    labels = sorted(by_label)
    if len(active) < 3 * len(labels):
        raise ValueError("too few active samples to split")

    # per-class per-split targets
    targets = {
        label: _largest_remainder(len(members), fracs) for label, members in by_label.items()
    }
    deficits = {label: list(t) for label, t in targets.items()}

    # panorama groups, each tagged with its dominant label
    groups: dict[str, list[ManifestSample]] = defaultdict(list)
    for s in active:
        groups[s.pano_id].append(s)
    group_label: dict[str, int] = {}
    for pid, members in groups.items():
        counts = Counter(s.label for s in members)
        top = max(counts.values())
        group_label[pid] = min(l for l, c in counts.items() if c == top)

    rng = random.Random(seed)
    splits = (SplitName.TRAIN, SplitName.VAL, SplitName.TEST)
    for label in labels:
        pids = sorted(pid for pid, gl in group_label.items() if gl == label)
        rng.shuffle(pids)
        for pid in pids:
            members = groups[pid]
            # pick the split with the largest remaining deficit for this label
            best = max(range(3), key=lambda i: (deficits[label][i], -i))
            for s in members:
                s.split = splits[best]
                if s.label in deficits:
                    deficits[s.label][best] -= 1
    manifest.header["split_fractions"] = fracs
    manifest.header["seed"] = seed
    return manifest


def make_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> DatasetManifest:
    """Stratified k-fold partition of Active samples (folds numbered 1..k)."""
    if k < 2:
        raise ValueError("k must be at least 2")
    active = manifest.active()
    by_label = _check_class_sizes(active)
    rng = random.Random(seed)
    for label in sorted(by_label):
        members = sorted(by_label[label], key=lambda s: s.sample_id)
        rng.shuffle(members)
        for i, sample in enumerate(members):
            sample.fold = (i % k) + 1
    manifest.header["folds"] = k
    return manifest


def oversample_plan(
    manifest: DatasetManifest, split_name: SplitName = SplitName.TRAIN
) -> list[tuple[str, int]]:
    """Replication counts that balance every class up to the majority class.

    Classes are the labels observed among Active samples; a class absent
    from the requested split cannot be balanced and is an error. Within a
    class the extra copies are spread round-robin (max spread of one) over
    its samples in sample_id order.
    """
    active = manifest.active()
    all_labels = sorted({s.label for s in active})
    members_by_label: dict[int, list[ManifestSample]] = {
        label: sorted(
            (s for s in active if s.split is split_name and s.label == label),
            key=lambda s: s.sample_id,
        )
        for label in all_labels
    }
    empty = [label for label, members in members_by_label.items() if not members]
    if empty:
        raise ValueError(f"empty class in {split_name.value} split: {empty}")

    majority = max(len(m) for m in members_by_label.values())
    plan: list[tuple[str, int]] = []
    for label in all_labels:
        members = members_by_label[label]
        extra = majority - len(members)
        base, rem = divmod(extra, len(members))
        for i, sample in enumerate(members):
            plan.append((sample.sample_id, base + (1 if i < rem else 0)))
    return plan


# ---------------------------------------------------------------------------
# Image download
# ---------------------------------------------------------------------------


class SyntheticImageBackend:
    """Deterministic mock image source.

    Renders each sample as a flat class-coloured tile with a per-sample
    shade and a few rectangles derived from the identity key, so repeated
    runs produce byte-identical files and downstream classifiers have a
    separable signal to learn. ``fail_ids`` simulates per-image fetch
    failures.
    """

    LABEL_COLORS = {
        1: (200, 48, 40),
        2: (52, 180, 60),
        3: (48, 72, 208),
        4: (222, 202, 46),
        5: (164, 52, 204),
    }

    def __init__(self, size: int = 640, fail_ids: set[str] | None = None):
        self.size = size
        self.fail_ids = fail_ids or set()
        self.calls = 0

    def fetch(self, sample: ManifestSample) -> bytes:
        self.calls += 1
        if sample.sample_id in self.fail_ids:
            raise RetryableBackendError(f"simulated fetch failure for {sample.sample_id}")
        from PIL import Image, ImageDraw

        seed = int.from_bytes(
            hashlib.sha1(sample.identity_key.encode("utf-8")).digest()[:4], "big"
        )
        rng = random.Random(seed)
        base = self.LABEL_COLORS.get(sample.label, (128, 128, 128))
        shade = rng.randint(-24, 24)
        color = tuple(min(255, max(0, c + shade)) for c in base)
        img = Image.new("RGB", (self.size, self.size), color)
        draw = ImageDraw.Draw(img)
        min_side = max(2, self.size // 32)
        max_side = max(min_side + 1, self.size // 4)
        for _ in range(6):
            x0 = rng.randint(0, self.size - min_side)
            y0 = rng.randint(0, self.size - min_side)
            w = rng.randint(min_side, max_side)
            h = rng.randint(min_side, max_side)
            delta = rng.randint(-40, 40)
            patch = tuple(min(255, max(0, c + delta)) for c in color)
            draw.rectangle([x0, y0, min(self.size, x0 + w), min(self.size, y0 + h)], fill=patch)
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


class HttpImageBackend:
    """Live static-image endpoint client using the documented query order."""

    def __init__(self, base_url: str, api_key: str | None = None, timeout_s: float = 30.0, session=None):
        import os

        from .panoindex import CREDENTIAL_ENV_VAR

        self.base_url = base_url
        self.api_key = api_key if api_key is not None else os.environ.get(CREDENTIAL_ENV_VAR)
        self.timeout_s = timeout_s
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self.calls = 0

    def fetch(self, sample: ManifestSample) -> bytes:
        from .panoindex import CREDENTIAL_ENV_VAR

        if not self.api_key:
            raise BackendAuthError(
                f"no credential: set the {CREDENTIAL_ENV_VAR} environment variable"
            )
        import requests

        self.calls += 1
        params = [
            ("pano", sample.pano_id),
            ("heading", f"{sample.heading:.2f}"),
            ("fov", f"{sample.fov:g}"),
            ("pitch", f"{sample.pitch:g}"),
            ("size", f"{sample.width}x{sample.height}"),
            ("key", self.api_key),
        ]
        try:
            resp = self._session.get(self.base_url, params=params, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise RetryableBackendError(f"image request failed: {exc}") from exc
        if resp.status_code in (401, 403):
            raise BackendAuthError(
                f"image endpoint rejected the credential from {CREDENTIAL_ENV_VAR} "
                f"(HTTP {resp.status_code})"
            )
        if resp.status_code >= 500:
            raise RetryableBackendError(f"image endpoint returned HTTP {resp.status_code}")
        resp.raise_for_status()
        return resp.content


def image_relpath(identity_key: str) -> str:
    digest = hashlib.sha1(identity_key.encode("utf-8")).hexdigest()
    return f"images/{digest[:2]}/{digest}.png"


def download_images(
    manifest: DatasetManifest,
    backend,
    root_dir: str | Path,
    *,
    workers: int = 4,
    max_attempts: int = 5,
    base_delay_s: float = 0.05,
) -> DatasetManifest:
    """Fetch the image for every Active sample, at most once per identity key.

    Files are content-addressed under ``root_dir`` by identity-key hash, so
    a re-run finds everything on disk and issues zero fetches. A failing
    image is recorded on its sample (after retries) without aborting the
    batch; auth failures abort immediately since no later fetch could
    succeed.
    """
    import time as _time

    root = Path(root_dir)
    targets = manifest.active()
    lock = threading.Lock()

    def fetch_one(sample: ManifestSample) -> None:
        rel = image_relpath(sample.identity_key)
        dest = root / rel
        if dest.exists():
            with lock:
                sample.image_path = rel
                sample.fetch_error = None
            return
        attempt = 0
        while True:
            try:
                data = backend.fetch(sample)
                break
            except RetryableBackendError as exc:
                attempt += 1
                if attempt >= max_attempts:
                    with lock:
                        sample.fetch_error = str(exc)
                        sample.image_path = None
                    return
                _time.sleep(base_delay_s * (2.0 ** (attempt - 1)))
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = dest.with_suffix(".tmp")
        tmp.write_bytes(data)
        tmp.replace(dest)
        with lock:
            sample.image_path = rel
            sample.fetch_error = None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(fetch_one, targets))
    return manifest


def compute_norm_stats(
    manifest: DatasetManifest, root_dir: str | Path
) -> tuple[list[float], list[float]]:
    """Per-channel mean/std over the train-split images (all Active if unsplit).

    Stored in the manifest header so training consumers normalise with
    dataset statistics instead of guessing.
    """
    import numpy as np
    from PIL import Image

    root = Path(root_dir)
    samples = [s for s in manifest.active() if s.image_path]
    train = [s for s in samples if s.split is SplitName.TRAIN]
    chosen = train or samples
    if not chosen:
        raise ValueError("no images available for normalisation statistics")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for sample in chosen:
        arr = np.asarray(Image.open(root / sample.image_path).convert("RGB"), dtype=np.float64)
        arr /= 255.0
        total += arr.mean(axis=(0, 1))
        total_sq += (arr**2).mean(axis=(0, 1))
        count += 1
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 1e-12)
    std = np.sqrt(var)
    manifest.header["norm_mean"] = [round(float(v), 8) for v in mean]
    manifest.header["norm_std"] = [round(float(v), 8) for v in std]
    return manifest.header["norm_mean"], manifest.header["norm_std"]


def build_manifest(
    rows: Iterable[ManifestSample],
    scheme: Scheme,
    *,
    seed: int = 0,
    extra_header: dict | None = None,
) -> DatasetManifest:
    header = {"scheme": scheme.num_classes, "seed": seed}
    if extra_header:
        header.update(extra_header)
    samples = sorted(rows, key=lambda s: (s.section_id, s.sample_id))
    return DatasetManifest(samples=samples, header=header)
