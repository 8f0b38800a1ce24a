"""Local fixture builders: manifests, images, and pipeline inputs.

Kept free of vergepipe imports: the harness is exercised strictly through
the documented file formats (manifest JSONL + images), and the end-to-end
smoke drives the vergepipe CLI as a subprocess.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

LABEL_COLORS = {
    1: (200, 48, 40),
    2: (52, 180, 60),
    3: (48, 72, 208),
    4: (222, 202, 46),
}


def class_image(label: int, variant: int, size: int = 640) -> Image.Image:
    """Flat class-coloured tile with a deterministic per-variant shade."""
    rng = np.random.default_rng([label, variant])
    base = np.array(LABEL_COLORS[label], dtype=np.int16)
    shade = rng.integers(-24, 25, size=3)
    color = np.clip(base + shade, 0, 255).astype(np.uint8)
    arr = np.tile(color, (size, size, 1))
    # a few blocks of a lighter/darker shade so images are not constant
    for _ in range(4):
        x0, y0 = rng.integers(0, size - size // 8, size=2)
        w, h = rng.integers(size // 16, size // 6, size=2)
        delta = int(rng.integers(-40, 41))
        patch = np.clip(color.astype(np.int16) + delta, 0, 255).astype(np.uint8)
        arr[y0 : y0 + h, x0 : x0 + w] = patch
    return Image.fromarray(arr)


def write_manifest(
    root: str | Path,
    split_counts: dict[str, dict[int, int]],
    size: int = 640,
    classes: int = 4,
    norm_stats: bool = True,
) -> Path:
    """Manifest + images under ``root``; returns the manifest path.

    ``split_counts`` maps split name -> {label: count}.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    i = 0
    for split, per_label in split_counts.items():
        for label, count in per_label.items():
            for _ in range(count):
                rel = f"images/{i:05d}.png"
                class_image(label, i, size).save(root / rel)
                rows.append(
                    {
                        "sample_id": f"s{i:05d}",
                        "identity_key": f"pano{i:05d}|h90.00|f45|p20",
                        "label": label,
                        "raw_score": {1: 2, 2: 5, 3: 9, 4: 15}[label],
                        "section_id": f"sec-{label}",
                        "pano_id": f"pano{i:05d}",
                        "capture_date": [2009, 7],
                        "octant": "N",
                        "side": "left",
                        "locality": "Wolds",
                        "lat": 53.0,
                        "lon": -0.5,
                        "heading": 90.0,
                        "fov": 45.0,
                        "pitch": 20.0,
                        "width": size,
                        "height": size,
                        "image_path": rel,
                        "status": "active",
                        "purge_reason": None,
                        "split": split,
                        "fold": (i % 5) + 1,
                        "fetch_error": None,
                    }
                )
                i += 1
    header = {"schema": "vergepipe/manifest", "version": 1, "scheme": classes, "seed": 0}
    if norm_stats:
        header["norm_mean"] = [0.45, 0.42, 0.40]
        header["norm_std"] = [0.28, 0.27, 0.29]
    path = root / "manifest.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Pipeline inputs for the end-to-end smoke (local spherical math only)
# ---------------------------------------------------------------------------

EARTH_RADIUS_M = 6_371_000.0


def _move(lat: float, lon: float, bearing_deg: float, dist_m: float) -> tuple[float, float]:
    delta = dist_m / EARTH_RADIUS_M
    theta = math.radians(bearing_deg)
    phi1 = math.radians(lat)
    lam1 = math.radians(lon)
    phi2 = math.asin(
        math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    )
    lam2 = lam1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * math.sin(phi2),
    )
    return math.degrees(phi2), math.degrees(lam2)


def write_pipeline_inputs(root: str | Path, panos_per_road: int = 8, spacing_m: float = 15.0) -> dict:
    """KML + panorama fixture: four roads, one score class per road."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    class_scores = {1: 2, 2: 5, 3: 9, 4: 15}
    placemarks = []
    pano_lines = []
    for label, score in class_scores.items():
        lat0, lon0 = 53.0 + 0.02 * label, -0.5
        coords = []
        for i in range(panos_per_road):
            lat, lon = _move(lat0, lon0, 90.0, i * spacing_m)
            coords.append((lat, lon))
            neighbours = []
            if i > 0:
                neighbours.append(f"R{label}_{i-1:03d}")
            if i < panos_per_road - 1:
                neighbours.append(f"R{label}_{i+1:03d}")
            pano_lines.append(
                json.dumps(
                    {
                        "pano_id": f"R{label}_{i:03d}",
                        "lat": lat,
                        "lon": lon,
                        "year": 2009,
                        "month": 7,
                        "neighbours": neighbours,
                    }
                )
            )
        coord_text = " ".join(f"{lon:.7f},{lat:.7f},0" for lat, lon in coords)
        placemarks.append(
            f"<Placemark><name>road-{label}</name>"
            f'<ExtendedData><Data name="score_N"><value>{score}</value></Data>'
            f'<Data name="locality"><value>Wolds</value></Data></ExtendedData>'
            f"<LineString><coordinates>{coord_text}</coordinates></LineString></Placemark>"
        )
    (root / "survey.kml").write_text(
        '<?xml version="1.0" encoding="UTF-8"?>'
        '<kml xmlns="http://www.opengis.net/kml/2.2"><Document>'
        + "".join(placemarks)
        + "</Document></kml>"
    )
    (root / "panoramas.jsonl").write_text("\n".join(pano_lines) + "\n")
    return {
        "kml": str(root / "survey.kml"),
        "panos": str(root / "panoramas.jsonl"),
        "expected_samples": 4 * panos_per_road * 3,
    }
