"""Stochastic augmentation policy plus the fixed preprocessing group.

Stochastic transforms fire independently with their configured
probabilities, in policy order: horizontal flip, random erasing,
salt-and-pepper noise, crop-and-resize, perspective distortion, small
rotation. The deterministic group always runs last: crop the sky and
road margins (top 174 px, bottom 40 px), downscale to 384x384, and
normalise to zero mean / unit variance per channel.

All randomness comes from the caller's numpy Generator, so an identical
generator state reproduces the output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image


@dataclass
class AugmentationPolicy:
    flip_p: float = 0.5
    erase_p: float = 0.7
    erase_area: tuple[float, float] = (0.02, 0.2)
    noise_p: float = 0.3
    noise_coverage: float = 0.10
    crop_p: float = 0.5
    crop_scale: tuple[float, float] = (0.6, 0.95)
    perspective_p: float = 0.5
    perspective_distortion: float = 0.5
    rotate_p: float = 0.5
    rotate_degrees: float = 5.0

    input_size: int = 640
    crop_top: int = 174
    crop_bottom: int = 40
    output_size: int = 384
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    stochastic_order: tuple[str, ...] = field(
        default=("flip", "erase", "noise", "crop", "perspective", "rotate")
    )

    def probability(self, name: str) -> float:
        return getattr(self, f"{name}_p")

    def without_stochastic(self) -> "AugmentationPolicy":
        from dataclasses import replace

        return replace(
            self, flip_p=0.0, erase_p=0.0, noise_p=0.0, crop_p=0.0,
            perspective_p=0.0, rotate_p=0.0,
        )


def _flip(arr: np.ndarray) -> np.ndarray:
    return arr[:, ::-1].copy()


def _erase(arr: np.ndarray, rng: np.random.Generator, area_range) -> np.ndarray:
    h, w = arr.shape[:2]
    area = rng.uniform(*area_range) * h * w
    aspect = rng.uniform(0.3, 3.3)
    eh = int(round(np.sqrt(area * aspect)))
    ew = int(round(np.sqrt(area / aspect)))
    eh, ew = min(max(eh, 1), h), min(max(ew, 1), w)
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    arr = arr.copy()
    arr[top : top + eh, left : left + ew] = rng.integers(
        0, 256, size=(eh, ew, 3), dtype=np.uint8
    )
    return arr


def _salt_pepper(arr: np.ndarray, rng: np.random.Generator, coverage: float) -> np.ndarray:
    h, w = arr.shape[:2]
    n = int(coverage * h * w)
    ys = rng.integers(0, h, size=n)
    xs = rng.integers(0, w, size=n)
    salt = rng.random(n) < 0.5
    arr = arr.copy()
    arr[ys[salt], xs[salt]] = 255
    arr[ys[~salt], xs[~salt]] = 0
    return arr


def _crop_resize(arr: np.ndarray, rng: np.random.Generator, scale_range) -> np.ndarray:
    h, w = arr.shape[:2]
    scale = rng.uniform(*scale_range)
    ch, cw = int(h * scale), int(w * scale)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    img = Image.fromarray(arr[top : top + ch, left : left + cw])
    return np.asarray(img.resize((w, h), Image.BILINEAR))


def _perspective(arr: np.ndarray, rng: np.random.Generator, distortion: float) -> np.ndarray:
    h, w = arr.shape[:2]
    dx = distortion * w / 2.0
    dy = distortion * h / 2.0
    # source quad corners (NW, SW, SE, NE), each jittered inward/outward
    jitter = lambda: (rng.uniform(-dx, dx), rng.uniform(-dy, dy))
    (x0, y0), (x1, y1), (x2, y2), (x3, y3) = (jitter() for _ in range(4))
    quad = (
        0 + x0, 0 + y0,
        0 + x1, h + y1,
        w + x2, h + y2,
        w + x3, 0 + y3,
    )
    img = Image.fromarray(arr)
    return np.asarray(img.transform((w, h), Image.QUAD, quad, Image.BILINEAR))


def _rotate(arr: np.ndarray, rng: np.random.Generator, degrees: float) -> np.ndarray:
    angle = rng.uniform(-degrees, degrees)
    img = Image.fromarray(arr)
    return np.asarray(img.rotate(angle, Image.BILINEAR))


_TRANSFORMS = {
    "flip": lambda arr, rng, p: _flip(arr),
    "erase": lambda arr, rng, p: _erase(arr, rng, p.erase_area),
    "noise": lambda arr, rng, p: _salt_pepper(arr, rng, p.noise_coverage),
    "crop": lambda arr, rng, p: _crop_resize(arr, rng, p.crop_scale),
    "perspective": lambda arr, rng, p: _perspective(arr, rng, p.perspective_distortion),
    "rotate": lambda arr, rng, p: _rotate(arr, rng, p.rotate_degrees),
}


def deterministic_group(arr: np.ndarray, policy: AugmentationPolicy) -> np.ndarray:
    """Fixed crop, downscale, and normalise; output float32 (3, out, out).

    The crop margins are defined on the raw capture geometry, so an image
    that is already cropped/downscaled passes through geometrically
    unchanged (only normalisation applies again).
    """
    h = arr.shape[0]
    if h == policy.input_size:
        arr = arr[policy.crop_top : h - policy.crop_bottom]
    if arr.shape[0] != policy.output_size or arr.shape[1] != policy.output_size:
        img = Image.fromarray(arr).resize(
            (policy.output_size, policy.output_size), Image.BILINEAR
        )
        arr = np.asarray(img)
    out = arr.astype(np.float32) / 255.0
    mean = np.asarray(policy.norm_mean, dtype=np.float32)
    std = np.asarray(policy.norm_std, dtype=np.float32)
    out = (out - mean) / std
    return out.transpose(2, 0, 1)


def augment(
    image,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    applied: list[str] | None = None,
) -> np.ndarray:
    """Apply the policy to one RGB image; returns float32 (3, 384, 384).

    ``applied`` (when given) collects the names of the stochastic
    transforms that fired, for statistical tests and debugging.
    """
    if isinstance(image, Image.Image):
        arr = np.asarray(image.convert("RGB"))
    else:
        arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {arr.shape}")
    if arr.shape[0] != policy.input_size or arr.shape[1] != policy.input_size:
        raise ValueError(
            f"expected {policy.input_size}x{policy.input_size} input, "
            f"got {arr.shape[1]}x{arr.shape[0]}"
        )
    arr = arr.astype(np.uint8, copy=False)
    for name in policy.stochastic_order:
        if rng.random() < policy.probability(name):
            arr = _TRANSFORMS[name](arr, rng, policy)
            if applied is not None:
                applied.append(name)
    return deterministic_group(arr, policy)
