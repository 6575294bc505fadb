"""Per-modality geometric and photometric augmentation.

Each modality can draw its transforms from an independent stream derived
from one master seed ("decoupled" mode), in which case it also carries its
own co-transformed label map; in coupled mode one shared transform is
applied to both modalities and the single label map. All functions are
pure given an explicit stream, so per-sample augmentation may run in
parallel when each sample owns a split sub-stream.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import RGBDSample

SCALE_RANGE = (0.75, 1.25)
JITTER = 0.2


@dataclass(frozen=True)
class GeoTransform:
    """One sampled geometric transform: optional horizontal flip, isotropic
    scale, and a crop window (top-left origin) inside the scaled image."""

    flip_h: bool
    scale: float
    crop_origin: tuple[int, int]


def _scaled_dims(dims: tuple[int, int], scale: float) -> tuple[int, int]:
    return max(1, round(dims[0] * scale)), max(1, round(dims[1] * scale))


def sample_transform(
    rng: np.random.Generator,
    image_dims: tuple[int, int],
    scale_range: tuple[float, float] = SCALE_RANGE,
) -> GeoTransform:
    """Draw flip, scale and crop origin uniformly within bounds.

    Consecutive calls on one stream are independent draws. The crop window
    is the largest that fits both the scaled image and the training
    resolution, so its origin range shrinks with the scale.
    """
    height, width = image_dims
    if height < 2 or width < 2:
        raise ValueError(f"image {image_dims} smaller than minimum crop")
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(scale_range[0], scale_range[1]))
    sh, sw = _scaled_dims(image_dims, scale)
    crop_h, crop_w = min(height, sh), min(width, sw)
    row = int(rng.integers(0, sh - crop_h + 1))
    col = int(rng.integers(0, sw - crop_w + 1))
    return GeoTransform(flip_h=flip, scale=scale, crop_origin=(row, col))


def _resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _resize_labels(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(labels.astype(np.float32))[None, None]
    out = F.interpolate(t, size=size, mode="nearest")
    return out[0, 0].numpy().astype(labels.dtype)


def apply_geo(
    image: np.ndarray, labels: np.ndarray, t: GeoTransform
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one transform identically to an image (bilinear) and its label
    map (nearest neighbor), restoring the input resolution at the end."""
    if image.shape[:2] != labels.shape:
        raise ValueError(
            f"image {image.shape[:2]} and labels {labels.shape} are not aligned"
        )
    height, width = labels.shape
    img, lab = image, labels

    sh, sw = _scaled_dims((height, width), t.scale)
    if (sh, sw) != (height, width):
        img = _resize_image(img, (sh, sw))
        lab = _resize_labels(lab, (sh, sw))
    if t.flip_h:
        img = img[:, ::-1]
        lab = lab[:, ::-1]

    crop_h, crop_w = min(height, sh), min(width, sw)
    row, col = t.crop_origin
    if row < 0 or col < 0 or row + crop_h > sh or col + crop_w > sw:
        raise ValueError(f"crop {t.crop_origin} outside scaled image {(sh, sw)}")
    img = img[row : row + crop_h, col : col + crop_w]
    lab = lab[row : row + crop_h, col : col + crop_w]

    if (crop_h, crop_w) != (height, width):
        img = _resize_image(img, (height, width))
        lab = _resize_labels(lab, (height, width))
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab)


def color_jitter(
    image: np.ndarray, rng: np.random.Generator, strength: float = JITTER
) -> np.ndarray:
    """Perturb brightness, contrast and saturation by factors in
    [1 - strength, 1 + strength]; output clamped to [0, 1]. RGB only."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"color jitter needs a 3-channel image, got {image.shape}")
    if strength == 0.0:
        return image
    fb, fc, fs = rng.uniform(1.0 - strength, 1.0 + strength, size=3)
    out = image.astype(np.float32) * fb
    gray = out @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    out = gray.mean() + (out - gray.mean()) * fc
    out = gray[..., None] + (out - gray[..., None]) * fs
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _streams(master_seed, decoupled: bool):
    ss = np.random.SeedSequence(master_seed)
    geo_a, geo_b, jit = [np.random.default_rng(c) for c in ss.spawn(3)]
    if decoupled:
        return geo_a, geo_b, jit
    return geo_a, geo_a, jit


def augment_batch_decoupled(
    batch: Sequence[RGBDSample],
    master_seed,
    decoupled: bool,
    scale_range: tuple[float, float] = SCALE_RANGE,
    jitter: float = JITTER,
) -> tuple[tuple[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]:
    """Augment one batch, returning the RGB view and the Depth view.

    Decoupled mode samples the two modalities' geometric transforms from
    distinct sub-streams of the master seed and co-transforms a label map
    per modality. Coupled mode applies one shared transform to RGB, Depth
    and the single label map. Color jitter touches RGB only and draws from
    its own sub-stream in both modes.
    """
    rng_rgb, rng_d, rng_jit = _streams(master_seed, decoupled)
    rgb_imgs, rgb_labs, d_imgs, d_labs = [], [], [], []
    for sample in batch:
        dims = sample.labels.shape
        t_rgb = sample_transform(rng_rgb, dims, scale_range)
        x_rgb, y_rgb = apply_geo(sample.rgb, sample.labels, t_rgb)
        if decoupled:
            t_d = sample_transform(rng_d, dims, scale_range)
            x_d, y_d = apply_geo(sample.depth, sample.labels, t_d)
        else:
            x_d, _ = apply_geo(sample.depth, sample.labels, t_rgb)
            y_d = y_rgb
        x_rgb = color_jitter(x_rgb, rng_jit, jitter)
        rgb_imgs.append(x_rgb)
        rgb_labs.append(y_rgb)
        d_imgs.append(x_d)
        d_labs.append(y_d)

    def stack_view(imgs, labs):
        x = torch.from_numpy(np.stack(imgs)).float()
        y = torch.from_numpy(np.stack(labs).astype(np.int64))
        return x, y

    return stack_view(rgb_imgs, rgb_labs), stack_view(d_imgs, d_labs)
