"""Synthetic RGBD scene generation and on-disk dataset ingestion.

Synthetic scenes are Voronoi partitions where every class owns a
characteristic color and a characteristic depth plane. The palette makes
the two modalities complementary: classes 0 and 1 share their mean color
(distinguishable in RGB only through noise texture) but sit on well
separated depth planes, while classes 2 and 3 share a depth plane but have
distinct colors. A per-pixel classifier on the wrong modality therefore
confuses the pair well above chance.

On-disk datasets are 8-bit RGB PNGs, 16-bit single-channel depth PNGs and
8-bit label PNGs listed in a JSON-lines manifest whose header declares
`num_classes` and the `depth_divisor` used to normalize depth to [0, 1].
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .core import IGNORE_INDEX, RGBDSample


class DataError(ValueError):
    """Missing, corrupt or inconsistent dataset file."""


@dataclass(frozen=True)
class ClassPalette:
    colors: np.ndarray        # C x 3 mean colors
    color_sigma: np.ndarray   # C     per-class color noise
    depths: np.ndarray        # C     mean depth planes
    depth_sigma: np.ndarray   # C     per-class depth noise


def class_palette(num_classes: int) -> ClassPalette:
    """Deterministic palette for a given class count (no RNG involved), so
    datasets generated from different seeds stay mutually compatible."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    colors = np.array(
        [colorsys.hsv_to_rgb(c / num_classes, 0.6, 0.75) for c in range(num_classes)],
        dtype=np.float32,
    )
    color_sigma = np.full(num_classes, 0.04, dtype=np.float32)
    depths = np.linspace(0.2, 0.85, num_classes, dtype=np.float32)
    depth_sigma = np.full(num_classes, 0.02, dtype=np.float32)

    # Color-confusable pair (0, 1): identical mean color, different texture.
    colors[1] = colors[0]
    color_sigma[0], color_sigma[1] = 0.03, 0.12
    if num_classes >= 4:
        # Depth-confusable pair (2, 3): identical depth plane, different texture.
        depths[3] = depths[2]
        depth_sigma[2], depth_sigma[3] = 0.02, 0.10
    return ClassPalette(colors, color_sigma, depths, depth_sigma)


def _voronoi_seeds(rng: np.random.Generator, height: int, width: int, count: int) -> np.ndarray:
    """Seed points with a margin and a minimum pairwise separation so no
    region degenerates to a sliver."""
    margin = 0.12
    min_dist = 0.3 * min(height, width)
    lo_r, hi_r = margin * height, (1 - margin) * height
    lo_c, hi_c = margin * width, (1 - margin) * width
    for _ in range(200):
        pts = np.stack([rng.uniform(lo_r, hi_r, count), rng.uniform(lo_c, hi_c, count)], axis=1)
        diffs = pts[:, None, :] - pts[None, :, :]
        dists = np.sqrt((diffs**2).sum(-1)) + np.eye(count) * 1e9
        if dists.min() >= min_dist:
            return pts
        min_dist *= 0.95  # relax gradually; dense class counts need it
    return pts


def generate_synthetic(
    seed: int, n_images: int, height: int, width: int, num_classes: int
) -> list[RGBDSample]:
    """Deterministically generate Voronoi RGBD scenes with the complementary
    palette described in the module docstring."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    palette = class_palette(num_classes)
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:height, 0:width]
    samples = []
    for _ in range(n_images):
        pts = _voronoi_seeds(rng, height, width, num_classes)
        d2 = (rows[None] - pts[:, 0, None, None]) ** 2 + (cols[None] - pts[:, 1, None, None]) ** 2
        labels = d2.argmin(axis=0).astype(np.int64)

        csig = palette.color_sigma[labels][..., None]
        rgb = palette.colors[labels] + rng.normal(0.0, 1.0, (height, width, 3)) * csig
        dsig = palette.depth_sigma[labels][..., None]
        depth = palette.depths[labels][..., None] + rng.normal(0.0, 1.0, (height, width, 1)) * dsig

        samples.append(
            RGBDSample(
                rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
                depth=np.clip(depth, 0.0, 1.0).astype(np.float32),
                labels=labels,
            ).validate(num_classes)
        )
    return samples


@dataclass
class DatasetManifest:
    entries: list[dict]
    num_classes: int
    depth_divisor: float
    split: str = "train"
    root: Path = field(default_factory=Path)
    depth_norm: str = "divisor"  # or "minmax" for per-image min-max scaling


def write_dataset(
    samples: Sequence[RGBDSample],
    out_dir: str | Path,
    num_classes: int,
    split: str = "train",
    depth_divisor: float = 65535.0,
) -> Path:
    """Write samples as PNG triplets plus a JSON-lines manifest; returns the
    manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / f"{split}.jsonl"
    lines = [json.dumps({"num_classes": num_classes, "depth_divisor": depth_divisor, "split": split})]
    for i, sample in enumerate(samples):
        names = {
            "rgb": f"{split}_{i:05d}_rgb.png",
            "depth": f"{split}_{i:05d}_depth.png",
            "label": f"{split}_{i:05d}_label.png",
        }
        Image.fromarray((sample.rgb * 255.0).round().astype(np.uint8)).save(out_dir / names["rgb"])
        depth16 = (sample.depth[..., 0] * depth_divisor).round().astype(np.uint16)
        Image.fromarray(depth16).save(out_dir / names["depth"])
        Image.fromarray(sample.labels.astype(np.uint8)).save(out_dir / names["label"])
        lines.append(json.dumps(names))
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"manifest is empty: {path}")
    try:
        header = json.loads(lines[0])
        entries = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    for key in ("num_classes", "depth_divisor"):
        if key not in header:
            raise DataError(f"manifest header missing {key!r}: {path}")
    manifest = DatasetManifest(
        entries=entries,
        num_classes=int(header["num_classes"]),
        depth_divisor=float(header["depth_divisor"]),
        split=header.get("split", "train"),
        root=path.parent,
        depth_norm=header.get("depth_norm", "divisor"),
    )
    for entry in manifest.entries:
        for key in ("rgb", "depth", "label"):
            if not (manifest.root / entry[key]).exists():
                raise DataError(f"missing file: {manifest.root / entry[key]}")
    return manifest


def _read_array(path: Path, kind: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except Exception as exc:
        raise DataError(f"failed to decode {kind} file {path}: {exc}") from exc


def load_sample(manifest: DatasetManifest, entry: dict) -> RGBDSample:
    rgb_raw = _read_array(manifest.root / entry["rgb"], "rgb")
    depth_raw = _read_array(manifest.root / entry["depth"], "depth").astype(np.float64)
    labels = _read_array(manifest.root / entry["label"], "label").astype(np.int64)

    if rgb_raw.ndim != 3 or rgb_raw.shape[2] != 3:
        raise DataError(f"rgb file {manifest.root / entry['rgb']} is not 3-channel")
    rgb = (rgb_raw.astype(np.float32)) / 255.0
    if manifest.depth_norm == "minmax":
        lo, hi = depth_raw.min(), depth_raw.max()
        depth = (depth_raw - lo) / max(hi - lo, 1e-12)
    else:
        depth = depth_raw / manifest.depth_divisor
    sample = RGBDSample(
        rgb=rgb, depth=depth[..., None].astype(np.float32), labels=labels
    )
    try:
        return sample.validate(manifest.num_classes)
    except ValueError as exc:
        raise DataError(f"invalid sample {entry['rgb']}: {exc}") from exc


def load_samples(manifest: DatasetManifest) -> list[RGBDSample]:
    return [load_sample(manifest, e) for e in manifest.entries]


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    """Deterministic sample order for one epoch; differs across epochs."""
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng(np.random.SeedSequence((seed, epoch))).permutation(n)


def iterate_batches(
    samples: Sequence[RGBDSample],
    batch_size: int,
    seed: int,
    epoch: int = 0,
    shuffle: bool = True,
    drop_last: bool = True,
) -> Iterator[list[RGBDSample]]:
    """Yield batches in a deterministic per-(seed, epoch) order. Training
    drops the final partial batch; evaluation keeps it."""
    order = epoch_order(len(samples), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield [samples[i] for i in idx]


def stack_batch(batch: Sequence[RGBDSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack unaugmented samples into channel-last batch tensors."""
    rgb = torch.from_numpy(np.stack([s.rgb for s in batch])).float()
    depth = torch.from_numpy(np.stack([s.depth for s in batch])).float()
    labels = torch.from_numpy(np.stack([s.labels for s in batch]).astype(np.int64))
    return rgb, depth, labels
