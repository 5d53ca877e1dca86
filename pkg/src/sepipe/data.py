"""Synthetic chest-phantom generator, manifest parsing and the 80/20 split."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .image import Image, quantize, read_image, write_image
from .segment import Mask, read_mask, write_mask

LABELS = {"a": 0, "normal": 0, "b": 1, "pneumonia": 1}
LABEL_NAMES = ("A", "B")
TEST_FRACTION = 0.2


@dataclass(frozen=True)
class ManifestRecord:
    path: Path
    label: int
    mask_path: Path | None = None


@dataclass(frozen=True)
class Sample:
    path: str
    image: Image
    label: int
    mask: Mask | None = None


def ellipse_support(size, center, axes):
    """Boolean map of pixel centres inside the axis-aligned ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    (cy, cx), (ay, ax) = center, axes
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _lung_geometry(rng, size):
    lungs = []
    for side in (0.3, 0.7):
        cy = size * (0.5 + rng.uniform(-0.03, 0.03))
        cx = size * (side + rng.uniform(-0.03, 0.03))
        ay = size * rng.uniform(0.28, 0.34)
        ax = size * rng.uniform(0.12, 0.16)
        lungs.append(((cy, cx), (ay, ax)))
    return lungs


def render_phantom(rng, size, abnormal):
    """One phantom: (float image in [0, 1], ground-truth lung mask)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.08 + rng.uniform(-0.02, 0.02))
    support = np.zeros((size, size), dtype=bool)
    for (cy, cx), (ay, ax) in _lung_geometry(rng, size):
        r2 = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
        inside = r2 <= 1.0
        level = rng.uniform(0.45, 0.5)
        img[inside] = level + 0.1 * (1.0 - r2[inside])
        support |= inside
    if abnormal:
        ys, xs = np.nonzero(support)
        sigma = max(1.0, 0.04 * size)
        for _ in range(rng.integers(2, 6)):
            k = rng.integers(len(ys))
            amp = rng.uniform(0.3, 0.45)
            blob = amp * np.exp(-((yy - ys[k]) ** 2 + (xx - xs[k]) ** 2) / (2 * sigma * sigma))
            img += blob * support
    img += rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0), support


def gen_synthetic_dataset(n, size, seed, out_dir):
    """Write ``n`` phantoms (alternating A/B), their masks and ``manifest.csv``."""
    if n < 10 or size < 16:
        raise ConfigError(f"need n >= 10 and size >= 16, got n={n}, size={size}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    lines = ["path,label,mask_path"]
    records = []
    for i in range(n):
        label = i % 2
        x, support = render_phantom(rng, size, abnormal=bool(label))
        img_rel, mask_rel = f"images/img_{i:05d}.pgm", f"masks/mask_{i:05d}.pgm"
        try:
            write_image(out / img_rel, Image(quantize(x)))
            write_mask(out / mask_rel, Mask(support))
        except OSError as exc:
            raise DataError(f"cannot write to {out}: {exc}") from exc
        lines.append(f"{img_rel},{LABEL_NAMES[label]},{mask_rel}")
        records.append(ManifestRecord(out / img_rel, label, out / mask_rel))
    (out / "manifest.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return records


def parse_manifest(path):
    """Records from a ``path,label[,mask_path]`` CSV; relative paths resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty manifest", 1)
    header = [h.strip() for h in lines[0].split(",")]
    if header not in (["path", "label"], ["path", "label", "mask_path"]):
        raise ParseError(f"{path}: header must be path,label[,mask_path], got {lines[0]!r}", 1)
    base = path.parent
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split(",")
        if len(cols) not in (2, 3):
            raise ParseError(f"{path}: expected 2 or 3 columns", lineno)
        label = LABELS.get(cols[1].strip().lower())
        if label is None:
            raise ParseError(f"{path}: bad label {cols[1]!r}", lineno)
        mask = cols[2].strip() if len(cols) == 3 else ""
        records.append(ManifestRecord(base / cols[0].strip(), label, base / mask if mask else None))
    if not records:
        raise DataError(f"{path}: manifest has no records")
    return records


def split_indices(n, seed, test_fraction=TEST_FRACTION):
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return perm[n_test:], perm[:n_test]


def load_sample(rec):
    if not rec.path.exists():
        raise DataError(f"missing image file: {rec.path}")
    image = read_image(rec.path)
    mask = None
    if rec.mask_path is not None:
        if not rec.mask_path.exists():
            raise DataError(f"missing mask file: {rec.mask_path}")
        mask = read_mask(rec.mask_path)
        if mask.shape != image.shape:
            raise DataError(f"mask {rec.mask_path} is {mask.shape}, image is {image.shape}")
    return Sample(str(rec.path), image, rec.label, mask)


def load_dataset(manifest_path, seed):
    """Deterministic 80/20 train/test split. Duplicate paths stay distinct records."""
    samples = [load_sample(r) for r in parse_manifest(manifest_path)]
    train_idx, test_idx = split_indices(len(samples), seed)
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]
