"""Region-of-interest masks: application, a heuristic lung segmenter, PGM I/O."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, DimensionError, ParseError
from .image import Image, decode_pgm, encode_pgm

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
_SQUARE3 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary (height, width) ROI map; 1 marks the region of interest."""

    bits: np.ndarray
    warning: str | None = None

    def __post_init__(self):
        bits = np.ascontiguousarray(np.asarray(self.bits).astype(bool))
        if bits.ndim != 2:
            raise DimensionError(f"mask must be 2-d, got shape {bits.shape}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self):
        return self.bits.shape

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]

    def popcount(self):
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))


def apply_mask(img, mask):
    if img.shape != mask.shape:
        raise DimensionError(f"image {img.shape} and mask {mask.shape} differ in size")
    return Image(np.where(mask.bits, img.pixels, 0).astype(np.uint8))


def apply_mask_real(x, mask):
    if x.shape != mask.shape:
        raise DimensionError(f"image {x.shape} and mask {mask.shape} differ in size")
    return np.where(mask.bits, x, 0.0)


def otsu_threshold(pixels):
    """Smallest level t maximising between-class variance of {<= t} vs {> t}."""
    hist = np.bincount(np.asarray(pixels, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    s0 = np.cumsum(hist * levels)
    mu_total = s0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = s0 / w0
        m1 = (mu_total - s0) / w1
        between = w0 * w1 * (m0 - m1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    return int(np.argmax(between))


def heuristic_segment(img, polarity="auto", keep=2):
    """Otsu threshold, 3x3 open then close, keep the ``keep`` largest 4-connected blobs.

    ``polarity`` picks the foreground side of the threshold: ``"bright"``,
    ``"dark"``, or ``"auto"`` (whichever side covers less of the image border).
    A constant image yields an all-ones mask carrying a warning.
    """
    if img.pixels.size == 0:
        raise DataError("cannot segment an empty image")
    px = img.pixels
    if px.min() == px.max():
        msg = "constant image: no foreground/background split, using all-ones mask"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return Mask(np.ones(px.shape, dtype=bool), warning=msg)
    fg = px > otsu_threshold(px)
    if polarity == "dark":
        fg = ~fg
    elif polarity == "auto":
        border = np.concatenate([fg[0], fg[-1], fg[1:-1, 0], fg[1:-1, -1]])
        if border.mean() > 0.5:
            fg = ~fg
    elif polarity != "bright":
        raise ValueError(f"polarity must be 'auto', 'bright' or 'dark', got {polarity!r}")
    fg = ndimage.binary_opening(fg, structure=_SQUARE3)
    fg = ndimage.binary_closing(fg, structure=_SQUARE3)
    labels, count = ndimage.label(fg, structure=_FOUR_CONNECTED)
    if count == 0:
        return Mask(fg)
    sizes = np.bincount(labels.ravel())[1:]
    # stable: ties go to the lower label
    order = np.argsort(-sizes, kind="stable")[:keep]
    return Mask(np.isin(labels, order + 1))


def write_mask(path, mask):
    Path(path).write_bytes(encode_pgm(mask.bits.astype(np.uint8) * 255))


def read_mask(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    try:
        px = decode_pgm(data)
    except ParseError as exc:
        err = ParseError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from exc
    return Mask(px > 127)
