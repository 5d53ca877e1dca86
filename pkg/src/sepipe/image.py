"""8-bit grayscale images and binary PGM (P5) I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, ParseError


def quantize(x):
    """Real values in [0, 1] to uint8 via round-half-up of ``v * 255``."""
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Image:
    """A grayscale raster. ``pixels`` is a (height, width) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise DimensionError(f"image pixels must be 2-d, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise DataError("pixel values must lie in 0..255")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def to_real(self, dtype=np.float64):
        return self.pixels.astype(dtype) / dtype(255.0)

    @classmethod
    def from_real(cls, x):
        return cls(quantize(x))

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.shape, self.pixels.tobytes()))


def encode_pgm(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pgm(data):
    """Parse a binary PGM. Raises ParseError with the byte offset of the problem."""
    if data[:2] != b"P5":
        raise ParseError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed PGM header", start)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PGM header", pos)
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ParseError(f"bad PGM dimensions {width}x{height}", pos)
    if not 0 < maxval < 256:
        raise ParseError(f"unsupported PGM maxval {maxval}", pos)
    need = width * height
    body = data[pos:pos + need]
    if len(body) < need:
        raise ParseError(f"truncated PGM: expected {need} pixel bytes, found {len(body)}", pos + len(body))
    px = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    if maxval != 255:
        px = np.floor(px.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return px


def write_image(path, img):
    Path(path).write_bytes(encode_pgm(img.pixels))


def read_image(path):
    """Load a PGM, or a PNG when Pillow is importable."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image as PILImage
        except ImportError:
            raise DataError(f"{path}: PNG input needs Pillow installed") from None
        with PILImage.open(path) as im:
            return Image(np.asarray(im.convert("L"), dtype=np.uint8))
    try:
        return Image(decode_pgm(data))
    except ParseError as exc:
        err = ParseError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from exc
