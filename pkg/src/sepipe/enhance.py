"""Image enhancement defenses: HE, CLAHE, unsharp masking, HFE, crop-and-resize.

All operations take and return 8-bit :class:`~sepipe.image.Image` objects
and are pure functions of (pixels, parameters). Work happens in float64;
results are re-quantized with round-half-up.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .image import Image, quantize

OPTIONS = ("clahe", "um", "hfe", "crop_resize", "none")
BLUR_KINDS = ("gaussian", "median", "maximum", "minimum")


@dataclass(frozen=True)
class EnhanceConfig:
    option: str = "none"
    grid_x: int = 4
    grid_y: int = 4
    clip: float = 8.0
    blur: str = "gaussian"
    radius: int = 2
    amount: float = 2.0
    cutoff: float = 10.0
    margin: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.option not in OPTIONS:
            raise ConfigError(f"option must be one of {OPTIONS}, got {self.option!r}")
        if self.grid_x < 1 or self.grid_y < 1:
            raise ConfigError(f"grid dims must be >= 1, got {self.grid_x}x{self.grid_y}")
        if self.clip <= 0:
            raise ConfigError(f"clip must be > 0, got {self.clip}")
        if self.blur not in BLUR_KINDS:
            raise ConfigError(f"blur must be one of {BLUR_KINDS}, got {self.blur!r}")
        if self.radius < 1:
            raise ConfigError(f"radius must be >= 1, got {self.radius}")
        if self.option == "um" and not self.amount > 0:
            raise ConfigError(f"amount must be > 0, got {self.amount}")
        if not self.cutoff > 0:
            raise ConfigError(f"cutoff must be > 0, got {self.cutoff}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")

    @property
    def tag(self):
        """Short stable name, used for checkpoint files and report rows."""
        if self.option == "clahe":
            return f"clahe-g{self.grid_x}x{self.grid_y}-c{self.clip:g}"
        if self.option == "um":
            return f"um-{self.blur}-r{self.radius}-a{self.amount:g}"
        if self.option == "hfe":
            return f"hfe-d{self.cutoff:g}"
        if self.option == "crop_resize":
            return f"crop-m{self.margin}"
        return "none"

    def relevant(self):
        """Only the fields the selected option reads."""
        keys = {
            "clahe": ("grid_x", "grid_y", "clip"),
            "um": ("blur", "radius", "amount"),
            "hfe": ("cutoff",),
            "crop_resize": ("margin",),
            "none": (),
        }[self.option]
        d = asdict(self)
        return {"option": self.option, **{k: d[k] for k in keys}}

    @classmethod
    def from_dict(cls, d):
        fields = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**fields)


# ---------------------------------------------------------------- histogram equalization

def equalization_map(hist):
    """Lookup table for histogram equalization of a 256-bin histogram.

    ``m(v) = round(255 * (cdf(v) - cdf_min) / (N - cdf_min))``, computed in
    integers with round-half-up. A single-valued histogram maps to identity.
    """
    hist = np.asarray(hist, dtype=np.int64)
    n = int(hist.sum())
    if n == 0:
        raise DataError("cannot equalize an empty histogram")
    cdf = np.cumsum(hist)
    cdf_min = int(cdf[cdf > 0][0])
    den = n - cdf_min
    if den == 0:
        return np.arange(256, dtype=np.int64)
    num = 255 * (cdf - cdf_min)
    return np.clip((2 * num + den) // (2 * den), 0, 255)


def histogram_equalize(img):
    if img.pixels.size == 0:
        raise DataError("cannot equalize a zero-area image")
    hist = np.bincount(img.pixels.ravel(), minlength=256)
    return Image(equalization_map(hist)[img.pixels].astype(np.uint8))


# ---------------------------------------------------------------- CLAHE

def tile_bounds(n, g):
    """Start/stop of ``g`` tiles along an axis of length ``n``; the last absorbs the remainder."""
    size = n // g
    starts = [i * size for i in range(g)]
    stops = starts[1:] + [n]
    return list(zip(starts, stops))


def clip_histogram(hist, clip):
    hist = np.asarray(hist, dtype=np.int64)
    tile_pixels = int(hist.sum())
    limit = max(1, math.ceil(clip * tile_pixels / 256))
    excess = int(np.maximum(hist - limit, 0).sum())
    out = np.minimum(hist, limit)
    out += excess // 256
    out[0] += excess % 256
    return out


def tile_mapping(tile, clip):
    hist = np.bincount(np.asarray(tile).ravel(), minlength=256)
    if np.count_nonzero(hist) == 1:
        return np.arange(256, dtype=np.int64)
    return equalization_map(clip_histogram(hist, clip))


def interpolation_weights(n, bounds):
    """For each coordinate: lower tile, upper tile, weight toward the upper tile."""
    centers = np.array([(a + b - 1) / 2.0 for a, b in bounds])
    coords = np.arange(n, dtype=np.float64)
    lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, len(centers) - 1)
    hi = np.minimum(lo + 1, len(centers) - 1)
    w = np.zeros(n)
    inner = (coords > centers[0]) & (coords < centers[-1])
    w[inner] = (coords[inner] - centers[lo[inner]]) / (centers[hi[inner]] - centers[lo[inner]])
    hi = np.where(inner, hi, lo)
    return lo, hi, w


def clahe(img, grid_x=4, grid_y=4, clip=8.0):
    """Contrast-limited adaptive histogram equalization on a grid_x x grid_y tile grid."""
    h, w = img.shape
    if w < grid_x or h < grid_y:
        raise ConfigError(f"image {w}x{h} is smaller than the {grid_x}x{grid_y} tile grid")
    rows, cols = tile_bounds(h, grid_y), tile_bounds(w, grid_x)
    px = img.pixels
    maps = np.empty((grid_y, grid_x, 256), dtype=np.float64)
    for ty, (r0, r1) in enumerate(rows):
        for tx, (c0, c1) in enumerate(cols):
            maps[ty, tx] = tile_mapping(px[r0:r1, c0:c1], clip)
    y0, y1, wy = interpolation_weights(h, rows)
    x0, x1, wx = interpolation_weights(w, cols)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    WY, WX = np.meshgrid(wy, wx, indexing="ij")
    v = px.astype(np.int64)
    top = (1 - WX) * maps[Y0, X0, v] + WX * maps[Y0, X1, v]
    bot = (1 - WX) * maps[Y1, X0, v] + WX * maps[Y1, X1, v]
    val = (1 - WY) * top + WY * bot
    return Image(np.clip(np.floor(val + 0.5), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------- blur / unsharp masking

def gaussian_kernel(radius):
    sigma = radius / 2.0
    half = math.ceil(3 * sigma)
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def blur_real(x, kind, radius):
    """Blur a float image with clamp-to-edge borders."""
    if radius < 1:
        raise ConfigError(f"radius must be >= 1, got {radius}")
    x = np.asarray(x, dtype=np.float64)
    if kind == "gaussian":
        k = gaussian_kernel(radius)
        out = ndimage.correlate1d(x, k, axis=0, mode="nearest")
        return ndimage.correlate1d(out, k, axis=1, mode="nearest")
    size = 2 * radius + 1
    if kind == "median":
        return ndimage.median_filter(x, size=size, mode="nearest")
    if kind == "maximum":
        return ndimage.maximum_filter(x, size=size, mode="nearest")
    if kind == "minimum":
        return ndimage.minimum_filter(x, size=size, mode="nearest")
    raise ConfigError(f"blur must be one of {BLUR_KINDS}, got {kind!r}")


def blur(img, kind, radius):
    return Image.from_real(blur_real(img.to_real(), kind, radius))


def unsharp_real(x, kind, radius, amount):
    """``clamp01(x + amount * (x - blur(x)))`` without quantizing."""
    if amount < 0:
        raise ConfigError(f"amount must be >= 0, got {amount}")
    return np.clip(x + amount * (x - blur_real(x, kind, radius)), 0.0, 1.0)


def unsharp_mask(img, kind="gaussian", radius=2, amount=2.0):
    return Image.from_real(unsharp_real(img.to_real(), kind, radius, amount))


# ---------------------------------------------------------------- high-frequency emphasis

def emphasis_filter(shape, cutoff):
    """Centred spectral gain ``1 + (1 - exp(-D^2 / (2 D0^2)))``."""
    if not cutoff > 0:
        raise ConfigError(f"cutoff must be > 0, got {cutoff}")
    h, w = shape
    u = np.arange(h) - h // 2
    v = np.arange(w) - w // 2
    d2 = u[:, None] ** 2 + v[None, :] ** 2
    return 1.0 + (1.0 - np.exp(-d2 / (2.0 * cutoff * cutoff)))


def apply_spectral_gain(x, gain):
    freq = np.fft.fftshift(np.fft.fft2(x))
    return np.real(np.fft.ifft2(np.fft.ifftshift(freq * gain)))


def hfe_real(x, cutoff):
    """Image plus its Gaussian-highpassed copy, before clamping and quantization."""
    x = np.asarray(x, dtype=np.float64)
    return apply_spectral_gain(x, emphasis_filter(x.shape, cutoff))


def hfe(img, cutoff=10.0):
    emphasized = Image.from_real(np.clip(hfe_real(img.to_real(), cutoff), 0.0, 1.0))
    return histogram_equalize(emphasized)


# ---------------------------------------------------------------- crop and resize

def resize_bilinear(x, out_h, out_w):
    """Half-pixel-centre bilinear resampling of a float array."""
    in_h, in_w = x.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = axis(in_h, out_h)
    x0, x1, wx = axis(in_w, out_w)
    wy, wx = wy[:, None], wx[None, :]
    top = (1 - wx) * x[np.ix_(y0, x0)] + wx * x[np.ix_(y0, x1)]
    bot = (1 - wx) * x[np.ix_(y1, x0)] + wx * x[np.ix_(y1, x1)]
    return (1 - wy) * top + wy * bot


def crop_resize(img, margin=2):
    h, w = img.shape
    if margin < 0 or 2 * margin >= min(h, w):
        raise ConfigError(f"margin {margin} too large for a {w}x{h} image")
    if margin == 0:
        return img
    core = img.pixels[margin:h - margin, margin:w - margin].astype(np.float64)
    out = resize_bilinear(core, h, w)
    return Image(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------- dispatch

def enhance(img, cfg):
    if cfg.option == "clahe":
        return clahe(img, cfg.grid_x, cfg.grid_y, cfg.clip)
    if cfg.option == "um":
        return unsharp_mask(img, cfg.blur, cfg.radius, cfg.amount)
    if cfg.option == "hfe":
        return hfe(img, cfg.cutoff)
    if cfg.option == "crop_resize":
        return crop_resize(img, cfg.margin)
    return img


__all__ = [
    "EnhanceConfig", "histogram_equalize", "clahe", "blur", "unsharp_mask", "hfe",
    "crop_resize", "enhance",
]
