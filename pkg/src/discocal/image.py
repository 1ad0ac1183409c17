"""Grayscale image primitives: loading, gradient fields, local intensity
ranges, and the global/adaptive thresholding used by blob detection.

Images are stored as float64 arrays in [0, 255], shape (height, width),
row-major. Pixel (u, v) means column u, row v.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

# ITU-R BT.601 luminance weights for RGB inputs.
_LUMA = np.array([0.299, 0.587, 0.114])

# Sobel response of a unit-slope ramp is 8, so divide to get true slope.
_SOBEL_SCALE = 8.0


class ImageError(ValueError):
    """Unreadable, unsupported, or malformed image data."""


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image with intensities in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if px.ndim != 2:
            raise ImageError(f"expected a 2-D intensity array, got ndim={px.ndim}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ImageError("zero-dimension image")
        if not np.all(np.isfinite(px)):
            raise ImageError("image intensities must be finite")
        if px.min() < 0.0 or px.max() > 255.0:
            raise ImageError("image intensities must lie in [0, 255]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class GradientField:
    """Per-pixel intensity derivatives, same shape as the source image."""

    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self):
        if self.gx.shape != self.gy.shape:
            raise ImageError("gradient components must share one shape")


@dataclass(frozen=True)
class GlobalThreshold:
    """Foreground = intensity < level. Dark blobs become foreground."""

    level: float

    def key(self) -> str:
        return f"global:{self.level:g}"


@dataclass(frozen=True)
class AdaptiveThreshold:
    """Foreground = intensity < (mean over block x block window) - offset."""

    block: int
    offset: float

    def key(self) -> str:
        return f"adaptive:{self.block:d}:{self.offset:g}"


ThresholdSpec = GlobalThreshold | AdaptiveThreshold


def load_gray(path: str | Path) -> GrayImage:
    """Load a PGM (P2/P5) or PNG file as a [0, 255] grayscale image.

    8-bit gray is kept verbatim, 16-bit gray is min/max rescaled to
    [0, 255], and 8-bit RGB is converted with BT.601 luminance weights.
    Anything else is rejected.
    """
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in ("PPM", "PNG"):
                raise ImageError(f"unsupported format {fmt!r}: only PGM and PNG are accepted")
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except FileNotFoundError as e:
        raise ImageError(f"unreadable file: {path}") from e
    except UnidentifiedImageError as e:
        raise ImageError(f"unreadable file: {path}") from e
    except (OSError, SyntaxError, ValueError) as e:
        raise ImageError(f"unreadable file: {path}: {e}") from e

    if arr.ndim == 2 and arr.dtype == np.uint8:
        px = arr.astype(np.float64)
    elif arr.ndim == 2 and arr.dtype in (np.uint16, np.int32, np.uint32):
        px = _rescale_16bit(arr.astype(np.float64))
    elif arr.ndim == 3 and arr.shape[2] == 3 and arr.dtype == np.uint8:
        px = arr.astype(np.float64) @ _LUMA
    else:
        raise ImageError(f"unsupported pixel layout: mode={mode}, dtype={arr.dtype}")
    return GrayImage(px)


def _rescale_16bit(px: np.ndarray) -> np.ndarray:
    lo, hi = px.min(), px.max()
    if hi == lo:
        return np.zeros_like(px)
    return (px - lo) * (255.0 / (hi - lo))


def gradient(img: GrayImage) -> GradientField:
    """3x3 Sobel derivatives scaled so a unit-slope ramp has magnitude 1.

    Border pixels use edge replication, which degrades to a one-sided
    estimate there.
    """
    if img.width < 3 or img.height < 3:
        raise ImageError("gradient requires at least a 3x3 image")
    gx = ndimage.sobel(img.pixels, axis=1, mode="nearest") / _SOBEL_SCALE
    gy = ndimage.sobel(img.pixels, axis=0, mode="nearest") / _SOBEL_SCALE
    return GradientField(gx=gx, gy=gy)


def local_intensity_range(
    img: GrayImage, center: tuple[float, float], window: int = 5
) -> tuple[float, float]:
    """Min/max intensity over a (2*window+1)^2 box clipped to the image."""
    if window < 1:
        raise ImageError("window half-width must be >= 1")
    u = int(round(center[0]))
    v = int(round(center[1]))
    u0, u1 = max(0, u - window), min(img.width, u + window + 1)
    v0, v1 = max(0, v - window), min(img.height, v + window + 1)
    if u0 >= u1 or v0 >= v1:
        raise ImageError(f"window center {center} lies outside the image")
    patch = img.pixels[v0:v1, u0:u1]
    return float(patch.min()), float(patch.max())


def range_images(img: GrayImage, window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel local min/max images, equivalent to calling
    local_intensity_range at every pixel. Used to amortize the window
    search when measuring many boundary points of one image."""
    size = 2 * window + 1
    imin = ndimage.minimum_filter(img.pixels, size=size, mode="nearest")
    imax = ndimage.maximum_filter(img.pixels, size=size, mode="nearest")
    return imin, imax


def threshold(img: GrayImage, spec: ThresholdSpec) -> np.ndarray:
    """Binarize the image; dark blobs become foreground (True)."""
    if isinstance(spec, GlobalThreshold):
        return img.pixels < spec.level
    if isinstance(spec, AdaptiveThreshold):
        if spec.block < 3 or spec.block % 2 == 0:
            raise ImageError(f"adaptive block size must be odd and >= 3, got {spec.block}")
        mean = ndimage.uniform_filter(img.pixels, size=spec.block, mode="nearest")
        return img.pixels < mean - spec.offset
    raise ImageError(f"unknown threshold spec {spec!r}")
