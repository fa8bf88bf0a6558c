"""Images, resampling kernels, clipping, perturbation and visual distance.

An image is a float64 ``(H, W, 3)`` array of intensities in ``[0, 255]``.
Perturbations live in normalized units (fractions of the full 0-255 range)
and are scaled by 255 when applied.

All resizers use the center-aligned convention

    src = (dst + 0.5) * (in / out) - 0.5

with source indices clamped to the valid range. Nearest rounds half up.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image as PILImage

from .validation import check_image, check_same_shape

logger = logging.getLogger(__name__)

INTENSITY_MAX = 255.0


@dataclass(frozen=True)
class ResampleMethod:
    """Resampling kernel. ``a`` is the bicubic sharpness and is ignored otherwise."""

    kind: str
    a: float = -0.5

    def __post_init__(self):
        if self.kind not in ("nearest", "bilinear", "bicubic"):
            raise ValueError(f"unknown resample method {self.kind!r}")
        if self.kind == "bicubic" and not (math.isfinite(self.a) and self.a < 0):
            raise ValueError(f"bicubic sharpness must be finite and negative, got {self.a}")

    @classmethod
    def parse(cls, value) -> "ResampleMethod":
        if isinstance(value, ResampleMethod):
            return value
        return cls(str(value).lower())

    def __str__(self):
        return self.kind


NEAREST = ResampleMethod("nearest")
BILINEAR = ResampleMethod("bilinear")
BICUBIC = ResampleMethod("bicubic")


def cubic_kernel(x, a=-0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def _axis_weights_cached(n_in: int, n_out: int, method: ResampleMethod) -> np.ndarray:
    scale = n_in / n_out
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * scale - 0.5
    W = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)

    if method.kind == "nearest":
        idx = np.clip(np.floor(src + 0.5).astype(np.int64), 0, n_in - 1)
        W[rows, idx] = 1.0
    elif method.kind == "bilinear":
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        np.add.at(W, (rows, np.clip(i0, 0, n_in - 1)), 1.0 - frac)
        np.add.at(W, (rows, np.clip(i0 + 1, 0, n_in - 1)), frac)
    else:
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        for k in (-1, 0, 1, 2):
            np.add.at(W, (rows, np.clip(i0 + k, 0, n_in - 1)), cubic_kernel(frac - k, method.a))
        # clamped taps merge onto edge pixels; renormalize away rounding drift
        W /= W.sum(axis=1, keepdims=True)
    W.setflags(write=False)
    return W


def axis_weights(n_in: int, n_out: int, method) -> np.ndarray:
    """Dense ``(n_out, n_in)`` resampling matrix for one axis; rows sum to one."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"axis sizes must be positive, got in={n_in} out={n_out}")
    return _axis_weights_cached(int(n_in), int(n_out), ResampleMethod.parse(method))


def separable_apply(Wh, img, Ww):
    """Apply row matrix ``Wh`` and column matrix ``Ww`` to an ``(H, W, C)`` array."""
    H, W, C = img.shape
    tmp = (Wh @ img.reshape(H, W * C)).reshape(Wh.shape[0], W, C)
    return Ww @ tmp


def downscale(img, out_h: int, out_w: int, method=BILINEAR) -> np.ndarray:
    """Resize ``img`` down to ``(out_h, out_w)``.

    Accepts a ``(H, W, 3)`` image or a single ``(H, W)`` plane. Output values
    are clipped to ``[0, 255]`` since bicubic lobes can overshoot.
    """
    arr = check_image(img, allow_plane=True)
    H, W = arr.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dimensions must be positive, got {(out_h, out_w)}")
    if out_h > H or out_w > W:
        raise ValueError(f"upscaling is not supported: {(H, W)} -> {(out_h, out_w)}")
    Wh = axis_weights(H, out_h, method)
    Ww = axis_weights(W, out_w, method)
    out = separable_apply(Wh, arr[..., None] if arr.ndim == 2 else arr, Ww)
    if arr.ndim == 2:
        out = out[..., 0]
    return np.clip(out, 0.0, INTENSITY_MAX)


def clip(img) -> np.ndarray:
    """Saturate every element to ``[0, 255]``."""
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, INTENSITY_MAX)


def apply_perturbation(img, delta) -> np.ndarray:
    """Return ``clip(img + 255 * delta)``; ``delta`` is in normalized units."""
    arr = check_image(img)
    delta = np.asarray(delta, dtype=np.float64)
    check_same_shape(arr, delta, ("image", "perturbation"))
    return clip(arr + INTENSITY_MAX * delta)


def visual_distance(a, b) -> float:
    """Normalized l2 distance ``||a - b||_2 / (255 * sqrt(H*W*3))``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    if a.size == 0:
        raise ValueError("images must be non-empty")
    return float(np.linalg.norm((a - b).ravel()) / (INTENSITY_MAX * math.sqrt(a.size)))


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)


def read_png(path) -> np.ndarray:
    """Load an 8-bit RGB image as float64. Alpha is dropped with a warning."""
    with PILImage.open(path) as im:
        if im.mode in ("RGBA", "LA") or "transparency" in im.info:
            logger.warning("dropping alpha channel from %s", path)
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64)


def png_bytes(img) -> bytes:
    """Encode an image as 8-bit RGB PNG bytes."""
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(check_image(img))).save(buf, format="PNG")
    return buf.getvalue()


def write_png(img, path) -> None:
    with open(path, "wb") as fh:
        fh.write(png_bytes(img))
