"""Training-time photometric and geometric augmentation."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class AugmentationPolicy:
    crop: tuple = None  # (h, w); None keeps the full extent
    brightness_delta: float = 0.2
    contrast_delta: float = 0.1
    affine_angle_range: tuple = (-20.0, 20.0)
    translation_fraction: float = 0.5
    scale_range: tuple = (0.5, 1.0)
    rotation_degrees: float = 10.0
    enabled: bool = True
    # "uniform": deltas are maximum magnitudes; "fixed": always apply +delta
    jitter_mode: str = "uniform"
    # "fraction": translation is a fraction of the extent; "pixels": absolute
    translation_units: str = "fraction"

    def __post_init__(self):
        lo, hi = self.affine_angle_range
        if lo > hi or self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ConfigurationError("angle and scale ranges must be ordered, scale positive")
        if self.jitter_mode not in ("uniform", "fixed"):
            raise ConfigurationError(f"jitter_mode must be 'uniform' or 'fixed', got {self.jitter_mode!r}")
        if self.translation_units not in ("fraction", "pixels"):
            raise ConfigurationError(f"translation_units must be 'fraction' or 'pixels'")

    @classmethod
    def identity(cls, crop=None):
        return cls(crop=crop, brightness_delta=0.0, contrast_delta=0.0, affine_angle_range=(0.0, 0.0),
                   translation_fraction=0.0, scale_range=(1.0, 1.0), rotation_degrees=0.0)

    @classmethod
    def disabled(cls):
        return cls(enabled=False)


def _rotation(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def _uniform(rng, lo, hi):
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def augment(image, policy, rng):
    """Augmented copy of a (3, H, W) image in [0, 1].

    Geometric part: scale and affine rotation plus translation about the
    centre, then the extra rotation, composed into one bilinear resample with
    zero fill.  Then random crop, additive brightness, contrast about the
    image mean, clamp to [0, 1].
    """
    img = np.asarray(image)
    if img.ndim != 3:
        raise DimensionError(f"augment expects a (C, H, W) image, got {img.shape}")
    _, h, w = img.shape
    crop = policy.crop or (h, w)
    ch, cw = crop
    if ch > h or cw > w:
        raise DimensionError(f"crop {ch}x{cw} larger than image {h}x{w}")
    if not policy.enabled:
        return img.copy()

    scale = _uniform(rng, *policy.scale_range)
    angle = _uniform(rng, *policy.affine_angle_range)
    tf = policy.translation_fraction
    if policy.translation_units == "fraction":
        ty, tx = _uniform(rng, -tf * h, tf * h), _uniform(rng, -tf * w, tf * w)
    else:
        ty, tx = _uniform(rng, -tf, tf), _uniform(rng, -tf, tf)
    extra = _uniform(rng, -policy.rotation_degrees, policy.rotation_degrees)

    # forward map: p -> c + R2 (s R1 (p - c) + t); resampling needs its inverse
    first = scale * _rotation(angle)
    second = _rotation(extra)
    out = img
    if not (scale == 1.0 and angle == 0.0 and extra == 0.0 and ty == 0.0 and tx == 0.0):
        c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        fwd = second @ first
        inv = np.linalg.inv(fwd)
        offset = c - inv @ (c + second @ np.array([ty, tx]))
        out = np.stack([
            ndimage.affine_transform(ch_img.astype(np.float64), inv, offset=offset, order=1,
                                     mode="constant", cval=0.0)
            for ch_img in img
        ]).astype(img.dtype)

    top = int(rng.integers(0, h - ch + 1)) if ch < h else 0
    left = int(rng.integers(0, w - cw + 1)) if cw < w else 0
    out = out[:, top:top + ch, left:left + cw]

    if policy.jitter_mode == "fixed":
        shift, gain = policy.brightness_delta, 1.0 + policy.contrast_delta
    else:
        shift = _uniform(rng, -policy.brightness_delta, policy.brightness_delta)
        gain = _uniform(rng, 1.0 - policy.contrast_delta, 1.0 + policy.contrast_delta)
    if shift != 0.0:
        out = out + out.dtype.type(shift)
    if gain != 1.0:
        mean = out.mean()
        out = (out - mean) * out.dtype.type(gain) + mean
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=True)
