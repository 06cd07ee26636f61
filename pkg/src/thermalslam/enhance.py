"""Raw thermal preprocessing: percentile stretch plus detail boosting.

The raw 16-bit counts are first mapped to [out_lo, out_hi] by an affine
stretch between two percentiles, then split by a Gaussian blur into a
background layer and a signed detail layer; the output recombines
background + detail_gain * detail, clamped to [0, 1].
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d


@dataclass(frozen=True)
class EnhanceParams:
    clip_lo: float = 1.0
    clip_hi: float = 99.0
    sigma: float = 3.0
    detail_gain: float = 1.5
    out_lo: float = 0.0
    out_hi: float = 1.0

    def __post_init__(self):
        if not (0 <= self.clip_lo < self.clip_hi <= 100):
            raise ValueError("need 0 <= clip_lo < clip_hi <= 100")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.detail_gain < 0:
            raise ValueError("detail_gain must be non-negative")
        if not (0 <= self.out_lo < self.out_hi <= 1):
            raise ValueError("need 0 <= out_lo < out_hi <= 1")


def linear_stretch(raw, params=EnhanceParams()):
    """Affine map [p_lo, p_hi] -> [out_lo, out_hi], clamped outside.

    A degenerate percentile range (constant-ish input) maps everything to
    the midpoint of the output bounds instead of dividing by zero.
    """
    raw = np.asarray(raw, dtype=float)
    p_lo, p_hi = np.percentile(raw, [params.clip_lo, params.clip_hi])
    if p_hi <= p_lo:
        return np.full(raw.shape, 0.5 * (params.out_lo + params.out_hi))
    scaled = (raw - p_lo) / (p_hi - p_lo)
    out = params.out_lo + scaled * (params.out_hi - params.out_lo)
    return np.clip(out, params.out_lo, params.out_hi)


def _gaussian_kernel(sigma):
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def decompose(image, sigma):
    """Split into (background, detail): Gaussian blur and the residual.

    The truncated kernel (radius ceil(3*sigma)) is renormalized at the
    borders, so constants are preserved and background + detail == image.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    image = np.asarray(image, dtype=float)
    k = _gaussian_kernel(sigma)
    blurred = correlate1d(image, k, axis=0, mode="constant", cval=0.0)
    blurred = correlate1d(blurred, k, axis=1, mode="constant", cval=0.0)
    ones = np.ones_like(image)
    norm = correlate1d(ones, k, axis=0, mode="constant", cval=0.0)
    norm = correlate1d(norm, k, axis=1, mode="constant", cval=0.0)
    background = blurred / norm
    return background, image - background


def enhance(raw, params=EnhanceParams()):
    """linear_stretch, then boost the detail layer; output clamped to [0,1]."""
    stretched = linear_stretch(raw, params)
    background, detail = decompose(stretched, params.sigma)
    return np.clip(background + params.detail_gain * detail, 0.0, 1.0)
