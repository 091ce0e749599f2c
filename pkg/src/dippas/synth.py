"""Synthetic scenes and device fingerprints for desk-scale experiments."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .fingerprint import Fingerprint, FingerprintKind, zero_mean


def random_texture(height: int, width: int, channels: int = 3, seed: int = 0,
                   low: float = 0.1, high: float = 0.9) -> np.ndarray:
    """Smooth multi-scale random texture with a few hard-edged shapes.

    Values are mapped into ``[low, high]`` so that sensor noise rarely clips.
    """
    rng = np.random.default_rng(seed)
    field = np.zeros((height, width, channels))
    for sigma, weight in ((16.0, 1.0), (6.0, 0.6), (2.0, 0.25)):
        noise = rng.standard_normal((height, width, channels))
        layer = gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
        field += weight * layer / layer.std()

    # piecewise-constant shapes give the scene genuine edges
    yy, xx = np.mgrid[:height, :width]
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.08, 0.25) * min(height, width)
        shift = rng.normal(0.0, 1.2, size=channels)
        if rng.random() < 0.5:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < 0.7 * r)
        field[inside] += shift
    field = gaussian_filter(field, sigma=(0.7, 0.7, 0))

    lo, hi = np.percentile(field, [0.5, 99.5])
    field = (field - lo) / (hi - lo)
    return np.clip(low + (high - low) * field, low, high)


def random_prnu(height: int, width: int, channels: int = 3, std: float = 1.0,
                seed: int = 0) -> Fingerprint:
    """White gaussian device PRNU, zero-mean per channel."""
    rng = np.random.default_rng(seed)
    pattern = zero_mean(rng.normal(0.0, std, size=(height, width, channels)))
    return Fingerprint(pattern, FingerprintKind.DEVICE_PRNU)
