"""Sensor model, noise residuals, PRNU estimation and the NCC detector.

Images are plain ``H x W x C`` float arrays with intensities in [0, 1]. Every
function here is pure; synthesis takes an explicit seed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import pywt
from scipy.ndimage import uniform_filter

WAVELET = "db8"
WAVELET_LEVELS = 4
NOISE_VAR = 9.0 / 255.0 ** 2
WIENER_WINDOWS = (3, 5, 7, 9)
NCC_EPS = 1e-12
MLE_EPS = 1e-6


class DegenerateInputError(ValueError):
    """Raised when a correlation operand has (near) zero energy after mean removal."""


class FingerprintKind(enum.IntEnum):
    DEVICE_PRNU = 0
    NOISE_RESIDUAL = 1


@dataclass
class Fingerprint:
    pattern: np.ndarray
    kind: FingerprintKind

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.pattern.ndim == 2:
            self.pattern = self.pattern[..., None]
        if self.pattern.ndim != 3 or min(self.pattern.shape) < 1:
            raise ValueError(f"fingerprint must be H x W x C, got shape {self.pattern.shape}")
        self.kind = FingerprintKind(self.kind)

    @property
    def shape(self):
        return self.pattern.shape


@dataclass(frozen=True)
class SensorNoiseParams:
    gamma: float
    theta_sigma: float = 0.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if self.theta_sigma < 0:
            raise ValueError(f"theta_sigma must be nonnegative, got {self.theta_sigma}")


def as_image(image, *, check_range: bool = True) -> np.ndarray:
    """Validate and return ``image`` as a float64 ``H x W x C`` array.

    2-D inputs get a trailing channel axis.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"image must be H x W x C, got shape {arr.shape}")
    if arr.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {arr.shape[2]}")
    if check_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("image intensities must lie in [0, 1]")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays"):
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def zero_mean(x: np.ndarray) -> np.ndarray:
    """Remove the per-channel mean of an ``H x W x C`` array."""
    return x - x.mean(axis=(0, 1), keepdims=True)


def synthesize_sensor_image(clean, k: Fingerprint, params: SensorNoiseParams, rng_seed: int,
                            *, with_meta: bool = False):
    """Forward sensor model ``clip(I0 * (1 + gamma * K) + Theta)``.

    ``Theta`` is white gaussian noise of std ``params.theta_sigma`` drawn from
    ``rng_seed``. With ``with_meta=True`` a dict holding the fraction of clipped
    pixels is returned alongside the image.
    """
    clean = as_image(clean)
    if k.kind is not FingerprintKind.DEVICE_PRNU:
        raise ValueError("sensor synthesis needs a device PRNU fingerprint")
    _check_same_shape(clean, k.pattern, "clean image and fingerprint")

    raw = clean * (1.0 + params.gamma * k.pattern)
    if params.theta_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        raw = raw + rng.normal(0.0, params.theta_sigma, size=raw.shape)
    out = np.clip(raw, 0.0, 1.0)
    if with_meta:
        clipped = float(np.mean((raw < 0.0) | (raw > 1.0)))
        return out, {"clipped_fraction": clipped, "rng_seed": int(rng_seed)}
    return out


def wiener_shrink(coeffs: np.ndarray, noise_var: float = NOISE_VAR,
                  windows=WIENER_WINDOWS) -> np.ndarray:
    """Locally adaptive Wiener gain applied to one wavelet detail subband.

    The signal variance at each coefficient is the smallest of the local
    ``max(mean(c^2) - noise_var, 0)`` estimates over the square windows.
    """
    energy = coeffs ** 2
    local = np.stack([uniform_filter(energy, size=w, mode="constant") for w in windows])
    signal_var = np.maximum(local - noise_var, 0.0).min(axis=0)
    return coeffs * signal_var / (signal_var + noise_var)


def _denoise_channel(x: np.ndarray, levels: int, noise_var: float) -> np.ndarray:
    # explicit level loop: wavedec2 warns once levels exceed its boundary heuristic
    approx = x
    shapes, details = [], []
    for _ in range(levels):
        shapes.append(approx.shape)
        approx, detail = pywt.dwt2(approx, WAVELET, mode="periodization")
        details.append(tuple(wiener_shrink(d, noise_var) for d in detail))
    for shape, detail in zip(reversed(shapes), reversed(details)):
        approx = pywt.idwt2((approx, detail), WAVELET, mode="periodization")
        approx = approx[: shape[0], : shape[1]]
    return approx


def denoise(image, levels: int = WAVELET_LEVELS, noise_var: float = NOISE_VAR) -> np.ndarray:
    """Wavelet-domain Wiener denoiser, applied independently per channel.

    Uses an orthogonal Daubechies-8 transform with periodic extension so the
    noise variance is the same in every subband.
    """
    image = as_image(image, check_range=False)
    h, w, _ = image.shape
    if min(h, w) < 2 ** levels:
        raise ValueError(
            f"image {h}x{w} too small for a {levels}-level wavelet decomposition "
            f"(need at least {2 ** levels} pixels per side)")
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[..., ch] = _denoise_channel(image[..., ch], levels, noise_var)
    return out


def extract_noise_residual(image, **denoise_kwargs) -> Fingerprint:
    """Noise residual ``W = I - denoise(I)``, zero-meaned per channel."""
    image = as_image(image, check_range=False)
    residual = zero_mean(image - denoise(image, **denoise_kwargs))
    return Fingerprint(residual, FingerprintKind.NOISE_RESIDUAL)


def estimate_prnu_mle(flat_images) -> Fingerprint:
    """Maximum-likelihood PRNU estimate ``sum(W_i * I_i) / sum(I_i^2)``.

    Pixels where the accumulated energy falls below ``MLE_EPS`` are set to zero.
    """
    flat_images = list(flat_images)
    if not flat_images:
        raise ValueError("need at least one flat-field image")
    first = as_image(flat_images[0])
    num = np.zeros_like(first)
    den = np.zeros_like(first)
    for img in flat_images:
        img = as_image(img)
        _check_same_shape(first, img, "flat-field images")
        num += extract_noise_residual(img).pattern * img
        den += img ** 2
    k = np.zeros_like(num)
    ok = den >= MLE_EPS
    k[ok] = num[ok] / den[ok]
    return Fingerprint(zero_mean(k), FingerprintKind.DEVICE_PRNU)


def ncc(a, b) -> float:
    """Pearson-style normalized cross-correlation of two equally shaped arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    a = a - a.mean()
    b = b - b.mean()
    na = np.sqrt(np.sum(a * a))
    nb = np.sqrt(np.sum(b * b))
    if na < NCC_EPS or nb < NCC_EPS:
        raise DegenerateInputError("ncc operand has zero norm after mean removal")
    return float(np.sum(a * b) / (na * nb))


def device_ncc(image, k: Fingerprint) -> float:
    """Source-attribution statistic ``NCC(W, I * K)``."""
    image = as_image(image)
    if k.kind is not FingerprintKind.DEVICE_PRNU:
        raise ValueError("device_ncc expects a device PRNU fingerprint")
    _check_same_shape(image, k.pattern, "image and fingerprint")
    return ncc(extract_noise_residual(image).pattern, image * k.pattern)
