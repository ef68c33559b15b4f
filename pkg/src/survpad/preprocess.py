"""Image-level preprocessing: FFT band-pass maps, RandomZoomInOut, face patches, mixup, TTA.

Images are float arrays in ``[0, 1]`` shaped ``(H, W)`` or ``(H, W, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

INTERPOLATIONS = ("nearest", "bilinear", "area", "lanczos")
_PIL_FILTERS = {
    "nearest": Image.NEAREST,
    "bilinear": Image.BILINEAR,
    "area": Image.BOX,
    "lanczos": Image.LANCZOS,  # a = 3
}

ZOOM_RANGE = (0.20, 0.75)
ENCODER_SIZE = 224
PATCH_INPUT_SIZE = 256
# fractional (x0, y0, x1, y1) on the 256x256 grid
PATCH_BOXES = {
    "face": (0.125, 0.125, 0.875, 0.875),
    "eyes": (0.15, 0.25, 0.85, 0.50),
    "nose": (0.30, 0.40, 0.70, 0.75),
    "chin": (0.20, 0.70, 0.80, 1.00),
}
PATCH_ORDER = ("original", "face", "eyes", "nose", "chin")
# input sizes compared when picking a single training resolution
INPUT_SIZE_SWEEP = (112, 128, 168, 192, 224)


def as_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image values must be finite")
    return a


def hflip(img: np.ndarray) -> np.ndarray:
    return np.asarray(img)[:, ::-1, ...].copy()


# --------------------------------------------------------------------------
# Frequency domain


@dataclass
class FrequencySpectrum:
    values: np.ndarray  # complex, (H, W)
    centered: bool = True


def fft_spectrum(channel: np.ndarray) -> FrequencySpectrum:
    """2-D FFT with the DC term moved to ``(H // 2, W // 2)``."""
    return FrequencySpectrum(np.fft.fftshift(np.fft.fft2(channel)), centered=True)


def inverse_spectrum(spec: FrequencySpectrum) -> np.ndarray:
    values = np.fft.ifftshift(spec.values) if spec.centered else spec.values
    return np.fft.ifft2(values)


def _check_sigmas(sigma_low: float, sigma_high: float) -> None:
    if sigma_low <= 0 or sigma_high <= 0:
        raise ValueError(f"sigmas must be positive, got {sigma_low}, {sigma_high}")
    if sigma_low < sigma_high:
        raise ValueError(f"sigma_low ({sigma_low}) must not be smaller than sigma_high ({sigma_high})")


def bandpass_kernel(height: int, width: int, sigma_low: float, sigma_high: float) -> np.ndarray:
    """Difference of two unit-peak Gaussians over distance to the centered DC bin.

    ``K = exp(-D^2 / 2 sigma_low^2) - exp(-D^2 / 2 sigma_high^2)``; zero at DC,
    and identically zero when the sigmas are equal. Sigmas are in frequency bins.
    """
    _check_sigmas(sigma_low, sigma_high)
    v = np.arange(height) - height // 2
    u = np.arange(width) - width // 2
    d2 = v[:, None] ** 2 + u[None, :] ** 2
    return np.exp(-d2 / (2 * sigma_low**2)) - np.exp(-d2 / (2 * sigma_high**2))


def rescale_unit(x: np.ndarray) -> np.ndarray:
    """Affine map of ``x`` onto ``[0, 1]``; a constant input maps to zeros."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x, dtype=float)
    return (x - lo) / (hi - lo)


def band_pass_image(img, sigma_low: float = 40.0, sigma_high: float = 10.0,
                    normalize: bool = True) -> np.ndarray:
    """Band-pass filtered map (BI) of an image, applied per channel.

    FFT, shift DC to the center, multiply by :func:`bandpass_kernel`, shift
    back, inverse FFT and keep the real part. With ``normalize`` the whole
    result is affinely rescaled to ``[0, 1]``.
    """
    a = as_image(img)
    kernel = bandpass_kernel(a.shape[0], a.shape[1], sigma_low, sigma_high)
    channels = [a] if a.ndim == 2 else [a[:, :, c] for c in range(a.shape[2])]
    out = []
    for ch in channels:
        spec = fft_spectrum(ch)
        filtered = FrequencySpectrum(spec.values * kernel, centered=True)
        out.append(inverse_spectrum(filtered).real)
    bi = out[0] if a.ndim == 2 else np.stack(out, axis=2)
    return rescale_unit(bi) if normalize else bi


# --------------------------------------------------------------------------
# Resampling


def resize(img, size: tuple[int, int], method: str = "bilinear",
           box: tuple[float, float, float, float] | None = None) -> np.ndarray:
    """Resize to ``size = (height, width)``; ``box`` is an optional (x0, y0, x1, y1) source crop."""
    if method not in _PIL_FILTERS:
        raise ValueError(f"unknown interpolation {method!r}; choose from {INTERPOLATIONS}")
    a = as_image(img)
    h, w = size
    channels = [a] if a.ndim == 2 else [a[:, :, c] for c in range(a.shape[2])]
    out = []
    for ch in channels:
        pim = Image.fromarray(ch.astype(np.float32), mode="F")
        out.append(np.asarray(pim.resize((w, h), _PIL_FILTERS[method], box=box), dtype=float))
    res = out[0] if a.ndim == 2 else np.stack(out, axis=2)
    return np.clip(res, 0.0, 1.0)


@dataclass(frozen=True)
class ZoomParams:
    scale: float
    down_method: str
    up_method: str
    intermediate: tuple[int, int]


def draw_zoom_params(shape: tuple[int, ...], rng: np.random.Generator) -> ZoomParams:
    h, w = shape[0], shape[1]
    if min(h, w) < 8:
        raise ValueError(f"RandomZoomInOut needs at least 8x8 input, got {h}x{w}")
    lo, hi = ZOOM_RANGE
    scale = float(rng.uniform(lo, hi))
    down = INTERPOLATIONS[int(rng.integers(len(INTERPOLATIONS)))]
    up = INTERPOLATIONS[int(rng.integers(len(INTERPOLATIONS)))]

    def side(s: int) -> int:
        return int(min(max(round(scale * s), math.ceil(lo * s)), math.floor(hi * s)))

    return ZoomParams(scale, down, up, (side(h), side(w)))


def apply_zoom(img, params: ZoomParams, out_size: int = ENCODER_SIZE) -> np.ndarray:
    a = as_image(img)
    small = resize(a, params.intermediate, params.down_method)
    ih, iw = params.intermediate
    if ih != iw:
        side = max(ih, iw)
        pad = [((side - ih) // 2, side - ih - (side - ih) // 2),
               ((side - iw) // 2, side - iw - (side - iw) // 2)]
        if small.ndim == 3:
            pad.append((0, 0))
        small = np.pad(small, pad)
    return resize(small, (out_size, out_size), params.up_method)


def random_zoom_in_out(img, rng: np.random.Generator, out_size: int = ENCODER_SIZE) -> np.ndarray:
    """Simulate a lower-quality homologous capture.

    Shrinks by a factor drawn from ``[0.20, 0.75]`` with a random
    interpolation, then resizes to ``out_size`` square with an independently
    drawn interpolation. Non-square inputs are zero-padded to square after
    the shrink.
    """
    a = as_image(img)
    return apply_zoom(a, draw_zoom_params(a.shape, rng), out_size)


def patch_pixel_boxes(size: int = PATCH_INPUT_SIZE) -> dict[str, tuple[float, float, float, float]]:
    return {k: tuple(c * size for c in box) for k, box in PATCH_BOXES.items()}


def crop_face_patches(img, out_size: int = ENCODER_SIZE) -> dict[str, np.ndarray]:
    """Original plus face/eyes/nose/chin crops, each resized with area interpolation."""
    a = as_image(img)
    if a.shape[:2] != (PATCH_INPUT_SIZE, PATCH_INPUT_SIZE):
        raise ValueError(f"crop_face_patches needs a 256x256 input, got {a.shape[0]}x{a.shape[1]}")
    patches = {"original": resize(a, (out_size, out_size), "area")}
    for name, box in patch_pixel_boxes().items():
        patches[name] = resize(a, (out_size, out_size), "area", box=box)
    return patches


# --------------------------------------------------------------------------
# Label-space augmentation and TTA


def sample_mixup_lambda(alpha: float, rng: np.random.Generator, size=None):
    if alpha <= 0:
        raise ValueError("mixup alpha must be positive")
    return rng.beta(alpha, alpha, size=size)


def mixup(x1, y1, x2, y2, alpha: float, rng: np.random.Generator | None = None,
          lam: float | None = None):
    """Convex combination of two examples with ``lam ~ Beta(alpha, alpha)`` unless ``lam`` is given."""
    x1, x2 = np.asarray(x1, float), np.asarray(x2, float)
    y1, y2 = np.asarray(y1, float), np.asarray(y2, float)
    if x1.shape != x2.shape:
        raise ValueError(f"mixup inputs differ in shape: {x1.shape} vs {x2.shape}")
    if y1.shape != y2.shape:
        raise ValueError(f"mixup targets differ in shape: {y1.shape} vs {y2.shape}")
    if lam is None:
        if rng is None:
            raise ValueError("mixup needs an rng when lam is not given")
        lam = float(sample_mixup_lambda(alpha, rng))
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2


def label_smoothing(y, epsilon: float) -> np.ndarray:
    if not (0.0 <= epsilon < 1.0):
        raise ValueError("epsilon must be in [0, 1)")
    y = np.asarray(y, dtype=float)
    return (1 - epsilon) * y + epsilon / y.shape[-1]


def tta_flip_average(score_original, score_flipped, weights=(0.5, 0.5)):
    w0, w1 = float(weights[0]), float(weights[1])
    if w0 < 0 or w1 < 0:
        raise ValueError("TTA weights must be nonnegative")
    if w0 + w1 <= 0:
        raise ValueError("TTA weights must have a positive sum")
    return (w0 * np.asarray(score_original, float) + w1 * np.asarray(score_flipped, float)) / (w0 + w1)
