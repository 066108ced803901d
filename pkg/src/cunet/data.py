"""Synthetic multi-modal datasets, degradation operators and patch extraction.

Images are float arrays of shape ``(H, W, C)`` on a nominal [0, 1] scale.
Randomness always comes from a ``numpy.random.Generator``; per-sample
generators are derived from ``(base_seed, index)`` through ``SeedSequence``
so a sample does not depend on how many others were generated before it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import correlate1d
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import polygon as draw_polygon

from .tensor import ContractError, get_dtype

GUIDED_SR = "guided-SR"
GUIDED_DENOISE = "guided-denoise"
MULTIFOCUS = "multifocus-fuse"
KINDS = (GUIDED_SR, GUIDED_DENOISE, MULTIFOCUS)

# ITU-R BT.601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SamplePair:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    task: str
    warning: Optional[str] = None

    def __post_init__(self):
        if not (self.x.shape[:2] == self.y.shape[:2] == self.z.shape[:2]):
            raise ContractError("x, y and z must share spatial size")
        if self.task not in KINDS:
            raise ContractError(f"unknown task tag {self.task!r}")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _as_image(img) -> Tuple[np.ndarray, bool]:
    img = np.asarray(img)
    if img.ndim == 2:
        return img[..., None], True
    if img.ndim != 3:
        raise ContractError(f"expected an (H, W, C) image, got shape {img.shape}")
    return img, False


# -- resampling ---------------------------------------------------------------

def cubic(t, a: float = -0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """Dense ``(n_out, n_in)`` bicubic resampling matrix.

    Half-pixel centers, clamped edges; when shrinking, the kernel is
    stretched by ``1/scale`` to low-pass before decimation.
    """
    ks = min(scale, 1.0)
    width = 4.0 / ks
    u = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2).astype(int)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = ks * cubic(ks * (u[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    M = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(M, (rows, np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return M


def bicubic_resize(img, scale) -> np.ndarray:
    """Resize by a positive (rational) ``scale`` with separable cubic convolution (a = -0.5)."""
    scale = Fraction(scale).limit_denominator(10_000) if not isinstance(scale, Fraction) else scale
    if scale <= 0:
        raise ContractError("scale must be positive")
    img, squeeze = _as_image(img)
    h, w = img.shape[:2]
    oh, ow = round(h * scale), round(w * scale)
    if oh < 1 or ow < 1:
        raise ContractError(f"output size {oh}x{ow} is empty")
    if scale == 1:
        return (img[..., 0] if squeeze else img).copy()
    s = float(scale)
    out = np.tensordot(resample_matrix(h, oh, s), img, axes=(1, 0))
    out = np.tensordot(resample_matrix(w, ow, s), out, axes=(1, 1)).transpose(1, 0, 2)
    out = out.astype(img.dtype, copy=False)
    return out[..., 0] if squeeze else out


def degrade_sr(hr, factor: int = 4) -> np.ndarray:
    """Bicubic downsample by ``factor`` then bicubic upsample back to the input size."""
    img, _ = _as_image(hr)
    if factor < 2:
        raise ContractError("factor must be >= 2")
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ContractError(f"{h}x{w} is not divisible by factor {factor}")
    low = bicubic_resize(hr, Fraction(1, factor))
    return bicubic_resize(low, factor)


def add_gaussian_noise(img, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise with standard deviation ``sigma/255``; no clipping."""
    if sigma < 0:
        raise ContractError("sigma must be nonnegative")
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    noise = rng.standard_normal(img.shape) * (sigma / 255.0)
    return (img + noise).astype(img.dtype, copy=False)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(img, sigma_b: float, radius: int) -> np.ndarray:
    """Separable normalized Gaussian blur truncated at ``radius``, edges clamped."""
    if sigma_b <= 0 or radius < 1:
        raise ContractError("sigma_b must be > 0 and radius >= 1")
    img = np.asarray(img)
    k = gaussian_kernel(sigma_b, radius)
    out = correlate1d(img.astype(np.float64), k, axis=0, mode="nearest")
    out = correlate1d(out, k, axis=1, mode="nearest")
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64, copy=False)


def to_luminance(rgb) -> np.ndarray:
    """BT.601 luma of an ``(H, W, 3)`` image, as ``(H, W, 1)``."""
    rgb = np.asarray(rgb)
    if rgb.shape[-1] == 1:
        return rgb
    if rgb.shape[-1] != 3:
        raise ContractError(f"expected 3 channels, got {rgb.shape[-1]}")
    return (rgb @ LUMA.astype(rgb.dtype))[..., None]


# -- multi-focus --------------------------------------------------------------

def make_multifocus_pair(img, mask=None, sigma_b: float = 2.0, rng=None, radius: Optional[int] = None) -> SamplePair:
    """Near/far-focus pair from an all-in-focus image.

    ``x`` is blurred where ``mask == 1``, ``y`` where ``mask == 0``; the two
    are blended through the mask blurred by the same kernel.  ``mask=None``
    draws a random foreground shape from ``rng``.
    """
    img, _ = _as_image(img)
    if radius is None:
        radius = max(1, int(math.ceil(3 * sigma_b)))
    if mask is None:
        if rng is None:
            raise ContractError("either a mask or an rng is required")
        mask = random_foreground_mask(rng, img.shape[:2])
    mask, _ = _as_image(mask)
    if mask.shape[:2] != img.shape[:2]:
        raise ContractError("mask and image differ in spatial size")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask must be binary")
    warning = None
    if mask.min() == mask.max():
        warning = "degenerate-mask"
        warnings.warn("multi-focus mask is all zeros or all ones", stacklevel=2)
    blurred = gaussian_blur(img, sigma_b, radius)
    mb = gaussian_blur(mask.astype(np.float64), sigma_b, radius).astype(img.dtype)
    x = (1 - mb) * img + mb * blurred
    y = mb * img + (1 - mb) * blurred
    return SamplePair(x, y, img.copy(), MULTIFOCUS, warning)


# -- patches ------------------------------------------------------------------

def patch_offsets(h: int, w: int, size: int, stride: int) -> List[Tuple[int, int]]:
    if size > h or size > w:
        raise ContractError(f"patch size {size} exceeds image size {h}x{w}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    return [(i, j) for i in range(0, h - size + 1, stride) for j in range(0, w - size + 1, stride)]


def extract_patches(pair: SamplePair, size: int = 64, stride: Optional[int] = None) -> List[SamplePair]:
    """Aligned crops of ``x``, ``y`` and ``z`` in row-major offset order."""
    stride = size if stride is None else stride
    h, w = pair.z.shape[:2]
    out = []
    for i, j in patch_offsets(h, w, size, stride):
        sl = (slice(i, i + size), slice(j, j + size))
        out.append(SamplePair(pair.x[sl].copy(), pair.y[sl].copy(), pair.z[sl].copy(), pair.task, pair.warning))
    return out


# -- synthetic scenes ---------------------------------------------------------

def _random_shape(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    if rng.random() < 0.5:
        r, c = rng.uniform(0, size, 2)
        rr, cc = rng.uniform(size / 10, size / 3, 2)
        return draw_ellipse(r, c, rr, cc, shape=(size, size), rotation=rng.uniform(0, np.pi))
    n = rng.integers(3, 7)
    center = rng.uniform(0, size, 2)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(size / 8, size / 2.5, n)
    return draw_polygon(center[0] + rad * np.sin(ang), center[1] + rad * np.cos(ang), shape=(size, size))


def label_map(rng: np.random.Generator, size: int, n_shapes: int) -> np.ndarray:
    """Painter's-algorithm overlap of random ellipses and star polygons; 0 is background."""
    labels = np.zeros((size, size), dtype=int)
    for i in range(1, n_shapes + 1):
        labels[_random_shape(rng, size)] = i
    return labels


def random_foreground_mask(rng: np.random.Generator, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=np.float64)
    for _ in range(2):
        mask[_random_shape(rng, shape[0])] = 1.0
    return mask


def _distinct_levels(rng: np.random.Generator, n: int, lo: float = 0.15, hi: float = 0.85) -> np.ndarray:
    # evenly spaced then shuffled: adjacent regions never share a level
    return lo + (hi - lo) * rng.permutation(n) / max(n - 1, 1)


def _stripes(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phi = rng.uniform(0, np.pi)
    period = rng.uniform(3, 8)
    return amplitude * np.sign(np.sin(2 * np.pi * (xx * np.cos(phi) + yy * np.sin(phi)) / period))


def _rgb_with_luma(rng: np.random.Generator, luma: np.ndarray) -> np.ndarray:
    """Colors whose BT.601 luma equals ``luma`` exactly (up to rounding)."""
    chroma = rng.uniform(-0.1, 0.1, luma.shape + (3,))
    chroma -= (chroma @ LUMA)[..., None]
    return luma[..., None] + chroma


def _guided_scene(rng: np.random.Generator, size: int):
    n = int(rng.integers(3, 8))
    labels = label_map(rng, size, n)
    depth = rng.uniform(0.1, 0.9, n + 1)[labels]
    intensity = _distinct_levels(rng, n + 1)[labels]
    # texture that lives only in the guidance
    region = np.zeros((size, size), dtype=bool)
    region[_random_shape(rng, size)] = True
    intensity = intensity + np.where(region, _stripes(rng, size, 0.08), 0.0)
    rgb = _rgb_with_luma(rng, intensity)
    return labels, depth, rgb


def synth_sample(kind: str, rng: np.random.Generator, size: int = 64, sr_factor: int = 4, noise_sigma: float = 25.0) -> SamplePair:
    dtype = get_dtype()
    if kind == GUIDED_SR:
        _, depth, rgb = _guided_scene(rng, size)
        z = depth[..., None]
        y = to_luminance(rgb)
        x = degrade_sr(z, sr_factor)
        return SamplePair(x.astype(dtype), y.astype(dtype), z.astype(dtype), kind)
    if kind == GUIDED_DENOISE:
        labels, _, rgb = _guided_scene(rng, size)
        shared = _stripes(rng, size, 0.05)
        z = (rng.uniform(0.2, 0.8, labels.max() + 1)[labels] + shared)[..., None]
        y = to_luminance(rgb) + shared[..., None]
        x = add_gaussian_noise(z, noise_sigma, rng)
        return SamplePair(x.astype(dtype), y.astype(dtype), z.astype(dtype), kind)
    if kind == MULTIFOCUS:
        n = int(rng.integers(3, 8))
        labels = label_map(rng, size, n)
        img = _distinct_levels(rng, n + 1)[labels]
        for lab in range(n + 1):
            img = img + np.where(labels == lab, _stripes(rng, size, 0.1), 0.0)
        pair = make_multifocus_pair(img[..., None], None, sigma_b=2.0, rng=rng)
        return SamplePair(pair.x.astype(dtype), pair.y.astype(dtype), pair.z.astype(dtype), kind, pair.warning)
    raise ContractError(f"unknown dataset kind {kind!r}")


def synth_guided_dataset(kind: str, count: int, seed: int = 0, size: int = 64, **kw) -> List[SamplePair]:
    """``count`` deterministic synthetic pairs; sample ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ContractError("count must be >= 1")
    return [synth_sample(kind, sample_rng(seed, i), size, **kw) for i in range(count)]


def split(pairs: Sequence[SamplePair], n_val: int):
    """Hold out the last ``n_val`` pairs."""
    return list(pairs[: len(pairs) - n_val]), list(pairs[len(pairs) - n_val :])
