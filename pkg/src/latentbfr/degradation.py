"""Synthetic degradations: blur, downscale, additive Gaussian noise, block-DCT compression.

All functions are pure given their inputs and seeds. Images are (3, H, W) float arrays
in [0, 1]; clamping happens once, after compression.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import kernels
from .config import DegradationRanges

# standard JPEG base tables (ITU T.81, Annex K)
_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
_CHROMA_TABLE = np.full((8, 8), 99.0)
_CHROMA_TABLE[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]

# smallest quantizer step (0..255 units); keeps q=100 within 1/255 of lossless
MIN_STEP = 1.0 / 16.0

_RGB2YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


@dataclass
class DegradationParams:
    kernel: np.ndarray
    sigma: float
    s: int
    q: float
    noise_seed: int = 0

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
            raise ValueError(f"blur kernel must be 2-D with odd sides, got {k.shape}")
        if np.any(k < 0) or abs(k.sum() - 1.0) > 1e-6:
            raise ValueError("blur kernel must be non-negative and sum to 1")
        if self.sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if int(self.s) != self.s or self.s < 1:
            raise ValueError("downscale factor must be an integer >= 1")
        if not 1 <= self.q <= 100:
            raise ValueError("quality must lie in [1, 100]")
        self.kernel = k
        self.s = int(self.s)

    def to_json(self) -> dict:
        d = asdict(self)
        d["kernel_size"] = int(self.kernel.shape[0])
        d["kernel"] = self.kernel.round(8).tolist()
        return d


def gaussian_kernel(width: float, anisotropy: float = 1.0, angle: float = 0.0) -> np.ndarray:
    """Normalized Gaussian blur kernel; width 0 gives the delta kernel."""
    if width <= 0:
        return np.ones((1, 1))
    sx, sy = width, width * anisotropy
    radius = int(math.ceil(3.0 * max(sx, sy)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    return k / k.sum()


def sample_params(rng_seed: int, ranges: DegradationRanges) -> DegradationParams:
    """Draw every parameter uniformly from its interval; s and q are integers."""
    ranges.validate()
    rng = np.random.default_rng(rng_seed)
    width = rng.uniform(*ranges.kernel_width_range)
    if ranges.anisotropic:
        kernel = gaussian_kernel(width, rng.uniform(0.5, 1.0), rng.uniform(0.0, math.pi))
    else:
        kernel = gaussian_kernel(width)
    sigma = rng.uniform(*ranges.sigma_range)
    s = int(rng.integers(ranges.s_range[0], ranges.s_range[1] + 1))
    q = int(rng.integers(ranges.q_range[0], ranges.q_range[1] + 1))
    noise_seed = int(rng.integers(0, 2**62))
    return DegradationParams(kernel=kernel, sigma=float(sigma), s=s, q=q, noise_seed=noise_seed)


def quality_steps(q: float) -> np.ndarray:
    """Per-plane (Y, Cb, Cr) quantizer step tables for quality ``q`` (libjpeg scaling)."""
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    luma = np.maximum(_LUMA_TABLE * scale / 100.0, MIN_STEP)
    chroma = np.maximum(_CHROMA_TABLE * scale / 100.0, MIN_STEP)
    return np.stack([luma, chroma, chroma])


def compress(x: np.ndarray, q: float, backend: str | None = None) -> np.ndarray:
    """Lossy block-DCT compression at quality ``q``; no chroma subsampling, no clamping."""
    c, h, w = x.shape
    ycc = np.einsum("ij,jhw->ihw", _RGB2YCC, x * 255.0)
    ycc[0] -= 128.0
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        ycc = np.pad(ycc, ((0, 0), (0, ph), (0, pw)), mode="edge")
    rec = kernels.block_dct_quantize(ycc, quality_steps(q), backend=backend)[:, :h, :w]
    rec[0] += 128.0
    return np.einsum("ij,jhw->ihw", _YCC2RGB, rec) / 255.0


def blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    if kernel.shape == (1, 1):
        return x * kernel[0, 0]
    return np.stack([ndimage.correlate(ch, kernel[::-1, ::-1], mode="reflect") for ch in x])


def downsample(x: np.ndarray, s: int) -> np.ndarray:
    """s x s area average (reflect-padded to a multiple of s)."""
    if s == 1:
        return x
    c, h, w = x.shape
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    c, h, w = x.shape
    return x.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))


def apply(x: np.ndarray, p: DegradationParams, rng_seed: int | None = None) -> np.ndarray:
    """((x * k) down_s + n_sigma)_q, clamped to [0, 1]. Output is (3, ceil(H/s), ceil(W/s))."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {x.shape}")
    y = downsample(blur(x, p.kernel), p.s)
    if p.sigma > 0:
        rng = np.random.default_rng(p.noise_seed if rng_seed is None else rng_seed)
        y = y + rng.normal(0.0, p.sigma, size=y.shape)
    y = compress(y, p.q)
    return np.clip(y, 0.0, 1.0)


def upsample(x: np.ndarray, size: int) -> np.ndarray:
    """Bicubic resize of a (3, h, w) image to (3, size, size), clamped to [0, 1]."""
    if x.shape[1:] == (size, size):
        return x.copy()
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))[None]
    up = F.interpolate(t, size=(size, size), mode="bicubic", align_corners=False)
    return up[0].clamp(0.0, 1.0).numpy()


def make_pair(x: np.ndarray, seed: int, ranges: DegradationRanges,
              working_resolution: int) -> tuple[np.ndarray, np.ndarray, DegradationParams]:
    """Clean image plus its degraded version resized back to the working resolution."""
    p = sample_params(seed, ranges)
    xd = apply(x, p)
    return np.asarray(x, dtype=np.float64), upsample(xd, working_resolution), p


def make_pairs(images: np.ndarray, seeds, ranges: DegradationRanges, working_resolution: int):
    """Vectorised make_pair over a stack; returns (clean, degraded, params list) as float32."""
    clean, deg, params = [], [], []
    for img, seed in zip(images, seeds):
        c, d, p = make_pair(img, int(seed), ranges, working_resolution)
        clean.append(c)
        deg.append(d)
        params.append(p)
    return np.stack(clean).astype(np.float32), np.stack(deg).astype(np.float32), params
