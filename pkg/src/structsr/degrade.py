"""Stochastic degradation chain: blur -> downsample -> noise -> block-DCT compression.

Each degraded image carries a recipe of the sampled parameters, so any pair
can be regenerated exactly from (hq, recipe). The compression stage mimics
JPEG with an 8x8 block DCT and the standard luminance quantization table;
quality >= 100 bypasses it entirely so an identity configuration is a
literal no-op.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .conditioning import gaussian_blur
from .errors import ParameterError

RESAMPLE_FILTERS = ("nearest", "bilinear", "area")

# Standard JPEG luminance quantization table, applied to every channel.
JPEG_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class DegradationConfig:
    """Sampling ranges for the degradation chain."""

    scale: int = 4
    blur_sigma: tuple[float, float] = (0.2, 3.0)
    filters: tuple[str, ...] = RESAMPLE_FILTERS
    noise_std: tuple[float, float] = (0.0, 0.1)
    jpeg_quality: tuple[int, int] = (30, 95)
    second_pass: bool = False

    def __post_init__(self):
        for f in self.filters:
            if f not in RESAMPLE_FILTERS:
                raise ParameterError(f"unknown resample filter {f!r}")
        if self.scale < 1:
            raise ParameterError(f"scale must be >= 1, got {self.scale}")


@dataclass(frozen=True)
class Recipe:
    """Recorded degradation parameters; fully determines lq given hq."""

    scale: int
    blur_sigma: float
    filter: str
    noise_std: float
    noise_seed: int
    jpeg_quality: int
    blur_sigma2: float = 0.0
    noise_std2: float = 0.0
    noise_seed2: int = 0
    jpeg_quality2: int = 100

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Recipe":
        return cls(**d)


@dataclass(frozen=True)
class ImagePair:
    """A degraded/clean training pair with provenance."""

    lq: np.ndarray
    hq: np.ndarray
    seed: int
    recipe: Recipe


def _downsample(img: np.ndarray, scale: int, method: str) -> np.ndarray:
    if scale == 1 and method == "area":
        return img.copy()
    h, w = img.shape[:2]
    if method == "nearest":
        off = scale // 2
        return img[off::scale, off::scale].copy()
    if method == "area":
        blocks = img.reshape(h // scale, scale, w // scale, scale, -1)
        out = blocks.mean(axis=(1, 3))
        return out if img.ndim == 3 else out[..., 0]
    # "bilinear": average the central 2x2 samples of each block, which is
    # what a bilinear resampler evaluates at the block-center coordinates.
    if scale == 1:
        return img.copy()
    lo = scale // 2 - 1
    blocks = img.reshape(h // scale, scale, w // scale, scale, -1)
    out = blocks[:, lo : lo + 2, :, lo : lo + 2].mean(axis=(1, 3))
    return out if img.ndim == 3 else out[..., 0]


def _block_dct_compress(img: np.ndarray, quality: int) -> np.ndarray:
    if quality >= 100:
        return img
    if quality < 1:
        raise ParameterError(f"quality must be >= 1, got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    qtab = np.clip(np.floor((JPEG_QTABLE * s + 50.0) / 100.0), 1.0, 255.0)
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    chans = img[..., None] if img.ndim == 2 else img
    chans = np.pad(chans, ((0, ph), (0, pw), (0, 0)), mode="edge")
    out = np.empty_like(chans)
    hh, ww = chans.shape[:2]
    for c in range(chans.shape[2]):
        v = chans[:, :, c] * 255.0 - 128.0
        blocks = v.reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
        coeff = dctn(blocks, axes=(2, 3), norm="ortho")
        coeff = np.round(coeff / qtab) * qtab
        rec = idctn(coeff, axes=(2, 3), norm="ortho")
        v = rec.transpose(0, 2, 1, 3).reshape(hh, ww)
        out[:, :, c] = (v + 128.0) / 255.0
    out = out[:h, :w]
    return out if img.ndim == 3 else out[..., 0]


def replay(hq: np.ndarray, recipe: Recipe) -> np.ndarray:
    """Re-apply a recorded recipe; replay(hq, pair.recipe) == pair.lq."""
    hq = np.asarray(hq, dtype=np.float64)
    h, w = hq.shape[:2]
    if h % recipe.scale != 0 or w % recipe.scale != 0:
        raise ParameterError(
            f"dimensions {h}x{w} not divisible by scale {recipe.scale}"
        )
    img = gaussian_blur(hq, recipe.blur_sigma) if recipe.blur_sigma > 0 else hq
    img = _downsample(img, recipe.scale, recipe.filter)
    if recipe.noise_std > 0:
        noise_rng = np.random.Generator(np.random.PCG64(recipe.noise_seed))
        img = img + recipe.noise_std * noise_rng.standard_normal(img.shape)
    img = _block_dct_compress(img, recipe.jpeg_quality)
    if recipe.blur_sigma2 > 0:
        img = gaussian_blur(img, recipe.blur_sigma2)
    if recipe.noise_std2 > 0:
        noise_rng = np.random.Generator(np.random.PCG64(recipe.noise_seed2))
        img = img + recipe.noise_std2 * noise_rng.standard_normal(img.shape)
    img = _block_dct_compress(img, recipe.jpeg_quality2)
    return np.clip(img, 0.0, 1.0)


def degrade(
    hq: np.ndarray,
    scale: int,
    config: DegradationConfig,
    rng: np.random.Generator,
    seed: int = 0,
) -> ImagePair:
    """Sample a degradation recipe and apply it to hq."""
    hq = np.asarray(hq, dtype=np.float64)
    h, w = hq.shape[:2]
    if h % scale != 0 or w % scale != 0:
        raise ParameterError(f"dimensions {h}x{w} not divisible by scale {scale}")
    recipe = Recipe(
        scale=scale,
        blur_sigma=float(rng.uniform(*config.blur_sigma)),
        filter=str(rng.choice(list(config.filters))),
        noise_std=float(rng.uniform(*config.noise_std)),
        noise_seed=int(rng.integers(0, 2**63 - 1)),
        jpeg_quality=int(rng.integers(config.jpeg_quality[0], config.jpeg_quality[1] + 1)),
        blur_sigma2=float(rng.uniform(*config.blur_sigma)) if config.second_pass else 0.0,
        noise_std2=float(rng.uniform(*config.noise_std)) if config.second_pass else 0.0,
        noise_seed2=int(rng.integers(0, 2**63 - 1)) if config.second_pass else 0,
        jpeg_quality2=int(rng.integers(config.jpeg_quality[0], config.jpeg_quality[1] + 1))
        if config.second_pass
        else 100,
    )
    lq = replay(hq, recipe)
    return ImagePair(lq=lq, hq=hq, seed=seed, recipe=recipe)


def degrade_from_seed(
    hq: np.ndarray, scale: int, config: DegradationConfig, seed: int
) -> ImagePair:
    """Deterministic wrapper: one pair per (hq, seed)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return degrade(hq, scale, config, rng, seed=seed)
