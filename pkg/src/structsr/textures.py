"""Procedural HQ texture families used as the toy training corpus.

Every generator takes an RNG and a side length and returns an (S, S, 3)
float image in [0, 1]. Families randomize global color and geometry so that
an unconditional prior cannot pin down a specific image.
"""

from __future__ import annotations

import numpy as np

from .conditioning import gaussian_blur
from .errors import ParameterError

FAMILIES = ("gradient", "checker", "blobs", "bandnoise", "shapes")


def _rand_color(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=3)


def _coords(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ys / (size - 1), xs / (size - 1)


def gradient_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    ys, xs = _coords(size)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xs + np.sin(angle) * ys
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    c0, c1 = _rand_color(rng), _rand_color(rng)
    return ramp[..., None] * c1 + (1 - ramp[..., None]) * c0


def checker_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    period = int(rng.integers(4, 17))
    oy, ox = int(rng.integers(0, period)), int(rng.integers(0, period))
    ys, xs = np.mgrid[0:size, 0:size]
    mask = (((ys + oy) // period + (xs + ox) // period) % 2).astype(np.float64)
    c0, c1 = _rand_color(rng), _rand_color(rng)
    return mask[..., None] * c1 + (1 - mask[..., None]) * c0


def blobs_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.ones((size, size, 3)) * _rand_color(rng)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(3, 9))):
        cy, cx = rng.uniform(0, size, size=2)
        width = rng.uniform(size / 16, size / 4)
        bump = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * width**2))
        img += bump[..., None] * (_rand_color(rng) - img)
    return np.clip(img, 0.0, 1.0)


def bandnoise_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    smooth = gaussian_blur(noise, rng.uniform(1.0, 4.0))
    lo, hi = smooth.min(), smooth.max()
    ramp = (smooth - lo) / max(hi - lo, 1e-9)
    c0, c1 = _rand_color(rng), _rand_color(rng)
    return ramp[..., None] * c1 + (1 - ramp[..., None]) * c0


def shapes_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.ones((size, size, 3)) * _rand_color(rng)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(2, 6))):
        color = _rand_color(rng)
        kind = rng.choice(["circle", "rect", "bar"])
        if kind == "circle":
            cy, cx = rng.uniform(size * 0.15, size * 0.85, size=2)
            r = rng.uniform(size / 12, size / 4)
            mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        elif kind == "rect":
            y0, x0 = rng.uniform(0, size * 0.7, size=2)
            h, w = rng.uniform(size / 8, size / 2, size=2)
            mask = (ys >= y0) & (ys < y0 + h) & (xs >= x0) & (xs < x0 + w)
        else:
            angle = rng.uniform(0, np.pi)
            offset = rng.uniform(0.2, 0.8) * size
            thickness = rng.uniform(1.5, size / 12)
            dist = np.abs(
                np.cos(angle) * (xs - offset) + np.sin(angle) * (ys - offset)
            )
            mask = dist <= thickness
        img[mask] = color
    return img


_GENERATORS = {
    "gradient": gradient_texture,
    "checker": checker_texture,
    "blobs": blobs_texture,
    "bandnoise": bandnoise_texture,
    "shapes": shapes_texture,
}


def make_texture(family: str, rng: np.random.Generator, size: int) -> np.ndarray:
    if family not in _GENERATORS:
        raise ParameterError(f"unknown texture family {family!r}")
    if size < 8:
        raise ParameterError(f"size must be >= 8, got {size}")
    return np.clip(_GENERATORS[family](rng, size), 0.0, 1.0)
