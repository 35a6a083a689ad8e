"""Core structural condition: block-mean colormap plane plus Canny edge plane.

Images on the numpy side of the package are float arrays shaped (H, W, C)
or (H, W), values in [0, 1]. Both condition planes live at the source
resolution; the colormap is piecewise constant over a grid x grid partition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class StructuralCondition:
    """Colormap plane (H, W, 3), binary edge plane (H, W), shared shape."""

    colormap: np.ndarray
    edges: np.ndarray
    source_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.source_shape
        if self.colormap.shape[:2] != (h, w) or self.edges.shape != (h, w):
            raise ShapeError("condition planes do not share source_shape")

    def as_planes(self) -> np.ndarray:
        """Stack to a (4, H, W) array: colormap channels then edges."""
        cm = np.moveaxis(self.colormap, -1, 0)
        return np.concatenate([cm, self.edges[None]], axis=0)


def _block_bounds(n: int, grid: int) -> np.ndarray:
    # Even partition; block sizes differ by at most one pixel.
    return (np.arange(grid + 1) * n) // grid


def extract_colormap(hq: np.ndarray, grid: int = 8) -> np.ndarray:
    """Replace each block of a grid x grid partition by its channel-wise mean.

    Equivalent to resizing to grid x grid by area averaging and upsampling
    back with nearest-neighbor interpolation.
    """
    hq = np.asarray(hq, dtype=np.float64)
    if hq.ndim == 2:
        hq = hq[..., None]
    h, w = hq.shape[:2]
    if grid < 1 or h < grid or w < grid:
        raise ParameterError(f"image {h}x{w} smaller than grid {grid}")
    rows = _block_bounds(h, grid)
    cols = _block_bounds(w, grid)
    out = np.empty_like(hq)
    for i in range(grid):
        for j in range(grid):
            block = hq[rows[i] : rows[i + 1], cols[j] : cols[j + 1]]
            vals = block.reshape(-1, block.shape[-1])
            # Anchor at the first element: a constant block maps to itself
            # exactly, which makes the projection idempotent bit-for-bit.
            mean = vals[0] + (vals - vals[0]).mean(axis=0)
            out[rows[i] : rows[i + 1], cols[j] : cols[j + 1]] = mean
    return out if out.shape[-1] > 1 else out[..., 0]


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    r, g, b = LUMA_WEIGHTS
    return r * img[..., 0] + g * img[..., 1] + b * img[..., 2]


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate (edge-clamp) padding."""
    if sigma <= 0:
        return np.asarray(img, dtype=np.float64).copy()
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    out = np.asarray(img, dtype=np.float64)
    for axis in (1, 0):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)


def _correlate2d_edge(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    padded = np.pad(img, ((kh // 2, kh // 2), (kw // 2, kw // 2)), mode="edge")
    out = np.zeros_like(img)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[i : i + img.shape[0], j : j + img.shape[1]]
    return out


def canny_edges(
    hq: np.ndarray,
    sigma: float = 1.4,
    low: float = 0.1,
    high: float = 0.2,
) -> np.ndarray:
    """Binary Canny edge map.

    Pipeline: luminance -> Gaussian smoothing (kernel radius ceil(3 sigma),
    replicate padding) -> Sobel gradients -> non-maximum suppression with
    4-direction angle quantization -> double threshold at (low, high)
    fractions of the max gradient magnitude -> 8-connected hysteresis
    linking of weak edges to strong ones.

    NMS tie-break: a pixel survives when its magnitude is >= the neighbor in
    the positive quantized direction and strictly > the neighbor in the
    negative direction, so a two-pixel plateau keeps exactly one pixel.
    Out-of-image neighbors count as zero.
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    if not (0.0 < low < high):
        raise ParameterError(f"need 0 < low < high, got ({low}, {high})")
    gray = gaussian_blur(luminance(hq), sigma)
    gx = _correlate2d_edge(gray, SOBEL_X)
    gy = _correlate2d_edge(gray, SOBEL_Y)
    mag = np.hypot(gx, gy)
    max_mag = mag.max()
    # Rounding residue on flat images is ~1e-16; relative thresholds would
    # otherwise promote it to edges.
    if max_mag <= 1e-12:
        return np.zeros_like(mag)

    # Quantize gradient direction into 4 bins and pick neighbor offsets.
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(mag.shape, dtype=np.int64)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3
    # (di, dj) of the positive-direction neighbor per bin; bin 1 covers the
    # 45-degree gradient pointing down-right in array coordinates.
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}

    def shifted(di: int, dj: int) -> np.ndarray:
        out = np.zeros_like(mag)
        src_i = slice(max(di, 0), mag.shape[0] + min(di, 0))
        src_j = slice(max(dj, 0), mag.shape[1] + min(dj, 0))
        dst_i = slice(max(-di, 0), mag.shape[0] + min(-di, 0))
        dst_j = slice(max(-dj, 0), mag.shape[1] + min(-dj, 0))
        out[dst_i, dst_j] = mag[src_i, src_j]
        return out

    nms = np.zeros_like(mag)
    for b, (di, dj) in offsets.items():
        pos = shifted(di, dj)
        neg = shifted(-di, -dj)
        keep = (bins == b) & (mag >= pos) & (mag > neg)
        nms[keep] = mag[keep]

    high_thr = high * max_mag
    low_thr = low * max_mag
    strong = nms >= high_thr
    weak = (nms >= low_thr) & ~strong
    labels, _ = ndimage.label(strong | weak, structure=np.ones((3, 3)))
    keep_labels = np.unique(labels[strong])
    keep_labels = keep_labels[keep_labels > 0]
    edges = np.isin(labels, keep_labels) & (strong | weak)
    return edges.astype(np.float64)


def build_condition(
    hq: np.ndarray,
    grid: int = 8,
    sigma: float = 1.4,
    low: float = 0.1,
    high: float = 0.2,
) -> StructuralCondition:
    """Deterministically extract the structural condition from an HQ image."""
    hq = np.asarray(hq, dtype=np.float64)
    cm = extract_colormap(hq, grid=grid)
    if cm.ndim == 2:
        cm = np.repeat(cm[..., None], 3, axis=-1)
    ed = canny_edges(hq, sigma=sigma, low=low, high=high)
    return StructuralCondition(
        colormap=cm, edges=ed, source_shape=(hq.shape[0], hq.shape[1])
    )


def encode_condition(adapter, cond: StructuralCondition, scale: float):
    """Run the adapter on one condition and scale its feature stack.

    Returns a list of feature tensors shaped to be added to the denoiser's
    encoder activations. scale = 0 yields exactly-zero features.
    """
    import torch

    if scale < 0:
        raise ParameterError(f"scale must be >= 0, got {scale}")
    planes = torch.from_numpy(cond.as_planes()[None]).to(
        next(adapter.parameters()).dtype
    )
    with torch.no_grad():
        feats = adapter(planes)
    return [scale * f for f in feats]
