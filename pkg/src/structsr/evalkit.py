"""Reference-based metrics and the conditional-vs-unconditional denoising probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .conditioning import gaussian_kernel1d
from .distill import to_chw
from .errors import ParameterError, ShapeError
from .models import Adapter, Denoiser
from .schedule import NoiseSchedule

PSNR_CAP_DB = 100.0
PROBE_TIMESTEPS = (500, 620, 740, 860, 980)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _ssim_window() -> np.ndarray:
    g = gaussian_kernel1d(SSIM_SIGMA)
    r = (len(g) - 1) // 2
    half = SSIM_WINDOW // 2
    g = g[r - half : r + half + 1]
    g = g / g.sum()
    return np.outer(g, g)


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", view, window)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with the canonical 11x11 Gaussian window.

    Multi-channel inputs are averaged over channels; windows are evaluated
    in valid mode (no padding).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ParameterError(
            f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    win = _ssim_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx = _windowed_mean(x, win)
        my = _windowed_mean(y, win)
        mxx = _windowed_mean(x * x, win)
        myy = _windowed_mean(y * y, win)
        mxy = _windowed_mean(x * y, win)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class ProbeResult:
    """Per-timestep denoised-prediction errors, conditional vs not."""

    timesteps: list[int]
    mse_conditional: list[float]
    mse_unconditional: list[float]
    num_images: int
    per_image_conditional: np.ndarray    # (T, N)
    per_image_unconditional: np.ndarray  # (T, N)

    def __post_init__(self):
        if not (
            len(self.timesteps)
            == len(self.mse_conditional)
            == len(self.mse_unconditional)
        ):
            raise ShapeError("probe vectors must have equal length")

    def rows(self):
        for i, t in enumerate(self.timesteps):
            yield {
                "t": t,
                "mse_conditional": self.mse_conditional[i],
                "mse_unconditional": self.mse_unconditional[i],
                "num_images": self.num_images,
            }


def denoise_probe(
    teacher: Denoiser,
    adapter: Adapter,
    images: np.ndarray,
    labels: np.ndarray,
    planes: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    timesteps=PROBE_TIMESTEPS,
    adapter_scale: float = 1.0,
    batch_size: int = 32,
):
    """Perturb ground-truth latents and score single-step denoised predictions.

    For each image and probe timestep, the HQ latent is noised, denoised in
    one step with and without the structural features, and the squared error
    against the ground truth is accumulated. Returns (ProbeResult, samples)
    where samples holds one example row of predictions for visualization.
    """
    imgs = to_chw(images)
    labs = torch.from_numpy(labels).to(torch.long)
    cond = torch.from_numpy(planes).to(imgs.dtype)
    n = imgs.shape[0]
    t_list = [int(t) for t in timesteps]
    per_c = np.zeros((len(t_list), n))
    per_u = np.zeros((len(t_list), n))
    sample_rows = {"gt": images[0], "cond": [], "uncond": [], "t": t_list}
    with torch.no_grad():
        for ti, t in enumerate(t_list):
            a_t, b_t = schedule.coeffs(t)
            for lo in range(0, n, batch_size):
                hi = min(lo + batch_size, n)
                x0 = imgs[lo:hi]
                eps = torch.from_numpy(
                    rng.standard_normal(tuple(x0.shape))
                ).to(x0.dtype)
                z_t = a_t * x0 + b_t * eps
                t_tensor = torch.full((hi - lo,), t, dtype=torch.long)
                feats = [adapter_scale * f for f in adapter(cond[lo:hi])]
                e_c = teacher(z_t, t_tensor, labs[lo:hi], feats)
                e_u = teacher(z_t, t_tensor, labs[lo:hi], None)
                x0_c = (z_t - b_t * e_c) / a_t
                x0_u = (z_t - b_t * e_u) / a_t
                per_c[ti, lo:hi] = (
                    (x0_c - x0).square().mean(dim=(1, 2, 3)).numpy()
                )
                per_u[ti, lo:hi] = (
                    (x0_u - x0).square().mean(dim=(1, 2, 3)).numpy()
                )
                if lo == 0:
                    to_img = lambda z: np.clip(
                        np.moveaxis(z[0].numpy(), 0, -1), 0.0, 1.0
                    )
                    sample_rows["cond"].append(to_img(x0_c))
                    sample_rows["uncond"].append(to_img(x0_u))
    result = ProbeResult(
        timesteps=t_list,
        mse_conditional=[float(m) for m in per_c.mean(axis=1)],
        mse_unconditional=[float(m) for m in per_u.mean(axis=1)],
        num_images=n,
        per_image_conditional=per_c,
        per_image_unconditional=per_u,
    )
    return result, sample_rows
