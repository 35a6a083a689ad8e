"""Variance-preserving forward-diffusion coefficients and regularization weighting.

The discrete schedule stores, for integer timesteps t in [1, num_steps], the
signal coefficient a_t and noise coefficient b_t of the perturbation
z_t = a_t * z_0 + b_t * eps, with a_t^2 + b_t^2 = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalDomainError, ParameterError, ShapeError

# Regularization timesteps are drawn from [20, 980] on the canonical
# 1000-step schedule; other lengths scale the bounds proportionally.
REG_T_LO = 20
REG_T_HI = 980
CANONICAL_STEPS = 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-timestep coefficients; safe to share across workers.

    Arrays are indexed by t - 1 for t in [1, num_steps].
    """

    num_steps: int
    a: np.ndarray
    b: np.ndarray
    weight: np.ndarray
    weight_mode: str
    beta_start: float
    beta_end: float

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise ParameterError(f"timestep must be integer, got dtype {t.dtype}")
        if np.any(t < 1) or np.any(t > self.num_steps):
            raise ParameterError(
                f"timestep {t} outside [1, {self.num_steps}]"
            )
        return t

    def coeffs(self, t):
        """Return (a_t, b_t); scalar t gives floats, array t gives arrays."""
        t = self._check_t(t)
        a = self.a[t - 1]
        b = self.b[t - 1]
        if t.ndim == 0:
            return float(a), float(b)
        return a, b

    def perturb(self, z0, t, eps):
        """Forward-perturb z0 at timestep t: a_t * z0 + b_t * eps.

        Works on numpy arrays and torch tensors alike (scalar t only).
        """
        if getattr(z0, "shape", None) != getattr(eps, "shape", None):
            raise ShapeError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
        a, b = self.coeffs(int(t))
        return a * z0 + b * eps

    def predict_x0(self, zt, t, eps_pred):
        """Single-step denoised prediction (zt - b_t * eps_pred) / a_t."""
        if getattr(zt, "shape", None) != getattr(eps_pred, "shape", None):
            raise ShapeError(
                f"zt shape {zt.shape} != eps_pred shape {eps_pred.shape}"
            )
        a, b = self.coeffs(int(t))
        if a < 1e-8:
            raise NumericalDomainError(f"a_t = {a} too small at t = {t}")
        return (zt - b * eps_pred) / a

    def reg_t_bounds(self) -> tuple[int, int]:
        """Inclusive timestep bounds used when sampling for regularization."""
        if self.num_steps == CANONICAL_STEPS:
            return REG_T_LO, REG_T_HI
        lo = max(1, round(REG_T_LO * self.num_steps / CANONICAL_STEPS))
        hi = min(self.num_steps, round(REG_T_HI * self.num_steps / CANONICAL_STEPS))
        return lo, hi

    def sample_reg_timestep(self, rng: np.random.Generator) -> int:
        """Uniform integer timestep from the regularization range."""
        lo, hi = self.reg_t_bounds()
        return int(rng.integers(lo, hi + 1))

    def reg_weight(self, t, numel: int) -> float:
        """Per-timestep weight w(t) applied to the regularization gradient.

        "inv_sigma" mode returns 1 / (numel * b_t), which normalizes the
        gradient magnitude across timesteps; "constant" mode returns 1.
        """
        t = int(t)
        self._check_t(t)
        if self.weight_mode == "constant":
            return 1.0
        return float(self.weight[t - 1]) / numel

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "weight_mode": self.weight_mode,
        }


def make_linear_schedule(
    num_steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    weight_mode: str = "inv_sigma",
) -> NoiseSchedule:
    """Build the linear-beta variance-preserving schedule.

    a_t = sqrt(prod_{s<=t} (1 - beta_s)), b_t = sqrt(1 - a_t^2).
    """
    if num_steps < 2:
        raise ParameterError(f"num_steps must be >= 2, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if weight_mode not in ("inv_sigma", "constant"):
        raise ParameterError(f"unknown weight_mode {weight_mode!r}")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    abar = np.cumprod(1.0 - betas)
    a = np.sqrt(abar)
    b = np.sqrt(1.0 - abar)
    if weight_mode == "constant":
        weight = np.ones(num_steps)
    else:
        weight = 1.0 / np.maximum(b, 1e-12)
    return NoiseSchedule(
        num_steps=num_steps,
        a=a,
        b=b,
        weight=weight,
        weight_mode=weight_mode,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def schedule_from_dict(meta: dict) -> NoiseSchedule:
    return make_linear_schedule(
        num_steps=meta["num_steps"],
        beta_start=meta["beta_start"],
        beta_end=meta["beta_end"],
        weight_mode=meta["weight_mode"],
    )
